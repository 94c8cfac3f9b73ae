"""Numerical laboratory for frequency functions of (2,q)-growth minimizers."""
from .grid import CutoffSpec, Grid, ScalarField, gradient, make_grid, read_field, sample_field, write_field
from .lagrangian import CoefficientSpec, Lagrangian, check_growth_conditions, validate_exponents
from .solve import BoundaryDatum, ConvergenceError, SolveOptions, el_residual, minimize
from .frequency import components, corrected_frequency_scan, frequency_N
from .whitney import decompose, residual_set, verify_decomposition
from .critical import box_dimension, detect_critical, zero_set_volume

__version__ = "0.1.0"

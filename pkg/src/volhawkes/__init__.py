"""Tick-by-tick Hawkes model of the implied volatility surface."""
from .errors import (
    ConfigError,
    DegeneracyError,
    DomainError,
    InstabilityError,
    InsufficientDataError,
    LimitNotConvergedWarning,
    NumericalError,
    StabilityWarning,
    StrategyError,
    StructuralError,
    SupercriticalWarning,
    UnsupportedKernelError,
    VolHawkesError,
)
from .kernels import (
    Exponential,
    KernelMatrix,
    PowerLaw,
    SemiSeparableSpec,
    SeparableSpec,
    ZERO,
    assemble_semi_separable,
    assemble_separable,
    criticality_norm,
    factor_shapes,
    separable_eigenpair,
    sign_expand,
    spectral_radius,
)
from .hawkes import (
    ComponentIndex,
    EventLog,
    branching_matrix,
    compensator,
    component_grid,
    expected_intensity_path,
    intensity_at,
    intensity_path,
    psi_integral,
    simulate_branching,
    simulate_thinning,
    stationary_intensity,
)
from .surface import (
    NoArbBetas,
    SurfaceGrid,
    SurfaceModel,
    build_arbitrage_free,
    extend_calendar,
    extend_wing,
    g_d_diagnostics,
    impose_10d_convexity,
    impose_atm_convexity,
    impose_risk_reversal,
    impose_smile,
    is_arbitrage_free,
    skew_control_check,
    slice_shape,
    surface_from_events,
)
from .scaling import (
    RoughFactorParams,
    general_limit_matrices,
    hurst_estimate,
    rescale,
    simulate_factor_limit,
    simulate_general_vtilde,
    simulate_rough_heston,
)
from .backtest import (
    ConstantSpread,
    FillModel,
    InventoryLinear,
    cross_impact_price,
    fill_intensity,
    market_impact,
    run_backtest,
)

__version__ = "0.1.0"

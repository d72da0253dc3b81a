"""Measure-valued HJM models for energy futures.

Forward curves are atomic measures on ``[0, T]`` (time to maturity); the
affine model is driven by a branching rate ``alpha`` and the
Black-Scholes type model by a covariance kernel ``beta`` and a jump kernel
``pi``.
"""
from .calibrate import CalibrationConfig, MarketDataset, calibrate, l1_loss, load_market_csv, price_vector
from .contracts import FutureContract, OptionSpec, cumulative_delivery, future_price, future_price_discrete
from .errors import (
    DampingTooLarge,
    DataError,
    DivergenceError,
    DomainError,
    MVHJMError,
    NumericalError,
    RiccatiBlowup,
    ValidationError,
)
from .measures import DiscreteMeasure, TestFunction, load_forward_curve, pair, shift_absorb, spot_proxy
from .models import (
    BSKernels,
    DiscreteHJMConfig,
    MLPAlpha,
    NeuralAlpha,
    PiecewiseLinearAlpha,
    build_beta_matrix,
    check_admissibility,
)
from .moments import control_variate_price, dual_apply, particle_moment_bs, second_moment_affine
from .riccati import FourierConfig, fourier_call_price, fourier_put_price, laplace_transform, riccati_psi
from .simulate import (
    PathGrid,
    discrete_hjm_path,
    feller_branching,
    martingale_drift_test,
    simulate_affine_paths,
    simulate_bs_paths,
)

__version__ = "0.1.0"

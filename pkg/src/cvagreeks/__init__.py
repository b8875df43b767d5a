"""Monte Carlo CVA with adjoint first and second order credit and rate sensitivities."""
from .curves import HazardCurve, QuoteSet, ZeroCurve
from .credit import DefaultSample, GaussianCopula2
from .hullwhite import HullWhiteModel, SwapSpec
from .payoff import CvaPayoff, IndicatorPayoff
from .greeks import EstimatorRun, Setup, run_estimator

__all__ = [
    "ZeroCurve", "HazardCurve", "QuoteSet", "DefaultSample", "GaussianCopula2",
    "HullWhiteModel", "SwapSpec", "CvaPayoff", "IndicatorPayoff", "EstimatorRun", "Setup",
    "run_estimator",
]
__version__ = "0.1.0"

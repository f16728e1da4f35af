"""crnsa - stochastic approximation with common random numbers."""

__version__ = "0.1.0"

from .distributions import Interval, MixtureFamily, ParamFamily
from .gradest import EstimatorConfig, bias_probe, estimate_h, variance_probe
from .optimize import GainSchedule, MdConfig, kw_run, md_run, rm_run
from .prng import ReplicationStreams, StreamKey, UniformStream, derive_stream
from .problems import get_problem
from .rates import RunSpec, rmse_curve, table1_suite

__all__ = [
    "Interval", "MixtureFamily", "ParamFamily",
    "EstimatorConfig", "bias_probe", "estimate_h", "variance_probe",
    "GainSchedule", "MdConfig", "kw_run", "md_run", "rm_run",
    "ReplicationStreams", "StreamKey", "UniformStream", "derive_stream",
    "get_problem", "RunSpec", "rmse_curve", "table1_suite",
]

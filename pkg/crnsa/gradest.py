"""Finite-difference derivative estimators and their bias/variance probes."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import FitError, ParameterError, UnsupportedFamilyError
from .prng import ReplicationStreams
from .sampling import CompositionMode
from .workers import DEFAULT_BLOCK_SIZE, map_blocks

logger = logging.getLogger(__name__)

DEFAULT_DELTA_GRID = tuple(2.0 ** -k for k in range(3, 11))
NOISE_FLOOR_SIGMAS = 3.0


class Scheme(Enum):
    SYMMETRIC = "symmetric"
    ONE_SIDED = "one_sided"


class Coupling(Enum):
    CRN = "crn"
    INDEPENDENT = "independent"


class Method(Enum):
    INVERSION = "inversion"
    REJECTION = "rejection"
    COMPOSITION = "composition"


SCHEME_CODES = {"sym": Scheme.SYMMETRIC, "one": Scheme.ONE_SIDED}
COUPLING_CODES = {"crn": Coupling.CRN, "ind": Coupling.INDEPENDENT}
METHOD_CODES = {
    "inv": (Method.INVERSION, CompositionMode.TWO_UNIFORM),
    "rej": (Method.REJECTION, CompositionMode.TWO_UNIFORM),
    "comp2": (Method.COMPOSITION, CompositionMode.TWO_UNIFORM),
    "compd": (Method.COMPOSITION, CompositionMode.DERIVED),
}


@dataclass(frozen=True)
class EstimatorConfig:
    """One of the finite-difference estimator variants."""

    scheme: Scheme = Scheme.SYMMETRIC
    coupling: Coupling = Coupling.CRN
    method: Method = Method.INVERSION
    mode: CompositionMode = CompositionMode.TWO_UNIFORM

    @classmethod
    def from_codes(cls, scheme: str = "sym", coupling: str = "crn", method: str = "inv") -> "EstimatorConfig":
        try:
            method_value, mode = METHOD_CODES[method]
            return cls(SCHEME_CODES[scheme], COUPLING_CODES[coupling], method_value, mode)
        except KeyError as e:
            raise ParameterError(f"unknown estimator code {e.args[0]!r}") from None

    @classmethod
    def for_problem(cls, problem, scheme: Scheme = Scheme.SYMMETRIC, coupling: Coupling = Coupling.CRN,
                    method: Method = Method.INVERSION,
                    mode: CompositionMode = CompositionMode.TWO_UNIFORM) -> "EstimatorConfig":
        config = cls(scheme, coupling, method, mode)
        config.validate_for(problem)
        return config

    @property
    def one_sided(self) -> bool:
        return self.scheme is Scheme.ONE_SIDED

    @property
    def codes(self) -> tuple:
        scheme = "sym" if self.scheme is Scheme.SYMMETRIC else "one"
        coupling = "crn" if self.coupling is Coupling.CRN else "ind"
        if self.method is Method.COMPOSITION:
            method = "compd" if self.mode is CompositionMode.DERIVED else "comp2"
        else:
            method = "inv" if self.method is Method.INVERSION else "rej"
        return scheme, coupling, method

    @property
    def label(self) -> str:
        return "/".join(self.codes)

    def validate_for(self, problem) -> None:
        if not problem.supports(self.method):
            raise UnsupportedFamilyError(f"problem {problem.name!r} does not support {self.method.value}")


@dataclass(frozen=True)
class EstimatorContract:
    """E[h] = J′ + O(δ^beta), Var[h] = O(δ^gamma)."""

    beta: int
    gamma: int
    bias_scale: float = 0.0
    variance_scale: float = 0.0

    def __post_init__(self):
        if self.beta not in (1, 2):
            raise ParameterError(f"bias exponent must be 1 or 2, got {self.beta}")
        if self.gamma not in (-2, -1, 0):
            raise ParameterError(f"variance exponent must be -2, -1 or 0, got {self.gamma}")


def contract_for(config: EstimatorConfig, problem, theta: Optional[float] = None) -> EstimatorContract:
    """Exponents the estimator is expected to satisfy on ``problem``."""
    beta = 1 if config.one_sided else 2
    if config.coupling is Coupling.INDEPENDENT:
        gamma = -2
    elif config.method is Method.INVERSION and problem.crn_inversion_bounded(theta):
        gamma = 0
    else:
        gamma = -1
    return EstimatorContract(beta, gamma)


def estimate_h(problem, theta, delta: float, config: EstimatorConfig,
               streams: ReplicationStreams) -> np.ndarray:
    """One finite-difference estimate per lane.

    Symmetric: [L(θ+δ) − L(θ−δ)] / 2δ. One-sided: [L(θ+δ) − L(θ)] / δ.
    CRN draws both measurements from the shared substream; independent
    sampling uses the first and second substreams.
    """
    if not delta > 0:
        raise ParameterError(f"δ must be positive, got {delta}")
    theta = np.asarray(theta, dtype=float)
    if config.one_sided:
        lo, hi, width = theta, theta + delta, delta
    else:
        lo, hi, width = theta - delta, theta + delta, 2.0 * delta
    if config.coupling is Coupling.CRN:
        loss_lo, loss_hi = problem.measure_pair(lo, hi, streams, config.method, config.mode)
    else:
        loss_hi = problem.measure(hi, streams.first, config.method, config.mode)
        loss_lo = problem.measure(lo, streams.second, config.method, config.mode)
    return (loss_hi - loss_lo) / width


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    r_squared: float


@dataclass
class ProbeResult:
    """Per-δ estimates and the log-log fit across the grid."""

    kind: str
    theta: float
    config: EstimatorConfig
    deltas: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    means: np.ndarray
    second_moments: np.ndarray
    reps: int
    fit: Optional[SlopeFit] = None
    below_noise_floor: bool = False

    @property
    def exponent(self) -> Optional[float]:
        return None if self.fit is None else self.fit.slope


def _ols(x: np.ndarray, y: np.ndarray) -> SlopeFit:
    if len(x) < 2:
        raise FitError("a slope needs at least two grid points")
    result = stats.linregress(x, y)
    return SlopeFit(float(result.slope), float(result.intercept), float(result.stderr),
                    float(result.rvalue ** 2))


def _validate_grid(deltas: Sequence[float]) -> np.ndarray:
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    if deltas.size == 0 or np.any(deltas <= 0):
        raise ParameterError("δ grid must contain positive values")
    return deltas


def sample_estimates(problem, theta: float, delta: float, config: EstimatorConfig, reps: int,
                     seed: int, block_size: int = DEFAULT_BLOCK_SIZE,
                     threads: Optional[int] = 1) -> np.ndarray:
    """``reps`` estimates of h at fixed (θ, δ), replication lanes 0..reps−1."""

    def run(block: np.ndarray) -> np.ndarray:
        streams = ReplicationStreams.derive(seed, block)
        return estimate_h(problem, np.full(len(block), theta), delta, config, streams)

    return np.concatenate(map_blocks(run, reps, block_size, threads))


def _moments(h: np.ndarray):
    n = len(h)
    mean = float(np.mean(h))
    centered = h - mean
    var = float(np.sum(centered ** 2) / (n - 1))
    m4 = float(np.mean(centered ** 4))
    var_stderr = float(np.sqrt(max(m4 - var ** 2, 0.0) / n))
    return mean, var, float(np.sqrt(var / n)), var_stderr, float(np.mean(h ** 2))


def bias_probe(problem, theta: float, deltas: Sequence[float] = DEFAULT_DELTA_GRID, reps: int = 10_000,
               seed: int = 0, config: Optional[EstimatorConfig] = None,
               block_size: int = 1 << 16, threads: Optional[int] = 1) -> ProbeResult:
    """Estimate E[h] − J′(θ) per δ and the bias exponent.

    The fit is skipped and ``below_noise_floor`` set when every |bias| is
    under three standard errors.
    """
    truth = problem.ground_truth
    if truth is None or truth.gradient is None:
        raise UnsupportedFamilyError(f"problem {problem.name!r} has no closed-form J′")
    config = config or EstimatorConfig()
    config.validate_for(problem)
    deltas = _validate_grid(deltas)
    target = float(truth.gradient(theta))
    rows = []
    for delta in deltas:
        h = sample_estimates(problem, theta, delta, config, reps, seed, block_size, threads)
        mean, var, mean_se, _, second = _moments(h)
        rows.append((mean - target, mean_se, mean, second))
        logger.debug(f"bias probe δ={delta:.4g}: bias={mean - target:.4g} ± {mean_se:.2g}")
    bias, se, means, second = (np.array(col) for col in zip(*rows))
    below = bool(np.all(np.abs(bias) < NOISE_FLOOR_SIGMAS * se))
    fit = None
    if not below:
        if np.any(bias == 0):
            raise FitError("zero bias at some δ; the exponent is undefined")
        fit = _ols(np.log(deltas), np.log(np.abs(bias)))
        logger.info(f"{problem.name} {config.label}: bias exponent {fit.slope:.3f} ± {fit.stderr:.3f}")
    else:
        logger.info(f"{problem.name} {config.label}: bias below noise floor at every δ")
    return ProbeResult("bias", theta, config, deltas, bias, se, means, second, reps, fit, below)


def variance_probe(problem, theta: float, deltas: Sequence[float] = DEFAULT_DELTA_GRID,
                   reps: int = 10_000, config: Optional[EstimatorConfig] = None, seed: int = 0,
                   block_size: int = DEFAULT_BLOCK_SIZE, threads: Optional[int] = 1) -> ProbeResult:
    """Sample variance of h per δ and the variance exponent γ̂ (slope of log Var on log δ)."""
    if reps < 1000:
        raise ParameterError(f"variance probes need at least 1000 replications, got {reps}")
    config = config or EstimatorConfig()
    config.validate_for(problem)
    deltas = _validate_grid(deltas)
    rows = []
    for delta in deltas:
        h = sample_estimates(problem, theta, delta, config, reps, seed, block_size, threads)
        mean, var, _, var_se, second = _moments(h)
        rows.append((var, var_se, mean, second))
        logger.debug(f"variance probe δ={delta:.4g}: Var[h]={var:.4g} ± {var_se:.2g}")
    var, se, means, second = (np.array(col) for col in zip(*rows))
    if np.any(var <= 0):
        raise FitError("zero sample variance; the exponent is undefined")
    fit = _ols(np.log(deltas), np.log(var))
    logger.info(f"{problem.name} {config.label}: variance exponent {fit.slope:.3f} ± {fit.stderr:.3f}")
    return ProbeResult("variance", theta, config, deltas, var, se, means, second, reps, fit)

"""Single-server FIFO queue driven by the Lindley recursion.

A replication of N customers consumes 2N uniforms from its stream:
u₁..u_N for interarrival times, then v₁..v_N for service times.
"""

import logging
import threading
from dataclasses import asdict, dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .cache import CalibrationCache
from .distributions import (
    Component,
    ExponentialComponent,
    ExponentialScale,
    Interval,
    ParamFamily,
    _quad,
    exponential_mixture,
)
from .errors import ConfigurationError, DomainError, ParameterError, UnsupportedFamilyError
from .gradest import Method
from .prng import ReplicationStreams, UniformStream
from .problems import GroundTruth, Problem
from .sampling import CompositionMode, pair_parameters
from .workers import DEFAULT_BLOCK_SIZE, map_blocks

logger = logging.getLogger(__name__)

STABILITY_GRID = 101
CALIBRATION_KIND = "queue-cost"


@dataclass(frozen=True)
class QueueModel:
    """Interarrival law G_a, θ-indexed service family G_s(θ, ·) and customer count N."""

    interarrival: Component
    service: ParamFamily
    customers: int = 100

    def __post_init__(self):
        if self.customers < 1:
            raise ParameterError(f"a queue needs at least one customer, got {self.customers}")
        if self.interarrival.support.lo < 0 or self.service.support.lo < 0:
            raise ConfigurationError("interarrival and service times must be nonnegative")

    @property
    def mean_interarrival(self) -> float:
        mean = getattr(self.interarrival, "mean", None)
        if mean is not None:
            return float(mean)
        return _quad(lambda t: 1.0 - self.interarrival.cdf(t), 0.0, np.inf)

    def mean_service(self, theta: float) -> float:
        return _quad(lambda t: 1.0 - self.service.cdf(theta, t), 0.0, np.inf)

    def utilization(self, theta: float) -> float:
        """ρ(θ) = E[S(θ)] / E[A]."""
        return self.mean_service(theta) / self.mean_interarrival

    def check_stability(self, domain: Interval, points: int = STABILITY_GRID) -> None:
        for theta in np.linspace(domain.lo, domain.hi, points):
            rho = self.utilization(theta)
            if not rho < 1.0:
                raise ConfigurationError(f"queue unstable at θ={theta:.4g}: utilization {rho:.4f} ≥ 1")


def lindley_recursion(interarrivals, services) -> np.ndarray:
    """System times T_i = max(T_{i−1} − A_i, 0) + S_i from an empty queue.

    Inputs are (N, ...) arrays; the result has the same shape.
    """
    interarrivals = np.asarray(interarrivals, dtype=float)
    services = np.asarray(services, dtype=float)
    if interarrivals.shape != services.shape:
        raise ParameterError("interarrival and service arrays must have the same shape")
    times = np.empty_like(services)
    previous = np.zeros(services.shape[1:])
    for i in range(services.shape[0]):
        previous = np.maximum(previous - interarrivals[i], 0.0) + services[i]
        times[i] = previous
    return times


def draw_queue_uniforms(stream: UniformStream, customers: int) -> np.ndarray:
    """(2N, R) uniforms: rows 0..N−1 drive arrivals, rows N..2N−1 drive services."""
    return stream.uniforms(2 * customers)


def queue_samples(model: QueueModel, theta, uniforms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Interarrival and service times by inversion from a uniform matrix."""
    n = model.customers
    if uniforms.shape[0] != 2 * n:
        raise ParameterError(f"expected {2 * n} uniform rows, got {uniforms.shape[0]}")
    interarrivals = model.interarrival.inv_cdf(uniforms[:n])
    theta = np.broadcast_to(np.asarray(theta, dtype=float), uniforms.shape[1:])
    services = model.service.inv_cdf(np.broadcast_to(theta, uniforms[n:].shape), uniforms[n:])
    return interarrivals, services


def lindley_avg_system_time(model: QueueModel, theta,
                            source: Union[UniformStream, np.ndarray]) -> np.ndarray:
    """(1/N) Σ T_i per lane; ``source`` is a stream or a pre-drawn uniform matrix."""
    if isinstance(source, UniformStream):
        uniforms = draw_queue_uniforms(source, model.customers)
    else:
        uniforms = np.asarray(source, dtype=float)
    interarrivals, services = queue_samples(model, theta, uniforms)
    return lindley_recursion(interarrivals, services).mean(axis=0)


def online_crn_transform(theta: float, delta: float, services, family: ParamFamily,
                         one_sided: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Service times at θ∓δ re-generated from those observed at θ.

    v_i = G_s(θ, S_i) and S±_i = G_s⁻¹(θ±δ, v_i). For the exponential scale
    family the transform is the exact rescaling (θ±δ) S_i / θ.
    """
    services = np.asarray(services, dtype=float)
    if np.any(services < family.support.lo) or np.any(services > family.support.hi):
        raise DomainError(f"{family.name}: observed services outside the support")
    if delta == 0:
        return services.copy(), services.copy()
    lo, hi = pair_parameters(theta, delta, one_sided)
    family.check_theta([lo, hi])
    if isinstance(family, ExponentialScale):
        return services * (lo / theta), services * (hi / theta)
    v = np.minimum(family.cdf(theta, services), np.nextafter(1.0, 0.0))
    return family.inv_cdf(lo, v), family.inv_cdf(hi, v)


@dataclass(frozen=True)
class QueueCalibration:
    """Staffing cost that places the minimizer at the target, and the grid check."""

    cost: float
    theta_star: Optional[float]
    target: float
    derivative_stderr: float = 0.0
    reps: int = 0
    theta_tolerance: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "QueueCalibration":
        return cls(**data)


def _calibration_params(model: QueueModel, domain: Interval, target: float, reps: int, seed: int,
                        delta: float, grid_points: int) -> dict:
    return {
        "interarrival": repr(model.interarrival),
        "service": repr(model.service),
        "service_components": [repr(c) for c in getattr(model.service, "components", ())],
        "customers": model.customers,
        "domain": [domain.lo, domain.hi],
        "target": target,
        "reps": reps,
        "seed": seed,
        "delta": delta,
        "grid_points": grid_points,
    }


def calibrate_queue(model: QueueModel, domain: Interval, target: float = 0.6, reps: int = 10_000,
                    seed: int = 0, delta: float = 0.02, grid_points: int = 25,
                    cache: Optional[CalibrationCache] = None, block_size: int = DEFAULT_BLOCK_SIZE,
                    threads: Optional[int] = None) -> QueueCalibration:
    """Choose cost = −dE[T̄]/dθ at ``target`` and confirm the minimizer on a grid.

    The derivative uses symmetric CRN differences; the grid check evaluates
    E[T̄(θ)] + cost·θ with shared uniforms at every grid point and refines
    the best point with a parabola.
    """
    if not domain.contains(target):
        raise ParameterError(f"calibration target {target} outside [{domain.lo}, {domain.hi}]")
    model.check_stability(domain)
    params = _calibration_params(model, domain, target, reps, seed, delta, grid_points)
    if cache is not None:
        hit = cache.get(CALIBRATION_KIND, params)
        if hit is not None:
            return QueueCalibration.from_dict(hit)

    logger.info(f"Calibrating queue cost at θ={target} with {reps} replications")

    def slope_block(block: np.ndarray) -> np.ndarray:
        uniforms = draw_queue_uniforms(ReplicationStreams.derive(seed, block).crn, model.customers)
        upper = lindley_avg_system_time(model, target + delta, uniforms)
        lower = lindley_avg_system_time(model, target - delta, uniforms)
        return (upper - lower) / (2.0 * delta)

    h = np.concatenate(map_blocks(slope_block, reps, block_size, threads))
    cost = -float(np.mean(h))
    stderr = float(np.std(h, ddof=1) / np.sqrt(len(h))) if len(h) > 1 else 0.0
    if not cost > 0:
        raise ConfigurationError(f"mean system time does not decrease at θ={target}; no interior minimizer")

    grid = np.linspace(domain.lo, domain.hi, grid_points)

    def grid_block(block: np.ndarray) -> np.ndarray:
        uniforms = draw_queue_uniforms(ReplicationStreams.derive(seed, block).crn, model.customers)
        return np.array([lindley_avg_system_time(model, t, uniforms).sum() for t in grid])

    totals = np.sum(map_blocks(grid_block, reps, block_size, threads), axis=0)
    objective = totals / reps + cost * grid
    theta_star, curvature = _parabolic_argmin(grid, objective)
    # A cost error ε moves the minimizer by about ε/J″(θ*).
    tolerance = 2.0 * stderr / curvature if curvature > 0 else float(grid[1] - grid[0])
    logger.info(f"Queue calibration: cost={cost:.5g} ± {stderr:.2g}, "
                f"grid minimizer θ≈{theta_star:.4f} ± {tolerance:.2g}")
    if abs(theta_star - target) > 2 * (grid[1] - grid[0]):
        logger.warning(f"Grid minimizer {theta_star:.4f} is far from the target {target}")

    calibration = QueueCalibration(cost, theta_star, target, stderr, reps, tolerance)
    if cache is not None:
        cache.put(CALIBRATION_KIND, params, calibration.to_dict())
    return calibration


def _parabolic_argmin(grid: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    """Refined argmin and the parabola's second derivative there (0 when no interior fit)."""
    k = int(np.argmin(values))
    if k == 0 or k == len(grid) - 1:
        return float(grid[k]), 0.0
    y0, y1, y2 = values[k - 1:k + 2]
    denom = y0 - 2 * y1 + y2
    if denom <= 0:
        return float(grid[k]), 0.0
    spacing = grid[1] - grid[0]
    return float(grid[k] + 0.5 * spacing * (y0 - y2) / denom), float(denom / spacing ** 2)


class QueueProblem(Problem):
    """L = (1/N) Σ T_i + cost·θ for the mixture-service queue.

    CRN evaluations at θ±δ share the whole uniform matrix of a replication.
    Without an explicit cost the problem calibrates on first use.
    """

    name = "gg1"

    def __init__(self, model: QueueModel, theta_domain: Interval, cost: Optional[float] = None,
                 theta_star: Optional[float] = None, target: float = 0.6,
                 calibration_reps: int = 10_000, seed: int = 0,
                 cache: Optional[CalibrationCache] = None, delta_cap: Optional[float] = 0.25):
        if not model.service.theta_domain.contains([theta_domain.lo, theta_domain.hi]):
            raise ConfigurationError("Θ must lie inside the service family domain")
        model.check_stability(theta_domain)
        self.model = model
        self.theta_domain = theta_domain
        self.delta_cap = delta_cap
        self.target = target
        self.calibration_reps = calibration_reps
        self.seed = seed
        self.cache = cache
        self._lock = threading.Lock()
        self._calibration = None if cost is None else QueueCalibration(float(cost), theta_star, target)

    @property
    def calibration(self) -> QueueCalibration:
        with self._lock:
            if self._calibration is None:
                self._calibration = calibrate_queue(self.model, self.theta_domain, self.target,
                                                    self.calibration_reps, self.seed, cache=self.cache)
            return self._calibration

    @property
    def cost(self) -> float:
        return self.calibration.cost

    @property
    def ground_truth(self) -> GroundTruth:
        return GroundTruth(theta_star=self.calibration.theta_star)

    @property
    def evaluation_domain(self) -> Interval:
        return self.model.service.theta_domain

    def _check_method(self, method: Method) -> None:
        if method is not Method.INVERSION:
            raise UnsupportedFamilyError("the queue is sampled by inversion only")

    def measure(self, theta, stream, method=Method.INVERSION, mode=CompositionMode.TWO_UNIFORM):
        self._check_method(method)
        return lindley_avg_system_time(self.model, theta, stream) + self.cost * np.asarray(theta, dtype=float)

    def measure_pair(self, theta_lo, theta_hi, streams, method=Method.INVERSION,
                     mode=CompositionMode.TWO_UNIFORM):
        self._check_method(method)
        uniforms = draw_queue_uniforms(streams.crn, self.model.customers)
        cost = self.cost
        lower = lindley_avg_system_time(self.model, theta_lo, uniforms) + cost * np.asarray(theta_lo, dtype=float)
        upper = lindley_avg_system_time(self.model, theta_hi, uniforms) + cost * np.asarray(theta_hi, dtype=float)
        return lower, upper


def default_queue_model(arrival_rate: float = 0.5, fast_mean: float = 1.0, slow_mean: float = 2.4,
                        customers: int = 100) -> QueueModel:
    """Exponential arrivals; service Exp(fast_mean) with probability θ, else Exp(slow_mean)."""
    if not arrival_rate > 0:
        raise ParameterError(f"arrival rate must be positive, got {arrival_rate}")
    return QueueModel(
        interarrival=ExponentialComponent(1.0 / arrival_rate),
        service=exponential_mixture(fast_mean, slow_mean, Interval(0.05, 0.95)),
        customers=customers,
    )


def queue_problem(arrival_rate: float = 0.5, fast_mean: float = 1.0, slow_mean: float = 2.4,
                  customers: int = 100, theta_domain: Tuple[float, float] = (0.3, 0.9),
                  cost: Optional[float] = None, theta_star: Optional[float] = None,
                  target: float = 0.6, calibration_reps: int = 10_000, seed: int = 0,
                  cache: Optional[CalibrationCache] = None) -> QueueProblem:
    """The GI/G/1 mixture-service problem; raises ConfigurationError if unstable over Θ."""
    model = default_queue_model(arrival_rate, fast_mean, slow_mean, customers)
    return QueueProblem(model, Interval(*theta_domain), cost=cost, theta_star=theta_star, target=target,
                        calibration_reps=calibration_reps, seed=seed, cache=cache)

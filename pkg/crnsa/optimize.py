"""Robbins-Monro, Kiefer-Wolfowitz and mirror-descent iterations.

Runs are vectorized across replications: θ is an array with one entry per
lane of the ``ReplicationStreams`` bundle, and every lane follows its own
independent trajectory.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .distributions import SMALLEST_UNIFORM, Interval
from .errors import ParameterError, UnsupportedFamilyError
from .gradest import (
    DEFAULT_DELTA_GRID,
    EstimatorConfig,
    Scheme,
    contract_for,
    estimate_h,
    variance_probe,
)
from .prng import ReplicationStreams

logger = logging.getLogger(__name__)

CHECKPOINTS_PER_DECADE = 20
RATIONAL_DENOMINATOR = 10 ** 6


@dataclass(frozen=True)
class GainSchedule:
    """a_n = a·n^(−alpha), δ_n = min(d·n^(−eta), delta_max)."""

    a: float
    alpha: float
    d: float = 1.0
    eta: float = 0.5
    delta_max: Optional[float] = None

    def __post_init__(self):
        if not self.a > 0:
            raise ParameterError(f"gain a must be positive, got {self.a}")
        if not 0 < self.alpha <= 1:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.d > 0:
            raise ParameterError(f"d must be positive, got {self.d}")
        if not self.eta > 0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if self.delta_max is not None and not self.delta_max > 0:
            raise ParameterError(f"delta_max must be positive, got {self.delta_max}")

    def step(self, n):
        return self.a * np.power(np.asarray(n, dtype=float), -self.alpha)

    def delta(self, n):
        delta = self.d * np.power(np.asarray(n, dtype=float), -self.eta)
        if self.delta_max is not None:
            delta = np.minimum(delta, self.delta_max)
        return delta

    def capped(self, delta_max: Optional[float]) -> "GainSchedule":
        """Same schedule with the tighter of the two δ caps."""
        if delta_max is None:
            return self
        if self.delta_max is not None:
            delta_max = min(delta_max, self.delta_max)
        return replace(self, delta_max=delta_max)


def checkpoint_grid(stop: int, per_decade: int = CHECKPOINTS_PER_DECADE, start: int = 1) -> np.ndarray:
    """Geometric grid of iteration counts in [start, stop], always ending at stop."""
    if stop < start or start < 1:
        raise ParameterError(f"need 1 ≤ start ≤ stop, got {start}, {stop}")
    if per_decade < 1:
        raise ParameterError("checkpoints per decade must be positive")
    exponents = np.arange(math.floor(per_decade * math.log10(start)),
                          math.ceil(per_decade * math.log10(stop)) + 1) / per_decade
    points = np.unique(np.round(10.0 ** exponents).astype(np.int64))
    points = points[(points >= start) & (points <= stop)]
    return np.union1d(points, [stop])


def feasible_interval(problem, delta: float, scheme: Scheme = Scheme.SYMMETRIC) -> Interval:
    """Θ intersected with the evaluation domain inset by δ (upper side only when one-sided)."""
    family = problem.evaluation_domain
    lower = family.lo if scheme is Scheme.ONE_SIDED else family.lo + delta
    lo = max(problem.theta_domain.lo, lower)
    hi = min(problem.theta_domain.hi, family.hi - delta)
    if lo > hi:
        raise ParameterError(f"{problem.name}: δ={delta:.4g} leaves no feasible θ; lower delta_max")
    return Interval(lo, hi)


@dataclass
class KwState:
    theta: np.ndarray
    n: int = 1


def kw_step(state: KwState, h: np.ndarray, a_n: float, interval: Interval) -> Tuple[KwState, np.ndarray]:
    """θ_{n+1} = clamp(θ_n − a_n h_n); also returns the lanes that were clamped."""
    proposal = state.theta - a_n * h
    clamped = (proposal < interval.lo) | (proposal > interval.hi)
    return KwState(np.clip(proposal, interval.lo, interval.hi), state.n + 1), clamped


@dataclass(frozen=True)
class MdConfig:
    """Mirror descent with ψ(θ) = ½θ² on Θ = domain."""

    domain: Interval
    kappa: float = 0.5
    radius: Optional[float] = None
    averaging: str = "uniform"

    def __post_init__(self):
        if not self.domain.lo < self.domain.hi:
            raise ParameterError("MD domain must have lo < hi")
        if not self.kappa > 0:
            raise ParameterError(f"kappa must be positive, got {self.kappa}")
        if self.averaging not in ("uniform", "weighted"):
            raise ParameterError(f"averaging must be 'uniform' or 'weighted', got {self.averaging!r}")
        if self.radius is not None and self.bregman(self.domain.lo, self.domain.hi) > 0.5 * self.radius ** 2:
            raise ParameterError(f"radius {self.radius} too small: D over Θ exceeds r²/2")

    @property
    def r(self) -> float:
        return self.domain.width if self.radius is None else self.radius

    @staticmethod
    def bregman(x, y):
        """D(x, y) for the quadratic generator."""
        return 0.5 * (np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) ** 2


@dataclass
class MdState:
    """Current iterate and the running sums behind both averaged iterates."""

    theta: np.ndarray
    uniform_sum: np.ndarray
    weighted_sum: np.ndarray
    weight_total: float = 0.0
    n: int = 0

    @classmethod
    def start(cls, theta: np.ndarray) -> "MdState":
        theta = np.asarray(theta, dtype=float)
        return cls(theta.copy(), np.zeros_like(theta), np.zeros_like(theta))

    def averaged(self, averaging: str = "uniform") -> np.ndarray:
        if self.n == 0:
            return self.theta.copy()
        if averaging == "weighted":
            return self.weighted_sum / self.weight_total
        return self.uniform_sum / self.n


def md_step(state: MdState, h: np.ndarray, a_n: float, config: MdConfig,
            domain: Optional[Interval] = None) -> MdState:
    """Fold θ_n into both averages, then θ_{n+1} = Π_Θ(θ_n − a_n h)."""
    if not a_n > 0:
        raise ParameterError(f"step must be positive, got {a_n}")
    domain = domain or config.domain
    return MdState(
        theta=np.clip(state.theta - a_n * h, domain.lo, domain.hi),
        uniform_sum=state.uniform_sum + state.theta,
        weighted_sum=state.weighted_sum + a_n * state.theta,
        weight_total=state.weight_total + a_n,
        n=state.n + 1,
    )


@dataclass
class Trajectory:
    """Iterates at checkpoint iterations, one column per replication lane."""

    checkpoints: np.ndarray
    thetas: np.ndarray
    averaged: Optional[np.ndarray] = None
    squared_errors: Optional[np.ndarray] = None
    gaps: Optional[np.ndarray] = None
    clamp_counts: Optional[np.ndarray] = None
    aborted: Dict[int, int] = field(default_factory=dict)
    final_theta: Optional[np.ndarray] = None

    @property
    def replications(self) -> int:
        return self.thetas.shape[1]

    @property
    def valid_lanes(self) -> np.ndarray:
        mask = np.ones(self.replications, dtype=bool)
        mask[list(self.aborted)] = False
        return mask


def _start(problem, theta0, lanes: int, interval: Interval) -> np.ndarray:
    theta = problem.theta0 if theta0 is None else theta0
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (lanes,))
    return np.clip(theta, interval.lo, interval.hi)


def _checkpoints(n_total: int, checkpoints: Optional[Sequence[int]]) -> np.ndarray:
    if n_total < 1:
        raise ParameterError(f"n_total must be at least 1, got {n_total}")
    checkpoints = checkpoint_grid(n_total) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    if checkpoints.ndim != 1 or checkpoints.size == 0:
        raise ParameterError("checkpoints must be a nonempty sequence")
    if np.any(np.diff(checkpoints) <= 0) or checkpoints[0] < 1 or checkpoints[-1] > n_total:
        raise ParameterError("checkpoints must be strictly increasing within [1, n_total]")
    return checkpoints


def _prepare(problem, config: EstimatorConfig, schedule: GainSchedule, n_total: int,
             checkpoints: Optional[Sequence[int]]) -> Tuple[GainSchedule, np.ndarray]:
    checkpoints = _checkpoints(n_total, checkpoints)
    config.validate_for(problem)
    return schedule.capped(problem.delta_cap), checkpoints


def _freeze_aborted(h: np.ndarray, aborted: Dict[int, int], n: int, name: str) -> np.ndarray:
    bad = ~np.isfinite(h)
    fresh = [int(lane) for lane in np.flatnonzero(bad) if int(lane) not in aborted]
    if fresh:
        for lane in fresh:
            aborted[lane] = n
        logger.warning(f"{name}: non-finite derivative estimate at n={n} on {len(fresh)} lane(s); frozen")
    if aborted:
        h = h.copy()
        h[list(aborted)] = 0.0
    return h


def _squared_errors(problem, values: np.ndarray) -> Optional[np.ndarray]:
    truth = problem.ground_truth
    if truth is None or truth.theta_star is None:
        return None
    return (values - truth.theta_star) ** 2


def kw_run(problem, config: EstimatorConfig, schedule: GainSchedule, n_total: int,
           streams: ReplicationStreams, checkpoints: Optional[Sequence[int]] = None,
           theta0: Optional[float] = None) -> Trajectory:
    """θ_{n+1} = clamp(θ_n − a_n h_n) with h_n = estimate_h(θ_n, δ_n).

    The clamp interval at step n is ``feasible_interval(problem, δ_n)``;
    clamp events are counted per lane. A lane whose estimate is not finite
    is frozen and reported in ``aborted``.
    """
    schedule, checkpoints = _prepare(problem, config, schedule, n_total, checkpoints)
    lanes = streams.lanes
    state = KwState(_start(problem, theta0, lanes, feasible_interval(problem, float(schedule.delta(1)), config.scheme)))
    clamp_counts = np.zeros(lanes, dtype=np.int64)
    aborted: Dict[int, int] = {}
    recorded = np.empty((len(checkpoints), lanes))
    k = 0
    for n in range(1, n_total + 1):
        delta = float(schedule.delta(n))
        h = estimate_h(problem, state.theta, delta, config, streams)
        h = _freeze_aborted(h, aborted, n, problem.name)
        interval = feasible_interval(problem, float(schedule.delta(n + 1)), config.scheme)
        state, clamped = kw_step(state, h, float(schedule.step(n)), interval)
        clamp_counts += clamped
        if n == checkpoints[k]:
            recorded[k] = state.theta
            k += 1
            if k == len(checkpoints):
                break
    if clamp_counts.sum() > 0.1 * lanes * n_total:
        logger.warning(f"{problem.name} {config.label}: clamped on {clamp_counts.sum()} of {lanes * n_total} steps")
    logger.debug(f"kw_run {problem.name} {config.label}: {lanes} lanes, n={n_total}")
    return Trajectory(checkpoints, recorded, squared_errors=_squared_errors(problem, recorded),
                      clamp_counts=clamp_counts, aborted=aborted, final_theta=state.theta)


def rm_run(problem, schedule: GainSchedule, n_total: int, streams: ReplicationStreams,
           checkpoints: Optional[Sequence[int]] = None, theta0: Optional[float] = None,
           noise_scale: float = 1.0) -> Trajectory:
    """θ_{n+1} = θ_n − a_n (J′(θ_n) + noise_scale·Z_n), Z_n standard normal from the CRN substream."""
    truth = problem.ground_truth
    if truth is None or truth.gradient is None:
        raise UnsupportedFamilyError(f"problem {problem.name!r} has no closed-form J′")
    if noise_scale < 0:
        raise ParameterError(f"noise scale must be nonnegative, got {noise_scale}")
    checkpoints = _checkpoints(n_total, checkpoints)
    lanes = streams.lanes
    theta = _start(problem, theta0, lanes, problem.theta_domain)
    recorded = np.empty((len(checkpoints), lanes))
    k = 0
    for n in range(1, n_total + 1):
        noise = ndtri(np.maximum(streams.crn.next_uniform(), SMALLEST_UNIFORM))
        theta = theta - float(schedule.step(n)) * (truth.gradient(theta) + noise_scale * noise)
        if n == checkpoints[k]:
            recorded[k] = theta
            k += 1
            if k == len(checkpoints):
                break
    return Trajectory(checkpoints, recorded, squared_errors=_squared_errors(problem, recorded),
                      clamp_counts=np.zeros(lanes, dtype=np.int64), final_theta=theta)


def md_run(problem, config: EstimatorConfig, md: MdConfig, schedule: GainSchedule, n_total: int,
           streams: ReplicationStreams, checkpoints: Optional[Sequence[int]] = None,
           theta0: Optional[float] = None) -> Trajectory:
    """Mirror descent with the quadratic generator and iterate averaging.

    Projection is onto Θ ∩ feasible_interval(δ_{n+1}); with an inactive
    projection the iterates coincide with ``kw_run``. Gaps J(θ̂_n) − J(θ*)
    are recorded when the problem has a closed-form J and a known θ*.
    """
    schedule, checkpoints = _prepare(problem, config, schedule, n_total, checkpoints)
    lanes = streams.lanes

    def projection(n: int) -> Interval:
        return md.domain.intersect(feasible_interval(problem, float(schedule.delta(n)), config.scheme))

    state = MdState.start(_start(problem, theta0, lanes, projection(1)))
    aborted: Dict[int, int] = {}
    thetas = np.empty((len(checkpoints), lanes))
    averaged = np.empty((len(checkpoints), lanes))
    k = 0
    for n in range(1, n_total + 1):
        h = estimate_h(problem, state.theta, float(schedule.delta(n)), config, streams)
        h = _freeze_aborted(h, aborted, n, problem.name)
        state = md_step(state, h, float(schedule.step(n)), md, projection(n + 1))
        if n == checkpoints[k]:
            thetas[k] = state.theta
            averaged[k] = state.averaged(md.averaging)
            k += 1
            if k == len(checkpoints):
                break
    truth = problem.ground_truth
    gaps = None
    if truth is not None and truth.objective is not None and truth.theta_star is not None:
        gaps = truth.objective(averaged) - truth.objective_star
    logger.debug(f"md_run {problem.name} {config.label} ({md.averaging}): {lanes} lanes, n={n_total}")
    return Trajectory(checkpoints, thetas, averaged=averaged,
                      squared_errors=_squared_errors(problem, averaged), gaps=gaps,
                      clamp_counts=np.zeros(lanes, dtype=np.int64), aborted=aborted,
                      final_theta=state.theta)


# Rate predictors

def _rational(x) -> Fraction:
    return Fraction(x).limit_denominator(RATIONAL_DENOMINATOR)


@dataclass(frozen=True)
class RatePrediction:
    sigma: float
    converges: bool


def predict_sigma(alpha, eta, beta, gamma) -> RatePrediction:
    """σ = ½ min{α + γη, 2βη} for KW with a_n ∝ n^(−α), δ_n ∝ n^(−η)."""
    if not 0 < alpha <= 1:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    a, e, b, g = (_rational(v) for v in (alpha, eta, beta, gamma))
    sigma = min(a + g * e, 2 * b * e) / 2
    return RatePrediction(float(sigma), sigma > 0)


def best_rate_kw(beta, gamma) -> Tuple[float, float, float]:
    """(σ*, α*, η*) = (β/(2β−γ), 1, 1/(2β−γ))."""
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if gamma > 0:
        raise ParameterError(f"gamma must be ≤ 0, got {gamma}")
    b, g = _rational(beta), _rational(gamma)
    return float(b / (2 * b - g)), 1.0, float(1 / (2 * b - g))


def predict_md_sigma(alpha, eta, beta, gamma, variant: str = "general") -> RatePrediction:
    """Decay exponent of the MD upper bound.

    ``general``: min{1−α, α+γη, α, α+2βη, βη}; ``crn``: min{1−α, α+γη, βη}.
    """
    if not 0 < alpha <= 1:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    a, e, b, g = (_rational(v) for v in (alpha, eta, beta, gamma))
    if variant == "general":
        sigma = min(1 - a, a + g * e, a, a + 2 * b * e, b * e)
    elif variant == "crn":
        sigma = min(1 - a, a + g * e, b * e)
    else:
        raise ParameterError(f"variant must be 'general' or 'crn', got {variant!r}")
    return RatePrediction(float(sigma), sigma > 0)


def best_rate_md(beta, gamma) -> Tuple[float, float, float]:
    """(σ*, α*, η*) = (β/(2β−γ), (β−γ)/(2β−γ), 1/(2β−γ))."""
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if gamma > 0:
        raise ParameterError(f"gamma must be ≤ 0, got {gamma}")
    b, g = _rational(beta), _rational(gamma)
    width = 2 * b - g
    return float(b / width), float((b - g) / width), float(1 / width)


# Mirror-descent bound

@dataclass(frozen=True)
class MdBoundConstants:
    """Inputs of the MD bound: Var[h] ≤ c_var δ^γ, E[h²] ≤ c_tilde δ^γ, |E[h] − J′| ≤ b δ^β."""

    r: float
    kappa: float
    k2: float
    b: float
    c_var: float
    beta: int
    gamma: int
    c_tilde: Optional[float] = None

    @property
    def c1(self) -> float:
        return self.r ** 2 / 2

    @property
    def c2(self) -> float:
        return self.c_var / (2 * self.kappa)

    @property
    def c2_tilde(self) -> float:
        if self.c_tilde is None:
            raise ParameterError("second-moment constant c_tilde is not set")
        return self.c_tilde / (2 * self.kappa)

    @property
    def c3(self) -> float:
        return self.k2 ** 2 * self.r ** 2 / (2 * self.kappa ** 2)

    @property
    def c4(self) -> float:
        return self.b ** 2 / self.kappa

    @property
    def c5(self) -> float:
        return self.b * self.r / math.sqrt(2 * self.kappa)


def eval_md_bound(constants: MdBoundConstants, schedule: GainSchedule, n, second_moment: bool = False):
    """The MD upper bound at n by direct summation over i = 1..n.

    With ``second_moment`` the bound uses C̃₂ and drops the C₃ and C₄ terms.
    Accepts a scalar n or an array of n.
    """
    ns = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if np.any(ns < 1):
        raise ParameterError("n must be at least 1")
    i = np.arange(1, int(ns.max()) + 1, dtype=float)
    steps = schedule.step(i)
    deltas = schedule.delta(i)
    c = constants

    def running(values):
        return np.cumsum(values)[ns - 1] / ns

    bound = c.c1 / (ns * steps[ns - 1]) + running(c.c5 * deltas ** c.beta)
    if second_moment:
        bound = bound + running(c.c2_tilde * steps * deltas ** c.gamma)
    else:
        bound = (bound + running(c.c2 * steps * deltas ** c.gamma) + running(c.c3 * steps)
                 + running(c.c4 * steps * deltas ** (2 * c.beta)))
    return float(bound[0]) if np.ndim(n) == 0 else bound


def corollary_bound(constants: MdBoundConstants, a: float, d: float, n, one_sided: bool = False):
    """Closed form for a_n = a n^(−1/2), δ_n = d n^(−1) with bounded variance."""
    n = np.asarray(n, dtype=float)
    c = constants
    lead = (c.c1 + 2 * c.c2 + 2 * c.c3) * max(a, 1 / a) / np.sqrt(n)
    if one_sided:
        return lead + 2.5 * c.c4 * d ** 2 * a / n + c.c5 * d * (1 + np.log(n)) / n
    return lead + (9 * c.c4 * d ** 4 / 7) * a / n + 2 * c.c5 * d ** 2 / n


def measure_md_constants(problem, config: EstimatorConfig, md: MdConfig, reps: int = 10_000,
                         seed: int = 0, deltas: Sequence[float] = DEFAULT_DELTA_GRID,
                         threads: Optional[int] = 1) -> MdBoundConstants:
    """Constants of the MD bound for ``problem``.

    K₂ and the bias constant b come from the closed-form derivatives; the
    variance and second-moment constants are the largest observed
    Var[h]·δ^(−γ) and E[h²]·δ^(−γ) over the δ grid at both ends of Θ and at θ*.
    """
    truth = problem.ground_truth
    if truth is None or truth.k2 is None or truth.theta_star is None:
        raise UnsupportedFamilyError(f"problem {problem.name!r} lacks K₂ or θ*")
    contract = contract_for(config, problem, truth.theta_star)
    if config.one_sided:
        b = 0.5 * (truth.curvature_bound or 0.0)
    else:
        b = (truth.third_derivative_bound or 0.0) / 6.0
    deltas = np.asarray(deltas, dtype=float)
    interval = md.domain.intersect(feasible_interval(problem, float(deltas.max()), config.scheme))
    c_var = 0.0
    c_tilde = 0.0
    for theta in (interval.lo, truth.theta_star, interval.hi):
        probe = variance_probe(problem, theta, deltas, reps, config, seed, threads=threads)
        scale = probe.deltas ** (-contract.gamma)
        c_var = max(c_var, float(np.max((probe.values + 3 * probe.stderr) * scale)))
        c_tilde = max(c_tilde, float(np.max(probe.second_moments * scale)))
    logger.info(f"{problem.name} {config.label}: b={b:.4g}, c={c_var:.4g}, c̃={c_tilde:.4g}")
    return MdBoundConstants(md.r, md.kappa, truth.k2, b, c_var, contract.beta, contract.gamma, c_tilde)

"""Test problems with known ground truth and the problem catalog."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .distributions import (
    AtomFlat,
    Interval,
    LossFn,
    MixtureFamily,
    NormalLocation,
    ParamFamily,
    TriangularMode,
    has_bounded_crn_variance,
    identity_loss,
    objective_by_quadrature,
    power_loss,
    quadratic_loss,
    tent_mixture,
    uniform_mixture,
)
from .errors import ConfigurationError, ParameterError, UnsupportedFamilyError
from .gradest import Method
from .prng import ReplicationStreams, UniformStream
from .sampling import (
    CompositionMode,
    couple_composition,
    couple_inversion,
    couple_rejection,
    rejection_loop,
    sample_composition,
    sample_inversion,
)

logger = logging.getLogger(__name__)

Scalar = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GroundTruth:
    """Known minimizer and closed-form objective information."""

    theta_star: Optional[float]
    objective: Optional[Scalar] = None
    gradient: Optional[Scalar] = None
    k1: Optional[float] = None
    k2: Optional[float] = None
    curvature_bound: Optional[float] = None
    third_derivative_bound: Optional[float] = None

    @property
    def objective_star(self) -> float:
        if self.objective is None or self.theta_star is None:
            raise UnsupportedFamilyError("no closed-form objective at the minimizer")
        return float(self.objective(self.theta_star))


class Problem:
    """A stochastic objective J(θ) = E[L] sampled through a family or a model."""

    name = "problem"
    theta_domain = Interval(-np.inf, np.inf)
    ground_truth: Optional[GroundTruth] = None
    delta_cap: Optional[float] = None

    @property
    def evaluation_domain(self) -> Interval:
        """Parameters at which the loss can be sampled."""
        return self.theta_domain

    def supports(self, method: Method) -> bool:
        return method is Method.INVERSION

    def crn_inversion_bounded(self, theta: Optional[float] = None) -> bool:
        return True

    def measure(self, theta, stream: UniformStream, method: Method = Method.INVERSION,
                mode: CompositionMode = CompositionMode.TWO_UNIFORM) -> np.ndarray:
        raise NotImplementedError

    def measure_pair(self, theta_lo, theta_hi, streams: ReplicationStreams,
                     method: Method = Method.INVERSION,
                     mode: CompositionMode = CompositionMode.TWO_UNIFORM) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def theta0(self) -> float:
        return self.theta_domain.midpoint

    def require_theta_star(self) -> float:
        if self.ground_truth is None or self.ground_truth.theta_star is None:
            raise UnsupportedFamilyError(f"problem {self.name!r} has no known minimizer")
        return self.ground_truth.theta_star

    def check_assumptions(self, points: int = 1001, tolerance: float = 1e-9) -> bool:
        """K₁|θ − θ*| ≤ |J′(θ)| ≤ K₂|θ − θ*| on a dense grid over Θ."""
        truth = self.ground_truth
        if truth is None or truth.gradient is None or truth.k1 is None or truth.k2 is None:
            raise UnsupportedFamilyError(f"problem {self.name!r} has no closed-form J′ and bounds")
        grid = np.linspace(self.theta_domain.lo, self.theta_domain.hi, points)
        distance = np.abs(grid - truth.theta_star)
        slope = np.abs(truth.gradient(grid))
        return bool(np.all(truth.k1 * distance <= slope + tolerance)
                    and np.all(slope <= truth.k2 * distance + tolerance))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"


class FamilyProblem(Problem):
    """L(X(θ, ξ)) with X drawn from a θ-indexed family."""

    def __init__(self, name: str, family: ParamFamily, loss: LossFn, theta_domain: Interval,
                 ground_truth: Optional[GroundTruth] = None, delta_cap: Optional[float] = None):
        if not family.theta_domain.contains([theta_domain.lo, theta_domain.hi]):
            raise ConfigurationError(f"{name}: Θ must lie inside the family domain")
        self.name = name
        self.family = family
        self.loss = loss
        self.theta_domain = theta_domain
        self.ground_truth = ground_truth
        self.delta_cap = delta_cap

    @property
    def evaluation_domain(self) -> Interval:
        return self.family.theta_domain

    def supports(self, method: Method) -> bool:
        if method is Method.REJECTION:
            return self.family.rejection_capable
        if method is Method.COMPOSITION:
            return isinstance(self.family, MixtureFamily)
        return True

    def crn_inversion_bounded(self, theta: Optional[float] = None) -> bool:
        return has_bounded_crn_variance(self.family, self.theta0 if theta is None else theta)

    def measure(self, theta, stream, method=Method.INVERSION, mode=CompositionMode.TWO_UNIFORM):
        if method is Method.INVERSION:
            x = sample_inversion(self.family, theta, stream)
        elif method is Method.REJECTION:
            x = rejection_loop(self.family, self.family.check_theta(theta), stream).values
        else:
            x = sample_composition(self.family, theta, stream, mode)
        return self.loss(x)

    def measure_pair(self, theta_lo, theta_hi, streams, method=Method.INVERSION,
                     mode=CompositionMode.TWO_UNIFORM):
        if method is Method.INVERSION:
            pair = couple_inversion(self.family, theta_lo, theta_hi, streams.crn)
        elif method is Method.REJECTION:
            pair = couple_rejection(self.family, theta_lo, theta_hi, streams.crn, streams.retry)
        else:
            pair = couple_composition(self.family, theta_lo, theta_hi, streams.crn, mode)
        return self.loss(pair.x_minus), self.loss(pair.x_plus)

    def objective(self, theta: float) -> float:
        """J(θ), closed form when known, otherwise by quadrature."""
        if self.ground_truth is not None and self.ground_truth.objective is not None:
            return float(self.ground_truth.objective(theta))
        return objective_by_quadrature(self.family, self.loss, theta)


class DeterministicProblem(Problem):
    """Zero-noise version of a problem: every measurement returns J(θ)."""

    def __init__(self, base: Problem):
        truth = base.ground_truth
        if truth is None or truth.objective is None:
            raise UnsupportedFamilyError(f"problem {base.name!r} has no closed-form J")
        self.base = base
        self.name = f"{base.name}-exact"
        self.theta_domain = base.theta_domain
        self.ground_truth = truth
        self.delta_cap = base.delta_cap

    @property
    def evaluation_domain(self) -> Interval:
        return self.base.evaluation_domain

    def supports(self, method: Method) -> bool:
        return True

    def measure(self, theta, stream, method=Method.INVERSION, mode=CompositionMode.TWO_UNIFORM):
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (stream.lanes,))
        return np.asarray(self.ground_truth.objective(theta), dtype=float)

    def measure_pair(self, theta_lo, theta_hi, streams, method=Method.INVERSION,
                     mode=CompositionMode.TWO_UNIFORM):
        return (self.measure(theta_lo, streams.crn), self.measure(theta_hi, streams.crn))


def deterministic_problem(problem: Problem) -> DeterministicProblem:
    return DeterministicProblem(problem)


def triangular_problem() -> FamilyProblem:
    """Triangular mode family with L(x) = (x − 0.55)², minimized at θ* = 0.6."""
    truth = GroundTruth(
        theta_star=0.6,
        objective=lambda t: (1 - t + t ** 2) / 18 + ((1 + t) / 3 - 0.55) ** 2,
        gradient=lambda t: (t - 0.6) / 3,
        k1=1 / 3, k2=1 / 3,
        curvature_bound=1 / 3,
        third_derivative_bound=0.0,
    )
    return FamilyProblem("triangular", TriangularMode(), quadratic_loss(0.55), Interval(0.2, 0.95),
                         truth, delta_cap=0.35)


def normal_location_problem(target: float = 0.0, loss_power: int = 2, half_width: float = 5.0) -> FamilyProblem:
    """X = θ + Z with L(x) = (x − t)^p for p = 2 or 4."""
    t = float(target)
    if loss_power == 2:
        truth = GroundTruth(
            theta_star=t,
            objective=lambda th: (th - t) ** 2 + 1.0,
            gradient=lambda th: 2.0 * (th - t),
            k1=2.0, k2=2.0,
            curvature_bound=2.0,
            third_derivative_bound=0.0,
        )
    elif loss_power == 4:
        w = half_width
        truth = GroundTruth(
            theta_star=t,
            objective=lambda th: (th - t) ** 4 + 6.0 * (th - t) ** 2 + 3.0,
            gradient=lambda th: 4.0 * (th - t) ** 3 + 12.0 * (th - t),
            k1=12.0, k2=4.0 * w ** 2 + 12.0,
            curvature_bound=12.0 * w ** 2 + 12.0,
            third_derivative_bound=24.0 * w,
        )
    else:
        raise ParameterError(f"loss power must be 2 or 4, got {loss_power}")
    return FamilyProblem(f"normal{loss_power}", NormalLocation(), power_loss(t, loss_power),
                         Interval(t - half_width, t + half_width), truth)


class AtomFlatProblem(FamilyProblem):
    """AtomFlat family with L(x) = x; used for variance-regime probes only."""

    def __init__(self):
        truth = GroundTruth(
            theta_star=None,
            objective=lambda t: t ** 2 / 4 - 0.75 * t + 1.5,
            gradient=lambda t: t / 2 - 0.75,
        )
        super().__init__("atomflat", AtomFlat(), identity_loss(), Interval(0.2, 0.8), truth)

    @staticmethod
    def analytic_m1(theta) -> float:
        return (1.0 - theta) ** 2


def atomflat_family_problem() -> AtomFlatProblem:
    return AtomFlatProblem()


class UniformMixtureProblem(FamilyProblem):
    """U[0,1]/U[1,2] mixture with p(θ) = θ and L(x) = x."""

    analytic_m3 = 1.0
    analytic_m4 = 4.0

    def __init__(self):
        truth = GroundTruth(theta_star=None, objective=lambda t: 1.5 - t,
                            gradient=lambda t: -np.ones_like(np.asarray(t, dtype=float)))
        super().__init__("mixture", uniform_mixture(), identity_loss(), Interval(0.1, 0.9), truth)


def uniform_mixture_problem() -> UniformMixtureProblem:
    return UniformMixtureProblem()


def tent_mixture_problem() -> FamilyProblem:
    """Three-component mixture with L(x) = (x − 1.5)², minimized at θ* = ½."""
    truth = GroundTruth(
        theta_star=0.5,
        objective=lambda t: 1 / 12 + 0.5 * ((1 - t) ** 2 + t ** 2),
        gradient=lambda t: 2.0 * t - 1.0,
        k1=2.0, k2=2.0,
        curvature_bound=2.0,
        third_derivative_bound=0.0,
    )
    return FamilyProblem("mixture-tent", tent_mixture(), quadratic_loss(1.5), Interval(0.1, 0.9),
                         truth, delta_cap=0.3)


def locate_minimizer(problem: FamilyProblem, points: int = 401) -> float:
    """Grid search of J by quadrature over Θ, refined by a parabola through the best three points."""
    grid = np.linspace(problem.theta_domain.lo, problem.theta_domain.hi, points)
    values = np.array([objective_by_quadrature(problem.family, problem.loss, t) for t in grid])
    k = int(np.argmin(values))
    if k == 0 or k == points - 1:
        return float(grid[k])
    y0, y1, y2 = values[k - 1:k + 2]
    step = grid[1] - grid[0]
    denom = y0 - 2 * y1 + y2
    if denom <= 0:
        return float(grid[k])
    return float(grid[k] + 0.5 * step * (y0 - y2) / denom)


def _queue(**kwargs) -> Problem:
    from .queueing import queue_problem
    return queue_problem(**kwargs)


PROBLEMS: Dict[str, Callable[..., Problem]] = {
    "triangular": triangular_problem,
    "triangular-exact": lambda: deterministic_problem(triangular_problem()),
    "normal2": lambda: normal_location_problem(0.0, 2),
    "normal4": lambda: normal_location_problem(0.0, 4),
    "atomflat": atomflat_family_problem,
    "mixture": uniform_mixture_problem,
    "mixture-tent": tent_mixture_problem,
    "gg1": _queue,
}


def get_problem(name: str, **kwargs) -> Problem:
    """Build a catalog problem by name."""
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown problem {name!r}; choose from {', '.join(sorted(PROBLEMS))}"
        ) from None
    return factory(**kwargs)

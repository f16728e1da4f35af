"""θ-indexed distribution families and their CRN functionals.

A family exposes its CDF, generalized inverse CDF, density and
θ-derivatives, all vectorized over θ and x. Its ``segment_layout``
splits the support into smooth pieces, flats and jumps; the functionals
``m1`` .. ``m4`` and the quadrature helpers integrate piece by piece.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from .errors import DomainError, UnsupportedFamilyError

logger = logging.getLogger(__name__)

DERIVATIVE_STEP = 1e-6
QUAD_EPSREL = 1e-10
QUAD_EPSABS = 1e-13
QUAD_LIMIT = 200
DOMAIN_SLACK = 1e-12
SMALLEST_UNIFORM = 2.0 ** -54
NEWTON_MAXITER = 100
NEWTON_RESIDUAL = 4 * np.finfo(float).eps
NEWTON_RTOL = 1e-14

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi]; either end may be infinite."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.lo) and np.isfinite(self.hi))

    def contains(self, x, slack: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        lo = self.lo - slack * max(1.0, abs(self.lo)) if np.isfinite(self.lo) else self.lo
        hi = self.hi + slack * max(1.0, abs(self.hi)) if np.isfinite(self.hi) else self.hi
        return bool(np.all((x >= lo) & (x <= hi)))

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def intersect(self, other: "Interval") -> "Interval":
        return Interval(max(self.lo, other.lo), min(self.hi, other.hi))


class SegmentKind(Enum):
    FLAT = "flat"
    SMOOTH = "smooth"
    JUMP = "jump"


@dataclass(frozen=True)
class Segment:
    """One piece of a CDF layout at a fixed θ.

    Flats carry the CDF level and optionally its analytic θ-derivative;
    jumps have ``left == right`` and a nonnegative ``jump_mass``.
    """

    kind: SegmentKind
    left: float
    right: float
    cdf_level: float = float('nan')
    jump_mass: float = 0.0
    level_derivative: Optional[float] = None

    def __post_init__(self):
        if self.jump_mass < 0:
            raise ValueError("jump mass must be nonnegative")
        if self.right < self.left:
            raise ValueError("segment ends out of order")


class ParamFamily:
    """Base class for θ-indexed distribution families.

    Subclasses implement ``_cdf``, ``_inv_cdf``, ``_density`` and
    ``segment_layout``; analytic θ-derivatives are optional and fall back
    to central differences with step ``DERIVATIVE_STEP``.
    """

    name = "family"
    theta_domain = Interval(-np.inf, np.inf)
    support = Interval(-np.inf, np.inf)
    density_bound: Optional[float] = None

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if not self.theta_domain.contains(theta, slack=DOMAIN_SLACK):
            bad = theta[~np.isfinite(theta) | (theta < self.theta_domain.lo) | (theta > self.theta_domain.hi)]
            raise DomainError(
                f"{self.name}: θ={bad.ravel()[:3]} outside [{self.theta_domain.lo}, {self.theta_domain.hi}]"
            )
        return theta

    def cdf(self, theta, x) -> np.ndarray:
        theta = self.check_theta(theta)
        return np.clip(self._cdf(theta, np.asarray(x, dtype=float)), 0.0, 1.0)

    def inv_cdf(self, theta, u) -> np.ndarray:
        theta = self.check_theta(theta)
        u = np.asarray(u, dtype=float)
        if np.any(~((u >= 0.0) & (u < 1.0))):
            raise DomainError(f"{self.name}: inverse CDF needs u in [0, 1)")
        return self._inv_cdf(theta, u)

    def density(self, theta, x) -> np.ndarray:
        theta = self.check_theta(theta)
        return self._density(theta, np.asarray(x, dtype=float))

    def cdf_dtheta(self, theta, x) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        h = DERIVATIVE_STEP
        return (self._cdf(theta + h, x) - self._cdf(theta - h, x)) / (2 * h)

    def density_dtheta(self, theta, x) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        h = DERIVATIVE_STEP
        return (self._density(theta + h, x) - self._density(theta - h, x)) / (2 * h)

    def segment_layout(self, theta: float) -> List[Segment]:
        return [Segment(SegmentKind.SMOOTH, self.support.lo, self.support.hi)]

    @property
    def rejection_capable(self) -> bool:
        return self.support.bounded and self.density_bound is not None

    def _cdf(self, theta, x):
        raise NotImplementedError

    def _inv_cdf(self, theta, u):
        raise NotImplementedError

    def _density(self, theta, x):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class TriangularMode(ParamFamily):
    """Triangular law on [0, 1] with mode θ."""

    name = "triangular"
    theta_domain = Interval(0.01, 0.99)
    support = Interval(0.0, 1.0)
    density_bound = 2.0

    def _cdf(self, theta, x):
        x = np.clip(x, 0.0, 1.0)
        return np.where(x <= theta, x * x / theta, 1.0 - (1.0 - x) ** 2 / (1.0 - theta))

    def _inv_cdf(self, theta, u):
        return np.where(u < theta, np.sqrt(u * theta), 1.0 - np.sqrt((1.0 - u) * (1.0 - theta)))

    def _density(self, theta, x):
        inside = (x >= 0.0) & (x <= 1.0)
        f = np.where(x <= theta, 2.0 * x / theta, 2.0 * (1.0 - x) / (1.0 - theta))
        return np.where(inside, f, 0.0)

    def cdf_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        return np.where(x <= theta, -(x / theta) ** 2, -((1.0 - x) / (1.0 - theta)) ** 2)

    def density_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        inside = (x >= 0.0) & (x <= 1.0)
        g = np.where(x <= theta, -2.0 * x / theta ** 2, 2.0 * (1.0 - x) / (1.0 - theta) ** 2)
        return np.where(inside, g, 0.0)

    def segment_layout(self, theta: float) -> List[Segment]:
        theta = float(theta)
        return [
            Segment(SegmentKind.SMOOTH, 0.0, theta),
            Segment(SegmentKind.SMOOTH, theta, 1.0),
        ]


class NormalLocation(ParamFamily):
    """X = θ + Z with Z standard normal."""

    name = "normal"

    def _cdf(self, theta, x):
        return ndtr(x - theta)

    def _inv_cdf(self, theta, u):
        return theta + ndtri(np.maximum(u, SMALLEST_UNIFORM))

    def _density(self, theta, x):
        z = x - theta
        return np.exp(-0.5 * z * z) / _SQRT_2PI

    def cdf_dtheta(self, theta, x):
        return -self._density(np.asarray(theta, dtype=float), np.asarray(x, dtype=float))

    def density_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        return (x - theta) * self._density(theta, x)


class AtomFlat(ParamFamily):
    """Law on [0, 2] whose CDF is flat at level θ/2 on [θ, 1]."""

    name = "atomflat"
    theta_domain = Interval(0.2, 0.8)
    support = Interval(0.0, 2.0)
    density_bound = 1.0

    def _cdf(self, theta, x):
        x = np.clip(x, 0.0, 2.0)
        return np.where(
            x < theta, 0.5 * x,
            np.where(x < 1.0, 0.5 * theta, 0.5 * theta + (1.0 - 0.5 * theta) * (x - 1.0)),
        )

    def _inv_cdf(self, theta, u):
        half = 0.5 * theta
        return np.where(u < half, 2.0 * u, 1.0 + (u - half) / (1.0 - half))

    def _density(self, theta, x):
        return np.where(
            (x >= 0.0) & (x < theta), 0.5,
            np.where((x > 1.0) & (x <= 2.0), 1.0 - 0.5 * theta, 0.0),
        )

    def cdf_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.clip(np.asarray(x, dtype=float), 0.0, 2.0)
        return np.where(x < theta, 0.0, np.where(x < 1.0, 0.5, 0.5 * (2.0 - x)))

    def density_dtheta(self, theta, x):
        x = np.asarray(x, dtype=float)
        return np.where((x > 1.0) & (x <= 2.0), -0.5, 0.0) + 0.0 * np.asarray(theta, dtype=float)

    def segment_layout(self, theta: float) -> List[Segment]:
        theta = float(theta)
        return [
            Segment(SegmentKind.SMOOTH, 0.0, theta),
            Segment(SegmentKind.FLAT, theta, 1.0, cdf_level=0.5 * theta, level_derivative=0.5),
            Segment(SegmentKind.SMOOTH, 1.0, 2.0),
        ]


class ExponentialScale(ParamFamily):
    """Exponential law with mean θ: F(θ, t) = 1 − exp(−t/θ)."""

    name = "exponential"
    theta_domain = Interval(1e-3, 1e3)
    support = Interval(0.0, np.inf)

    def _cdf(self, theta, x):
        return -np.expm1(-np.maximum(x, 0.0) / theta)

    def _inv_cdf(self, theta, u):
        return -theta * np.log1p(-u)

    def _density(self, theta, x):
        return np.where(x >= 0.0, np.exp(-np.maximum(x, 0.0) / theta) / theta, 0.0)

    def cdf_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return -(x / theta ** 2) * np.exp(-x / theta)

    def density_dtheta(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return np.exp(-x / theta) * (x / theta ** 3 - 1.0 / theta ** 2)


# Mixture components are θ-independent laws.

class Component:
    support = Interval(-np.inf, np.inf)
    density_max = np.inf

    def cdf(self, x):
        raise NotImplementedError

    def inv_cdf(self, u):
        raise NotImplementedError

    def density(self, x):
        raise NotImplementedError


@dataclass(frozen=True)
class UniformComponent(Component):
    lo: float
    hi: float

    @property
    def support(self) -> Interval:
        return Interval(self.lo, self.hi)

    @property
    def density_max(self) -> float:
        return 1.0 / (self.hi - self.lo)

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def inv_cdf(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u, dtype=float)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)


@dataclass(frozen=True)
class ExponentialComponent(Component):
    mean: float

    @property
    def support(self) -> Interval:
        return Interval(0.0, np.inf)

    @property
    def density_max(self) -> float:
        return 1.0 / self.mean

    def cdf(self, x):
        return -np.expm1(-np.maximum(np.asarray(x, dtype=float), 0.0) / self.mean)

    def inv_cdf(self, u):
        return -self.mean * np.log1p(-np.asarray(u, dtype=float))

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0.0, np.exp(-np.maximum(x, 0.0) / self.mean) / self.mean, 0.0)


WeightFn = Callable[[np.ndarray], Sequence[np.ndarray]]


class MixtureFamily(ParamFamily):
    """F(θ, x) = Σ p_i(θ) F_i(x) over θ-independent components."""

    def __init__(self, components: Sequence[Component], weights: WeightFn,
                 theta_domain: Interval, weight_derivatives: Optional[WeightFn] = None,
                 name: str = "mixture"):
        if not components:
            raise ValueError("a mixture needs at least one component")
        self.components = tuple(components)
        self._weights = weights
        self._weight_derivatives = weight_derivatives
        self.theta_domain = theta_domain
        self.name = name
        self.support = Interval(min(c.support.lo for c in components),
                                max(c.support.hi for c in components))
        self.disjoint = all(a.support.hi <= b.support.lo
                            for a, b in zip(self.components, self.components[1:]))
        if all(np.isfinite(c.density_max) for c in components):
            peaks = [c.density_max for c in components]
            self.density_bound = max(peaks) if self.disjoint else sum(peaks)
        else:
            self.density_bound = None

    @property
    def m(self) -> int:
        return len(self.components)

    def weights(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.array([np.broadcast_to(p, theta.shape) for p in self._weights(theta)], dtype=float)

    def weight_derivatives(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self._weight_derivatives is not None:
            return np.array([np.broadcast_to(p, theta.shape)
                             for p in self._weight_derivatives(theta)], dtype=float)
        h = DERIVATIVE_STEP
        return (self.weights(theta + h) - self.weights(theta - h)) / (2 * h)

    def cumulative_weights(self, theta) -> np.ndarray:
        """ρ_0 = 0, ρ_i = p_1 + ... + p_i; shape (m + 1, ...)."""
        p = self.weights(theta)
        rho = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(p, axis=0)])
        rho[-1] = 1.0
        return rho

    def select_component(self, theta, xi) -> np.ndarray:
        """Index i with ρ_{i-1}(θ) ≤ ξ < ρ_i(θ)."""
        theta, xi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(xi, dtype=float))
        rho = self.cumulative_weights(theta)
        index = np.sum(xi[None, ...] >= rho[1:-1], axis=0)
        return np.minimum(index, self.m - 1)

    def component_inverse(self, index, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        index = np.broadcast_to(index, u.shape)
        out = np.empty(u.shape, dtype=float)
        for i, component in enumerate(self.components):
            mask = index == i
            if np.any(mask):
                out[mask] = component.inv_cdf(u[mask])
        return out

    def _cdf(self, theta, x):
        p = self.weights(theta)
        return sum(p[i] * c.cdf(x) for i, c in enumerate(self.components))

    def _density(self, theta, x):
        p = self.weights(theta)
        return sum(p[i] * c.density(x) for i, c in enumerate(self.components))

    def cdf_dtheta(self, theta, x):
        dp = self.weight_derivatives(theta)
        return sum(dp[i] * c.cdf(x) for i, c in enumerate(self.components))

    def density_dtheta(self, theta, x):
        dp = self.weight_derivatives(theta)
        return sum(dp[i] * c.density(x) for i, c in enumerate(self.components))

    def _inv_cdf(self, theta, u):
        theta, u = np.broadcast_arrays(theta, u)
        if self.disjoint:
            rho = self.cumulative_weights(theta)
            index = self.select_component(theta, u)
            lower = np.take_along_axis(rho, index[None, ...], axis=0)[0]
            upper = np.take_along_axis(rho, index[None, ...] + 1, axis=0)[0]
            inner = np.clip((u - lower) / (upper - lower), 0.0, np.nextafter(1.0, 0.0))
            return self.component_inverse(index, inner)
        return self._newton_inverse(theta, u)

    def _newton_inverse(self, theta, u):
        # Start below the root: every component quantile bounds it from one side.
        start = np.min([c.inv_cdf(u) for c in self.components], axis=0)
        flat_theta = np.ravel(theta).astype(float)
        flat_u = np.ravel(u).astype(float)
        x = np.array(np.ravel(np.broadcast_to(start, np.shape(u))), dtype=float)
        active = np.arange(x.size)
        for _ in range(NEWTON_MAXITER):
            residual = self._cdf(flat_theta[active], x[active]) - flat_u[active]
            open_ = np.abs(residual) > NEWTON_RESIDUAL
            active, residual = active[open_], residual[open_]
            if active.size == 0:
                break
            step = residual / np.maximum(self._density(flat_theta[active], x[active]), 1e-300)
            x[active] -= step
            active = active[np.abs(step) > NEWTON_RTOL * np.maximum(1.0, np.abs(x[active]))]
            if active.size == 0:
                break
        else:
            logger.warning(f"{self.name}: inverse CDF did not converge on {active.size} point(s)")
        return np.reshape(x, np.shape(u))

    def segment_layout(self, theta: float) -> List[Segment]:
        if not self.disjoint:
            return [Segment(SegmentKind.SMOOTH, self.support.lo, self.support.hi)]
        rho = self.cumulative_weights(theta)
        drho = np.concatenate([[0.0], np.cumsum(self.weight_derivatives(theta))])
        layout = []
        for i, component in enumerate(self.components):
            layout.append(Segment(SegmentKind.SMOOTH, component.support.lo, component.support.hi))
            if i + 1 < self.m:
                gap_right = self.components[i + 1].support.lo
                if component.support.hi < gap_right:
                    layout.append(Segment(SegmentKind.FLAT, component.support.hi, gap_right,
                                          cdf_level=float(rho[i + 1]),
                                          level_derivative=float(drho[i + 1])))
        return layout

    def __repr__(self) -> str:
        return f"MixtureFamily(name={self.name!r}, m={self.m})"


def uniform_mixture() -> MixtureFamily:
    """U[0,1] with weight θ, U[1,2] with weight 1 − θ."""
    return MixtureFamily(
        [UniformComponent(0.0, 1.0), UniformComponent(1.0, 2.0)],
        weights=lambda t: (t, 1.0 - t),
        weight_derivatives=lambda t: (np.ones_like(t), -np.ones_like(t)),
        theta_domain=Interval(0.1, 0.9),
        name="uniform-mixture",
    )


def tent_mixture(q: float = 0.5) -> MixtureFamily:
    """U[0,1], U[1,2], U[2,3] with outer weights q(1 − θ)² and qθ²."""
    return MixtureFamily(
        [UniformComponent(0.0, 1.0), UniformComponent(1.0, 2.0), UniformComponent(2.0, 3.0)],
        weights=lambda t: (q * (1 - t) ** 2, 1 - q * ((1 - t) ** 2 + t ** 2), q * t ** 2),
        weight_derivatives=lambda t: (-2 * q * (1 - t), 2 * q * (1 - 2 * t), 2 * q * t),
        theta_domain=Interval(0.05, 0.95),
        name="tent-mixture",
    )


def exponential_mixture(fast_mean: float, slow_mean: float, theta_domain: Interval) -> MixtureFamily:
    """Exp(fast_mean) with weight θ, Exp(slow_mean) with weight 1 − θ."""
    return MixtureFamily(
        [ExponentialComponent(fast_mean), ExponentialComponent(slow_mean)],
        weights=lambda t: (t, 1.0 - t),
        weight_derivatives=lambda t: (np.ones_like(t), -np.ones_like(t)),
        theta_domain=theta_domain,
        name="exponential-mixture",
    )


@dataclass(frozen=True)
class LossFn:
    """Sample loss L(x), total on the support of the family it is paired with."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    name: str = "loss"
    one_sided_derivative_bound: float = float('inf')

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(np.asarray(x, dtype=float))


def quadratic_loss(center: float) -> LossFn:
    return LossFn(lambda x: (x - center) ** 2, name=f"(x-{center})^2")


def power_loss(center: float, power: int) -> LossFn:
    return LossFn(lambda x: (x - center) ** power, name=f"(x-{center})^{power}")


def identity_loss() -> LossFn:
    return LossFn(lambda x: x, name="x", one_sided_derivative_bound=1.0)


def constant_loss(value: float = 1.0) -> LossFn:
    return LossFn(lambda x: np.full(np.shape(x), value, dtype=float), name=f"{value}",
                  one_sided_derivative_bound=0.0)


def cdf(family: ParamFamily, theta, x) -> np.ndarray:
    return family.cdf(theta, x)


def inv_cdf(family: ParamFamily, theta, u) -> np.ndarray:
    return family.inv_cdf(theta, u)


# Quadrature

def _quad(func: Callable[[float], float], lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    value, _ = integrate.quad(lambda x: float(func(x)), lo, hi,
                              epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT)
    return value


def _pieces(family: ParamFamily, theta: float, kind: SegmentKind) -> List[Segment]:
    return [s for s in family.segment_layout(theta) if s.kind is kind]


def smooth_integral(family: ParamFamily, theta: float, integrand: Callable[[float], float]) -> float:
    """∫ integrand dx over the smooth pieces of the layout at θ."""
    return sum(_quad(integrand, s.left, s.right) for s in _pieces(family, theta, SegmentKind.SMOOTH))


def loss_mean(family: ParamFamily, loss: LossFn, theta: float) -> float:
    """E[L(X(θ))] from smooth pieces plus jump atoms."""
    family.check_theta(theta)
    mean = smooth_integral(family, theta, lambda x: loss(x) * family._density(theta, x))
    mean += sum(s.jump_mass * float(loss(s.left)) for s in _pieces(family, theta, SegmentKind.JUMP))
    return mean


def loss_variance(family: ParamFamily, loss: LossFn, theta: float) -> float:
    mean = loss_mean(family, loss, theta)
    var = smooth_integral(family, theta, lambda x: (loss(x) - mean) ** 2 * family._density(theta, x))
    var += sum(s.jump_mass * (float(loss(s.left)) - mean) ** 2
               for s in _pieces(family, theta, SegmentKind.JUMP))
    return max(var, 0.0)


def objective_by_quadrature(family: ParamFamily, loss: LossFn, theta: float) -> float:
    """J(θ) = E[L(X(θ))]."""
    return loss_mean(family, loss, theta)


def _flat_level_derivative(family: ParamFamily, theta: float, index: int) -> float:
    h = DERIVATIVE_STEP
    upper = _pieces(family, theta + h, SegmentKind.FLAT)
    lower = _pieces(family, theta - h, SegmentKind.FLAT)
    return (upper[index].cdf_level - lower[index].cdf_level) / (2 * h)


def m1(family: ParamFamily, loss: LossFn, theta: float) -> float:
    """2 Σ over flats [b, c] of (L(c) − L(b))² |d/dθ F(θ, c(θ))|."""
    family.check_theta(theta)
    total = 0.0
    for index, flat in enumerate(_pieces(family, theta, SegmentKind.FLAT)):
        slope = flat.level_derivative
        if slope is None:
            slope = _flat_level_derivative(family, theta, index)
        step = float(loss(flat.right)) - float(loss(flat.left))
        total += step ** 2 * abs(slope)
    return 2.0 * total


def m2(family: ParamFamily, loss: LossFn, theta: float, density_bound: Optional[float] = None) -> float:
    """Var[L] / (2c(b − a)) · ∫|∂f/∂θ| dx for a rejection-capable family."""
    family.check_theta(theta)
    if not family.support.bounded:
        raise UnsupportedFamilyError(f"{family.name}: m2 needs bounded support")
    c = density_bound if density_bound is not None else family.density_bound
    if c is None or c <= 0:
        raise UnsupportedFamilyError(f"{family.name}: m2 needs a positive density bound")
    variation = smooth_integral(family, theta, lambda x: abs(family.density_dtheta(theta, x)))
    return loss_variance(family, loss, theta) / (2.0 * c * family.support.width) * variation


def rejection_crn_constant(family: ParamFamily, loss: LossFn, theta: float) -> float:
    """Limit of δ·Var[h] for the coupled-rejection symmetric estimator.

    Equals ½ ∫ |∂f/∂θ(x)| · E_Z[(L(x) − L(Z))²] dx with Z ~ F(θ, ·).
    """
    mean = loss_mean(family, loss, theta)
    var = loss_variance(family, loss, theta)
    weighted = smooth_integral(
        family, theta,
        lambda x: abs(family.density_dtheta(theta, x)) * ((loss(x) - mean) ** 2 + var),
    )
    return 0.5 * weighted


def _rho_derivatives(mix: MixtureFamily, theta: float) -> np.ndarray:
    return np.cumsum(mix.weight_derivatives(theta))


def m3(mix: MixtureFamily, loss: LossFn, theta: float) -> float:
    """Σ_i E[(L(F_{i+1}⁻¹(ξ)) − L(F_i⁻¹(ξ)))²] |ρ_i′(θ)| over i < m."""
    mix.check_theta(theta)
    drho = _rho_derivatives(mix, theta)
    total = 0.0
    for i in range(mix.m - 1):
        if drho[i] == 0.0:
            continue
        lower, upper = mix.components[i], mix.components[i + 1]
        moment = _quad(lambda u: (loss(upper.inv_cdf(u)) - loss(lower.inv_cdf(u))) ** 2, 0.0, 1.0)
        total += moment * abs(drho[i])
    return total


def m4(mix: MixtureFamily, loss: LossFn, theta: float) -> float:
    """Σ_i [L(F_{i+1}⁻¹(1⁻)) − L(F_i⁻¹(0⁺))]² |ρ_i′(θ)| over i < m."""
    mix.check_theta(theta)
    if not all(c.support.bounded for c in mix.components):
        raise UnsupportedFamilyError(f"{mix.name}: m4 is infinite for unbounded components")
    drho = _rho_derivatives(mix, theta)
    total = 0.0
    for i in range(mix.m - 1):
        top = float(loss(mix.components[i + 1].support.hi))
        bottom = float(loss(mix.components[i].support.lo))
        total += (top - bottom) ** 2 * abs(drho[i])
    return total


def pathwise_moment(family: ParamFamily, theta: float) -> float:
    """E[(∂X/∂θ)²] = ∫ (∂F/∂θ)² / f dx over the smooth pieces."""
    family.check_theta(theta)

    def integrand(x):
        f = family._density(theta, x)
        if f <= 0.0:
            return 0.0
        return family.cdf_dtheta(theta, x) ** 2 / f

    return smooth_integral(family, theta, integrand)


def has_bounded_crn_variance(family: ParamFamily, theta: float) -> bool:
    """True when inversion CRN differences have second moment O(δ²) at θ."""
    layout = family.segment_layout(theta)
    if any(s.kind is not SegmentKind.SMOOTH for s in layout):
        return False
    moment = pathwise_moment(family, theta)
    logger.debug(f"{family.name}: pathwise moment at θ={theta} is {moment}")
    return bool(np.isfinite(moment))

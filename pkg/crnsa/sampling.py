"""Random-variate generation by inversion, rejection and composition.

Every sampler works on a bank of stream lanes: θ may be a scalar or an
array with one entry per lane, and the result has one variate per lane.
The coupled samplers return both coordinates of a CRN pair.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .distributions import MixtureFamily, ParamFamily
from .errors import DivergenceError, EnvelopeError, ParameterError, UnsupportedFamilyError
from .prng import ReplicationStreams, UniformStream

logger = logging.getLogger(__name__)

MAX_ROUNDS = 10 ** 6
ENVELOPE_TOLERANCE = 1e-12


class CompositionMode(Enum):
    TWO_UNIFORM = "two-uniform"
    DERIVED = "derived-xi2"


@dataclass
class CoupledPair:
    """Variates at the lower and upper parameter of a finite difference."""

    x_minus: np.ndarray
    x_plus: np.ndarray
    equal: np.ndarray
    rounds: Optional[np.ndarray] = None


@dataclass
class RejectionSample:
    values: np.ndarray
    rounds: np.ndarray


@dataclass(frozen=True)
class Envelope:
    """Envelope A·g(x) for generalized rejection; g is sampled by inversion."""

    family: ParamFamily
    theta: float
    constant: float

    def density(self, x) -> np.ndarray:
        return self.constant * self.family.density(self.theta, x)

    def sample(self, u) -> np.ndarray:
        return self.family.inv_cdf(self.theta, u)


def pair_parameters(theta, delta: float, one_sided: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """(θ − δ, θ + δ), or (θ, θ + δ) for one-sided differences."""
    if delta < 0:
        raise ParameterError(f"δ must be nonnegative, got {delta}")
    theta = np.asarray(theta, dtype=float)
    if one_sided:
        return theta, theta + delta
    return theta - delta, theta + delta


def _lane_theta(theta, width: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(theta, dtype=float), (width,)).copy()


def _draw(stream: UniformStream, lanes: np.ndarray) -> np.ndarray:
    if len(lanes) == stream.lanes:
        return stream.next_uniform()
    return stream.next_uniform(lanes)


def _require_rejection(family: ParamFamily) -> None:
    if not family.rejection_capable:
        raise UnsupportedFamilyError(f"{family.name}: rejection needs bounded support and a density bound")


# Inversion

def sample_inversion(family: ParamFamily, theta, stream: UniformStream) -> np.ndarray:
    """X(θ, ξ) = F⁻¹(θ, ξ); one uniform per lane."""
    theta = family.check_theta(theta)
    return family.inv_cdf(theta, stream.next_uniform())


def couple_inversion(family: ParamFamily, theta_minus, theta_plus, stream: UniformStream) -> CoupledPair:
    theta_minus = family.check_theta(theta_minus)
    theta_plus = family.check_theta(theta_plus)
    u = stream.next_uniform()
    x_minus = family.inv_cdf(theta_minus, u)
    x_plus = family.inv_cdf(theta_plus, u)
    return CoupledPair(x_minus, x_plus, x_minus == x_plus)


def sample_inversion_coupled(family: ParamFamily, theta, delta: float, stream: UniformStream,
                             one_sided: bool = False) -> CoupledPair:
    """Both coordinates from the same uniform."""
    lo, hi = pair_parameters(theta, delta, one_sided)
    return couple_inversion(family, lo, hi, stream)


# Rejection

def rejection_loop(family: ParamFamily, theta, stream: UniformStream,
                   lanes: Optional[np.ndarray] = None,
                   max_rounds: int = MAX_ROUNDS) -> RejectionSample:
    """Plain rejection from the uniform envelope c on [a, b] for the given lanes."""
    _require_rejection(family)
    if lanes is None:
        lanes = np.arange(stream.lanes)
    lanes = np.asarray(lanes, dtype=np.intp)
    width = len(lanes)
    theta = _lane_theta(theta, width)
    a, b = family.support.lo, family.support.hi
    c = family.density_bound
    values = np.empty(width, dtype=float)
    rounds = np.zeros(width, dtype=np.int64)
    pending = np.arange(width)
    while pending.size:
        if rounds[pending[0]] >= max_rounds:
            raise DivergenceError(f"{family.name}: rejection exceeded {max_rounds} rounds")
        stream_lanes = lanes[pending]
        xi1 = a + (b - a) * _draw(stream, stream_lanes)
        xi2 = c * _draw(stream, stream_lanes)
        accept = xi2 <= family._density(theta[pending], xi1)
        rounds[pending] += 1
        values[pending[accept]] = xi1[accept]
        pending = pending[~accept]
    return RejectionSample(values, rounds)


def sample_rejection(family: ParamFamily, theta, stream: UniformStream) -> RejectionSample:
    """Accept ξ₁ when ξ₂ ≤ f(θ, ξ₁); records proposal rounds per lane."""
    family.check_theta(theta)
    return rejection_loop(family, theta, stream)


def sample_rejection_generalized(family: ParamFamily, envelope: Envelope, theta,
                                 stream: UniformStream, max_rounds: int = MAX_ROUNDS) -> RejectionSample:
    """Rejection from an envelope A·g(x) dominating f(θ, x)."""
    theta = _lane_theta(family.check_theta(theta), stream.lanes)
    values = np.empty(stream.lanes, dtype=float)
    rounds = np.zeros(stream.lanes, dtype=np.int64)
    pending = np.arange(stream.lanes)
    while pending.size:
        if rounds[pending[0]] >= max_rounds:
            raise DivergenceError(f"{family.name}: generalized rejection exceeded {max_rounds} rounds")
        xi1 = envelope.sample(_draw(stream, pending))
        ceiling = envelope.density(xi1)
        f = family._density(theta[pending], xi1)
        if np.any(f > ceiling * (1.0 + ENVELOPE_TOLERANCE)):
            worst = xi1[np.argmax(f - ceiling)]
            raise EnvelopeError(f"{family.name}: envelope below density at x={worst:.6g}")
        xi2 = ceiling * _draw(stream, pending)
        accept = xi2 <= f
        rounds[pending] += 1
        values[pending[accept]] = xi1[accept]
        pending = pending[~accept]
    return RejectionSample(values, rounds)


def couple_rejection(family: ParamFamily, theta_minus, theta_plus, stream: UniformStream,
                     retry_stream: UniformStream, max_rounds: int = MAX_ROUNDS) -> CoupledPair:
    """Coupled rejection at two parameters.

    A joint proposal (ξ₁, ξ₂) is tested at both parameters. Both accept:
    the pair is equal. One accepts: it keeps ξ₁ and the other coordinate
    is regenerated by plain rejection on ``retry_stream``. Neither: retry.
    """
    _require_rejection(family)
    width = stream.lanes
    theta_minus = _lane_theta(family.check_theta(theta_minus), width)
    theta_plus = _lane_theta(family.check_theta(theta_plus), width)
    a, b = family.support.lo, family.support.hi
    c = family.density_bound
    x_minus = np.empty(width, dtype=float)
    x_plus = np.empty(width, dtype=float)
    equal = np.zeros(width, dtype=bool)
    rounds = np.zeros(width, dtype=np.int64)
    regen_minus = []
    regen_plus = []
    pending = np.arange(width)
    while pending.size:
        if rounds[pending[0]] >= max_rounds:
            raise DivergenceError(f"{family.name}: coupled rejection exceeded {max_rounds} rounds")
        xi1 = a + (b - a) * _draw(stream, pending)
        xi2 = c * _draw(stream, pending)
        accept_minus = xi2 <= family._density(theta_minus[pending], xi1)
        accept_plus = xi2 <= family._density(theta_plus[pending], xi1)
        rounds[pending] += 1

        both = accept_minus & accept_plus
        x_minus[pending[both]] = xi1[both]
        x_plus[pending[both]] = xi1[both]
        equal[pending[both]] = True

        only_minus = accept_minus & ~accept_plus
        x_minus[pending[only_minus]] = xi1[only_minus]
        regen_plus.append(pending[only_minus])

        only_plus = accept_plus & ~accept_minus
        x_plus[pending[only_plus]] = xi1[only_plus]
        regen_minus.append(pending[only_plus])

        pending = pending[~(accept_minus | accept_plus)]

    for lanes, thetas, target in ((np.concatenate(regen_plus or [np.empty(0, np.intp)]), theta_plus, x_plus),
                                  (np.concatenate(regen_minus or [np.empty(0, np.intp)]), theta_minus, x_minus)):
        if lanes.size:
            lanes = np.sort(lanes)
            retry = rejection_loop(family, thetas[lanes], retry_stream, lanes=lanes, max_rounds=max_rounds)
            target[lanes] = retry.values
            rounds[lanes] += retry.rounds
    return CoupledPair(x_minus, x_plus, equal, rounds)


def sample_rejection_coupled(family: ParamFamily, theta, delta: float, streams: ReplicationStreams,
                             one_sided: bool = False) -> CoupledPair:
    """Coupled rejection pair; regeneration draws come from the retry substream."""
    lo, hi = pair_parameters(theta, delta, one_sided)
    return couple_rejection(family, lo, hi, streams.crn, streams.retry)


# Composition

def _require_mixture(family: ParamFamily) -> MixtureFamily:
    if not isinstance(family, MixtureFamily):
        raise UnsupportedFamilyError(f"{family.name}: composition needs a mixture family")
    return family


def composition_select(mix: MixtureFamily, theta, xi1) -> Tuple[np.ndarray, np.ndarray]:
    """Component index for ξ₁ and the derived second uniform (ξ₁ − ρ_{i−1}) / p_i."""
    theta, xi1 = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(xi1, dtype=float))
    index = mix.select_component(theta, xi1)
    rho = mix.cumulative_weights(theta)
    lower = np.take_along_axis(rho, index[None, ...], axis=0)[0]
    upper = np.take_along_axis(rho, index[None, ...] + 1, axis=0)[0]
    derived = np.clip((xi1 - lower) / (upper - lower), 0.0, np.nextafter(1.0, 0.0))
    return index, derived


def _compose(mix: MixtureFamily, theta, xi1, xi2, mode: CompositionMode) -> np.ndarray:
    index, derived = composition_select(mix, theta, xi1)
    second = derived if mode is CompositionMode.DERIVED else xi2
    return mix.component_inverse(index, second)


def sample_composition(mix: ParamFamily, theta, stream: UniformStream,
                       mode: CompositionMode = CompositionMode.TWO_UNIFORM) -> np.ndarray:
    mix = _require_mixture(mix)
    theta = mix.check_theta(theta)
    xi1 = stream.next_uniform()
    xi2 = stream.next_uniform() if mode is CompositionMode.TWO_UNIFORM else None
    return _compose(mix, theta, xi1, xi2, mode)


def couple_composition(mix: ParamFamily, theta_minus, theta_plus, stream: UniformStream,
                       mode: CompositionMode = CompositionMode.TWO_UNIFORM) -> CoupledPair:
    mix = _require_mixture(mix)
    theta_minus = mix.check_theta(theta_minus)
    theta_plus = mix.check_theta(theta_plus)
    xi1 = stream.next_uniform()
    xi2 = stream.next_uniform() if mode is CompositionMode.TWO_UNIFORM else None
    x_minus = _compose(mix, theta_minus, xi1, xi2, mode)
    x_plus = _compose(mix, theta_plus, xi1, xi2, mode)
    return CoupledPair(x_minus, x_plus, x_minus == x_plus)


def sample_composition_coupled(mix: ParamFamily, theta, delta: float, stream: UniformStream,
                               mode: CompositionMode = CompositionMode.TWO_UNIFORM,
                               one_sided: bool = False) -> CoupledPair:
    """Shared (ξ₁, ξ₂), or shared ξ₁ with ξ₂ derived per parameter."""
    lo, hi = pair_parameters(theta, delta, one_sided)
    return couple_composition(mix, lo, hi, stream, mode)

"""Tests for crnsa.sampling module."""

import numpy as np
import pytest
from scipy import stats

from crnsa.distributions import NormalLocation, TriangularMode, tent_mixture, uniform_mixture
from crnsa.errors import DomainError, EnvelopeError, ParameterError, UnsupportedFamilyError
from crnsa.prng import ReplicationStreams, UniformStream
from crnsa.sampling import (
    CompositionMode,
    Envelope,
    composition_select,
    couple_rejection,
    pair_parameters,
    sample_composition,
    sample_composition_coupled,
    sample_inversion,
    sample_inversion_coupled,
    sample_rejection,
    sample_rejection_coupled,
    sample_rejection_generalized,
)

LANES = 20_000


def bank(seed: int = 0, lanes: int = LANES) -> UniformStream:
    return UniformStream.for_replications(seed, np.arange(lanes), 0)


def ks_pvalue(family, theta, values) -> float:
    return stats.kstest(values, lambda x: family.cdf(theta, x)).pvalue


class TestPairParameters:
    """Test the finite-difference parameter pair."""

    def test_symmetric_and_one_sided(self):
        """Test (θ − δ, θ + δ) and (θ, θ + δ)."""
        assert tuple(map(float, pair_parameters(0.5, 0.1))) == pytest.approx((0.4, 0.6))
        assert tuple(map(float, pair_parameters(0.5, 0.1, one_sided=True))) == pytest.approx((0.5, 0.6))

    def test_negative_delta(self):
        """Test that δ < 0 is rejected."""
        with pytest.raises(ParameterError):
            pair_parameters(0.5, -0.1)


class TestInversion:
    """Test inversion sampling."""

    def test_marginal(self):
        """Test that inversion draws follow the triangular CDF."""
        x = sample_inversion(TriangularMode(), 0.6, bank(1))
        assert ks_pvalue(TriangularMode(), 0.6, x) > 0.01

    def test_one_uniform_per_draw(self):
        """Test that one variate consumes exactly one uniform per lane."""
        stream = bank(lanes=4)
        sample_inversion(TriangularMode(), 0.6, stream)
        assert list(stream.draw_count) == [1, 1, 1, 1]

    def test_location_pair_shares_noise(self):
        """Test that a normal pair is (θ − δ + z, θ + δ + z)."""
        pair = sample_inversion_coupled(NormalLocation(), 0.0, 0.25, bank(2, 100))
        assert np.allclose(pair.x_plus - pair.x_minus, 0.5)

    def test_zero_delta_is_equal(self):
        """Test that δ = 0 gives identical coordinates."""
        pair = sample_inversion_coupled(TriangularMode(), 0.5, 0.0, bank(3, 100))
        assert pair.equal.all()

    def test_pair_outside_domain(self):
        """Test that θ ± δ outside the family domain is rejected."""
        with pytest.raises(DomainError):
            sample_inversion_coupled(TriangularMode(), 0.95, 0.1, bank(lanes=4))


class TestRejection:
    """Test plain, generalized and coupled rejection."""

    def test_marginal_and_rounds(self):
        """Test the triangular marginal and E[rounds] = c(b − a) = 2."""
        sample = sample_rejection(TriangularMode(), 0.5, bank(4))
        assert ks_pvalue(TriangularMode(), 0.5, sample.values) > 0.01
        assert sample.rounds.min() >= 1
        assert sample.rounds.mean() == pytest.approx(2.0, rel=0.05)

    def test_unbounded_family_refused(self):
        """Test that rejection needs bounded support."""
        with pytest.raises(UnsupportedFamilyError):
            sample_rejection(NormalLocation(), 0.0, bank(lanes=4))

    def test_generalized_with_tent_envelope(self):
        """Test generalized rejection from a triangular envelope with mode ½."""
        family = TriangularMode()
        envelope = Envelope(family, 0.5, 1.25)
        sample = sample_rejection_generalized(family, envelope, 0.6, bank(5))
        assert ks_pvalue(family, 0.6, sample.values) > 0.01
        assert sample.rounds.mean() == pytest.approx(1.25, rel=0.05)

    def test_generalized_detects_low_envelope(self):
        """Test that an envelope below the density raises."""
        family = TriangularMode()
        with pytest.raises(EnvelopeError):
            sample_rejection_generalized(family, Envelope(family, 0.5, 1.0), 0.6, bank(6, 2000))

    def test_coupled_marginals(self):
        """Test that each coordinate of a coupled pair has its own marginal."""
        streams = ReplicationStreams.derive(7, np.arange(LANES))
        pair = sample_rejection_coupled(TriangularMode(), 0.5, 0.05, streams)
        assert ks_pvalue(TriangularMode(), 0.45, pair.x_minus) > 0.01
        assert ks_pvalue(TriangularMode(), 0.55, pair.x_plus) > 0.01
        assert np.array_equal(pair.equal, pair.x_minus == pair.x_plus)

    def test_coupled_zero_delta(self):
        """Test that δ = 0 always gives an equal pair."""
        streams = ReplicationStreams.derive(8, np.arange(500))
        pair = sample_rejection_coupled(TriangularMode(), 0.5, 0.0, streams)
        assert pair.equal.all()

    def test_mismatch_proportional_to_delta(self):
        """Test that P(x₋ ≠ x₊) / δ is roughly constant in δ."""
        ratios = []
        for delta in (0.1, 0.05, 0.025):
            streams = ReplicationStreams.derive(9, np.arange(LANES))
            pair = couple_rejection(TriangularMode(), 0.5 - delta, 0.5 + delta, streams.crn, streams.retry)
            ratios.append(np.mean(~pair.equal) / delta)
        assert max(ratios) / min(ratios) < 1.5


class TestComposition:
    """Test composition sampling."""

    def test_requires_mixture(self):
        """Test that composition refuses non-mixture families."""
        with pytest.raises(UnsupportedFamilyError):
            sample_composition(TriangularMode(), 0.5, bank(lanes=4))

    def test_marginal(self):
        """Test composition draws against the tent mixture CDF."""
        mix = tent_mixture()
        for mode in CompositionMode:
            x = sample_composition(mix, 0.3, bank(10), mode)
            assert ks_pvalue(mix, 0.3, x) > 0.01

    def test_component_switch_probability(self):
        """Test that components differ iff ξ₁ ∈ [0.4, 0.6) at θ = ½, δ = 0.1."""
        pair = sample_composition_coupled(uniform_mixture(), 0.5, 0.1, bank(11))
        assert np.mean(~pair.equal) == pytest.approx(0.2, abs=0.015)

    def test_zero_delta_equal_in_both_modes(self):
        """Test that δ = 0 gives equal pairs for both second-uniform conventions."""
        for mode in CompositionMode:
            pair = sample_composition_coupled(tent_mixture(), 0.5, 0.0, bank(12, 200), mode)
            assert pair.equal.all()

    def test_derived_uniform_is_conditionally_uniform(self):
        """Test that the derived second uniform is uniform given the component."""
        mix = tent_mixture()
        xi1 = bank(13).next_uniform()
        index, derived = composition_select(mix, 0.4, xi1)
        for i in range(mix.m):
            assert stats.kstest(derived[index == i], "uniform").pvalue > 0.01

    def test_derived_mode_uses_one_uniform(self):
        """Test that the derived mode draws a single uniform per variate."""
        stream = bank(lanes=4)
        sample_composition(tent_mixture(), 0.5, stream, CompositionMode.DERIVED)
        assert list(stream.draw_count) == [1, 1, 1, 1]

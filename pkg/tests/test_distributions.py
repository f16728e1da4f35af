"""Tests for crnsa.distributions module."""

import numpy as np
import pytest

from crnsa.distributions import (
    AtomFlat,
    ExponentialScale,
    Interval,
    NormalLocation,
    SegmentKind,
    TriangularMode,
    exponential_mixture,
    has_bounded_crn_variance,
    identity_loss,
    loss_mean,
    m1,
    m2,
    m3,
    m4,
    objective_by_quadrature,
    pathwise_moment,
    quadratic_loss,
    rejection_crn_constant,
    tent_mixture,
    uniform_mixture,
)
from crnsa.errors import DomainError, UnsupportedFamilyError


class TestInterval:
    """Test the Interval value type."""

    def test_empty_interval_rejected(self):
        """Test that lo must be below hi."""
        with pytest.raises(ValueError):
            Interval(1.0, 1.0)

    def test_contains_and_clip(self):
        """Test membership with slack and clipping."""
        interval = Interval(0.2, 0.8)
        assert interval.contains([0.2, 0.5, 0.8])
        assert not interval.contains(0.81)
        assert interval.contains(0.8 + 1e-13, slack=1e-12)
        assert interval.clip(1.5) == 0.8
        assert interval.midpoint == pytest.approx(0.5)

    def test_intersect(self):
        """Test intersection of overlapping intervals."""
        assert Interval(0.0, 1.0).intersect(Interval(0.5, 2.0)) == Interval(0.5, 1.0)


class TestTriangularMode:
    """Test the triangular family."""

    def test_inverse_cdf_lower_branch(self):
        """Test x = √(uθ) below the mode."""
        assert TriangularMode().inv_cdf(0.6, 0.36) == pytest.approx(np.sqrt(0.36 * 0.6))

    def test_inverse_is_cdf_inverse(self):
        """Test F(θ, F⁻¹(θ, u)) = u on a grid."""
        family = TriangularMode()
        u = np.linspace(0.0, 0.999, 101)
        assert np.allclose(family.cdf(0.3, family.inv_cdf(0.3, u)), u)

    def test_domain_errors(self):
        """Test θ outside the domain and u = 1 are rejected."""
        family = TriangularMode()
        with pytest.raises(DomainError):
            family.cdf(1.2, 0.5)
        with pytest.raises(DomainError):
            family.inv_cdf(0.5, 1.0)

    def test_analytic_derivatives_match_differences(self):
        """Test ∂F/∂θ and ∂f/∂θ against central differences away from the mode."""
        family = TriangularMode()
        x = np.array([0.1, 0.3, 0.7, 0.9])
        h = 1e-6
        numeric = (family._cdf(0.5 + h, x) - family._cdf(0.5 - h, x)) / (2 * h)
        assert np.allclose(family.cdf_dtheta(0.5, x), numeric, atol=1e-6)
        numeric = (family._density(0.5 + h, x) - family._density(0.5 - h, x)) / (2 * h)
        assert np.allclose(family.density_dtheta(0.5, x), numeric, atol=1e-5)

    def test_pathwise_moment(self):
        """Test E[(∂X/∂θ)²] = 1/8 for every mode."""
        for theta in (0.3, 0.6):
            assert pathwise_moment(TriangularMode(), theta) == pytest.approx(1 / 8, rel=1e-6)

    def test_bounded_crn_variance(self):
        """Test that the triangular family has no flats."""
        assert has_bounded_crn_variance(TriangularMode(), 0.6)

    def test_objective_by_quadrature(self):
        """Test J(0.6) = 0.0425 for L(x) = (x − 0.55)²."""
        assert objective_by_quadrature(TriangularMode(), quadratic_loss(0.55), 0.6) == pytest.approx(0.0425)

    def test_rejection_functionals_positive(self):
        """Test that the rejection constants are finite and positive."""
        family, loss = TriangularMode(), quadratic_loss(0.55)
        assert 0 < m2(family, loss, 0.5) < np.inf
        assert 0 < rejection_crn_constant(family, loss, 0.5) < np.inf


class TestAtomFlat:
    """Test the AtomFlat family and its flat functional."""

    def test_layout_has_flat(self):
        """Test that the flat sits on [θ, 1] at level θ/2."""
        layout = AtomFlat().segment_layout(0.4)
        flats = [s for s in layout if s.kind is SegmentKind.FLAT]
        assert len(flats) == 1
        assert (flats[0].left, flats[0].right) == (0.4, 1.0)
        assert flats[0].cdf_level == pytest.approx(0.2)

    def test_inverse_skips_flat(self):
        """Test that F⁻¹ jumps from θ to 1 across the flat level."""
        family = AtomFlat()
        assert family.inv_cdf(0.4, 0.19) == pytest.approx(0.38)
        assert family.inv_cdf(0.4, 0.2) == pytest.approx(1.0)

    def test_m1_closed_form(self):
        """Test M₁(θ) = (1 − θ)² for L(x) = x."""
        for theta in (0.3, 0.5, 0.7):
            assert m1(AtomFlat(), identity_loss(), theta) == pytest.approx((1 - theta) ** 2)

    def test_unbounded_crn_variance(self):
        """Test that the flat makes inversion CRN variance unbounded."""
        assert not has_bounded_crn_variance(AtomFlat(), 0.5)


class TestContinuousFamilies:
    """Test the normal location and exponential scale families."""

    def test_normal_inverse(self):
        """Test the median of the location family."""
        assert NormalLocation().inv_cdf(1.5, 0.5) == pytest.approx(1.5)

    def test_exponential_derivative(self):
        """Test ∂F/∂θ of the exponential scale family."""
        family = ExponentialScale()
        x = np.array([0.5, 1.0, 3.0])
        h = 1e-6
        numeric = (family._cdf(2.0 + h, x) - family._cdf(2.0 - h, x)) / (2 * h)
        assert np.allclose(family.cdf_dtheta(2.0, x), numeric, atol=1e-7)

    def test_unbounded_support_not_rejection_capable(self):
        """Test that m2 refuses unbounded families."""
        assert not NormalLocation().rejection_capable
        with pytest.raises(UnsupportedFamilyError):
            m2(NormalLocation(), identity_loss(), 0.0)


class TestMixtures:
    """Test mixture families."""

    def test_uniform_mixture_functionals(self):
        """Test M₃ = 1 and M₄ = 4 for the U[0,1]/U[1,2] mixture with L(x) = x."""
        mix = uniform_mixture()
        assert m3(mix, identity_loss(), 0.5) == pytest.approx(1.0)
        assert m4(mix, identity_loss(), 0.5) == pytest.approx(4.0)

    def test_uniform_mixture_mean(self):
        """Test E[X] = 1.5 − θ."""
        assert loss_mean(uniform_mixture(), identity_loss(), 0.3) == pytest.approx(1.2)

    def test_tent_weights(self):
        """Test that the tent weights sum to one and ρ ends at one."""
        mix = tent_mixture()
        theta = np.array([0.1, 0.5, 0.9])
        assert np.allclose(mix.weights(theta).sum(axis=0), 1.0)
        rho = mix.cumulative_weights(theta)
        assert np.allclose(rho[0], 0.0) and np.allclose(rho[-1], 1.0)

    def test_select_component(self):
        """Test component selection against ρ(θ)."""
        mix = uniform_mixture()
        assert list(mix.select_component(0.5, np.array([0.1, 0.49, 0.5, 0.9]))) == [0, 0, 1, 1]

    def test_overlapping_mixture_inverse(self):
        """Test the Newton inverse of an overlapping exponential mixture."""
        mix = exponential_mixture(1.0, 2.4, Interval(0.05, 0.95))
        assert not mix.disjoint
        u = np.linspace(0.01, 0.99, 25)
        assert np.allclose(mix.cdf(0.6, mix.inv_cdf(0.6, u)), u, atol=1e-10)

    def test_newton_inverse_in_the_tail(self, caplog):
        """Test that upper-tail levels invert to machine precision without a convergence warning."""
        mix = exponential_mixture(1.0, 2.4, Interval(0.05, 0.95))
        rng = np.random.default_rng(5)
        theta = rng.uniform(0.05, 0.95, 20_000)
        u = np.concatenate([rng.uniform(0.0, 1.0, 10_000), 1.0 - rng.uniform(1e-12, 1e-6, 10_000)])
        with caplog.at_level("WARNING", logger="crnsa.distributions"):
            x = mix.inv_cdf(theta, u)
        assert np.max(np.abs(mix.cdf(theta, x) - u)) < 1e-12
        assert not caplog.records

    def test_m4_requires_bounded_components(self):
        """Test that M₄ is refused for exponential components."""
        mix = exponential_mixture(1.0, 2.4, Interval(0.05, 0.95))
        with pytest.raises(UnsupportedFamilyError):
            m4(mix, identity_loss(), 0.5)


class TestGeneralizedInverse:
    """Test F(θ, F⁻¹(θ, u)) ≥ u on a dense grid."""

    @pytest.mark.parametrize("family,theta", [
        (TriangularMode(), 0.6),
        (AtomFlat(), 0.4),
        (uniform_mixture(), 0.3),
        (tent_mixture(), 0.5),
        (exponential_mixture(1.0, 2.4, Interval(0.05, 0.95)), 0.6),
    ])
    def test_inverse_reaches_level(self, family, theta):
        """Test the inverse on a 2000-point grid plus the flat and component-boundary levels."""
        levels = [0.5 * theta]
        if hasattr(family, "cumulative_weights"):
            levels.extend(np.ravel(family.cumulative_weights(theta))[1:-1])
        u = np.concatenate([np.linspace(0.0, 1.0, 2001)[:-1], levels])
        x = family.inv_cdf(np.full_like(u, theta), u)
        assert np.all(family.cdf(np.full_like(u, theta), x) >= u - 1e-12)

    def test_atom_level_maps_past_flat(self):
        """Test that levels at and above the flat jump to the far end of the flat."""
        family = AtomFlat()
        x = family.inv_cdf(np.full(3, 0.4), np.array([0.2, 0.2 + 1e-9, 0.6]))
        assert np.all(x >= 1.0)

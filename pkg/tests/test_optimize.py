"""Tests for crnsa.optimize module."""

import numpy as np
import pytest

from crnsa.distributions import Interval, TriangularMode, quadratic_loss
from crnsa.errors import ParameterError, UnsupportedFamilyError
from crnsa.gradest import EstimatorConfig, Scheme
from crnsa.optimize import (
    GainSchedule,
    KwState,
    MdBoundConstants,
    MdConfig,
    MdState,
    best_rate_kw,
    best_rate_md,
    checkpoint_grid,
    corollary_bound,
    eval_md_bound,
    feasible_interval,
    kw_run,
    kw_step,
    md_run,
    md_step,
    measure_md_constants,
    predict_md_sigma,
    predict_sigma,
    rm_run,
)
from crnsa.prng import ReplicationStreams
from crnsa.problems import FamilyProblem

SYM_CRN = EstimatorConfig.from_codes("sym", "crn", "inv")


def lanes(count: int, seed: int = 0) -> ReplicationStreams:
    return ReplicationStreams.derive(seed, np.arange(count))


class TestGainSchedule:
    """Test step and difference sequences."""

    def test_values(self):
        """Test a_n = a n^−α and δ_n = d n^−η with a cap."""
        schedule = GainSchedule(a=6, alpha=1, d=1, eta=0.5, delta_max=0.35)
        assert schedule.step(3) == pytest.approx(2.0)
        assert schedule.delta(4) == pytest.approx(0.35)
        assert schedule.delta(16) == pytest.approx(0.25)

    def test_capped_keeps_tighter(self):
        """Test that capping keeps the smaller of two caps."""
        schedule = GainSchedule(a=1, alpha=1, delta_max=0.2)
        assert schedule.capped(0.3).delta_max == 0.2
        assert schedule.capped(0.1).delta_max == 0.1
        assert schedule.capped(None) is schedule

    @pytest.mark.parametrize("kwargs", [
        {"a": 0, "alpha": 1},
        {"a": 1, "alpha": 1.5},
        {"a": 1, "alpha": 1, "eta": 0},
        {"a": 1, "alpha": 1, "d": -1},
    ])
    def test_invalid(self, kwargs):
        """Test that nonpositive constants and α outside (0, 1] are rejected."""
        with pytest.raises(ParameterError):
            GainSchedule(**kwargs)


class TestCheckpoints:
    """Test the geometric checkpoint grid."""

    def test_grid(self):
        """Test that the grid is increasing and ends at n_total."""
        grid = checkpoint_grid(1000, per_decade=10)
        assert grid[0] == 1 and grid[-1] == 1000
        assert np.all(np.diff(grid) > 0)
        assert 10 in grid and 100 in grid

    def test_start(self):
        """Test a grid starting past the first iteration."""
        grid = checkpoint_grid(5000, start=50)
        assert grid[0] >= 50 and grid[-1] == 5000

    def test_invalid(self):
        """Test that stop < start is rejected."""
        with pytest.raises(ParameterError):
            checkpoint_grid(5, start=10)


class TestFeasibleInterval:
    """Test the clamp interval."""

    def test_symmetric_inset(self, triangular):
        """Test Θ ∩ [0.01 + δ, 0.99 − δ] for the triangular family."""
        interval = feasible_interval(triangular, 0.35)
        assert interval.lo == pytest.approx(0.36)
        assert interval.hi == pytest.approx(0.64)

    def test_one_sided_inset(self, triangular):
        """Test that one-sided differences only inset the upper end."""
        interval = feasible_interval(triangular, 0.1, Scheme.ONE_SIDED)
        assert interval.lo == pytest.approx(0.2)
        assert interval.hi == pytest.approx(0.89)

    def test_empty(self, triangular):
        """Test that a δ wider than the domain is rejected."""
        with pytest.raises(ParameterError):
            feasible_interval(triangular, 0.6)


class TestKw:
    """Test the Kiefer-Wolfowitz iteration."""

    def test_step_clamps(self):
        """Test that a step past the interval is clamped and flagged."""
        state, clamped = kw_step(KwState(np.array([0.5, 0.5])), np.array([1.0, -10.0]), 0.1, Interval(0.2, 0.8))
        assert np.allclose(state.theta, [0.4, 0.8])
        assert list(clamped) == [False, True]
        assert state.n == 2

    def test_zero_noise_converges(self, triangular_exact):
        """Test deterministic descent to θ* = 0.6 with a = 6, α = 1, η = ½."""
        schedule = GainSchedule(a=6, alpha=1, d=1, eta=0.5)
        trajectory = kw_run(triangular_exact, SYM_CRN, schedule, 10_000, lanes(2))
        assert np.all(np.abs(trajectory.final_theta - 0.6) < 1e-3)
        assert trajectory.checkpoints[-1] == 10_000

    def test_zero_noise_exact_after_two_steps(self, triangular_exact):
        """Test that a = 6 on a curvature-⅓ quadratic reaches θ* in two steps."""
        schedule = GainSchedule(a=6, alpha=1, d=1, eta=0.5)
        trajectory = kw_run(triangular_exact, SYM_CRN, schedule, 2, lanes(1), checkpoints=[1, 2])
        assert trajectory.thetas[-1, 0] == pytest.approx(0.6)

    def test_tiny_gain_stays_put(self, triangular):
        """Test that a negligible gain leaves θ at its start."""
        schedule = GainSchedule(a=1e-9, alpha=1, d=1, eta=0.5)
        trajectory = kw_run(triangular, SYM_CRN, schedule, 50, lanes(4), theta0=0.5)
        assert np.allclose(trajectory.final_theta, 0.5, atol=1e-6)

    def test_iterates_stay_feasible(self, triangular):
        """Test that every recorded iterate lies inside Θ."""
        config = EstimatorConfig.from_codes("sym", "ind", "inv")
        schedule = GainSchedule(a=6, alpha=1, d=1, eta=1 / 6)
        trajectory = kw_run(triangular, config, schedule, 200, lanes(16))
        assert np.all(trajectory.thetas >= 0.2) and np.all(trajectory.thetas <= 0.95)
        assert trajectory.clamp_counts.shape == (16,)

    def test_non_finite_estimate_freezes_lane(self, triangular, monkeypatch):
        """Test that a lane with a non-finite estimate is frozen and reported."""
        import crnsa.optimize as optimize

        def broken(problem, theta, delta, config, streams):
            h = np.zeros_like(np.asarray(theta, dtype=float))
            h[1] = np.nan
            return h

        monkeypatch.setattr(optimize, "estimate_h", broken)
        trajectory = kw_run(triangular, SYM_CRN, GainSchedule(a=1, alpha=1), 5, lanes(3))
        assert trajectory.aborted == {1: 1}
        assert list(trajectory.valid_lanes) == [True, False, True]

    def test_bad_checkpoints(self, triangular):
        """Test that checkpoints beyond n_total are rejected."""
        with pytest.raises(ParameterError):
            kw_run(triangular, SYM_CRN, GainSchedule(a=1, alpha=1), 10, lanes(1), checkpoints=[5, 20])


class TestRm:
    """Test the Robbins-Monro baseline."""

    def test_fixed_point(self, triangular):
        """Test that θ₀ = θ* without noise stays at θ*."""
        trajectory = rm_run(triangular, GainSchedule(a=6, alpha=1), 100, lanes(3), theta0=0.6, noise_scale=0.0)
        assert np.allclose(trajectory.final_theta, 0.6)

    def test_noiseless_monotone(self, triangular):
        """Test that |θ_n − θ*| decreases without noise and a small gain."""
        trajectory = rm_run(triangular, GainSchedule(a=0.5, alpha=1), 100, lanes(1), theta0=0.3,
                            noise_scale=0.0, checkpoints=np.arange(1, 101))
        errors = np.abs(trajectory.thetas[:, 0] - 0.6)
        assert np.all(np.diff(errors) <= 0)

    def test_needs_gradient(self):
        """Test that RM refuses problems without a closed-form J′."""
        problem = FamilyProblem("no-truth", TriangularMode(), quadratic_loss(0.5), Interval(0.2, 0.8))
        with pytest.raises(UnsupportedFamilyError):
            rm_run(problem, GainSchedule(a=1, alpha=1), 10, lanes(1))

    @pytest.mark.parametrize("checkpoints", [[5, 3], [0, 4], [5, 20], [4, 4], []])
    def test_bad_checkpoints(self, triangular, checkpoints):
        """Test that unsorted, empty or out-of-range checkpoints are rejected."""
        with pytest.raises(ParameterError):
            rm_run(triangular, GainSchedule(a=1, alpha=1), 10, lanes(1), checkpoints=checkpoints)


class TestMirrorDescent:
    """Test mirror descent steps and runs."""

    def test_config_validation(self):
        """Test κ and radius checks."""
        with pytest.raises(ParameterError):
            MdConfig(Interval(0.2, 0.8), kappa=0)
        with pytest.raises(ParameterError):
            MdConfig(Interval(0.2, 0.8), radius=0.1)
        assert MdConfig(Interval(0.2, 0.8)).r == pytest.approx(0.6)

    def test_step_matches_kw_when_projection_inactive(self):
        """Test that a wide domain makes the step θ − a h."""
        config = MdConfig(Interval(-1e6, 1e6))
        state = md_step(MdState.start(np.array([0.5])), np.array([2.0]), 0.1, config)
        assert state.theta[0] == pytest.approx(0.3)

    def test_step_projects(self):
        """Test that a step beyond hi is projected to hi."""
        config = MdConfig(Interval(0.2, 0.8))
        state = md_step(MdState.start(np.array([0.8])), np.array([-1.0]), 0.5, config)
        assert state.theta[0] == 0.8

    def test_averages(self):
        """Test the uniform and step-weighted averages of the visited iterates."""
        config = MdConfig(Interval(0.0, 10.0))
        state = MdState.start(np.array([1.0]))
        state = md_step(state, np.array([-1.0]), 1.0, config)
        state = md_step(state, np.array([-1.0]), 3.0, config)
        assert state.averaged("uniform")[0] == pytest.approx(1.5)
        assert state.averaged("weighted")[0] == pytest.approx((1.0 * 1 + 2.0 * 3) / 4)

    def test_nonpositive_step(self):
        """Test that a_n ≤ 0 is rejected."""
        with pytest.raises(ParameterError):
            md_step(MdState.start(np.array([0.5])), np.array([0.0]), 0.0, MdConfig(Interval(0.0, 1.0)))

    def test_run_records_gaps(self, triangular):
        """Test that averaged iterates stay in Θ and gaps are nonnegative."""
        md = MdConfig(triangular.theta_domain, averaging="weighted")
        schedule = GainSchedule(a=1, alpha=0.5, d=1, eta=1)
        trajectory = md_run(triangular, SYM_CRN, md, schedule, 500, lanes(8))
        assert np.all(trajectory.averaged >= 0.2) and np.all(trajectory.averaged <= 0.95)
        assert np.all(trajectory.gaps >= -1e-12)
        assert trajectory.gaps.shape == trajectory.thetas.shape


class TestPredictors:
    """Test closed-form rate predictions."""

    @pytest.mark.parametrize("args,sigma", [
        ((1, 1 / 6, 2, -2), 1 / 3),
        ((1, 0.2, 2, -1), 0.4),
        ((1, 0.5, 2, 0), 0.5),
    ])
    def test_predict_sigma(self, args, sigma):
        """Test σ = ½ min{α + γη, 2βη}."""
        prediction = predict_sigma(*args)
        assert prediction.sigma == pytest.approx(sigma)
        assert prediction.converges

    def test_no_convergence(self):
        """Test the convergence flag when α + γη ≤ 0."""
        assert not predict_sigma(0.5, 0.5, 2, -2).converges

    @pytest.mark.parametrize("beta,gamma,expected", [
        (2, -2, (1 / 3, 1.0, 1 / 6)),
        (1, -1, (1 / 3, 1.0, 1 / 3)),
        (2, 0, (0.5, 1.0, 0.25)),
    ])
    def test_best_rate_kw(self, beta, gamma, expected):
        """Test (σ*, α*, η*) for the KW algorithm."""
        assert best_rate_kw(beta, gamma) == pytest.approx(expected)

    def test_best_rate_md(self):
        """Test (σ*, α*, η*) for mirror descent with bounded variance."""
        assert best_rate_md(2, 0) == pytest.approx((0.5, 0.5, 0.25))
        assert best_rate_md(2, -2) == pytest.approx((1 / 3, 2 / 3, 1 / 6))

    def test_md_variants(self):
        """Test the general and CRN forms of the MD exponent."""
        assert predict_md_sigma(0.5, 1, 2, 0, "crn").sigma == pytest.approx(0.5)
        assert predict_md_sigma(0.5, 1, 2, 0, "general").sigma == pytest.approx(0.5)
        assert predict_md_sigma(2 / 3, 1 / 6, 2, -2, "general").sigma == pytest.approx(1 / 3)
        with pytest.raises(ParameterError):
            predict_md_sigma(0.5, 1, 2, 0, "other")

    def test_invalid_inputs(self):
        """Test parameter checks."""
        with pytest.raises(ParameterError):
            predict_sigma(0, 0.5, 2, 0)
        with pytest.raises(ParameterError):
            best_rate_kw(2, 1)


class TestMdBound:
    """Test the mirror-descent upper bound."""

    constants = MdBoundConstants(r=0.75, kappa=0.5, k2=1 / 3, b=0.0, c_var=0.1, beta=2, gamma=0, c_tilde=0.2)

    def test_named_constants(self):
        """Test C₁..C₅ from the inputs."""
        c = MdBoundConstants(r=2.0, kappa=0.5, k2=1.0, b=3.0, c_var=4.0, beta=2, gamma=0, c_tilde=5.0)
        assert c.c1 == pytest.approx(2.0)
        assert c.c2 == pytest.approx(4.0)
        assert c.c2_tilde == pytest.approx(5.0)
        assert c.c3 == pytest.approx(8.0)
        assert c.c4 == pytest.approx(18.0)
        assert c.c5 == pytest.approx(6.0)

    def test_bound_decreases(self):
        """Test that the bound decays like n^−½ for a_n = n^−½, δ_n = 1/n."""
        schedule = GainSchedule(a=1, alpha=0.5, d=1, eta=1)
        values = eval_md_bound(self.constants, schedule, np.array([100, 10_000]))
        assert values[1] < values[0]
        assert values[0] / values[1] == pytest.approx(10, rel=0.1)

    def test_scalar_and_second_moment(self):
        """Test scalar input and the second-moment form."""
        schedule = GainSchedule(a=1, alpha=0.5, d=1, eta=1)
        value = eval_md_bound(self.constants, schedule, 100)
        assert isinstance(value, float)
        assert eval_md_bound(self.constants, schedule, 100, second_moment=True) > 0

    def test_corollary_dominates_direct_sum(self):
        """Test that the closed form bounds the direct sum."""
        schedule = GainSchedule(a=1, alpha=0.5, d=1, eta=1)
        for n in (10, 1000):
            assert corollary_bound(self.constants, 1.0, 1.0, n) >= eval_md_bound(self.constants, schedule, n)

    def test_measured_constants(self, triangular):
        """Test constants measured on the triangular problem with CRN inversion."""
        md = MdConfig(triangular.theta_domain)
        constants = measure_md_constants(triangular, SYM_CRN, md, reps=1000, deltas=(0.1, 0.05))
        assert (constants.beta, constants.gamma) == (2, 0)
        assert constants.b == 0.0
        assert constants.k2 == pytest.approx(1 / 3)
        assert constants.c_var > 0 and constants.c_tilde > 0

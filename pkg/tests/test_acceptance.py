"""Acceptance-scale rate runs across crnsa modules."""

import numpy as np
import pytest

from crnsa.distributions import m1, rejection_crn_constant
from crnsa.formats import render_csv
from crnsa.gradest import EstimatorConfig, sample_estimates, variance_probe
from crnsa.optimize import (
    GainSchedule,
    MdConfig,
    best_rate_md,
    checkpoint_grid,
    eval_md_bound,
    measure_md_constants,
)
from crnsa.problems import get_problem
from crnsa.prng import ReplicationStreams
from crnsa.queueing import default_queue_model, lindley_avg_system_time, lindley_recursion, queue_problem
from crnsa.rates import Algorithm, RunSpec, rmse_curve, table1_suite

pytestmark = pytest.mark.slow

N_TOTAL = 100_000


def codes(label: str) -> EstimatorConfig:
    return EstimatorConfig.from_codes(*label.split("/"))


def kw_report(problem: str, label: str, eta: float, band, a: float = 6.0, reps: int = 400):
    schedule = GainSchedule(a=a, alpha=1.0, d=1.0, eta=eta)
    return rmse_curve(get_problem(problem), RunSpec(Algorithm.KW, codes(label)), schedule, reps, N_TOTAL,
                      checkpoints=checkpoint_grid(N_TOTAL, start=1000), band=band)


class TestKwRates:
    """Test fitted KW convergence exponents."""

    @pytest.mark.parametrize("label,eta,band", [
        ("sym/crn/inv", 1 / 2, (0.42, 0.58)),
        ("sym/ind/inv", 1 / 6, (0.25, 0.41)),
        ("one/ind/inv", 1 / 4, (0.16, 0.34)),
        ("sym/crn/rej", 1 / 5, (0.31, 0.49)),
    ])
    def test_triangular(self, label, eta, band):
        """Test the triangular rate cells."""
        report = kw_report("triangular", label, eta, band)
        assert report.passed, f"σ̂={report.sigma_hat} outside {band}"

    @pytest.mark.parametrize("method", ["comp2", "compd"])
    def test_composition(self, method):
        """Test both second-uniform conventions on the tent mixture."""
        report = kw_report("mixture-tent", f"sym/crn/{method}", 1 / 5, (0.31, 0.49), a=1.0)
        assert report.passed, f"σ̂={report.sigma_hat}"

    def test_one_sided_independent_composition(self):
        """Test the one-sided independent composition cell against ¼ ± 0.09."""
        report = kw_report("mixture-tent", "one/ind/comp2", 1 / 4, (0.16, 0.34), a=1.0)
        assert report.passed, f"σ̂={report.sigma_hat}"

    def test_crn_run_reaches_minimizer(self):
        """Test that the CRN run ends within 10⁻² of θ* = 0.6."""
        report = kw_report("triangular", "sym/crn/inv", 1 / 2, (0.42, 0.58))
        assert report.values[-1] < 1e-2


class TestVarianceRegimes:
    """Test variance exponents at θ = ½ over the default δ grid."""

    @pytest.mark.parametrize("problem,label,lo,hi", [
        ("triangular", "sym/ind/inv", -2.2, -1.8),
        ("triangular", "sym/crn/inv", -0.15, 0.15),
        ("triangular", "sym/crn/rej", -1.25, -0.75),
        ("atomflat", "sym/crn/inv", -1.25, -0.75),
    ])
    def test_exponent(self, problem, label, lo, hi):
        """Test γ̂ against its band."""
        result = variance_probe(get_problem(problem), 0.5, reps=10_000, config=codes(label), seed=1)
        assert lo <= result.exponent <= hi


class TestFunctionals:
    """Test the M-functionals against simulation."""

    @pytest.mark.parametrize("theta", [0.3, 0.5, 0.7])
    def test_flat_functional(self, atomflat, theta):
        """Test E[(ΔL)²]/δ at δ = 10⁻³ against M₁(θ) = (1 − θ)²."""
        delta = 1e-3
        h = sample_estimates(atomflat, theta, delta, codes("sym/crn/inv"), 1_000_000, seed=2, threads=None)
        empirical = np.mean((2 * delta * h) ** 2) / delta
        assert empirical == pytest.approx(m1(atomflat.family, atomflat.loss, theta), rel=0.1)

    def test_rejection_functional(self, triangular):
        """Test δ·Var[h] at δ = 10⁻² against the coupled-rejection constant."""
        delta = 1e-2
        h = sample_estimates(triangular, 0.5, delta, codes("sym/crn/rej"), 400_000, seed=3, threads=None)
        expected = rejection_crn_constant(triangular.family, triangular.loss, 0.5)
        assert delta * h.var(ddof=1) == pytest.approx(expected, rel=0.15)


class TestMirrorDescentRates:
    """Test objective-gap decay of mirror descent."""

    def test_crn_gap_and_bound(self, triangular):
        """Test the CRN gap slope and that the gap stays under the bound."""
        config = codes("sym/crn/inv")
        md = MdConfig(triangular.theta_domain)
        schedule = GainSchedule(a=1.0, alpha=0.5, d=1.0, eta=1.0)
        report = rmse_curve(triangular, RunSpec(Algorithm.MD, config, md), schedule, 200, N_TOTAL,
                            band=(0.4, 0.6), band_kind="at-least")
        assert report.passed, f"σ̂={report.sigma_hat}"
        constants = measure_md_constants(triangular, config, md, reps=10_000)
        bound = eval_md_bound(constants, schedule.capped(triangular.delta_cap), report.checkpoints)
        assert np.all(report.values <= bound)

    def test_independent_gap(self, triangular):
        """Test the gap slope without CRN at the best MD schedule."""
        _, alpha, eta = best_rate_md(2, -2)
        schedule = GainSchedule(a=1.0, alpha=alpha, d=1.0, eta=eta)
        spec = RunSpec(Algorithm.MD, codes("sym/ind/inv"), MdConfig(triangular.theta_domain))
        report = rmse_curve(triangular, spec, schedule, 200, N_TOTAL, band=(0.23, 0.43), band_kind="at-least")
        assert report.passed, f"σ̂={report.sigma_hat}"


class TestQueueProperties:
    """Test the Lindley queue against closed forms."""

    def test_single_customer(self):
        """Test that one customer's system time is its service time."""
        model = default_queue_model(customers=1)
        values = lindley_avg_system_time(model, 0.6, ReplicationStreams.derive(4, np.arange(100_000)).crn)
        stderr = values.std(ddof=1) / np.sqrt(values.size)
        assert abs(values.mean() - model.mean_service(0.6)) < 3 * stderr

    def test_deterministic_queue(self):
        """Test D/D/1 system times with and without a backlog."""
        assert np.allclose(lindley_recursion(np.full((5, 1), 2.0), np.ones((5, 1)))[:, 0], 1.0)
        growing = lindley_recursion(np.full((5, 1), 2.0), np.full((5, 1), 3.0))[:, 0]
        assert np.allclose(growing, [3.0, 4.0, 5.0, 6.0, 7.0])

    def test_crn_reduces_variance(self):
        """Test Var[h] with CRN ≤ Var[h] with independent streams at θ = 0.6, δ = 0.05."""
        problem = queue_problem(cost=1.0, theta_star=0.6)
        crn = sample_estimates(problem, 0.6, 0.05, codes("sym/crn/inv"), 10_000, seed=5, threads=None)
        ind = sample_estimates(problem, 0.6, 0.05, codes("sym/ind/inv"), 10_000, seed=5, threads=None)
        assert crn.var() <= ind.var()


class TestDeterminism:
    """Test that results depend on the seed only."""

    def test_table_is_reproducible(self):
        """Test byte-identical suite CSV across repeats and thread counts."""
        first = render_csv(table1_suite(master_seed=9, reps=50, n_total=2000, threads=1))
        again = render_csv(table1_suite(master_seed=9, reps=50, n_total=2000, threads=1))
        wide = render_csv(table1_suite(master_seed=9, reps=50, n_total=2000, threads=8))
        assert first == again == wide

    def test_full_table(self):
        """Test every default cell and cross-cell check at full size."""
        report = table1_suite(master_seed=0)
        failed = [r.cell.name for r in report.cells if not r.passed] + [c.name for c in report.checks if not c.passed]
        assert report.passed, f"failed: {failed}"

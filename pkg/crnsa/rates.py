"""Replicated runs, log-log rate fits and the rate-table suite."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import FitError, ParameterError, UnsupportedFamilyError
from .gradest import EstimatorConfig, Coupling, contract_for, variance_probe, ProbeResult
from .optimize import (
    CHECKPOINTS_PER_DECADE,
    GainSchedule,
    MdConfig,
    Trajectory,
    best_rate_kw,
    checkpoint_grid,
    kw_run,
    md_run,
    predict_md_sigma,
    predict_sigma,
    rm_run,
)
from .prng import ReplicationStreams
from .problems import Problem, get_problem
from .workers import DEFAULT_BLOCK_SIZE, map_blocks, map_tasks

logger = logging.getLogger(__name__)

BURN_IN = 0.25
MIN_FIT_POINTS = 8
MIN_REPS = 50
MAX_ABORT_FRACTION = 0.01
BAND_HALF_WIDTH = 0.09
ORDERING_SLACK = 0.05


class Algorithm(Enum):
    KW = "kw"
    RM = "rm"
    MD = "md"


@dataclass(frozen=True)
class RunSpec:
    """Which iteration to replicate and with which derivative estimator."""

    algorithm: Algorithm = Algorithm.KW
    estimator: EstimatorConfig = EstimatorConfig()
    md: Optional[MdConfig] = None
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.algorithm is Algorithm.MD and self.md is None:
            raise ParameterError("mirror descent needs an MdConfig")

    @property
    def label(self) -> str:
        if self.algorithm is Algorithm.RM:
            return "rm"
        return f"{self.algorithm.value}:{self.estimator.label}"


@dataclass(frozen=True)
class LogLogFit:
    """OLS of log(value) on log(n); ``slope`` is the decay exponent (positive when decaying)."""

    slope: float
    intercept: float
    stderr: float
    r_squared: float
    points: int


def fit_loglog_slope(points, burn_in: float = BURN_IN, min_points: int = MIN_FIT_POINTS) -> LogLogFit:
    """Fit value ∝ n^(−slope) after dropping the first ``burn_in`` share of the log-n range.

    ``points`` is a sequence of (n, value) or (n, value, stderr) rows.
    """
    if not 0 <= burn_in < 1:
        raise ParameterError(f"burn-in fraction must lie in [0, 1), got {burn_in}")
    rows = np.asarray([tuple(p)[:2] for p in points], dtype=float)
    if rows.size == 0:
        raise FitError("no points to fit")
    n, value = rows[:, 0], rows[:, 1]
    if np.any(n <= 0):
        raise FitError("iteration counts must be positive")
    log_n = np.log(n)
    cutoff = log_n.min() + burn_in * (log_n.max() - log_n.min())
    keep = log_n >= cutoff - 1e-12
    if keep.sum() < min_points:
        raise FitError(f"need at least {min_points} points after burn-in, have {int(keep.sum())}")
    if np.any(value[keep] <= 0) or not np.all(np.isfinite(value[keep])):
        raise FitError("log-log fit needs positive finite values")
    result = stats.linregress(log_n[keep], np.log(value[keep]))
    return LogLogFit(-float(result.slope), float(result.intercept), float(result.stderr),
                     float(result.rvalue ** 2), int(keep.sum()))


@dataclass
class RateReport:
    """Per-checkpoint RMSE (or mean objective gap) with the fitted and predicted exponents."""

    problem: str
    label: str
    metric: str
    checkpoints: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    reps: int
    sigma_theory: Optional[float]
    fit: Optional[LogLogFit] = None
    band: Optional[Tuple[float, float]] = None
    band_kind: str = "two-sided"
    aborted: Dict[int, int] = field(default_factory=dict)
    fit_error: Optional[str] = None

    @property
    def sigma_hat(self) -> Optional[float]:
        return None if self.fit is None else self.fit.slope

    @property
    def abort_fraction(self) -> float:
        return len(self.aborted) / self.reps

    @property
    def passed(self) -> bool:
        if self.abort_fraction > MAX_ABORT_FRACTION or self.fit is None:
            return False
        if self.band is None:
            return True
        lo, hi = self.band
        if self.band_kind == "at-least":
            return self.fit.slope >= lo
        return lo <= self.fit.slope <= hi

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(int(n), float(v), float(s)) for n, v, s in zip(self.checkpoints, self.values, self.stderr)]


def _run_block(problem: Problem, spec: RunSpec, schedule: GainSchedule, n_total: int, master_seed: int,
               checkpoints: np.ndarray, theta0: Optional[float], block: np.ndarray) -> Trajectory:
    streams = ReplicationStreams.derive(master_seed, block)
    if spec.algorithm is Algorithm.KW:
        return kw_run(problem, spec.estimator, schedule, n_total, streams, checkpoints, theta0)
    if spec.algorithm is Algorithm.RM:
        return rm_run(problem, schedule, n_total, streams, checkpoints, theta0, spec.noise_scale)
    return md_run(problem, spec.estimator, spec.md, schedule, n_total, streams, checkpoints, theta0)


def theoretical_sigma(problem: Problem, spec: RunSpec, schedule: GainSchedule) -> float:
    """Predicted decay exponent of the replicated metric."""
    if spec.algorithm is Algorithm.RM:
        return 0.5 * schedule.alpha
    contract = contract_for(spec.estimator, problem)
    if spec.algorithm is Algorithm.MD:
        variant = "crn" if spec.estimator.coupling is Coupling.CRN else "general"
        return predict_md_sigma(schedule.alpha, schedule.eta, contract.beta, contract.gamma, variant).sigma
    return predict_sigma(schedule.alpha, schedule.eta, contract.beta, contract.gamma).sigma


def rmse_curve(problem: Problem, spec: RunSpec, schedule: GainSchedule, reps: int, n_total: int,
               master_seed: int = 0, checkpoints: Optional[Sequence[int]] = None,
               theta0: Optional[float] = None, band: Optional[Tuple[float, float]] = None,
               band_kind: str = "two-sided", burn_in: float = BURN_IN,
               per_decade: int = CHECKPOINTS_PER_DECADE, block_size: int = DEFAULT_BLOCK_SIZE,
               threads: Optional[int] = None) -> RateReport:
    """Replicate a run over lanes 0..reps−1 and reduce to RMSE(n) (or mean gap for MD).

    The RMSE standard error comes from the delta method on the sample
    variance of the squared errors. Aborted lanes are excluded and listed;
    more than 1% of them fails the report.
    """
    if reps < MIN_REPS:
        raise ParameterError(f"rate runs need at least {MIN_REPS} replications, got {reps}")
    metric = "gap" if spec.algorithm is Algorithm.MD else "rmse"
    if metric == "rmse":
        problem.require_theta_star()
    if checkpoints is None:
        checkpoints = checkpoint_grid(n_total, per_decade, start=max(1, n_total // 100))
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    logger.info(f"{problem.name} {spec.label}: {reps} replications to n={n_total}")

    trajectories = map_blocks(
        lambda block: _run_block(problem, spec, schedule, n_total, master_seed, checkpoints, theta0, block),
        reps, block_size, threads,
    )
    aborted: Dict[int, int] = {}
    offset = 0
    for trajectory in trajectories:
        aborted.update({offset + lane: n for lane, n in trajectory.aborted.items()})
        offset += trajectory.replications
    parts = [t.gaps if metric == "gap" else t.squared_errors for t in trajectories]
    if any(part is None for part in parts):
        raise UnsupportedFamilyError(f"problem {problem.name!r} has no ground truth for {metric}")
    samples = np.concatenate(parts, axis=1)
    valid = np.ones(reps, dtype=bool)
    valid[list(aborted)] = False
    samples = samples[:, valid]
    m = samples.shape[1]
    mean = samples.mean(axis=1)
    spread = samples.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.zeros_like(mean)
    if metric == "rmse":
        values = np.sqrt(mean)
        with np.errstate(divide='ignore', invalid='ignore'):
            stderr = np.where(values > 0, spread / (2 * values), 0.0)
    else:
        values, stderr = mean, spread
    if aborted:
        logger.warning(f"{problem.name} {spec.label}: {len(aborted)} of {reps} replications aborted")

    report = RateReport(problem.name, spec.label, metric, checkpoints, values, stderr, reps,
                        theoretical_sigma(problem, spec, schedule), band=band, band_kind=band_kind,
                        aborted=aborted)
    try:
        report.fit = fit_loglog_slope(zip(checkpoints, values), burn_in)
        logger.info(f"{problem.name} {spec.label}: σ̂={report.fit.slope:.3f} ± {report.fit.stderr:.3f}, "
                    f"σ={report.sigma_theory:.3f}")
    except FitError as e:
        report.fit_error = str(e)
        logger.warning(f"{problem.name} {spec.label}: {e}")
    return report


# Rate-table suite

@dataclass(frozen=True)
class SuiteCell:
    """One rate-table entry: a KW rate run, or a variance-exponent probe."""

    name: str
    problem: str
    estimator: EstimatorConfig
    target: float
    band: Tuple[float, float]
    kind: str = "rate"
    a: float = 6.0
    theta: Optional[float] = None


@dataclass
class CellResult:
    cell: SuiteCell
    sigma_hat: Optional[float]
    sigma_theory: float
    passed: bool
    report: Optional[RateReport] = None
    probe: Optional[ProbeResult] = None


@dataclass
class SuiteCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteReport:
    master_seed: int
    reps: int
    n_total: int
    cells: List[CellResult]
    checks: List[SuiteCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cells) and all(c.passed for c in self.checks)

    def result(self, name: str) -> CellResult:
        for result in self.cells:
            if result.cell.name == name:
                return result
        raise KeyError(name)


def _band(target: float) -> Tuple[float, float]:
    return (round(target - BAND_HALF_WIDTH, 6), round(target + BAND_HALF_WIDTH, 6))


def _cell(name: str, problem: str, codes: str, target: float, band=None, a: float = 6.0) -> SuiteCell:
    scheme, coupling, method = codes.split("/")
    config = EstimatorConfig.from_codes(scheme, coupling, method)
    return SuiteCell(name, problem, config, target, band or _band(target), a=a)


DEFAULT_CELLS: Tuple[SuiteCell, ...] = (
    _cell("inv-sym-crn", "triangular", "sym/crn/inv", 1 / 2, (0.42, 0.58)),
    _cell("inv-sym-ind", "triangular", "sym/ind/inv", 1 / 3, (0.25, 0.41)),
    _cell("inv-one-ind", "triangular", "one/ind/inv", 1 / 4, (0.16, 0.34)),
    _cell("inv-one-crn", "triangular", "one/crn/inv", 1 / 2),
    _cell("rej-sym-crn", "triangular", "sym/crn/rej", 2 / 5, (0.31, 0.49)),
    _cell("rej-one-crn", "triangular", "one/crn/rej", 1 / 3),
    _cell("rej-sym-ind", "triangular", "sym/ind/rej", 1 / 3),
    _cell("rej-one-ind", "triangular", "one/ind/rej", 1 / 4),
    _cell("comp2-sym-crn", "mixture-tent", "sym/crn/comp2", 2 / 5, (0.31, 0.49), a=1.0),
    _cell("compd-sym-crn", "mixture-tent", "sym/crn/compd", 2 / 5, (0.31, 0.49), a=1.0),
    _cell("comp2-sym-ind", "mixture-tent", "sym/ind/comp2", 1 / 3, a=1.0),
    _cell("comp2-one-crn", "mixture-tent", "one/crn/comp2", 1 / 3, a=1.0),
    _cell("comp2-one-ind", "mixture-tent", "one/ind/comp2", 1 / 4, a=1.0),
    SuiteCell("atomflat-variance", "atomflat", EstimatorConfig(), -1.0, (-1.25, -0.75),
              kind="variance", theta=0.5),
)

ORDERING_PAIRS = (
    ("inv-sym-crn", "inv-sym-ind"),
    ("inv-sym-ind", "inv-one-ind"),
)


def _run_cell(cell: SuiteCell, master_seed: int, reps: int, n_total: int) -> CellResult:
    problem = get_problem(cell.problem)
    if cell.kind == "variance":
        probe = variance_probe(problem, cell.theta, reps=max(reps, 10_000), config=cell.estimator,
                               seed=master_seed, threads=1)
        lo, hi = cell.band
        return CellResult(cell, probe.exponent, cell.target, lo <= probe.exponent <= hi, probe=probe)
    contract = contract_for(cell.estimator, problem)
    _, alpha, eta = best_rate_kw(contract.beta, contract.gamma)
    schedule = GainSchedule(a=cell.a, alpha=alpha, d=1.0, eta=eta)
    report = rmse_curve(problem, RunSpec(Algorithm.KW, cell.estimator), schedule, reps, n_total,
                        master_seed, band=cell.band, threads=1)
    return CellResult(cell, report.sigma_hat, report.sigma_theory, report.passed, report=report)


def _checks(results: List[CellResult]) -> List[SuiteCheck]:
    by_name = {r.cell.name: r for r in results}
    checks = []
    for result in results:
        if result.cell.kind != "rate" or not result.sigma_theory > 0:
            continue
        ok = result.sigma_hat is not None and result.sigma_hat > 0
        checks.append(SuiteCheck(f"converges:{result.cell.name}", ok, f"σ̂={result.sigma_hat}"))
    for better, worse in ORDERING_PAIRS:
        if better not in by_name or worse not in by_name:
            continue
        hi, lo = by_name[better].sigma_hat, by_name[worse].sigma_hat
        ok = hi is not None and lo is not None and hi >= lo - ORDERING_SLACK
        checks.append(SuiteCheck(f"ordering:{better}>={worse}", ok, f"{hi} vs {lo}"))
    return checks


def table1_suite(master_seed: int = 0, reps: int = 400, n_total: int = 100_000,
                 cells: Optional[Sequence[SuiteCell]] = None, threads: Optional[int] = None) -> SuiteReport:
    """Run every cell of the rate table and the cross-cell checks.

    Cells are independent and scheduled concurrently; each cell derives its
    streams from ``master_seed`` alone, so the report does not depend on
    scheduling.
    """
    cells = list(DEFAULT_CELLS if cells is None else cells)
    logger.info(f"Rate table: {len(cells)} cells, {reps} replications, n={n_total}")
    results = map_tasks(lambda cell: _run_cell(cell, master_seed, reps, n_total), cells, threads)
    checks = _checks(results)
    report = SuiteReport(master_seed, reps, n_total, results, checks)
    failed = [r.cell.name for r in results if not r.passed] + [c.name for c in checks if not c.passed]
    if failed:
        logger.warning(f"Rate table failures: {', '.join(failed)}")
    return report

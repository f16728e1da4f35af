import functools
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
import numpy as np
from click.core import ParameterSource

from .cache import CalibrationCache, default_cache_dir
from .config import ConfigLoader, env_seed
from .distributions import ExponentialScale, Interval, exponential_mixture
from .errors import CrnsaError
from .formats import emit_csv, render_csv, render_verdict
from .gradest import DEFAULT_DELTA_GRID, EstimatorConfig, bias_probe, variance_probe
from .optimize import (
    GainSchedule,
    MdConfig,
    best_rate_kw,
    best_rate_md,
    checkpoint_grid,
    kw_run,
    md_run,
    predict_md_sigma,
    predict_sigma,
    rm_run,
)
from .prng import ReplicationStreams
from .problems import PROBLEMS, get_problem
from .queueing import calibrate_queue, default_queue_model, lindley_avg_system_time, online_crn_transform
from .rates import Algorithm, RunSpec, rmse_curve, table1_suite
from .workers import map_blocks

logger = logging.getLogger(__name__)

NEEDS_PROBLEM = {"variance", "bias", "optimize", "rates"}
COMMAND_DEFAULTS = {
    "variance": {"reps": 10_000},
    "bias": {"reps": 10_000},
    "optimize": {"reps": 1},
}


class FloatList(click.ParamType):
    """Comma- or space-separated list of floats."""

    name = "floats"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            items = value
        else:
            items = str(value).replace(',', ' ').split()
        try:
            return tuple(float(item) for item in items)
        except ValueError:
            self.fail(f"{value!r} is not a list of numbers", param, ctx)


@dataclass
class ExperimentSpec:
    """Fully merged experiment settings: flag > config file > environment > default."""

    command: str
    problem: Optional[str] = None
    scheme: Optional[str] = None
    coupling: Optional[str] = None
    method: Optional[str] = None
    a: Optional[float] = None
    alpha: Optional[float] = None
    d: Optional[float] = None
    eta: Optional[float] = None
    delta_max: Optional[float] = None
    delta_min: Optional[float] = None
    deltas: Optional[Tuple[float, ...]] = None
    n: Optional[int] = None
    reps: Optional[int] = None
    seed: Optional[int] = None
    checkpoints_per_decade: Optional[int] = None
    threads: Optional[int] = None
    theta: Optional[float] = None
    band: Optional[Tuple[float, float]] = None
    algorithm: Optional[str] = None
    averaging: Optional[str] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    variant: Optional[str] = None
    out: Optional[Path] = None

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig.from_codes(self.scheme, self.coupling, self.method)

    def schedule(self) -> GainSchedule:
        return GainSchedule(self.a, self.alpha, self.d, self.eta, self.delta_max)

    def delta_grid(self) -> Tuple[float, ...]:
        if self.deltas:
            return self.deltas
        if self.delta_max is None and self.delta_min is None:
            return DEFAULT_DELTA_GRID
        top = self.delta_max or DEFAULT_DELTA_GRID[0]
        bottom = self.delta_min or DEFAULT_DELTA_GRID[-1]
        grid = []
        delta = top
        while delta >= bottom * (1 - 1e-12):
            grid.append(delta)
            delta /= 2
        return tuple(grid)

    def load_problem(self):
        kwargs: Dict[str, Any] = {}
        if self.problem == "gg1":
            kwargs["cache"] = CalibrationCache()
        return get_problem(self.problem, **kwargs)


def build_spec(ctx: click.Context) -> ExperimentSpec:
    """Merge command-line values with the config file and defaults, casting through the click types."""
    params = dict(ctx.params)
    config_path = params.pop('config', None)
    file_values = ConfigLoader(config_path).load_config() if config_path else {}
    defaults = ConfigLoader.default_config()
    defaults.update(COMMAND_DEFAULTS.get(ctx.info_name, {}))
    for param in ctx.command.params:
        name = param.name
        if name == 'config' or not isinstance(param, click.Option):
            continue
        if ctx.get_parameter_source(name) is ParameterSource.COMMANDLINE:
            continue
        if name in file_values:
            raw = file_values[name]
            if param.nargs > 1 and isinstance(raw, str):
                raw = raw.replace(',', ' ').split()
            params[name] = param.type_cast_value(ctx, raw)
        elif params.get(name) is None and name in defaults:
            params[name] = param.type_cast_value(ctx, defaults[name])
    ignored = set(file_values) - {p.name for p in ctx.command.params}
    if ignored:
        logger.debug(f"Config keys not used by {ctx.info_name}: {', '.join(sorted(ignored))}")
    if ctx.info_name in NEEDS_PROBLEM and not params.get('problem'):
        raise click.UsageError("Missing option '--problem'.", ctx=ctx)
    known = {f.name for f in fields(ExperimentSpec)}
    return ExperimentSpec(command=ctx.info_name, **{k: v for k, v in params.items() if k in known})


def reports_errors(f):
    """Map library errors to a red message and exit status 1."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except CrnsaError as e:
            click.secho(f"Error: {e}", fg='red', err=True)
            sys.exit(1)
        except OSError as e:
            click.secho(f"I/O error: {e}", fg='red', err=True)
            sys.exit(1)

    return wrapper


def _options(*decorators):
    def apply(f):
        for decorator in reversed(decorators):
            f = decorator(f)
        return f
    return apply


positive = click.FloatRange(min=0, min_open=True)

estimator_options = _options(
    click.option('--problem', type=click.Choice(sorted(PROBLEMS)), help='Problem from the catalog'),
    click.option('--scheme', type=click.Choice(['sym', 'one']), help='Symmetric or one-sided difference'),
    click.option('--coupling', type=click.Choice(['crn', 'ind']), help='Common or independent random numbers'),
    click.option('--method', type=click.Choice(['inv', 'rej', 'comp2', 'compd']), help='Variate generation method'),
)

schedule_options = _options(
    click.option('--a', 'a', type=positive, help='Gain constant in a_n = a n^-alpha'),
    click.option('--alpha', type=click.FloatRange(0, 1, min_open=True), help='Gain exponent'),
    click.option('--d', 'd', type=positive, help='Difference constant in δ_n = d n^-eta'),
    click.option('--eta', type=positive, help='Difference exponent'),
    click.option('--delta-max', type=positive, help='Cap on δ_n'),
)

run_options = _options(
    click.option('--n', 'n', type=click.IntRange(min=1), help='Iterations per run'),
    click.option('--reps', type=click.IntRange(min=1), help='Replications'),
    click.option('--seed', type=click.IntRange(min=0), help='Master seed (default $SA_CRN_SEED or 0)'),
    click.option('--threads', type=click.IntRange(min=1), help='Worker threads (default: all cores)'),
    click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='CSV output file'),
    click.option('--config', type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 help='Config file (.toml, .yaml or key=value lines)'),
)

probe_options = _options(
    click.option('--delta-max', type=positive, help='Top of the halving δ grid'),
    click.option('--theta', type=float, help='Parameter value (default: midpoint of Θ)'),
    click.option('--deltas', type=FloatList(), help='Explicit δ grid, e.g. 0.125,0.0625'),
    click.option('--delta-min', type=positive, help='Bottom of the halving δ grid'),
    click.option('--band', type=(float, float), help='Pass band LO HI for the fitted exponent'),
)


@click.group()
@click.version_option()
@click.option('--verbose', '-v', count=True, help='-v for progress, -vv for debug output')
def cli(verbose):
    """Stochastic approximation with common random numbers."""
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _emit(report, out: Optional[Path]) -> None:
    if out is None:
        click.echo(render_csv(report), nl=False)
    else:
        emit_csv(report, out)
        click.secho(f"Wrote {out}", fg='green', err=True)


def _band_verdict(value: Optional[float], band: Optional[Tuple[float, float]], what: str) -> None:
    if band is None:
        return
    lo, hi = band
    if value is None or not lo <= value <= hi:
        click.secho(f"FAIL: {what} {value} outside [{lo}, {hi}]", fg='red', err=True)
        sys.exit(1)
    click.secho(f"PASS: {what} {value:.4f} in [{lo}, {hi}]", fg='green', err=True)


@cli.command()
@click.option('--alpha', type=click.FloatRange(0, 1, min_open=True), help='Gain exponent')
@click.option('--eta', type=positive, help='Difference exponent')
@click.option('--beta', type=positive, required=True, help='Bias exponent')
@click.option('--gamma', type=click.FloatRange(max=0), required=True, help='Variance exponent')
@click.option('--algorithm', type=click.Choice(['kw', 'md']), default='kw')
@click.option('--variant', type=click.Choice(['general', 'crn']), default='general',
              help='Form of the MD bound')
@reports_errors
def predict(alpha, eta, beta, gamma, algorithm, variant):
    """Predicted convergence exponents."""
    if (alpha is None) != (eta is None):
        raise click.UsageError("give both --alpha and --eta, or neither")
    if alpha is not None:
        if algorithm == 'kw':
            prediction = predict_sigma(alpha, eta, beta, gamma)
        else:
            prediction = predict_md_sigma(alpha, eta, beta, gamma, variant)
        click.echo(f"σ={prediction.sigma:.12g}")
        click.echo("converges" if prediction.converges else "no convergence guaranteed")
        return
    sigma, alpha_kw, eta_kw = best_rate_kw(beta, gamma)
    click.echo(f"KW best: σ={sigma:.12g} alpha={alpha_kw:.12g} eta={eta_kw:.12g}")
    sigma, alpha_md, eta_md = best_rate_md(beta, gamma)
    click.echo(f"MD best: σ={sigma:.12g} alpha={alpha_md:.12g} eta={eta_md:.12g}")


@cli.command()
@estimator_options
@probe_options
@run_options
@click.pass_context
@reports_errors
def variance(ctx, **_):
    """Variance of the derivative estimator across a δ grid."""
    spec = build_spec(ctx)
    problem = spec.load_problem()
    theta = problem.theta0 if spec.theta is None else spec.theta
    result = variance_probe(problem, theta, spec.delta_grid(), spec.reps, spec.estimator(), spec.seed,
                            threads=spec.threads)
    _emit(result, spec.out)
    click.echo(f"variance exponent {result.fit.slope:.4f} ± {result.fit.stderr:.4f} "
               f"(R²={result.fit.r_squared:.4f})", err=True)
    _band_verdict(result.exponent, spec.band, "variance exponent")


@cli.command()
@estimator_options
@probe_options
@run_options
@click.pass_context
@reports_errors
def bias(ctx, **_):
    """Bias of the derivative estimator across a δ grid."""
    spec = build_spec(ctx)
    problem = spec.load_problem()
    theta = problem.theta0 if spec.theta is None else spec.theta
    result = bias_probe(problem, theta, spec.delta_grid(), spec.reps, spec.seed, spec.estimator(),
                        threads=spec.threads)
    _emit(result, spec.out)
    if result.below_noise_floor:
        click.echo("bias below the noise floor at every δ; no exponent fitted", err=True)
        _band_verdict(None, spec.band, "bias exponent")
        return
    click.echo(f"bias exponent {result.fit.slope:.4f} ± {result.fit.stderr:.4f}", err=True)
    _band_verdict(result.exponent, spec.band, "bias exponent")


def _run_spec(spec: ExperimentSpec, problem) -> RunSpec:
    algorithm = Algorithm(spec.algorithm)
    md = MdConfig(problem.theta_domain, averaging=spec.averaging) if algorithm is Algorithm.MD else None
    return RunSpec(algorithm, spec.estimator(), md)


algorithm_options = _options(
    click.option('--algorithm', type=click.Choice(['kw', 'md', 'rm']), default='kw'),
    click.option('--averaging', type=click.Choice(['uniform', 'weighted']), default='uniform',
                 help='Iterate averaging for mirror descent'),
)


@cli.command()
@estimator_options
@schedule_options
@algorithm_options
@click.option('--theta', type=float, help='Starting point (default: midpoint of Θ)')
@click.option('--checkpoints-per-decade', type=click.IntRange(min=1))
@run_options
@click.pass_context
@reports_errors
def optimize(ctx, **_):
    """A single run; writes the trajectory of replication 0."""
    spec = build_spec(ctx)
    problem = spec.load_problem()
    run = _run_spec(spec, problem)
    streams = ReplicationStreams.derive(spec.seed, np.arange(spec.reps))
    checkpoints = checkpoint_grid(spec.n, spec.checkpoints_per_decade)
    schedule = spec.schedule()
    if run.algorithm is Algorithm.KW:
        trajectory = kw_run(problem, run.estimator, schedule, spec.n, streams, checkpoints, spec.theta)
    elif run.algorithm is Algorithm.RM:
        trajectory = rm_run(problem, schedule, spec.n, streams, checkpoints, spec.theta)
    else:
        trajectory = md_run(problem, run.estimator, run.md, schedule, spec.n, streams, checkpoints, spec.theta)
    _emit(trajectory, spec.out)
    final = trajectory.averaged[-1] if trajectory.averaged is not None else trajectory.thetas[-1]
    click.echo(f"final θ {float(np.mean(final)):.6f} over {spec.reps} replication(s)", err=True)


@cli.command()
@estimator_options
@schedule_options
@algorithm_options
@click.option('--theta', type=float, help='Starting point (default: midpoint of Θ)')
@click.option('--band', type=(float, float), help='Pass band LO HI for the fitted slope')
@click.option('--checkpoints-per-decade', type=click.IntRange(min=1))
@run_options
@click.pass_context
@reports_errors
def rates(ctx, **_):
    """Replicated RMSE (or MD objective gap) curve and its log-log slope."""
    spec = build_spec(ctx)
    problem = spec.load_problem()
    run = _run_spec(spec, problem)
    report = rmse_curve(problem, run, spec.schedule(), spec.reps, spec.n, spec.seed, theta0=spec.theta,
                        band=spec.band, per_decade=spec.checkpoints_per_decade, threads=spec.threads)
    _emit(report, spec.out)
    click.echo(render_verdict(report), err=True, nl=False)
    if not report.passed:
        sys.exit(1)


@cli.command()
@click.option('--n', 'n', type=click.IntRange(min=1), help='Iterations per run')
@click.option('--reps', type=click.IntRange(min=1), help='Replications per cell')
@click.option('--seed', type=click.IntRange(min=0), help='Master seed (default $SA_CRN_SEED or 0)')
@click.option('--threads', type=click.IntRange(min=1), help='Worker threads (default: all cores)')
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='CSV output file')
@click.option('--config', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
@reports_errors
def table1(ctx, **_):
    """The full rate table: every estimator cell plus the cross-cell checks."""
    spec = build_spec(ctx)
    report = table1_suite(spec.seed, spec.reps, spec.n, threads=spec.threads)
    _emit(report, spec.out)
    click.echo(render_verdict(report), err=True, nl=False)
    if not report.passed:
        sys.exit(1)


@cli.group()
def queue():
    """Single-server queue utilities."""
    pass


queue_model_options = _options(
    click.option('--arrival-rate', type=positive, default=0.5, show_default=True),
    click.option('--fast-mean', type=positive, default=1.0, show_default=True),
    click.option('--slow-mean', type=positive, default=2.4, show_default=True),
    click.option('--customers', type=click.IntRange(min=1), default=100, show_default=True),
)


@queue.command('simulate')
@queue_model_options
@click.option('--theta', type=float, default=0.6, show_default=True, help='Fast-server probability')
@click.option('--reps', type=click.IntRange(min=2), default=10_000, show_default=True)
@click.option('--seed', type=click.IntRange(min=0), default=None)
@click.option('--threads', type=click.IntRange(min=1))
@reports_errors
def queue_simulate(arrival_rate, fast_mean, slow_mean, customers, theta, reps, seed, threads):
    """Mean of the average system time at θ."""
    seed = env_seed() if seed is None else seed
    model = default_queue_model(arrival_rate, fast_mean, slow_mean, customers)
    values = np.concatenate(map_blocks(
        lambda block: lindley_avg_system_time(model, theta, ReplicationStreams.derive(seed, block).crn),
        reps, threads=threads,
    ))
    stderr = values.std(ddof=1) / np.sqrt(reps)
    click.echo(f"utilization {model.utilization(theta):.4f}")
    click.echo(f"mean system time {values.mean():.6f} ± {stderr:.6f} ({reps} replications)")


@queue.command('transform')
@click.option('--theta', type=positive, required=True)
@click.option('--delta', type=click.FloatRange(min=0), required=True)
@click.option('--family', type=click.Choice(['exponential', 'mixture']), default='exponential',
              show_default=True)
@click.option('--one-sided', is_flag=True)
@click.argument('services', nargs=-1, type=click.FloatRange(min=0), required=True)
@reports_errors
def queue_transform(theta, delta, family, one_sided, services):
    """Service times at θ∓δ from those observed at θ."""
    if family == 'exponential':
        service_family = ExponentialScale()
    else:
        service_family = exponential_mixture(1.0, 2.4, Interval(0.05, 0.95))
    minus, plus = online_crn_transform(theta, delta, np.array(services), service_family, one_sided)
    click.echo("service,minus,plus")
    for s, lo, hi in zip(services, minus, plus):
        click.echo(f"{s:.17g},{lo:.17g},{hi:.17g}")


@queue.command('calibrate')
@queue_model_options
@click.option('--target', type=float, default=0.6, show_default=True)
@click.option('--reps', type=click.IntRange(min=2), default=10_000, show_default=True)
@click.option('--seed', type=click.IntRange(min=0), default=None)
@click.option('--threads', type=click.IntRange(min=1))
@click.option('--no-cache', is_flag=True, help='Recompute and do not store the result')
@reports_errors
def queue_calibrate(arrival_rate, fast_mean, slow_mean, customers, target, reps, seed, threads, no_cache):
    """Staffing cost that puts the minimizer at the target."""
    seed = env_seed() if seed is None else seed
    model = default_queue_model(arrival_rate, fast_mean, slow_mean, customers)
    cache = None if no_cache else CalibrationCache()
    result = calibrate_queue(model, Interval(0.3, 0.9), target, reps, seed, cache=cache, threads=threads)
    click.echo(f"cost {result.cost:.10g} ± {result.derivative_stderr:.2g}")
    click.echo(f"grid minimizer {result.theta_star:.6f} ± {result.theta_tolerance:.2g} (target {result.target})")


@cli.group()
def cache():
    """Manage the calibration cache."""
    pass


@cache.command('info')
def cache_info():
    """Show cache statistics."""
    cache_dir = default_cache_dir()
    if not cache_dir.exists():
        click.secho("No cache found.", fg='yellow')
        return
    stats = CalibrationCache(cache_dir).get_cache_stats()
    click.echo("Calibration Cache Statistics:")
    click.echo(f"  Directory: {stats['cache_dir']}")
    click.echo(f"  Entries: {stats['entries']}")
    for kind, count in sorted(stats['kinds'].items()):
        click.echo(f"    {kind}: {count}")
    click.echo(f"  Disk size: {stats['cache_size_mb']:.2f} MB")


@cache.command('clear')
@click.confirmation_option(prompt='Are you sure you want to clear the cache?')
def cache_clear():
    """Clear the calibration cache."""
    cache_dir = default_cache_dir()
    if not cache_dir.exists():
        click.secho("No cache found.", fg='yellow')
        return
    CalibrationCache(cache_dir).clear()
    click.secho("Cache cleared successfully.", fg='green')


def parse_args(argv) -> ExperimentSpec:
    """Parse an experiment command line into a merged ExperimentSpec without running it."""
    argv = list(argv)
    if not argv:
        raise click.UsageError("missing command")
    command = cli.get_command(click.Context(cli), argv[0])
    if command is None or isinstance(command, click.Group):
        raise click.UsageError(f"unknown experiment command {argv[0]!r}")
    with command.make_context(argv[0], argv[1:]) as ctx:
        return build_spec(ctx)

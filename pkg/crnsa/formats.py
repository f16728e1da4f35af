"""CSV and plain-text report rendering."""

import csv
import io
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from jinja2 import Environment, FileSystemLoader

from .gradest import ProbeResult
from .optimize import Trajectory
from .rates import RateReport, SuiteReport

TEMPLATE_DIR = Path(__file__).parent / "templates"

RATES_HEADER = ["n", "rmse", "stderr"]
GAP_HEADER = ["n", "gap", "stderr"]
VARIANCE_HEADER = ["delta", "var_h", "stderr"]
BIAS_HEADER = ["delta", "bias", "stderr"]
TABLE1_HEADER = ["cell", "scheme", "coupling", "method", "sigma_hat", "sigma_theory", "band_lo", "band_hi", "pass"]
TRAJECTORY_HEADER = ["n", "theta"]


def format_float(value: Optional[float]) -> str:
    """17 significant digits so values round-trip exactly; empty for missing."""
    if value is None:
        return ""
    return format(float(value), '.17g')


def _rows(report: Any) -> tuple:
    if isinstance(report, RateReport):
        header = GAP_HEADER if report.metric == "gap" else RATES_HEADER
        return header, [[str(n), format_float(v), format_float(s)] for n, v, s in report.rows()]
    if isinstance(report, ProbeResult):
        header = VARIANCE_HEADER if report.kind == "variance" else BIAS_HEADER
        return header, [[format_float(d), format_float(v), format_float(s)]
                        for d, v, s in zip(report.deltas, report.values, report.stderr)]
    if isinstance(report, SuiteReport):
        rows = []
        for result in report.cells:
            scheme, coupling, method = result.cell.estimator.codes
            rows.append([result.cell.name, scheme, coupling, method, format_float(result.sigma_hat),
                         format_float(result.sigma_theory), format_float(result.cell.band[0]),
                         format_float(result.cell.band[1]), "true" if result.passed else "false"])
        return TABLE1_HEADER, rows
    if isinstance(report, Trajectory):
        values = report.averaged if report.averaged is not None else report.thetas
        return TRAJECTORY_HEADER, [[str(int(n)), format_float(row[0])]
                                   for n, row in zip(report.checkpoints, values)]
    raise TypeError(f"no CSV schema for {type(report).__name__}")


def write_csv(header: Sequence[str], rows: Iterable[Sequence[str]], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def render_csv(report: Any) -> str:
    buffer = io.StringIO()
    header, rows = _rows(report)
    write_csv(header, rows, buffer)
    return buffer.getvalue()


def emit_csv(report: Any, path: Union[str, Path]) -> None:
    """Write ``report`` as UTF-8 CSV with its header row first."""
    header, rows = _rows(report)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        write_csv(header, rows, f)


def _environment() -> Environment:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), trim_blocks=True, lstrip_blocks=True,
                      keep_trailing_newline=True)
    env.filters['num'] = lambda value, digits=3: "-" if value is None else f"{value:.{digits}f}"
    return env


def verdict_rows(report: Any) -> List[Dict[str, Any]]:
    if isinstance(report, SuiteReport):
        return [{
            "name": r.cell.name,
            "label": r.cell.estimator.label,
            "sigma_hat": r.sigma_hat,
            "sigma_theory": r.sigma_theory,
            "band": r.cell.band,
            "passed": r.passed,
        } for r in report.cells]
    if isinstance(report, RateReport):
        return [{
            "name": report.problem,
            "label": report.label,
            "sigma_hat": report.sigma_hat,
            "sigma_theory": report.sigma_theory,
            "band": report.band,
            "passed": report.passed,
        }]
    raise TypeError(f"no verdict layout for {type(report).__name__}")


def render_verdict(report: Any) -> str:
    """Plain-text verdict table for a rate report or a suite report."""
    checks = report.checks if isinstance(report, SuiteReport) else []
    template = _environment().get_template("verdict.txt.j2")
    return template.render(rows=verdict_rows(report), checks=checks, passed=report.passed,
                           aborted=getattr(report, "aborted", {}))

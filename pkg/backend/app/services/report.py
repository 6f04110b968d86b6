"""Trend checks over sweep results.

Everything here works from the CSV files a sweep wrote; nothing is
re-simulated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from jinja2 import Template
from pydantic import TypeAdapter, ValidationError

from app.core.errors import ConfigurationError, ReportInputError
from app.models import (
    RESULT_COLUMNS,
    AssertionResult,
    ProtocolId,
    TrendAssertion,
    TrendKind,
)
from app.services.experiments import CONFIG_FILE, RESULTS_FILE

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).parent.parent / "report-templates"
VERDICT_FILE = "verdict.json"
REPORT_FILE = "report.txt"

_assertion_list = TypeAdapter(list[TrendAssertion])


def _trend(name: str, kind: TrendKind, metric: str, **kwargs: Any) -> TrendAssertion:
    return TrendAssertion(name=name, kind=kind, metric=metric, **kwargs)


BUILTIN_SUITES: dict[str, list[TrendAssertion]] = {
    "fig2": [
        _trend(
            "fresh response time grows with the checking cost",
            TrendKind.INCREASING,
            "rt_mean",
            filter={"protocol": "fresh"},
        ),
        *(
            _trend(
                f"{p.value} response time is steady under the checking cost",
                TrendKind.CONSTANT,
                "rt_mean",
                filter={"protocol": p.value},
                tol=0.01,
            )
            for p in (ProtocolId.MCD, ProtocolId.NXN, ProtocolId.PERFECT)
        ),
    ],
    "fig3": [
        _trend("power consumption grows with item size", TrendKind.INCREASING, "pc_mean"),
        _trend(
            "mcd control cost over perfect stays the same across item sizes",
            TrendKind.CONSTANT_DIFFERENCE,
            "pc_control",
            a=ProtocolId.MCD,
            b=ProtocolId.PERFECT,
            tol=0.05,
        ),
        _trend(
            "fresh consumes more power than mcd",
            TrendKind.DOMINATES,
            "pc_mean",
            a=ProtocolId.MCD,
            b=ProtocolId.FRESH,
        ),
    ],
    "fig4": [
        _trend(
            "mcd has less space overhead than nxn",
            TrendKind.DOMINATES,
            "so_per_cycle",
            a=ProtocolId.MCD,
            b=ProtocolId.NXN,
        ),
        _trend(
            "mcd has less space overhead than fresh retransmissions",
            TrendKind.DOMINATES,
            "so_per_cycle",
            a=ProtocolId.MCD,
            b=ProtocolId.FRESH,
        ),
        _trend(
            "nxn matrix share of the cycle shrinks as items grow",
            TrendKind.DECREASING,
            "so_per_cycle",
            filter={"protocol": "nxn"},
            denominator="cycle_length_mean",
        ),
    ],
    "fig5": [
        _trend(
            "fresh power is proportional to the item position",
            TrendKind.LINEAR_FIT,
            "pc_mean",
            filter={"protocol": "fresh"},
            min_r2=0.99,
        ),
        _trend(
            "mcd power stays close to perfect plus the index",
            TrendKind.WITHIN_FACTOR,
            "pc_mean",
            a=ProtocolId.MCD,
            b=ProtocolId.PERFECT,
            factor=1.10,
            offset_metric="so_per_cycle",
        ),
        _trend(
            "nxn power exceeds mcd",
            TrendKind.DOMINATES,
            "pc_mean",
            a=ProtocolId.MCD,
            b=ProtocolId.NXN,
        ),
    ],
}


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------
def load_results(in_dir: Path) -> pd.DataFrame:
    path = in_dir / RESULTS_FILE
    if not path.exists():
        raise ReportInputError(f"no results in {in_dir}", missing=[RESULTS_FILE])
    try:
        frame = pd.read_csv(path, keep_default_na=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReportInputError(f"cannot read {path}: {e}") from e
    missing = [column for column in RESULT_COLUMNS if column not in frame.columns]
    if missing:
        raise ReportInputError(f"{path} lacks required columns", missing=missing)
    frame["protocol"] = frame["protocol"].astype(str)
    return frame


def load_preset_name(in_dir: Path) -> str | None:
    path = in_dir / CONFIG_FILE
    if not path.exists():
        return None
    preset = json.loads(path.read_text(encoding="utf-8")).get("preset")
    return str(preset) if preset else None


def load_assertions(path: Path) -> list[TrendAssertion]:
    try:
        return _assertion_list.validate_json(path.read_bytes())
    except FileNotFoundError:
        raise ConfigurationError(f"assertion file {path} does not exist", fields=["assert"])
    except ValidationError as e:
        fields = [".".join(str(part) for part in err["loc"]) for err in e.errors()]
        raise ConfigurationError(f"invalid assertions in {path}", fields=fields) from e


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def _series(frame: pd.DataFrame, assertion: TrendAssertion, protocol: str) -> pd.Series:
    """Seed-averaged metric per sweep value for one protocol, in sweep order."""
    rows = frame[frame["protocol"] == protocol]
    values = rows[assertion.metric].astype(float)
    if assertion.denominator is not None:
        values = values / rows[assertion.denominator].astype(float)
    keyed = pd.DataFrame({"x": pd.to_numeric(rows["sweep_value"], errors="coerce"), "y": values})
    return keyed.groupby("x", sort=True)["y"].mean()


def _points(series: pd.Series, label: str) -> list[dict[str, float | str]]:
    return [{"series": label, "x": float(x), "y": float(y)} for x, y in series.items()]


def _single(assertion: TrendAssertion, series: pd.Series) -> tuple[bool, str]:
    y = series.to_numpy(dtype=float)
    if y.size == 0 or np.isnan(y).any():
        return False, "no data"
    match assertion.kind:
        case TrendKind.INCREASING:
            steps = np.diff(y)
            return bool((steps > 0).all()), f"steps {np.round(steps, 4).tolist()}"
        case TrendKind.DECREASING:
            steps = np.diff(y)
            return bool((steps < 0).all()), f"steps {np.round(steps, 4).tolist()}"
        case TrendKind.CONSTANT:
            spread = float(y.max() - y.min())
            scale = abs(float(y.mean())) or 1.0
            return spread <= assertion.tol * scale, f"spread {spread:.4g} vs mean {scale:.4g}"
        case TrendKind.LINEAR_FIT:
            x = series.index.to_numpy(dtype=float)
            if x.size < 2:
                return False, "a fit needs two points"
            slope, intercept = np.polyfit(x, y, 1)
            residual = float(((y - (slope * x + intercept)) ** 2).sum())
            total = float(((y - y.mean()) ** 2).sum())
            r2 = 1.0 if total == 0 else 1.0 - residual / total
            return r2 >= assertion.min_r2, f"r2 {r2:.5f}, slope {slope:.4g}"
    raise ConfigurationError(f"{assertion.kind.value} is a pairwise trend", fields=["kind"])


def _pairwise(
    assertion: TrendAssertion, a: pd.Series, b: pd.Series, offsets: pd.Series | None
) -> tuple[bool, str]:
    joined = pd.concat({"a": a, "b": b}, axis=1, join="inner")
    if joined.empty or joined.isna().any().any():
        return False, "no common sweep points"
    ya, yb = joined["a"].to_numpy(dtype=float), joined["b"].to_numpy(dtype=float)
    match assertion.kind:
        case TrendKind.DOMINATES:
            return bool((ya < yb).all()), f"margins {np.round(yb - ya, 4).tolist()}"
        case TrendKind.WITHIN_FACTOR:
            bound = assertion.factor * yb + assertion.offset
            if offsets is not None:
                bound = bound + offsets.reindex(joined.index).to_numpy(dtype=float)
            return bool((ya <= bound).all()), f"slack {np.round(bound - ya, 4).tolist()}"
        case TrendKind.CONSTANT_DIFFERENCE:
            gap = ya - yb
            spread = float(gap.max() - gap.min())
            scale = abs(float(gap.mean())) or 1.0
            return spread <= assertion.tol * scale, f"differences {np.round(gap, 4).tolist()}"
    raise ConfigurationError(f"{assertion.kind.value} is not a pairwise trend", fields=["kind"])


def evaluate_assertion(frame: pd.DataFrame, assertion: TrendAssertion) -> AssertionResult:
    needed = [assertion.metric, *filter(None, [assertion.denominator, assertion.offset_metric])]
    missing = [column for column in [*needed, *assertion.filter] if column not in frame.columns]
    if missing:
        raise ReportInputError(f"assertion {assertion.name!r} needs columns", missing=missing)
    rows = frame
    for column, wanted in assertion.filter.items():
        rows = rows[rows[column].astype(str) == str(wanted)]

    points: list[dict[str, float | str]] = []
    if assertion.a is not None and assertion.b is not None:
        a = _series(rows, assertion, assertion.a.value)
        b = _series(rows, assertion.model_copy(update={"offset_metric": None}), assertion.b.value)
        offsets = None
        if assertion.offset_metric is not None:
            offsets = _series(
                rows,
                assertion.model_copy(
                    update={"metric": assertion.offset_metric, "denominator": None}
                ),
                assertion.a.value,
            )
        passed, evidence = _pairwise(assertion, a, b, offsets)
        points = _points(a, assertion.a.value) + _points(b, assertion.b.value)
    else:
        verdicts = []
        for protocol in sorted(rows["protocol"].unique()):
            series = _series(rows, assertion, protocol)
            ok, detail = _single(assertion, series)
            verdicts.append((ok, f"{protocol}: {detail}"))
            points.extend(_points(series, protocol))
        passed = bool(verdicts) and all(ok for ok, _ in verdicts)
        evidence = "; ".join(detail for _, detail in verdicts) or "no rows match the filter"

    return AssertionResult(
        name=assertion.name,
        kind=assertion.kind,
        metric=assertion.metric,
        passed=passed,
        evidence=evidence,
        points=points,
    )


@dataclass
class ReportOutcome:
    in_dir: Path
    preset: str | None
    results: list[AssertionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> list[AssertionResult]:
        return [result for result in self.results if not result.passed]


def cmd_report(
    in_dir: Path, assertions: list[TrendAssertion] | None = None, *, preset: str | None = None
) -> ReportOutcome:
    """Evaluate the built-in suite of the sweep's preset plus ``assertions``."""
    frame = load_results(in_dir)
    preset = preset or load_preset_name(in_dir)
    suite = [*BUILTIN_SUITES.get(preset or "", []), *(assertions or [])]
    if not suite:
        raise ConfigurationError(
            "nothing to check: the results carry no preset and no assertions were given",
            fields=["assert"],
        )
    outcome = ReportOutcome(in_dir=in_dir, preset=preset)
    for assertion in suite:
        result = evaluate_assertion(frame, assertion)
        logger.info("%s: %s", "PASS" if result.passed else "FAIL", assertion.name)
        outcome.results.append(result)
    return outcome


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def render_report_template(*, template_name: str, context: dict[str, Any]) -> str:
    template_str = (TEMPLATES_DIR / template_name).read_text()
    return Template(template_str).render(context)


def render_report(outcome: ReportOutcome) -> str:
    return render_report_template(
        template_name="report.txt.j2",
        context={
            "in_dir": str(outcome.in_dir),
            "preset": outcome.preset,
            "results": outcome.results,
            "passed": outcome.passed,
            "n_failed": len(outcome.failures),
        },
    )


def write_report(outcome: ReportOutcome, out_dir: Path | None = None) -> list[Path]:
    out_dir = out_dir or outcome.in_dir
    report_path = out_dir / REPORT_FILE
    verdict_path = out_dir / VERDICT_FILE
    report_path.write_text(render_report(outcome), encoding="utf-8")
    verdict = {
        "preset": outcome.preset,
        "passed": outcome.passed,
        "assertions": [result.model_dump(mode="json") for result in outcome.results],
    }
    verdict_path.write_text(json.dumps(verdict, indent=2) + "\n", encoding="utf-8")
    return [report_path, verdict_path]

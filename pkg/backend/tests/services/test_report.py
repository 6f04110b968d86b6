import json
from pathlib import Path
from typing import Any

import pandas as pd
import pytest

from app.core.errors import ConfigurationError, ReportInputError
from app.models import RESULT_COLUMNS, ProtocolId, TrendAssertion, TrendKind
from app.services.report import (
    BUILTIN_SUITES,
    cmd_report,
    evaluate_assertion,
    load_assertions,
    load_preset_name,
    load_results,
    render_report,
    write_report,
)


def _row(protocol: str, x: float, **metrics: Any) -> dict[str, Any]:
    row: dict[str, Any] = {column: 0 for column in RESULT_COLUMNS}
    row.update(protocol=protocol, seed=1, sweep_param="item_size", sweep_value=x)
    row.update(metrics)
    return row


def _frame(rows: list[dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def _series_frame(protocol: str, xs: list[float], ys: list[float], metric: str) -> pd.DataFrame:
    return _frame([_row(protocol, x, **{metric: y}) for x, y in zip(xs, ys, strict=True)])


def _trend(kind: TrendKind, metric: str = "pc_mean", **kwargs: Any) -> TrendAssertion:
    return TrendAssertion(name=f"{kind.value} check", kind=kind, metric=metric, **kwargs)


def _save(tmp_path: Path, frame: pd.DataFrame, preset: str | None = None) -> Path:
    frame.to_csv(tmp_path / "results.csv", index=False)
    if preset is not None:
        (tmp_path / "config.json").write_text(json.dumps({"preset": preset}))
    return tmp_path


# ---------------------------------------------------------------------------
# Single-series trends
# ---------------------------------------------------------------------------
class TestSingleSeries:
    def test_increasing(self) -> None:
        frame = _series_frame("fresh", [1, 2, 3], [1.0, 2.0, 5.0], "rt_mean")
        assert evaluate_assertion(frame, _trend(TrendKind.INCREASING, "rt_mean")).passed

    def test_increasing_rejects_a_flat_step(self) -> None:
        frame = _series_frame("fresh", [1, 2, 3], [1.0, 2.0, 2.0], "rt_mean")
        assert not evaluate_assertion(frame, _trend(TrendKind.INCREASING, "rt_mean")).passed

    def test_decreasing(self) -> None:
        frame = _series_frame("nxn", [1, 2, 3], [9.0, 4.0, 1.0], "so_per_cycle")
        assert evaluate_assertion(frame, _trend(TrendKind.DECREASING, "so_per_cycle")).passed

    def test_decreasing_with_a_denominator(self) -> None:
        frame = _frame(
            [
                _row("nxn", 16, so_per_cycle=315, cycle_length_mean=1915),
                _row("nxn", 64, so_per_cycle=315, cycle_length_mean=6715),
            ]
        )
        plain = _trend(TrendKind.DECREASING, "so_per_cycle")
        shared = _trend(TrendKind.DECREASING, "so_per_cycle", denominator="cycle_length_mean")
        assert not evaluate_assertion(frame, plain).passed
        assert evaluate_assertion(frame, shared).passed

    def test_constant_within_tolerance(self) -> None:
        frame = _series_frame("mcd", [0, 1, 2], [100.0, 100.5, 99.8], "rt_mean")
        assert evaluate_assertion(frame, _trend(TrendKind.CONSTANT, "rt_mean", tol=0.01)).passed
        assert not evaluate_assertion(
            frame, _trend(TrendKind.CONSTANT, "rt_mean", tol=0.001)
        ).passed

    def test_linear_fit(self) -> None:
        frame = _series_frame("fresh", [1, 10, 25, 50], [17.2, 172.0, 430.0, 860.0], "pc_mean")
        assert evaluate_assertion(frame, _trend(TrendKind.LINEAR_FIT)).passed
        bent = _series_frame("fresh", [1, 10, 25, 50], [1.0, 100.0, 625.0, 2500.0], "pc_mean")
        assert not evaluate_assertion(bent, _trend(TrendKind.LINEAR_FIT, min_r2=0.999)).passed

    def test_seeds_are_averaged(self) -> None:
        frame = _frame(
            [
                _row("fresh", 1, seed=1, rt_mean=1.0),
                _row("fresh", 1, seed=2, rt_mean=5.0),
                _row("fresh", 2, seed=1, rt_mean=4.0),
                _row("fresh", 2, seed=2, rt_mean=4.0),
            ]
        )
        result = evaluate_assertion(frame, _trend(TrendKind.INCREASING, "rt_mean"))
        assert result.passed
        assert [point["y"] for point in result.points] == [3.0, 4.0]

    def test_every_protocol_must_hold(self) -> None:
        frame = pd.concat(
            [
                _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"),
                _series_frame("nxn", [1, 2], [3.0, 2.0], "pc_mean"),
            ]
        )
        result = evaluate_assertion(frame, _trend(TrendKind.INCREASING))
        assert not result.passed
        assert "nxn" in result.evidence

    def test_filter(self) -> None:
        frame = pd.concat(
            [
                _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"),
                _series_frame("nxn", [1, 2], [3.0, 2.0], "pc_mean"),
            ]
        )
        assertion = _trend(TrendKind.INCREASING, filter={"protocol": "mcd"})
        assert evaluate_assertion(frame, assertion).passed

    def test_no_matching_rows_fail(self) -> None:
        frame = _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean")
        result = evaluate_assertion(
            frame, _trend(TrendKind.INCREASING, filter={"protocol": "fresh"})
        )
        assert not result.passed
        assert result.evidence == "no rows match the filter"

    def test_nan_fails(self) -> None:
        frame = _series_frame("mcd", [1, 2], [1.0, float("nan")], "rt_mean")
        result = evaluate_assertion(frame, _trend(TrendKind.INCREASING, "rt_mean"))
        assert not result.passed
        assert "no data" in result.evidence

    def test_missing_metric_column(self) -> None:
        frame = _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean")
        with pytest.raises(ReportInputError) as exc:
            evaluate_assertion(frame, _trend(TrendKind.INCREASING, "joules"))
        assert exc.value.missing == ("joules",)


# ---------------------------------------------------------------------------
# Pairwise trends
# ---------------------------------------------------------------------------
class TestPairwise:
    def _pair(self, a: list[float], b: list[float], **extra_a: list[float]) -> pd.DataFrame:
        rows = []
        for i, (ya, yb) in enumerate(zip(a, b, strict=True)):
            more = {metric: values[i] for metric, values in extra_a.items()}
            rows.append(_row("mcd", i + 1, pc_mean=ya, **more))
            rows.append(_row("perfect", i + 1, pc_mean=yb))
        return _frame(rows)

    def test_dominates(self) -> None:
        assertion = _trend(TrendKind.DOMINATES, a=ProtocolId.MCD, b=ProtocolId.PERFECT)
        assert evaluate_assertion(self._pair([1, 2], [2, 3]), assertion).passed
        assert not evaluate_assertion(self._pair([1, 3], [2, 3]), assertion).passed

    def test_within_factor(self) -> None:
        assertion = _trend(
            TrendKind.WITHIN_FACTOR, a=ProtocolId.MCD, b=ProtocolId.PERFECT, factor=1.1, offset=2
        )
        assert evaluate_assertion(self._pair([12, 24], [10, 20]), assertion).passed
        assert not evaluate_assertion(self._pair([14, 24], [10, 20]), assertion).passed

    def test_within_factor_offset_metric(self) -> None:
        assertion = _trend(
            TrendKind.WITHIN_FACTOR,
            a=ProtocolId.MCD,
            b=ProtocolId.PERFECT,
            factor=1.1,
            offset_metric="so_per_cycle",
        )
        frame = self._pair([218, 218], [16, 16], so_per_cycle=[202, 202])
        assert evaluate_assertion(frame, assertion).passed
        frame = self._pair([218, 218], [16, 16], so_per_cycle=[100, 100])
        assert not evaluate_assertion(frame, assertion).passed

    def test_constant_difference(self) -> None:
        assertion = _trend(
            TrendKind.CONSTANT_DIFFERENCE, a=ProtocolId.MCD, b=ProtocolId.PERFECT, tol=0.05
        )
        assert evaluate_assertion(self._pair([266, 458], [64, 256]), assertion).passed
        assert not evaluate_assertion(self._pair([266, 600], [64, 256]), assertion).passed

    def test_disjoint_sweep_points(self) -> None:
        frame = _frame([_row("mcd", 1, pc_mean=1.0), _row("perfect", 2, pc_mean=2.0)])
        assertion = _trend(TrendKind.DOMINATES, a=ProtocolId.MCD, b=ProtocolId.PERFECT)
        result = evaluate_assertion(frame, assertion)
        assert not result.passed
        assert result.evidence == "no common sweep points"


# ---------------------------------------------------------------------------
# Files and rendering
# ---------------------------------------------------------------------------
class TestInputs:
    def test_missing_results(self, tmp_path: Path) -> None:
        with pytest.raises(ReportInputError) as exc:
            load_results(tmp_path)
        assert exc.value.missing == ("results.csv",)

    def test_missing_columns(self, tmp_path: Path) -> None:
        pd.DataFrame({"protocol": ["mcd"], "pc_mean": [1.0]}).to_csv(
            tmp_path / "results.csv", index=False
        )
        with pytest.raises(ReportInputError) as exc:
            load_results(tmp_path)
        assert "rt_mean" in exc.value.missing

    def test_empty_cells_load_as_nan(self, tmp_path: Path) -> None:
        frame = _series_frame("mcd", [1], [float("nan")], "rt_mean")
        frame.to_csv(tmp_path / "results.csv", index=False, na_rep="")
        loaded = load_results(tmp_path)
        assert loaded["rt_mean"].isna().all()

    def test_preset_name(self, tmp_path: Path) -> None:
        assert load_preset_name(tmp_path) is None
        _save(tmp_path, _frame([]), preset="fig4")
        assert load_preset_name(tmp_path) == "fig4"

    def test_assertion_file(self, tmp_path: Path) -> None:
        path = tmp_path / "checks.json"
        path.write_text(
            json.dumps([{"name": "grows", "kind": "increasing", "metric": "pc_mean"}])
        )
        [assertion] = load_assertions(path)
        assert assertion.kind is TrendKind.INCREASING

    def test_bad_assertion_file(self, tmp_path: Path) -> None:
        path = tmp_path / "checks.json"
        path.write_text(json.dumps([{"name": "x", "kind": "dominates", "metric": "pc_mean"}]))
        with pytest.raises(ConfigurationError):
            load_assertions(path)
        with pytest.raises(ConfigurationError):
            load_assertions(tmp_path / "absent.json")


class TestCmdReport:
    def test_needs_something_to_check(self, tmp_path: Path) -> None:
        _save(tmp_path, _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"))
        with pytest.raises(ConfigurationError):
            cmd_report(tmp_path)

    def test_preset_suite_from_config(self, tmp_path: Path) -> None:
        _save(tmp_path, _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"), preset="fig3")
        outcome = cmd_report(tmp_path)
        assert outcome.preset == "fig3"
        assert len(outcome.results) == len(BUILTIN_SUITES["fig3"])

    def test_passing_report(self, tmp_path: Path) -> None:
        _save(tmp_path, _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"))
        outcome = cmd_report(tmp_path, [_trend(TrendKind.INCREASING)])
        assert outcome.passed
        text = render_report(outcome)
        assert "[PASS] increasing check" in text
        assert text.rstrip().endswith("All 1 assertions passed.")

    def test_failing_report(self, tmp_path: Path) -> None:
        _save(tmp_path, _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"))
        outcome = cmd_report(
            tmp_path, [_trend(TrendKind.INCREASING), _trend(TrendKind.DECREASING)]
        )
        assert not outcome.passed
        assert [r.kind for r in outcome.failures] == [TrendKind.DECREASING]
        assert render_report(outcome).rstrip().endswith("1 of 2 assertions failed.")

    def test_write_report(self, tmp_path: Path) -> None:
        _save(tmp_path, _series_frame("mcd", [1, 2], [1.0, 2.0], "pc_mean"))
        outcome = cmd_report(tmp_path, [_trend(TrendKind.INCREASING)])
        report_path, verdict_path = write_report(outcome)
        assert report_path.read_text().startswith(f"Trend report for {tmp_path}")
        verdict = json.loads(verdict_path.read_text())
        assert verdict["passed"] is True
        assert verdict["assertions"][0]["kind"] == "increasing"

import json
from pathlib import Path
from typing import Any

import pandas as pd
import pytest

from app.core.errors import ConfigurationError
from app.models import RESULT_COLUMNS, ProtocolId
from app.services.experiments import (
    PRESETS,
    build_spec,
    cmd_run,
    cmd_sweep,
    get_preset,
    parse_config,
    plan_runs,
    plot_frame,
    run_experiment,
    run_single,
    write_outputs,
)

BASE: dict[str, Any] = {
    "protocol": "mcd",
    "n_items": 20,
    "seed": 1,
    "n_clients": 3,
    "rs_max": 3,
    "horizon_cycles": 4,
}


def _write(tmp_path: Path, document: dict[str, Any]) -> Path:
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document))
    return path


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------
class TestParseConfig:
    def test_plain_document(self, tmp_path: Path) -> None:
        spec = parse_config(_write(tmp_path, BASE))
        assert spec.base.n_items == 20
        assert spec.protocols == [ProtocolId.MCD]
        assert spec.seeds == [1]
        assert spec.planned_runs == 1

    def test_unknown_key_is_named(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as exc:
            parse_config(_write(tmp_path, {**BASE, "foo": 3}))
        assert "foo" in exc.value.fields

    def test_bad_value_is_named(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as exc:
            parse_config(_write(tmp_path, {**BASE, "update_rate": 2}))
        assert "update_rate" in exc.value.fields

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as exc:
            parse_config(tmp_path / "nope.json")
        assert exc.value.fields == ("config",)

    def test_not_json(self, tmp_path: Path) -> None:
        path = tmp_path / "experiment.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            parse_config(path)

    def test_not_an_object(self, tmp_path: Path) -> None:
        path = tmp_path / "experiment.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            parse_config(path)

    def test_sweep_block(self, tmp_path: Path) -> None:
        document = {
            **BASE,
            "sweep": {
                "param": "check_cost",
                "values": [0, 1],
                "protocols": ["mcd", "fresh"],
                "seeds": [4, 5],
            },
        }
        spec = parse_config(_write(tmp_path, document))
        assert spec.sweep_param == "check_cost"
        assert spec.protocols == [ProtocolId.MCD, ProtocolId.FRESH]
        assert spec.planned_runs == 8

    def test_bad_sweep_block(self, tmp_path: Path) -> None:
        document = {**BASE, "sweep": {"param": "check_cost", "values": []}}
        with pytest.raises(ConfigurationError) as exc:
            parse_config(_write(tmp_path, document))
        assert any(field.startswith("sweep.") for field in exc.value.fields)

    def test_unknown_sweep_param(self, tmp_path: Path) -> None:
        document = {**BASE, "sweep": {"param": "colour", "values": [1]}}
        with pytest.raises(ConfigurationError):
            parse_config(_write(tmp_path, document))

    def test_command_line_overrides(self, tmp_path: Path) -> None:
        spec = parse_config(
            _write(tmp_path, BASE),
            sweep_param="item_size",
            sweep_values=[8, 32],
            seeds=[1, 2, 3],
            output_dir=tmp_path / "out",
        )
        assert spec.planned_runs == 6
        assert spec.output_dir == tmp_path / "out"


class TestPresets:
    def test_size_preset_plans_48_runs(self) -> None:
        spec = build_spec({}, preset="fig3")
        assert spec.sweep_param == "item_size"
        assert spec.planned_runs == 48
        assert spec.base.n_items == 100

    def test_preset_keys_win_over_the_document(self) -> None:
        spec = build_spec({**BASE, "n_items": 7, "check_cost": 0.3}, preset="fig3")
        assert spec.base.n_items == 100
        assert spec.base.check_cost == 0.3

    def test_preset_named_in_the_document(self) -> None:
        spec = build_spec({"preset": "fig5"})
        assert spec.preset == "fig5"
        assert spec.sweep_values == [1, 10, 25, 50, 100]

    def test_unknown_preset(self) -> None:
        with pytest.raises(ConfigurationError) as exc:
            get_preset("fig9")
        assert exc.value.fields == ("preset",)

    def test_every_preset_validates(self) -> None:
        for name in PRESETS:
            assert build_spec({}, preset=name).planned_runs > 0


# ---------------------------------------------------------------------------
# Planning and execution
# ---------------------------------------------------------------------------
class TestPlanRuns:
    def test_product_order(self) -> None:
        spec = build_spec(
            {
                **BASE,
                "sweep": {"param": "check_cost", "values": [0, 2], "protocols": ["mcd", "nxn"]},
            },
            seeds=[1, 2],
        )
        plans = plan_runs(spec)
        keys = [(p.sweep_value, p.config.protocol.value, p.config.seed) for p in plans]
        assert keys == [
            (0.0, "mcd", 1),
            (0.0, "mcd", 2),
            (0.0, "nxn", 1),
            (0.0, "nxn", 2),
            (2.0, "mcd", 1),
            (2.0, "mcd", 2),
            (2.0, "nxn", 1),
            (2.0, "nxn", 2),
        ]

    def test_without_sweep(self) -> None:
        plans = plan_runs(build_spec(BASE, seeds=[3, 4]))
        assert [p.config.seed for p in plans] == [3, 4]
        assert all(p.sweep_param == "" for p in plans)


class TestRunExperiment:
    def _spec(self, tmp_path: Path) -> Any:
        return build_spec(
            {**BASE, "sweep": {"param": "item_size", "values": [8, 32]}},
            output_dir=tmp_path,
        )

    def test_one_summary_per_run(self, tmp_path: Path) -> None:
        result = run_experiment(self._spec(tmp_path))
        assert len(result.summaries) == 2
        assert [s.sweep_value for s in result.summaries] == [8, 32]
        frame = result.results_frame()
        assert list(frame.columns) == RESULT_COLUMNS

    def test_outputs(self, tmp_path: Path) -> None:
        spec = self._spec(tmp_path)
        cmd_sweep(spec)
        for name in ("results.csv", "samples.csv", "cycles.csv", "config.json"):
            assert (tmp_path / name).exists()
        plot = pd.read_csv(tmp_path / "plot_pc_mean.dat", sep=" ")
        assert list(plot.columns) == ["item_size", "mcd"]
        saved = json.loads((tmp_path / "config.json").read_text())
        assert saved["sweep_param"] == "item_size"

    def test_results_are_byte_identical_across_runs(self, tmp_path: Path) -> None:
        first, second = tmp_path / "a", tmp_path / "b"
        spec = self._spec(tmp_path)
        cmd_run(spec, first)
        cmd_run(spec, second)
        for name in ("results.csv", "samples.csv", "cycles.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_sweep_needs_a_parameter(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError):
            cmd_sweep(build_spec(BASE, output_dir=tmp_path))

    def test_unwritable_output(self, tmp_path: Path) -> None:
        blocker = tmp_path / "file"
        blocker.write_text("")
        spec = self._spec(tmp_path)
        with pytest.raises(ConfigurationError) as exc:
            write_outputs(run_experiment(spec), spec, blocker / "out")
        assert exc.value.fields == ("output_dir",)

    def test_empty_metrics_are_empty_cells(self, tmp_path: Path) -> None:
        spec = build_spec({**BASE, "horizon_cycles": 0}, output_dir=tmp_path)
        cmd_run(spec)
        header, row = (tmp_path / "results.csv").read_text().splitlines()
        cells = dict(zip(header.split(","), row.split(","), strict=True))
        assert cells["rt_mean"] == ""
        assert cells["commits"] == "0"


def test_plot_frame_averages_seeds() -> None:
    results = pd.DataFrame(
        {
            "protocol": ["mcd", "mcd", "nxn", "nxn"],
            "sweep_value": [1, 1, 1, 1],
            "pc_mean": [2.0, 4.0, 10.0, 12.0],
        }
    )
    table = plot_frame(results, "pc_mean")
    assert table.loc[0, "mcd"] == 3.0
    assert table.loc[0, "nxn"] == 11.0


def test_run_single() -> None:
    public = run_single(build_spec(BASE).base)
    assert public.summary.protocol is ProtocolId.MCD
    assert public.cycles == 4

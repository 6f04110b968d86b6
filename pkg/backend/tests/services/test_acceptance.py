"""End-to-end sweeps of the built-in presets, checked with their trend suites."""

from pathlib import Path

import pandas as pd
import pytest

from app.models import ProtocolId
from app.services.engine import run
from app.services.experiments import build_spec, cmd_sweep
from app.services.oracle import check_run, describe
from app.services.report import BUILTIN_SUITES, cmd_report, load_results
from tests.utils.factories import make_config


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory: pytest.TempPathFactory) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for preset in ("fig2", "fig3", "fig5"):
        out_dir = tmp_path_factory.mktemp(preset)
        cmd_sweep(build_spec({}, preset=preset, output_dir=out_dir))
        out[preset] = out_dir
    # the space-overhead suite reads the same item-size sweep
    out["fig4"] = out["fig3"]
    return out


@pytest.mark.parametrize("preset", ["fig2", "fig3", "fig4", "fig5"])
def test_builtin_suite_passes(sweeps: dict[str, Path], preset: str) -> None:
    outcome = cmd_report(sweeps[preset], preset=preset)
    assert len(outcome.results) == len(BUILTIN_SUITES[preset])
    assert outcome.passed, [(r.name, r.evidence) for r in outcome.failures]


def _mean(frame: pd.DataFrame, protocol: ProtocolId, metric: str) -> pd.Series:
    rows = frame[frame["protocol"] == protocol.value]
    return rows.groupby("sweep_value")[metric].mean()


class TestSizeSweep:
    def test_cyclic_protocols_commit_every_mt(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig3"])
        cyclic = frame[frame["protocol"] != "fresh"]
        assert (cyclic["mts_committed"] == cyclic["mts_total"]).all()

    def test_read_only_mcd_commits_locally(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig3"])
        mcd = frame[frame["protocol"] == "mcd"]
        assert (mcd["local_commits"] == mcd["commits"]).all()
        assert (mcd["restarts"] == 0).all()

    def test_index_overhead_is_fixed(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig3"])
        # header plus one two-unit entry per item
        assert (_mean(frame, ProtocolId.MCD, "so_per_cycle") == 202).all()
        assert (_mean(frame, ProtocolId.PERFECT, "so_per_cycle") == 0).all()

    def test_mcd_pays_exactly_the_index_over_perfect(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig3"])
        # one index per MT: a read-only MT reads its whole set within one cycle
        assert (_mean(frame, ProtocolId.MCD, "pc_control") == 202).all()
        assert (_mean(frame, ProtocolId.PERFECT, "pc_control") == 0).all()

    def test_updates_reach_mts_that_straddle_cycles(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig3"])
        perfect = _mean(frame, ProtocolId.PERFECT, "pc_mean")
        # four payloads per MT unless an item was updated after it was read
        sizes = perfect.index.to_numpy(dtype=float)
        assert (perfect.to_numpy() > 4 * sizes).all()


class TestPositionSweep:
    def test_perfect_reads_only_the_item(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig5"])
        assert (_mean(frame, ProtocolId.PERFECT, "pc_mean") == 16).all()

    def test_fresh_cost_follows_the_position(self, sweeps: dict[str, Path]) -> None:
        frame = load_results(sweeps["fig5"])
        fresh = _mean(frame, ProtocolId.FRESH, "pc_mean")
        assert fresh.is_monotonic_increasing
        assert fresh.loc[100] > 10 * fresh.loc[1]


@pytest.mark.parametrize("protocol", list(ProtocolId))
def test_oracle_sweep(protocol: ProtocolId, oracle_seed: int) -> None:
    write_prob = 0.0 if protocol is ProtocolId.FRESH else 0.3
    config = make_config(
        protocol,
        n_items=8,
        seed=oracle_seed,
        n_clients=4,
        update_rate=0.3,
        write_prob=write_prob,
        mts_per_client=4,
        horizon_cycles=20,
    )
    result = check_run(run(config))
    assert result.passed, describe(result)

import json

import numpy as np
import pandas as pd
import pytest

from conftest import build_tabular, small_space
from main import main
from src.commands import sweep
from src.commands.common import epsilon_tag
from src.repository.datasets import TabularDataset, save_dataset
from src.schemas import RunManifest
from src.services import analysis, training
from src.services.harness import SeedTrace, aggregate
from src.services.space import FidelityGrid

SPACE_KEYS = {
    "space.st_lr": "0.1,0.01",
    "space.st_momentum": "0.9",
    "space.st_batch": "32",
    "space.at_lr": "0.1,0.01",
    "space.at_momentum": "0.9",
    "space.at_batch": "32",
    "space.pgd_alpha": "0.01",
    "space.rat_pct": "0,50",
    "space.ae_pct": "50,100",
    "space.epochs": "1,2",
    "space.attack_iters": "1,2",
    "space.epsilons": "8/255",
}


def write_manifest(path, **keys):
    lines = ["# test manifest"] + [f"{key}={value}" for key, value in keys.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def manifest_with(tmp_path, extra, name="run.env"):
    values = dict(SPACE_KEYS)
    values.update(extra)
    return write_manifest(tmp_path / name, **values)


@pytest.fixture()
def dataset_file(tmp_path):
    path = tmp_path / "ds.csv"
    save_dataset(build_tabular(small_space(), seeds=(0, 1)), path)
    return path


def test_help_lists_every_manifest_key(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for key in RunManifest.manifest_keys():
        assert key in text


@pytest.mark.parametrize("bad_key", ["space.bogus", "nosuch.key", "nodot"])
def test_unknown_manifest_key_exits_2(tmp_path, bad_key):
    manifest = write_manifest(tmp_path / "bad.env", **{bad_key: "1"})
    assert main(["sweep", "--manifest", str(manifest)]) == 2


def test_missing_manifest_exits_2(tmp_path):
    assert main(["sweep", "--manifest", str(tmp_path / "absent.env"), "--out", str(tmp_path)]) == 2


def test_sweep_writes_and_resumes(tmp_path, monkeypatch):
    manifest = write_manifest(
        tmp_path / "sweep.env",
        **{"space.tie_phases": "true", "space.st_lr": "0.1,0.01", "space.st_momentum": "0.9",
           "space.st_batch": "16", "space.pgd_alpha": "0.01", "space.rat_pct": "50", "space.ae_pct": "100",
           "space.epochs": "1,2", "space.attack_iters": "1", "space.epsilons": "8/255",
           "data.n_train": "60", "data.n_test": "30", "sweep.cost": "simulated", "sweep.output": "out.csv"})
    assert main(["sweep", "--manifest", str(manifest)]) == 0
    output = tmp_path / "out.csv"
    frame = pd.read_csv(output)
    assert len(frame) == 4
    content = output.read_bytes()

    def refuse(cell):
        raise AssertionError("already computed")

    monkeypatch.setattr(training, "run_cell", refuse)
    assert main(["sweep", "--manifest", str(manifest)]) == 0
    assert output.read_bytes() == content


def test_sweep_internal_error_exits_1(tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(sweep, "grid_sweep", explode)
    manifest = manifest_with(tmp_path, {"data.n_train": "60", "data.n_test": "30"})
    assert main(["sweep", "--manifest", str(manifest)]) == 1


class TestAnalyze:

    KEYS = {"analyze.dataset": "ds.csv", "analyze.rat_pct": "50", "analyze.cheap_iters": "1",
            "analyze.reference_iters": "2", "analyze.plots": "false"}

    def run(self, tmp_path, out_name, **extra):
        manifest = manifest_with(tmp_path, {**self.KEYS, **extra})
        out = tmp_path / out_name
        assert main(["analyze", "--manifest", str(manifest), "--out", str(out)]) == 0
        return out

    def test_reports(self, tmp_path, dataset_file):
        out = self.run(tmp_path, "a")
        tag = epsilon_tag(8 / 255)
        for name in ("error_reduction.csv", "error_reduction_geomean.csv", f"reduction_cdf_{tag}.csv",
                     f"correlation_{tag}.csv", f"rat_ae_{tag}.csv", "time_reduction.csv",
                     "time_reduction_cdf.csv"):
            assert (out / name).is_file(), name
        table = pd.read_csv(out / "error_reduction.csv")
        row = table[(table.criterion == "Error") & (table.rat_pct == 50)].iloc[0]
        expected = analysis.error_reduction(build_tabular(small_space(), seeds=(0, 1)), "Error", 50, 8 / 255)
        assert row.reduction_pct == pytest.approx(expected.reduction)

    def test_byte_stable(self, tmp_path, dataset_file):
        first = self.run(tmp_path, "a", **{"analyze.plots": "true"})
        second = self.run(tmp_path, "b", **{"analyze.plots": "true"})
        names = sorted(p.name for p in first.iterdir() if p.suffix in (".csv", ".svg"))
        assert any(name.endswith(".svg") for name in names)
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_missing_dataset_exits_2(self, tmp_path):
        manifest = manifest_with(tmp_path, {**self.KEYS, "analyze.dataset": "absent.csv"})
        assert main(["analyze", "--manifest", str(manifest)]) == 2


class TestReplay:

    KEYS = {"replay.dataset": "ds.csv", "replay.epsilon": "8/255", "replay.budget": "0.3",
            "replay.seeds": "0,1", "replay.optimizers": "random,hyperband", "replay.plots": "false"}

    def run(self, tmp_path, out_name, **extra):
        manifest = manifest_with(tmp_path, {**self.KEYS, **extra})
        out = tmp_path / out_name
        code = main(["replay", "--manifest", str(manifest), "--out", str(out)])
        return code, out

    def test_summary_and_traces(self, tmp_path, dataset_file):
        code, out = self.run(tmp_path, "a")
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["speedups"]) == {"random vs hyperband (observed)", "hyperband vs random (observed)"}
        assert set(summary["optimizers"]) == {"random_observed", "hyperband_observed"}

        seeds = pd.read_csv(out / "random_observed_seeds.csv")
        traces = [SeedTrace(int(seed), tuple(group.t_s), tuple(group.objective), tuple(group.std_error),
                            tuple(group.adv_error)) for seed, group in seeds.groupby("seed")]
        _, mean, std = aggregate(traces, 0.3)
        emitted = pd.read_csv(out / "random_observed_aggregate.csv")
        np.testing.assert_allclose(emitted["mean"].to_numpy(), mean, atol=1e-9)
        np.testing.assert_allclose(emitted["std"].to_numpy(), std, atol=1e-9)
        assert summary["optimizers"]["random_observed"]["final_mean"] == pytest.approx(mean[-1])

    def test_both_modes_and_determinism(self, tmp_path, dataset_file):
        _, first = self.run(tmp_path, "a", **{"replay.mode": "both", "replay.optimizers": "mf-epochs,random"})
        _, second = self.run(tmp_path, "b", **{"replay.mode": "both", "replay.optimizers": "mf-epochs,random"})
        summary = json.loads((first / "summary.json").read_text())
        assert summary["optimizers"]["mf-epochs_recommendation"]["oracle_assisted"] is True
        assert "mf-epochs vs random (recommendation)" in summary["speedups"]
        for path in first.iterdir():
            if path.suffix in (".csv", ".json"):
                assert path.read_bytes() == (second / path.name).read_bytes(), path.name

    def test_coverage_gap_exits_2(self, tmp_path):
        space = small_space()
        full = FidelityGrid.from_space(space).full
        ds = build_tabular(space)
        save_dataset(TabularDataset([r for r in ds.records if r.fidelity != full], space=space),
                     tmp_path / "ds.csv")
        code, out = self.run(tmp_path, "a")
        assert code == 2
        assert not (out / "summary.json").exists()


class TestTune:

    KEYS = {"tune.budget": "1e-9", "tune.epsilon": "8/255", "tune.cost": "simulated",
            "data.n_train": "60", "data.n_test": "30"}

    @pytest.mark.parametrize("optimizer", ["random", "mf-epochs-iters"])
    def test_single_evaluation(self, tmp_path, optimizer):
        manifest = manifest_with(tmp_path, {**self.KEYS, "tune.optimizer": optimizer})
        assert main(["tune", "--manifest", str(manifest)]) == 0
        best = json.loads((tmp_path / "best_config.json").read_text())
        assert best["evaluations"] == 1
        assert best["optimizer"] == optimizer
        assert best["fidelity"] == {"epochs": 2, "attack_iters": 2}
        assert 0.0 <= best["std_error"] <= best["adv_error"] <= 1.0
        history = pd.read_csv(tmp_path / "tune_history.csv")
        assert len(history) == 1

    def test_missing_section_exits_2(self, tmp_path):
        manifest = manifest_with(tmp_path, {})
        assert main(["tune", "--manifest", str(manifest)]) == 2


def test_epsilon_tag():
    assert epsilon_tag(8 / 255) == "8of255"
    assert epsilon_tag(0.03) == "0.03"

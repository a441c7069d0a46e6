import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcrop.cli import main
from fedcrop.checkpoint import save_checkpoint
from fedcrop.data import load_synthetic, save_manifest
from fedcrop.metrics import SummaryReport, compare_methods, defense_success_rounds, emit_plots
from fedcrop.models import ModelSpec, TrainConfig, init_params, local_train
from fedcrop.orchestrator import RoundReport

from test_orchestrator import tiny


def test_defense_success_rounds_examples():
    assert defense_success_rounds([0.9, 0.2, 0.25, 0.8], 0.3) == 2
    assert defense_success_rounds([0.0] * 50) == 50
    assert defense_success_rounds([0.3], 0.3) == 0


def test_defense_success_rounds_errors():
    with pytest.raises(ValueError):
        defense_success_rounds([])
    with pytest.raises(ValueError):
        defense_success_rounds([0.1], 1.0)


@settings(max_examples=100, deadline=None)
@given(h=st.lists(st.floats(0, 1), min_size=1, max_size=30), t1=st.floats(0.01, 0.98), dt=st.floats(0, 0.5))
def test_defense_success_monotone_in_threshold(h, t1, dt):
    t2 = min(t1 + dt, 0.99)
    assert defense_success_rounds(h, t1) <= defense_success_rounds(h, t2) <= len(h)


def _reports(n=3, with_sub=False):
    out = []
    for r in range(n):
        sub = None
        if with_sub:
            sub = {"benign_main_acc": 0.8, "benign_backdoor_acc": 0.1, "repaired_main_acc": 0.7,
                   "repaired_backdoor_acc": 0.05, "n_benign": 7, "n_repaired": 3, "n_dropped": 0}
        out.append(RoundReport(r, 0.5 + 0.1 * r, [0.45, 0.25, 0.1, 0.05][r % 4], wall_time={"t_train": 1.0}, submodels=sub))
    return out


def test_summary_from_reports():
    s = SummaryReport.from_reports("x", _reports())
    assert s.defense_success_rounds == 2
    assert s.final_main_acc == pytest.approx(0.7)
    assert s.final_backdoor_acc == pytest.approx(0.1)
    assert s.mean_round_time == pytest.approx(1.0)


def test_report_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        RoundReport(0, 1.5, 0.0)


def test_emit_plots(tmp_path):
    paths = emit_plots(_reports(1), tmp_path)
    assert sorted(p.name for p in paths) == ["backdoor_acc.png", "main_acc.png", "submodels.png"]
    first = [p.read_bytes() for p in paths]
    emit_plots(_reports(1), tmp_path)
    assert [p.read_bytes() for p in paths] == first
    emit_plots({"a": _reports(2, True), "b": _reports(2)}, tmp_path / "multi")
    with pytest.raises(ValueError):
        emit_plots([], tmp_path)


def test_compare_methods_records_failures(tmp_path):
    good = tiny()
    bad = tiny(aggregator="krum", n_clients=2)  # krum needs n >= f + 3
    summaries, hist = compare_methods([good, good, bad], tmp_path)
    assert [s.method for s in summaries] == ["fedavg", "fedavg_2", "krum"]
    keys = ("defense_success_rounds", "final_main_acc", "final_backdoor_acc")
    assert [getattr(summaries[0], k) for k in keys] == [getattr(summaries[1], k) for k in keys]
    assert summaries[2].status.startswith("failed")
    with open(tmp_path / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert (tmp_path / "main_acc.png").exists()


def test_cli_run_and_env_seed(tmp_path, monkeypatch):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny().to_json())
    monkeypatch.setenv("FEDCROP_SEED", "5")
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out")]) == 0
    assert json.loads((tmp_path / "out" / "config.json").read_text())["seed"] == 5
    for name in ("rounds.csv", "rounds.jsonl", "summary.csv", "main_acc.png", "final.fcrop"):
        assert (tmp_path / "out" / name).exists()
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o2"), "--seed", "1"]) == 0
    assert json.loads((tmp_path / "o2" / "config.json").read_text())["seed"] == 1


def test_cli_compare_exit_codes(tmp_path):
    ok = tmp_path / "fedavg.json"
    ok.write_text(tiny().to_json())
    bad = tmp_path / "krum.json"
    bad.write_text(tiny(aggregator="krum", n_clients=2).to_json())
    assert main(["compare", "--configs", str(ok), "--out", str(tmp_path / "c1")]) == 0
    assert main(["compare", "--configs", str(ok), str(bad), "--out", str(tmp_path / "c2")]) == 1


def test_cli_missing_config_fails(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_cli_detect_train(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny(aggregator="gancrop").to_json())
    det = tmp_path / "det.fcrop"
    assert main(["detect-train", "--config", str(cfg_path), "--out", str(det)]) == 0
    assert det.exists()
    run_cfg = tiny(aggregator="gancrop", detector_path=str(det))
    cfg_path.write_text(run_cfg.to_json())
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0


def test_cli_recover(tmp_path):
    train, test = load_synthetic(100, 20, seed=0)
    model = local_train(init_params(ModelSpec(), 0), train, TrainConfig(epochs=1))
    save_checkpoint(tmp_path / "m.fcrop", model)
    save_manifest(test, tmp_path / "imgs")
    out = tmp_path / "rec"
    code = main(["recover", "--model", str(tmp_path / "m.fcrop"), "--images", str(tmp_path / "imgs"),
                 "--out", str(out), "--target", "2", "--steps", "3"])
    assert code == 0
    meta = json.loads((out / "trigger.json").read_text())
    assert meta["target_class"] == 2
    assert (out / "mean_pattern.npy").exists()

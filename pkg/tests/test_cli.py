import csv
import json

import pytest

from gfnet.bench import read_curves
from gfnet.cli import main
from gfnet.config import CONFIG_ENV, RunConfig, parse_override
from gfnet.errors import ConfigurationError

TINY = [
    "--set", "model.channels=[4,8]", "--set", "model.strides=[2,2]", "--set", "model.T=3",
    "--set", "model.classifier_hidden=16", "--set", "model.policy_hidden=8",
    "--set", "stage0.epochs=1", "--set", "stage1.epochs=1", "--set", "stage3.epochs=1",
    "--set", "ppo.epochs=1", "--set", "ppo.rollout_size=32", "--set", "ppo.ppo_epochs=1",
    "--set", "stage0.batch_size=16", "--set", "stage1.batch_size=16", "--set", "stage3.batch_size=16",
]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = ["--data-dir", str(root / "data"), "--out", str(root / "run"), "--seed", "3"] + TINY
    assert main(["convert-dataset", "--synthetic", "--n-train", "48", "--n-val", "24", "--n-test", "24"] + base) == 0
    assert main(["train", "--stage", "all"] + base) == 0
    return root, base


# -- config ---------------------------------------------------------------------------

def test_config_defaults_and_canonical_text():
    a, b = RunConfig(), RunConfig({})
    assert a.to_text() == b.to_text()
    assert json.loads(a.to_text())["ppo"]["gamma"] == 0.7
    assert a.stage_config(3).lr_classifier == 0.01


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config key 'stage1.epoch'"):
        RunConfig({"stage1": {"epoch": 3}})
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides=["nonsense=1"])


def test_config_precedence(tmp_path, monkeypatch):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "stage1": {"epochs": 7, "lam": 0.5}}))
    monkeypatch.setenv(CONFIG_ENV, str(f))
    cfg = RunConfig.load(overrides=["stage1.epochs=2"])
    assert cfg.seed == 5 and cfg["stage1"]["lam"] == 0.5  # file over defaults
    assert cfg["stage1"]["epochs"] == 2  # flag over file
    assert cfg.stage_config(1).seed == 5 and cfg.ppo_config().seed == 5


def test_parse_override():
    assert parse_override("a.b=[1,2]") == {"a": {"b": [1, 2]}}
    assert parse_override("output_dir=runs/x") == {"output_dir": "runs/x"}
    with pytest.raises(ConfigurationError):
        parse_override("novalue")


# -- commands -------------------------------------------------------------------------

def test_layout_and_config_copies(workspace):
    root, _ = workspace
    run_dir = root / "run"
    for sub in ("checkpoints", "logs"):
        assert (run_dir / sub / "config.json").read_text() == (run_dir / "config.json").read_text()
    assert sorted(p.name for p in (run_dir / "checkpoints").glob("*.gfck")) == [
        "stage0.gfck", "stage1.gfck", "stage2.gfck", "stage3.gfck"]
    assert not (run_dir / ".lock").exists()


def test_metrics_line_counts(workspace):
    root, _ = workspace
    logs = root / "run" / "logs"
    n = lambda s: len((logs / f"stage{s}.jsonl").read_text().splitlines())
    # 48 samples in batches of 16 -> 3 steps; stage 2: 48 / 32 -> 2 rollout rounds
    assert [n(0), n(1), n(2), n(3)] == [3, 3, 2, 3]


def test_train_is_deterministic(workspace, tmp_path):
    root, base = workspace
    other = [a if a != str(root / "run") else str(tmp_path / "again") for a in base]
    assert main(["train", "--stage", "all"] + other) == 0
    for s in range(4):
        assert (tmp_path / "again/logs" / f"stage{s}.jsonl").read_bytes() == \
            (root / "run/logs" / f"stage{s}.jsonl").read_bytes()
        assert (tmp_path / "again/checkpoints" / f"stage{s}.gfck").read_bytes() == \
            (root / "run/checkpoints" / f"stage{s}.gfck").read_bytes()


def test_missing_prerequisite(workspace, tmp_path, capsys):
    root, base = workspace
    other = [a if a != str(root / "run") else str(tmp_path / "fresh") for a in base]
    code, _, err = run(capsys, "train", "--stage", "2", *other)
    assert code != 0
    assert "stage 1 checkpoint required" in err


def _summary(root, mode, policy="learned"):
    return json.loads((root / "run/traces" / f"eval-{mode}-{policy}.summary.json").read_text())


def test_eval_modes_agree(workspace, capsys):
    root, base = workspace
    assert run(capsys, "eval", "--mode", "full", *base)[0] == 0
    full = _summary(root, "full")
    assert run(capsys, "eval", "--mode", "anytime", "--step", "3", *base)[0] == 0
    anytime = _summary(root, "anytime")
    assert full["accuracy"] == anytime["accuracy"] and full["exit_counts"] == anytime["exit_counts"]
    ct = full["average_cost"]
    assert run(capsys, "eval", "--mode", "budgeted", "--budget", repr(ct), *base)[0] == 0
    assert _summary(root, "budgeted")["accuracy"] == full["accuracy"]
    lines = (root / "run/traces/eval-full-learned.jsonl").read_text().splitlines()
    assert len(lines) == 24


def test_eval_random_policy_reproducible(workspace, capsys):
    root, base = workspace
    run(capsys, "eval", "--policy", "random", *base)
    a = _summary(root, "full", "random")
    run(capsys, "eval", "--policy", "random", *base)
    assert _summary(root, "full", "random") == a


def test_eval_infeasible_budget(workspace, capsys):
    _, base = workspace
    code, _, err = run(capsys, "eval", "--mode", "budgeted", "--budget", "1", *base)
    assert code != 0 and "feasible per-sample range" in err


def test_sweep_auto(workspace, capsys):
    root, base = workspace
    assert run(capsys, "sweep", "--budgets", "auto", *base)[0] == 0
    prov, points = read_curves(root / "run/curves/sweep.csv")
    assert len(points) == 10
    assert len(prov["checkpoint_sha256"]) == 64
    body = [l for l in (root / "run/curves/sweep.csv").read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.reader(body))
    assert rows[0] == ["budget", "realized_cost", "accuracy", "q", "eta_1", "eta_2", "eta_3", "exit_counts"]
    assert all(len(r) == 8 for r in rows)
    run(capsys, "eval", "--mode", "full", *base)
    run(capsys, "eval", "--mode", "anytime", "--step", "1", *base)
    assert points[-1].accuracy == _summary(root, "full")["accuracy"]
    assert points[0].accuracy == _summary(root, "anytime")["accuracy"]


def test_trace_dump(workspace, capsys):
    root, base = workspace
    assert run(capsys, "trace", "--ids", "0,5", *base)[0] == 0
    recs = [json.loads(l) for l in (root / "run/traces/trace.jsonl").read_text().splitlines()]
    assert [r["id"] for r in recs] == [0, 5]
    for r in recs:
        assert r["steps"][0]["location"] is None
        for s in r["steps"]:
            top, left, h, w = s["window"]
            assert 0 <= top and top + h <= 32 and 0 <= left and left + w <= 32
    run(capsys, "eval", "--mode", "full", *base)
    engine = [json.loads(l) for l in (root / "run/traces/eval-full-learned.jsonl").read_text().splitlines()]
    assert [s["confidence"] for s in recs[1]["steps"]] == engine[5]["confidences"]
    assert run(capsys, "trace", "--ids", "0", "--step", "1", *base)[0] == 0
    one = json.loads((root / "run/traces/trace.jsonl").read_text())
    assert len(one["steps"]) == 1 and one["steps"][0]["location"] is None


def test_trace_unknown_id(workspace, capsys):
    _, base = workspace
    code, _, err = run(capsys, "trace", "--ids", "999", *base)
    assert code != 0 and "unknown sample id" in err


def test_solve_budget_command(capsys):
    code, out, _ = run(capsys, "solve-budget", "--budget", "1.2", "--costs", "1,2")
    assert code == 0
    d = json.loads(out)
    assert d["q"] == pytest.approx(0.75, abs=1e-6)
    assert d["expected_cost"] == pytest.approx(1.2, abs=1e-6)


def test_convert_refuses_overwrite_and_npz(workspace, tmp_path, capsys):
    import numpy as np

    root, base = workspace
    code, _, err = run(capsys, "convert-dataset", "--synthetic", *base)
    assert code != 0 and "refusing to overwrite" in err
    rng = np.random.default_rng(0)
    arrays = {f"{s}_images": rng.integers(0, 256, (4, 3, 32, 32), dtype=np.uint8) for s in ("train", "val", "test")}
    arrays.update({f"{s}_labels": np.array([0, 1, 2, 1]) for s in ("train", "val", "test")})
    np.savez(tmp_path / "d.npz", **arrays)
    assert main(["convert-dataset", "--npz", str(tmp_path / "d.npz"), "--data-dir", str(tmp_path / "dd")]) == 0
    from gfnet.dataio import load_dataset

    ds = load_dataset(tmp_path / "dd/val.gfds")
    assert ds.num_classes == 3 and ds.split == "val"
    assert "normalization" in ds.manifest


def test_lock_file_blocks_concurrent_writers(workspace, capsys):
    root, base = workspace
    lock = root / "run/.lock"
    lock.write_text("123")
    try:
        code, _, err = run(capsys, "eval", *base)
        assert code != 0 and "locked" in err
    finally:
        lock.unlink()

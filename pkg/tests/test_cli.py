import json
from pathlib import Path

import pytest

from branchlab.cli import main
from branchlab.config import Config, ConfigError


def _base_overrides(root: Path, **extra) -> list[str]:
    values = {
        "run.root": str(root),
        "run.seed": "5",
        "family.n": "12",
        "family.m": "3",
        "family.train_count": "10",
        "family.valid_count": "4",
        "family.test_count": "4",
        "collect.max_nodes": "25",
        "collect.max_clock": "2500",
        "select.epochs": "8",
        "train.epochs": "8",
        "train.checkpoint_every": "4",
        "eval.max_nodes": "60",
        "eval.max_clock": "2500",
    }
    values.update({k: str(v) for k, v in extra.items()})
    args = []
    for k, v in values.items():
        args.extend(["--set", f"{k}={v}"])
    return args


def _run(command: str, overrides: list[str], *extra_args) -> int:
    return main([*overrides, command, *extra_args])


def test_full_pipeline_smoke(tmp_path):
    root = tmp_path / "run"
    ov = _base_overrides(root)

    assert _run("generate", ov) == 0
    manifest = json.loads((root / "instances" / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 10
    assert len(manifest["files"]) == 18
    assert (root / "config.effective.txt").exists()

    assert _run("collect", ov) == 0
    episodes = json.loads((root / "episodes" / "manifest.json").read_text())
    assert len(episodes["files"]) == 10
    assert episodes["total_transitions"] == sum(episodes["transition_counts"].values())
    assert episodes["total_transitions"] > 0

    assert _run("select", ov) == 0
    env_report = json.loads((root / "selected" / "envelope_report.json").read_text())
    import math

    assert env_report["selected"] == math.ceil(0.15 * env_report["total"])
    # ratio ranking reproducible from the emitted (G, V) columns
    cols = env_report["columns"]
    ratios = sorted(
        (c["G_shifted"] / c["V_shifted"] for c in cols), reverse=True
    )
    boundary = ratios[env_report["selected"] - 1]
    assert env_report["threshold"] == pytest.approx(boundary, rel=1e-12)
    dataset_lines = (root / "selected" / "dataset.jsonl").read_text().splitlines()
    assert len(dataset_lines) == env_report["selected"]

    assert _run("train", ov) == 0
    curve = (root / "checkpoints" / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,train_loss,valid_loss"
    assert len(curve) == 1 + 8

    assert _run("evaluate", ov) == 0
    table = json.loads((root / "reports" / "checkpoint_table.json").read_text())
    assert table["selected"] in [e["checkpoint"] for e in table["table"]]
    assert all("valid_loss" in e and "mean_reward" in e for e in table["table"])

    assert _run("report", ov, "--plot-data") == 0
    summary = (root / "reports" / "summary.txt").read_text()
    assert "best checkpoint" in summary
    plot_files = list((root / "reports" / "plotdata").glob("*.csv"))
    assert plot_files
    assert plot_files[0].read_text().splitlines()[0] == "clock,dual_bound"
    # loss curve passthrough: epochs strictly increasing, values copied verbatim
    copied = (root / "reports" / "loss_curve.csv").read_text().splitlines()
    assert copied == curve


def test_generate_rerun_identical_manifest(tmp_path):
    ov1 = _base_overrides(tmp_path / "a")
    ov2 = _base_overrides(tmp_path / "b")
    assert _run("generate", ov1) == 0
    assert _run("generate", ov2) == 0
    m1 = json.loads((tmp_path / "a" / "instances" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "b" / "instances" / "manifest.json").read_text())
    assert m1["files"] == m2["files"]


def test_collect_rerun_identical_digests(tmp_path):
    root = tmp_path / "run"
    ov = _base_overrides(root, **{"family.train_count": 4})
    assert _run("generate", ov) == 0
    assert _run("collect", ov) == 0
    first = json.loads((root / "episodes" / "manifest.json").read_text())
    assert _run("collect", ov) == 0
    second = json.loads((root / "episodes" / "manifest.json").read_text())
    assert first["files"] == second["files"]


def test_mismatched_config_hash_refused(tmp_path):
    root = tmp_path / "run"
    ov = _base_overrides(root, **{"family.train_count": 3})
    assert _run("generate", ov) == 0
    # changing any config key invalidates downstream stages
    ov_changed = _base_overrides(root, **{"family.train_count": 3, "hybrid.r0": "0.7"})
    assert _run("collect", ov_changed) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    assert main(["--set", "no.such.key=1", "generate"]) == 1


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_missing_artifacts_is_data_error(tmp_path):
    ov = _base_overrides(tmp_path / "empty")
    assert _run("collect", ov) == 2


def test_config_file_and_override_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("run.seed = 7\nhybrid.r0 = 0.25   # comment\n")
    cfg = Config.load(cfg_file, ["hybrid.r0=0.75"])
    assert cfg.get_int("run.seed") == 7
    assert cfg.get_float("hybrid.r0") == 0.75


def test_config_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("does.not.exist = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        Config.load(cfg_file)


def test_config_hash_key_order_independent(tmp_path):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("run.seed = 3\nhybrid.r0 = 0.5\n")
    b.write_text("hybrid.r0 = 0.5\nrun.seed = 3\n")
    assert Config.load(a).hash() == Config.load(b).hash()

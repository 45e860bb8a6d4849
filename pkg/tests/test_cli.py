"""CLI verbs: manifests, determinism, exit codes, table schemas."""

import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from moelab import numerics as nm
from moelab.cli import (
    OracleFailure,
    _exit_code,
    cmd_ablate,
    cmd_check_grad,
    cmd_diagnose,
    cmd_sweep_topk,
    cmd_train,
    main,
)
from moelab.configio import parse_config_dict
from moelab.errors import ConfigError, DivergenceError, TraceFormatError
from moelab.experts import POLICIES
from moelab.gradcheck import check_gradients
from moelab.losses import LossConfig
from moelab.routing import MoEConfig
from moelab.synthetic import TaskConfig

REPO = Path(__file__).resolve().parent.parent
GRADCHECK_TOML = REPO / "configs" / "gradcheck.toml"

_SMALL_TOML = """\
policy = "hierarchical"

[moe]
d = 8
d_g = 8
h = 16
n_experts = 4
k_active = 2
n_scene_routes = 4
k_scene = 2

[task]
n_queries = 6

[train]
steps = 6
batch_size = 2
eval_batches = 4

[sweep]
k_values = [1, 2]
latency_batches = 3
warmup = 1
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(_SMALL_TOML)
    return path


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_twice_produces_identical_artifacts(small_cfg, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", str(small_cfg), "--out", str(out)]) == 0
    for name in ("metrics.csv", "trace.jsonl", "checkpoint.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_train_invalid_k_names_invariant_exit_2(small_cfg, tmp_path, capsys):
    rc = main(
        [
            "train", "--config", str(small_cfg), "--out", str(tmp_path / "o"),
            "--set", "moe.k_active=9",
        ]
    )
    assert rc == 2
    err = capsys.readouterr().err
    assert "k_active" in err and "n_experts" in err


def test_manifest_records_overrides_and_seed(small_cfg, tmp_path):
    out = cmd_train(small_cfg, overrides=("loss.lambda1=0.0",), out_dir=tmp_path / "o", seed=5)
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["overrides"] == ["loss.lambda1=0.0"]
    assert doc["seed"] == 5
    assert doc["resolved_config"]["loss"]["lambda1"] == 0.0
    assert doc["resolved_config"]["train"]["seed"] == 5
    assert doc["command"] == "train"
    assert doc["timings"]["finished"] is not None
    assert doc["summary"]["steps"] == 6
    # a run is reproducible from the manifest alone: the resolved config
    # parses back to itself
    rc = parse_config_dict(doc["resolved_config"])
    assert rc.resolved_dict() == doc["resolved_config"]


def test_manifest_written_before_compute_and_partial_logs_survive(small_cfg, tmp_path):
    out_dir = tmp_path / "diverge"
    with pytest.raises(DivergenceError):
        cmd_train(
            small_cfg,
            overrides=("policy=dense", "train.lr=1e30", "train.clip=1e299", "train.steps=20"),
            out_dir=out_dir,
        )
    doc = json.loads((out_dir / "manifest.json").read_text())
    assert doc["timings"]["finished"] is None  # pre-compute snapshot
    assert doc["artifacts"]["metrics"] == "metrics.csv"
    lines = (out_dir / "metrics.csv").read_text().splitlines()
    assert len(lines) >= 2  # header plus at least one surviving row


def test_divergence_maps_to_exit_3(small_cfg, tmp_path, capsys):
    rc = main(
        [
            "train", "--config", str(small_cfg), "--out", str(tmp_path / "o"),
            "--set", "policy=dense", "--set", "train.lr=1e30",
            "--set", "train.clip=1e299", "--set", "train.steps=20",
        ]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_unknown_config_key_exit_2(small_cfg, tmp_path, capsys):
    rc = main(
        ["train", "--config", str(small_cfg), "--out", str(tmp_path / "o"), "--set", "moe.bogus=1"]
    )
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_config_file_exit_4(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 4


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def test_ablate_emits_all_policies_with_shared_seed(small_cfg, tmp_path):
    out = cmd_ablate(small_cfg, out_dir=tmp_path / "ab", seed=3)
    rows = _read_rows(out / "ablate.csv")
    assert [r["variant"] for r in rows] == list(POLICIES)
    assert {r["seed"] for r in rows} == {"3"}
    assert all(r["status"] == "ok" for r in rows)
    with open(out / "ablate.csv") as fh:
        header = fh.readline().strip()
    assert header == (
        "variant,seed,status,final_task_loss,total_params,"
        "active_params_per_query,flops_per_query"
    )
    by_variant = {r["variant"]: r for r in rows}
    for name in POLICIES:
        assert np.isfinite(float(by_variant[name]["final_task_loss"]))
        assert (out / name / "metrics.csv").exists()
    # dense keeps a single FFN: fewer parameters than any expert-bank variant
    dense_params = int(by_variant["dense"]["total_params"])
    for name in POLICIES:
        if name != "dense":
            assert int(by_variant[name]["total_params"]) > dense_params


# ---------------------------------------------------------------------------
# sweep-topk
# ---------------------------------------------------------------------------


def test_sweep_topk_table_schema_and_trends(small_cfg, tmp_path):
    out = cmd_sweep_topk(small_cfg, out_dir=tmp_path / "sw")
    with open(out / "sweep.csv") as fh:
        header = fh.readline().strip()
    assert header == (
        "k,final_task_loss,flops_per_query,active_params_per_query,"
        "latency_median_s,latency_iqr_s,latency_batches"
    )
    rows = _read_rows(out / "sweep.csv")
    assert [int(r["k"]) for r in rows] == [1, 2]
    flops = [int(r["flops_per_query"]) for r in rows]
    assert flops[0] < flops[1]
    # latency is measured wall clock, reported in its own columns
    for r in rows:
        assert float(r["latency_median_s"]) >= 0.0
        assert float(r["latency_iqr_s"]) >= 0.0
        assert int(r["latency_batches"]) == 3


def test_sweep_topk_rejects_k_above_bank(small_cfg, tmp_path):
    with pytest.raises(ConfigError, match="k_values"):
        cmd_sweep_topk(
            small_cfg, overrides=("sweep.k_values=[9]",), out_dir=tmp_path / "sw"
        )


# ---------------------------------------------------------------------------
# check-grad
# ---------------------------------------------------------------------------


def test_check_grad_passes_and_prints_blocks(tmp_path, capsys):
    out = cmd_check_grad(GRADCHECK_TOML, out_dir=tmp_path / "cg")
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("block ")]
    assert lines, "expected per-block report lines"
    pat = re.compile(r"^block [\w.]+: max_rel_error=\d\.\d{3}e[+-]\d{2} PASS$")
    assert all(pat.match(l) for l in lines)
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["passed"] is True
    assert doc["max_rel_error"] <= doc["tolerance"] == 1e-4


def test_check_grad_covers_diversity_path_on_and_off():
    cfg = MoEConfig(d=4, d_g=4, h=8, n_experts=4, k_active=2, n_scene_routes=2, k_scene=1)
    task = TaskConfig(d=4, d_g=4, n_queries=2, n_scene_types=2, n_instance_types=2)
    for loss_cfg in (LossConfig(lambda2=0.0), LossConfig(lambda2=0.001)):
        result = check_gradients("hierarchical", cfg, loss_cfg, task, seed=0)
        assert result.passed, result.blocks


def test_check_grad_corrupted_adjoint_fails_naming_block(tmp_path, capsys, monkeypatch):
    orig = nm.VJP_RULES["tanh"]
    monkeypatch.setitem(
        nm.VJP_RULES, "tanh", lambda ctx, u: tuple(g * 1.01 for g in orig(ctx, u))
    )
    with pytest.raises(OracleFailure, match=r"expert\d\.(W1|b1)") as exc:
        cmd_check_grad(GRADCHECK_TOML, out_dir=tmp_path / "cg")
    assert any("FAIL" in l for l in capsys.readouterr().out.splitlines())
    assert _exit_code(exc.value) == 3


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def test_diagnose_full_round_trip_from_train(small_cfg, tmp_path):
    run = cmd_train(small_cfg, out_dir=tmp_path / "run")
    out = cmd_diagnose(run / "trace.jsonl", out_dir=tmp_path / "diag")
    doc = json.loads((out / "report.json").read_text())
    assert doc["n_records"] > 0
    assert np.isfinite(doc["routing_entropy"])
    assert len(doc["utilization"]["counts"]) == 4
    assert len(doc["route_profiles"]) == 4
    assert doc["specialization"] is not None  # manifest + checkpoint were found
    assert (out / "specialization.json").exists()
    assert (out / "report.csv").exists()
    assert doc["entropy_series"][0]["batch"] == 0


def test_diagnose_trace_only_profile_report(small_cfg, tmp_path):
    run = cmd_train(small_cfg, out_dir=tmp_path / "run")
    bare = tmp_path / "bare"
    bare.mkdir()
    (bare / "trace.jsonl").write_bytes((run / "trace.jsonl").read_bytes())
    out = cmd_diagnose(bare / "trace.jsonl", out_dir=tmp_path / "diag2")
    doc = json.loads((out / "report.json").read_text())
    assert doc["specialization"] is None
    with open(out / "report.csv") as fh:
        header = fh.readline().strip()
    assert header == "expert,present,total,dominant_route,dominant_share,dominant_label"


def test_diagnose_empty_trace_is_explicit_error(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(TraceFormatError, match="no records") as exc:
        cmd_diagnose(empty, out_dir=tmp_path / "d")
    assert exc.value.line_number == 0
    assert not (tmp_path / "d").exists()  # no empty report files
    assert main(["diagnose", "--trace", str(empty), "--out", str(tmp_path / "d2")]) == 4
    assert "no records" in capsys.readouterr().err


def test_diagnose_malformed_line_exit_4(small_cfg, tmp_path, capsys):
    run = cmd_train(small_cfg, out_dir=tmp_path / "run")
    lines = (run / "trace.jsonl").read_text().splitlines()
    lines[1] = '{"batch": 0}'
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["diagnose", "--trace", str(bad), "--out", str(tmp_path / "d")]) == 4
    assert "error:" in capsys.readouterr().err

"""Command-line entry point.

Verbs: train, ablate, sweep-topk, check-grad, diagnose. Every command
resolves its config, writes a run manifest BEFORE any compute (so an
interrupted run can be rerun from the manifest alone), then streams its
outputs into the run directory. All randomness flows from the manifest seed.

Exit codes: 0 success; 2 configuration error (bad config file, bad override,
invariant violation, shape/parameter mismatch); 3 numerical failure
(divergence, gradient-check failure, degenerate routing, bad numeric input);
4 I/O failure (unreadable files, malformed trace lines).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .configio import ResolvedConfig, load_config, parse_config_dict
from .diagnostics import (
    record_entropies,
    route_profile,
    routing_entropy,
    save_report,
    specialization_report,
    utilization_histogram,
)
from .errors import (
    ConfigError,
    DimensionError,
    MoelabError,
    ParameterError,
    TraceFormatError,
)
from .experts import POLICIES, count_params_flops, load_checkpoint, save_checkpoint
from .gradcheck import TOLERANCE, check_gradients
from .routing import RoutingTrace
from .synthetic import (
    EVAL_OFFSET,
    TYPE_NAMES,
    generate_batch,
    measure_latency,
    train,
)

__all__ = ["main", "cmd_train", "cmd_ablate", "cmd_sweep_topk", "cmd_check_grad", "cmd_diagnose"]


def default_scene_labels(n: int) -> list[str]:
    base = ["indoor", "outdoor", "crowd", "generalist"]
    return [base[r] if r < len(base) else f"route{r}" for r in range(n)]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


class _Manifest:
    """Written with null timings before compute, finalized afterwards."""

    def __init__(self, out: Path, command: str, rc: ResolvedConfig, config_path, overrides, artifacts: dict):
        self.path = out / "manifest.json"
        self.doc = {
            "tool": "moelab",
            "version": __version__,
            "command": command,
            "config_path": str(config_path) if config_path else None,
            "overrides": list(overrides),
            "seed": rc.train.seed,
            "policy": rc.policy,
            "resolved_config": rc.resolved_dict(),
            "artifacts": artifacts,
            "timings": {"started": _now(), "finished": None, "seconds": None},
        }
        self._t0 = time.perf_counter()
        _write_json(self.path, self.doc)

    def finish(self, **extra) -> None:
        self.doc["timings"]["finished"] = _now()
        self.doc["timings"]["seconds"] = time.perf_counter() - self._t0
        self.doc.update(extra)
        _write_json(self.path, self.doc)


def _prepare_out(out_dir, default: str) -> Path:
    out = Path(out_dir) if out_dir else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(config_path, overrides=(), out_dir=None, seed=None) -> Path:
    rc = load_config(config_path, overrides, seed)
    out = _prepare_out(out_dir, "runs/train")
    artifacts = {
        "metrics": "metrics.csv",
        "trace": "trace.jsonl",
        "checkpoint": "checkpoint.json",
    }
    manifest = _Manifest(out, "train", rc, config_path, overrides, artifacts)
    result = train(rc.policy, rc.moe, rc.loss, rc.train, rc.task, metrics_path=out / "metrics.csv")
    result.trace.save(out / "trace.jsonl")
    save_checkpoint(out / "checkpoint.json", result.params, rc.moe, policy=rc.policy)
    manifest.finish(
        summary={
            "eval_task_loss": result.eval_task_loss,
            "eval_balance_hard": result.eval_balance_hard,
            "steps": rc.train.steps,
            "clip_engaged_steps": result.clip_engaged_steps,
        }
    )
    return out


def cmd_ablate(config_path, overrides=(), out_dir=None, seed=None) -> Path:
    """Run all five policies with a shared seed and shared generated data."""
    rc = load_config(config_path, overrides, seed)
    out = _prepare_out(out_dir, "runs/ablate")
    manifest = _Manifest(out, "ablate", rc, config_path, overrides, {"table": "ablate.csv"})
    rows = []
    for policy in POLICIES:
        sub = out / policy
        sub.mkdir(exist_ok=True)
        acct = count_params_flops(policy, rc.moe)
        row = {
            "variant": policy,
            "seed": rc.train.seed,
            "status": "ok",
            "final_task_loss": "",
            "total_params": acct["total_params"],
            "active_params_per_query": acct["active_params_per_query"],
            "flops_per_query": acct["flops_per_query"],
        }
        try:
            result = train(
                policy, rc.moe, rc.loss, rc.train, rc.task, metrics_path=sub / "metrics.csv"
            )
            result.trace.save(sub / "trace.jsonl")
            save_checkpoint(sub / "checkpoint.json", result.params, rc.moe, policy=policy)
            row["final_task_loss"] = repr(result.eval_task_loss)
        except MoelabError as exc:
            row["status"] = f"error:{type(exc).__name__}"
        rows.append(row)
    _write_table(out / "ablate.csv", rows)
    manifest.finish()
    return out


def _write_table(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_sweep_topk(config_path, overrides=(), out_dir=None, seed=None) -> Path:
    """Per-K row: trained task loss, FLOPs/query, measured latency (median
    and IQR over timed batches after warmup) -- latency is never derived
    from the FLOP count."""
    rc = load_config(config_path, overrides, seed)
    out = _prepare_out(out_dir, "runs/sweep-topk")
    manifest = _Manifest(out, "sweep-topk", rc, config_path, overrides, {"table": "sweep.csv"})
    rows = []
    for k in rc.sweep["k_values"]:
        if not (1 <= k <= rc.moe.n_experts):
            raise ConfigError(
                f"sweep.k_values entry {k} violates 1 <= k <= n_experts={rc.moe.n_experts}"
            )
        cfg_k = replace(rc.moe, k_active=k)
        sub = out / f"k{k}"
        sub.mkdir(exist_ok=True)
        result = train(rc.policy, cfg_k, rc.loss, rc.train, rc.task, metrics_path=sub / "metrics.csv")
        acct = count_params_flops(rc.policy, cfg_k)
        lat = measure_latency(
            rc.policy,
            result.params,
            cfg_k,
            rc.task,
            rc.train.seed,
            n_timed=rc.sweep["latency_batches"],
            warmup=rc.sweep["warmup"],
        )
        rows.append(
            {
                "k": k,
                "final_task_loss": repr(result.eval_task_loss),
                "flops_per_query": acct["flops_per_query"],
                "active_params_per_query": acct["active_params_per_query"],
                "latency_median_s": repr(lat["median_s"]),
                "latency_iqr_s": repr(lat["iqr_s"]),
                "latency_batches": lat["n"],
            }
        )
    _write_table(out / "sweep.csv", rows)
    manifest.finish()
    return out


class OracleFailure(MoelabError, RuntimeError):
    """Gradient check exceeded tolerance; maps to exit code 3."""

    def __init__(self, result):
        self.result = result
        super().__init__(
            "gradient check failed for blocks: " + ", ".join(result.failing_blocks())
        )


def cmd_check_grad(config_path, overrides=(), out_dir=None, seed=None) -> Path:
    rc = load_config(config_path, overrides, seed)
    out = _prepare_out(out_dir, "runs/check-grad")
    manifest = _Manifest(out, "check-grad", rc, config_path, overrides, {"report": "gradcheck.json"})
    result = check_gradients(rc.policy, rc.moe, rc.loss, rc.task, seed=rc.train.seed)
    _write_json(
        out / "gradcheck.json",
        {
            "tolerance": result.tolerance,
            "max_rel_error": result.max_rel_error,
            "passed": result.passed,
            "params_seed": result.params_seed,
            "selection_margin": result.margin,
            "blocks": result.blocks,
        },
    )
    for name, err in result.blocks.items():
        status = "PASS" if err <= result.tolerance else "FAIL"
        print(f"block {name}: max_rel_error={err:.3e} {status}")
    manifest.finish(summary={"passed": result.passed, "max_rel_error": result.max_rel_error})
    if not result.passed:
        raise OracleFailure(result)
    return out


def cmd_diagnose(trace_path, out_dir=None) -> Path:
    """Build report files from a serialized trace. When the run directory
    also holds a manifest and checkpoint, the evaluation batches are
    regenerated and the full specialization report is included."""
    trace_path = Path(trace_path)
    trace = RoutingTrace.load(trace_path)
    if not trace.records:
        raise TraceFormatError(f"{trace_path} contains no records", line_number=0)
    out = _prepare_out(out_dir, str(trace_path.parent / "diagnostics"))

    entropies = record_entropies(trace)
    by_batch: dict[int, list[float]] = {}
    for rec, h in zip(trace.records, entropies):
        by_batch.setdefault(rec.batch, []).append(float(h))
    entropy_series = [
        {"batch": b, "mean_entropy": sum(v) / len(v)} for b, v in sorted(by_batch.items())
    ]

    manifest_path = trace_path.parent / "manifest.json"
    checkpoint_path = trace_path.parent / "checkpoint.json"
    specialization = None
    route_map = None
    labels = default_scene_labels(max((rv[0] for rec in trace.records for rv in rec.routes), default=-1) + 1)
    if manifest_path.exists() and checkpoint_path.exists():
        rc = parse_config_dict(json.loads(manifest_path.read_text())["resolved_config"])
        params, cfg, _ = load_checkpoint(checkpoint_path)
        route_map = cfg.route_to_experts
        labels = default_scene_labels(cfg.n_scene_routes)
        eval_batches = [
            generate_batch(rc.task, rc.train.seed, EVAL_OFFSET + j)
            for j in range(rc.train.eval_batches)
        ]
        specialization = specialization_report(
            params,
            eval_batches,
            trace,
            type_names=TYPE_NAMES[: rc.task.n_instance_types],
            scene_labels=labels,
            route_to_experts=route_map,
        )

    profiles = route_profile(trace, scene_labels=labels, route_to_experts=route_map)
    doc = {
        "n_records": len(trace.records),
        "routing_entropy": routing_entropy(trace),
        "entropy_series": entropy_series,
        "utilization": utilization_histogram(trace),
        "route_profiles": [
            {
                "expert": p.expert,
                "present": p.present,
                "counts": {str(r): c for r, c in sorted(p.counts.items())},
                "dominant_route": p.dominant_route,
                "dominant_share": p.dominant_share,
                "dominant_label": p.dominant_label,
            }
            for p in profiles
        ],
        "specialization": specialization.to_dict() if specialization else None,
    }
    _write_json(out / "report.json", doc)
    if specialization is not None:
        save_report(specialization, out / "specialization.json", out / "report.csv")
    else:
        _write_table(
            out / "report.csv",
            [
                {
                    "expert": p.expert,
                    "present": p.present,
                    "total": p.total,
                    "dominant_route": "" if p.dominant_route is None else p.dominant_route,
                    "dominant_share": "" if p.dominant_share is None else repr(p.dominant_share),
                    "dominant_label": p.dominant_label or "",
                }
                for p in profiles
            ],
        )
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moelab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"moelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override with a dotted key, repeatable",
        )

    for name in ("train", "ablate", "sweep-topk", "check-grad"):
        common(sub.add_parser(name))
    diag = sub.add_parser("diagnose")
    diag.add_argument("--trace", required=True, help="trace.jsonl path")
    diag.add_argument("--out", default=None, help="output directory")
    return parser


_COMMANDS = {
    "train": lambda a: cmd_train(a.config, a.overrides, a.out, a.seed),
    "ablate": lambda a: cmd_ablate(a.config, a.overrides, a.out, a.seed),
    "sweep-topk": lambda a: cmd_sweep_topk(a.config, a.overrides, a.out, a.seed),
    "check-grad": lambda a: cmd_check_grad(a.config, a.overrides, a.out, a.seed),
    "diagnose": lambda a: cmd_diagnose(a.trace, a.out),
}


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (TraceFormatError, OSError, json.JSONDecodeError)):
        return 4
    if isinstance(exc, (ConfigError, DimensionError, ParameterError)):
        return 2
    return 3


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        out = _COMMANDS[args.command](args)
    except (MoelabError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

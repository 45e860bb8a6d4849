"""Post-hoc routing and specialization statistics over serialized traces.

Everything here reads the trace record stream (plus, for the specialization
report, the evaluation batches and expert weights needed to recompute
per-query losses); nothing requires the runtime objects, so the diagnostics
run identically on a freshly produced trace and on one loaded from disk.

Scene-route attribution: each record lists its selected routes with their
probabilities. An assignment of expert k is attributed to the selected route
whose expert subset contains k (highest probability wins when several do,
lowest route index on ties); without a route-to-expert mapping it falls back
to the highest-probability selected route. Dominant shares are normalized
per expert -- across experts they are not expected to sum to anything.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError
from .ffn import expert_forward
from .routing import RoutingTrace

__all__ = [
    "ExpertRouteProfile",
    "route_profile",
    "record_entropies",
    "routing_entropy",
    "utilization_histogram",
    "SpecializationReport",
    "specialization_report",
    "save_report",
    "load_report",
]


@dataclass
class ExpertRouteProfile:
    """Per-expert scene-route assignment counts, normalized by the expert's
    OWN total (shares across experts need not sum to anything)."""

    expert: int
    counts: dict[int, int] = field(default_factory=dict)
    total: int = 0
    present: bool = False
    dominant_route: int | None = None
    dominant_share: float | None = None
    dominant_label: str | None = None


def _attribute_route(record, expert: int, route_to_experts) -> int | None:
    if not record.routes:
        return None
    candidates = record.routes
    if route_to_experts is not None:
        containing = [rv for rv in record.routes if expert in route_to_experts[rv[0]]]
        if containing:
            candidates = containing
    # highest probability, lowest index on ties
    return int(min(candidates, key=lambda rv: (-rv[1], rv[0]))[0])


def route_profile(
    trace: RoutingTrace,
    scene_labels=None,
    route_to_experts=None,
) -> list[ExpertRouteProfile]:
    """Count, per expert, assignments attributed to each scene route."""
    profiles = [ExpertRouteProfile(expert=k) for k in range(trace.n_experts)]
    for rec in trace.records:
        for k in rec.experts:
            route = _attribute_route(rec, k, route_to_experts)
            if route is None:
                continue
            p = profiles[k]
            p.counts[route] = p.counts.get(route, 0) + 1
            p.total += 1
    for p in profiles:
        if p.total == 0:
            continue
        p.present = True
        p.dominant_route = min(p.counts, key=lambda r: (-p.counts[r], r))
        p.dominant_share = p.counts[p.dominant_route] / p.total
        if scene_labels is not None:
            p.dominant_label = scene_labels[p.dominant_route]
    return profiles


def record_entropies(trace: RoutingTrace) -> np.ndarray:
    """Entropy of each record's pool-restricted, renormalized distribution."""
    out = np.zeros(len(trace.records))
    for i, rec in enumerate(trace.records):
        vals = np.asarray([rec.e_full[k] for k in rec.pool])
        s = vals.sum()
        if s <= 0.0:
            raise InputError(f"record {i}: no probability mass on its pool")
        p = vals / s
        nz = p[p > 0]
        out[i] = float(-np.sum(nz * np.log(nz)))
    return out


def routing_entropy(trace: RoutingTrace) -> float:
    """Mean per-query routing entropy (natural log) over the trace."""
    if not trace.records:
        raise InputError("cannot compute routing entropy of an empty trace")
    return float(record_entropies(trace).mean())


def utilization_histogram(trace: RoutingTrace) -> dict:
    """Raw per-expert assignment counts plus the frequency vector f."""
    if not trace.records:
        raise InputError("cannot compute a utilization histogram of an empty trace")
    counts = trace.counts()
    total = int(counts.sum())
    return {
        "counts": [int(c) for c in counts],
        "f": [float(x) for x in counts / total],
        "total": total,
    }


@dataclass
class SpecializationReport:
    """Per-expert, per-instance-type mean task loss (lower is better), with
    per-expert route profiles and an unweighted average row."""

    type_names: list[str]
    cells: list[list[float | None]]  # [expert][type], None where no queries landed
    cell_counts: list[list[int]]
    average: list[float | None]  # unweighted mean of present per-expert cells
    profiles: list[ExpertRouteProfile]

    def to_dict(self) -> dict:
        return {
            "type_names": list(self.type_names),
            "cells": self.cells,
            "cell_counts": self.cell_counts,
            "average": self.average,
            "profiles": [
                {
                    "expert": p.expert,
                    "counts": {str(r): c for r, c in sorted(p.counts.items())},
                    "total": p.total,
                    "present": p.present,
                    "dominant_route": p.dominant_route,
                    "dominant_share": p.dominant_share,
                    "dominant_label": p.dominant_label,
                }
                for p in self.profiles
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SpecializationReport":
        profiles = [
            ExpertRouteProfile(
                expert=int(p["expert"]),
                counts={int(r): int(c) for r, c in p["counts"].items()},
                total=int(p["total"]),
                present=bool(p["present"]),
                dominant_route=p["dominant_route"],
                dominant_share=p["dominant_share"],
                dominant_label=p["dominant_label"],
            )
            for p in doc["profiles"]
        ]
        return cls(
            type_names=list(doc["type_names"]),
            cells=doc["cells"],
            cell_counts=doc["cell_counts"],
            average=doc["average"],
            profiles=profiles,
        )


def _record_query_loss(params, rec, batch, d: int) -> float:
    q = nm.Tensor(batch.queries[rec.query])
    y = np.zeros(d)
    for w, k in zip(rec.weights, rec.experts):
        y = y + w * expert_forward(params.experts[k], q).data
    diff = y - batch.targets[rec.query]
    return float(np.dot(diff, diff) / d)


def specialization_report(
    params,
    eval_batches,
    trace: RoutingTrace,
    type_names,
    scene_labels=None,
    route_to_experts=None,
) -> SpecializationReport:
    """Mean task loss per (expert, instance type) over the queries routed
    through that expert, recomputed from the recorded weights; queries
    beyond a batch's query count (feature tokens) are skipped."""
    if not trace.records:
        raise InputError("cannot build a specialization report from an empty trace")
    n_types = len(type_names)
    n_experts = trace.n_experts
    sums = np.zeros((n_experts, n_types))
    counts = np.zeros((n_experts, n_types), dtype=np.int64)
    d = eval_batches[0].queries.shape[1] if eval_batches else 0
    for rec in trace.records:
        if rec.batch < 0 or rec.batch >= len(eval_batches):
            raise InputError(f"record batch {rec.batch} outside 0..{len(eval_batches) - 1}")
        batch = eval_batches[rec.batch]
        if rec.query >= batch.queries.shape[0]:
            continue
        t = int(batch.instance_types[rec.query])
        if t < 0 or t >= n_types:
            raise ConfigError(f"instance type {t} has no name; {n_types} names given")
        loss = _record_query_loss(params, rec, batch, d)
        for k in rec.experts:
            sums[k, t] += loss
            counts[k, t] += 1
    cells: list[list[float | None]] = [
        [float(sums[k, t] / counts[k, t]) if counts[k, t] > 0 else None for t in range(n_types)]
        for k in range(n_experts)
    ]
    average: list[float | None] = []
    for t in range(n_types):
        present = [cells[k][t] for k in range(n_experts) if cells[k][t] is not None]
        average.append(float(np.mean(present)) if present else None)
    return SpecializationReport(
        type_names=list(type_names),
        cells=cells,
        cell_counts=[[int(c) for c in row] for row in counts],
        average=average,
        profiles=route_profile(trace, scene_labels=scene_labels, route_to_experts=route_to_experts),
    )


def save_report(report: SpecializationReport, json_path, csv_path=None) -> None:
    """JSON is the full report; the CSV is one flat row per expert-by-type
    cell (plus `avg` rows) for external plotting."""
    Path(json_path).write_text(json.dumps(report.to_dict()))
    if csv_path is None:
        return
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "type", "count", "mean_task_loss", "dominant_route", "dominant_share"])
        for k, row in enumerate(report.cells):
            prof = report.profiles[k]
            for t, cell in enumerate(row):
                writer.writerow(
                    [
                        k,
                        report.type_names[t],
                        report.cell_counts[k][t],
                        "" if cell is None else repr(cell),
                        "" if prof.dominant_route is None else prof.dominant_route,
                        "" if prof.dominant_share is None else repr(prof.dominant_share),
                    ]
                )
        for t, cell in enumerate(report.average):
            writer.writerow(["avg", report.type_names[t], "", "" if cell is None else repr(cell), "", ""])


def load_report(json_path) -> SpecializationReport:
    return SpecializationReport.from_dict(json.loads(Path(json_path).read_text()))

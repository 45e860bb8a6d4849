"""Synthetic detection-like surrogate task plus the end-to-end trainer.

Task structure. Each generated "image" has a latent scene type s and per-query
latent instance types t. Scene evidence H clusters around per-scene means
(pairwise separation exactly `scene_margin`, so the scene gate has learnable
signal). Queries cluster around per-type centers. Targets are a fixed
seeded map per instance type plus a per-scene offset:

    target(q, s, t) = A_t q + nonlinear_gain * tanh(B_t q) + c_s

The scene offset c_s is independent of q, so any scene-blind predictor
carries an irreducible floor on this task; routing that conditions on scene
evidence can remove it. Instance types are scene-coupled: scene s draws
types from {s mod T, (s+1) mod T}, so types alone do not identify the scene.

All randomness flows from (seed, batch_index) through named substreams;
identical arguments give bitwise-identical batches. Targets are an exact
function of (query, scene_type, instance_type) -- noise enters only through
H and the query draws.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numerics as nm
from .diagnostics import routing_entropy
from .errors import ConfigError, DivergenceError
from .experts import ModelParams, expert_forward_rows, init_params, validate_policy, variant_forward
from .losses import LossBreakdown, LossConfig, balance_loss, total_loss, utilization
from .routing import MoEConfig, RoutingTrace

__all__ = [
    "TaskConfig",
    "SyntheticBatch",
    "generate_batch",
    "generate_probes",
    "TrainerConfig",
    "SGD",
    "Adam",
    "make_optimizer",
    "clip_gradients",
    "loss_for_batches",
    "TrainResult",
    "train",
    "evaluate",
    "measure_latency",
    "METRIC_COLUMNS",
    "EVAL_OFFSET",
]

TYPE_NAMES = ("small", "occluded", "tail", "easy")

# Substream domains under the run seed: keeps batch draws, blueprint draws,
# and probe draws independent of each other and stable under config changes.
_DOMAIN_BLUEPRINT = 0
_DOMAIN_BATCH = 1
_DOMAIN_PROBE = 2

EVAL_OFFSET = 1 << 20


def _stream(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(domain, index)))
    )


@dataclass(frozen=True)
class TaskConfig:
    """Generator knobs. d/d_g must match the routing config at train time."""

    d: int = 16
    d_g: int = 16
    n_scene_types: int = 4
    n_instance_types: int = 4
    n_queries: int = 16
    n_features: int = 32
    scene_margin: float = 4.0
    feature_noise: float = 0.5
    type_separation: float = 1.5
    query_noise: float = 0.5
    linear_scale: float = 0.8
    nonlinear_gain: float = 0.5
    offset_scale: float = 2.0
    scene_skew: float = 0.0
    type_skew: float = 0.0

    def __post_init__(self):
        for key in ("d", "d_g", "n_scene_types", "n_instance_types", "n_queries", "n_features"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.n_instance_types > len(TYPE_NAMES):
            raise ConfigError(
                f"n_instance_types <= {len(TYPE_NAMES)} supported, got {self.n_instance_types}"
            )
        if self.d_g < self.n_scene_types:
            raise ConfigError(
                f"d_g={self.d_g} < n_scene_types={self.n_scene_types}: "
                "scene means need an orthonormal set"
            )
        if self.d < max(self.n_scene_types, self.n_instance_types):
            raise ConfigError(
                f"d={self.d} too small for {self.n_scene_types} scene offsets / "
                f"{self.n_instance_types} type centers"
            )
        for key in ("scene_margin", "feature_noise", "query_noise"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("scene_skew", "type_skew"):
            v = getattr(self, key)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{key} must lie in [0, 1), got {v}")


@dataclass
class SyntheticBatch:
    """One image: scene evidence, queries, exact targets, latent labels."""

    H: np.ndarray
    queries: np.ndarray
    targets: np.ndarray
    scene_type: int
    instance_types: np.ndarray


@dataclass
class _Blueprint:
    scene_means: np.ndarray  # (S, d_g)
    scene_offsets: np.ndarray  # (S, d)
    type_centers: np.ndarray  # (T, d)
    A: np.ndarray  # (T, d, d)
    B: np.ndarray  # (T, d, d)


def _orthonormal_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((dim, max(n, 1)))
    q, _ = np.linalg.qr(m)
    return q[:, :n].T


@lru_cache(maxsize=64)
def _blueprint(task_cfg: TaskConfig, seed: int) -> _Blueprint:
    rng = _stream(seed, _DOMAIN_BLUEPRINT, 0)
    s, t, d, d_g = task_cfg.n_scene_types, task_cfg.n_instance_types, task_cfg.d, task_cfg.d_g
    # orthonormal directions: pairwise mean separation is exactly scene_margin
    scene_means = (task_cfg.scene_margin / np.sqrt(2.0)) * _orthonormal_rows(rng, s, d_g)
    scene_offsets = task_cfg.offset_scale * _orthonormal_rows(rng, s, d)
    type_centers = task_cfg.type_separation * _orthonormal_rows(rng, t, d)
    A = rng.normal(0.0, task_cfg.linear_scale / np.sqrt(d), size=(t, d, d))
    B = rng.normal(0.0, 1.0 / np.sqrt(d), size=(t, d, d))
    return _Blueprint(scene_means, scene_offsets, type_centers, A, B)


def _scene_probs(task_cfg: TaskConfig) -> np.ndarray:
    s = task_cfg.n_scene_types
    p = np.full(s, (1.0 - task_cfg.scene_skew) / s)
    p[0] += task_cfg.scene_skew
    return p


def target_map(task_cfg: TaskConfig, seed: int, q: np.ndarray, scene_type: int, instance_type: int) -> np.ndarray:
    """Exact target for one query; deterministic in (q, scene, type, seed)."""
    bp = _blueprint(task_cfg, seed)
    t = instance_type
    return bp.A[t] @ q + task_cfg.nonlinear_gain * np.tanh(bp.B[t] @ q) + bp.scene_offsets[scene_type]


def generate_batch(task_cfg: TaskConfig, seed: int, batch_index: int) -> SyntheticBatch:
    """Deterministic per (seed, batch_index)."""
    bp = _blueprint(task_cfg, seed)
    rng = _stream(seed, _DOMAIN_BATCH, batch_index)
    scene = int(rng.choice(task_cfg.n_scene_types, p=_scene_probs(task_cfg)))
    H = bp.scene_means[scene] + task_cfg.feature_noise * rng.standard_normal(
        (task_cfg.n_features, task_cfg.d_g)
    )
    # scene-coupled type pair; type_skew tilts the draw toward the first
    pair = (scene % task_cfg.n_instance_types, (scene + 1) % task_cfg.n_instance_types)
    p_first = 0.5 + 0.5 * task_cfg.type_skew
    picks = rng.random(task_cfg.n_queries) < p_first
    types = np.where(picks, pair[0], pair[1]).astype(np.int64)
    queries = bp.type_centers[types] + task_cfg.query_noise * rng.standard_normal(
        (task_cfg.n_queries, task_cfg.d)
    )
    targets = np.stack(
        [target_map(task_cfg, seed, queries[i], scene, int(types[i])) for i in range(task_cfg.n_queries)]
    )
    return SyntheticBatch(H=H, queries=queries, targets=targets, scene_type=scene, instance_types=types)


def generate_probes(task_cfg: TaskConfig, n_probes: int, seed: int, step: int) -> np.ndarray:
    """Shared diversity probes for one step: standard normal query-like rows."""
    rng = _stream(seed, _DOMAIN_PROBE, step)
    return rng.standard_normal((n_probes, task_cfg.d))


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 0.1
    seed: int = 0
    optimizer: str = "sgd"
    clip: float = 0.1
    eval_batches: int = 8
    router_std: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        for key in ("batch_size", "eval_batches"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.lr <= 0 or not np.isfinite(self.lr):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.clip <= 0 or not np.isfinite(self.clip):
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.router_std <= 0 or not np.isfinite(self.router_std):
            raise ConfigError(f"router_std must be positive, got {self.router_std}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.steps * self.batch_size >= EVAL_OFFSET:
            raise ConfigError("steps * batch_size too large: collides with eval batch indices")


class SGD:
    """Reference optimizer: exactly reproducible plain gradient descent."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, named: dict[str, nm.Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            t = named[name]
            t.data = t.data - self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = float(lr), beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named: dict[str, nm.Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            t_param = named[name]
            t_param.data = t_param.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(train_cfg: TrainerConfig):
    return SGD(train_cfg.lr) if train_cfg.optimizer == "sgd" else Adam(train_cfg.lr)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], bool, float]:
    """Global-norm clip; returns (grads, engaged, pre-clip norm)."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return grads, False, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, True, norm


def _batch_task_loss(outputs: list[nm.Tensor], targets: np.ndarray, d: int) -> nm.Tensor:
    terms = []
    for i, y in enumerate(outputs):
        diff = nm.sub(y, nm.Tensor(targets[i]))
        terms.append(nm.scale(nm.dot(diff, diff), 1.0 / d))
    return nm.mean_tensors(terms)


def loss_for_batches(
    policy: str,
    params: ModelParams,
    cfg: MoEConfig,
    loss_cfg: LossConfig,
    batches: list[SyntheticBatch],
    probes: np.ndarray | None,
) -> tuple[LossBreakdown, RoutingTrace]:
    """Forward all images and assemble the full objective (taped when a tape
    is active). Shared by the trainer and the gradient-check harness."""
    trace = RoutingTrace(cfg.n_experts)
    image_terms = []
    for b, batch in enumerate(batches):
        outputs, trace = variant_forward(
            policy, batch.H, batch.queries, params, cfg, batch_index=b, trace=trace
        )
        image_terms.append(_batch_task_loss(outputs, batch.targets, cfg.d))
    task = nm.mean_tensors(image_terms)
    expert_outputs = None
    if policy != "dense" and probes is not None:
        probes_t = nm.Tensor(probes)
        expert_outputs = [expert_forward_rows(e, probes_t) for e in params.experts]
    breakdown = total_loss(task, trace, expert_outputs, cfg, loss_cfg)
    return breakdown, trace


METRIC_COLUMNS = (
    "step",
    "task",
    "balance_hard",
    "balance_soft",
    "diversity",
    "total",
    "util_entropy",
    "routing_entropy",
)


def _util_entropy(trace: RoutingTrace, cfg: MoEConfig) -> float:
    if not trace.records:
        return 0.0
    f = utilization(trace, cfg).f
    nz = f[f > 0]
    return float(-np.sum(nz * np.log(nz)))


def _metrics_row(step: int, breakdown: LossBreakdown, trace: RoutingTrace, cfg: MoEConfig) -> dict:
    return {
        "step": step,
        "task": breakdown.task,
        "balance_hard": breakdown.balance_hard,
        "balance_soft": breakdown.balance_soft,
        "diversity": breakdown.diversity,
        "total": float(breakdown.total.data),
        "util_entropy": _util_entropy(trace, cfg),
        "routing_entropy": routing_entropy(trace) if trace.records else 0.0,
    }


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    trace: RoutingTrace  # deterministic post-training evaluation pass
    eval_task_loss: float
    eval_balance_hard: float
    clip_engaged_steps: int = 0
    final_step: int = field(default=-1)


class _MetricsWriter:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self._fh = None
        self._writer = None

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        if self._writer is None:
            self._fh = self.path.open("w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS)
            self._writer.writeheader()
        self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def evaluate(
    policy: str,
    params: ModelParams,
    cfg: MoEConfig,
    task_cfg: TaskConfig,
    seed: int,
    n_batches: int,
) -> tuple[float, RoutingTrace]:
    """Deterministic no-tape evaluation on held-out images (generator indices
    offset by EVAL_OFFSET; trace batch ids run 0..n_batches-1)."""
    trace = RoutingTrace(cfg.n_experts)
    losses = []
    for j in range(n_batches):
        batch = generate_batch(task_cfg, seed, EVAL_OFFSET + j)
        outputs, trace = variant_forward(
            policy, batch.H, batch.queries, params, cfg, batch_index=j, trace=trace
        )
        losses.append(float(_batch_task_loss(outputs, batch.targets, cfg.d).data))
    return float(np.mean(losses)), trace


def train(
    policy: str,
    cfg: MoEConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainerConfig,
    task_cfg: TaskConfig,
    metrics_path=None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Forward, total loss, tape gradients, clipped update, per step.

    Deterministic under fixed configs and seed. Raises DivergenceError on a
    non-finite total loss; rows already appended to `metrics_path` survive.
    """
    validate_policy(policy)
    if task_cfg.d != cfg.d or task_cfg.d_g != cfg.d_g:
        raise ConfigError(
            f"task dims (d={task_cfg.d}, d_g={task_cfg.d_g}) must match "
            f"routing dims (d={cfg.d}, d_g={cfg.d_g})"
        )
    params = (
        init
        if init is not None
        else init_params(cfg, train_cfg.seed, router_std=train_cfg.router_std)
    )
    opt = make_optimizer(train_cfg)
    writer = _MetricsWriter(metrics_path)
    metrics: list[dict] = []
    clip_engaged = 0
    try:
        for step in range(train_cfg.steps):
            batches = [
                generate_batch(task_cfg, train_cfg.seed, step * train_cfg.batch_size + b)
                for b in range(train_cfg.batch_size)
            ]
            probes = (
                generate_probes(task_cfg, loss_cfg.n_probes, train_cfg.seed, step)
                if policy != "dense"
                else None
            )
            tape = nm.GradTape()
            with nm.recording(tape):
                breakdown, trace = loss_for_batches(policy, params, cfg, loss_cfg, batches, probes)
            total = float(breakdown.total.data)
            row = _metrics_row(step, breakdown, trace, cfg)
            metrics.append(row)
            writer.write(row)
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite total loss {total} at step {step}", step=step
                )
            grads = tape.gradients(breakdown.total)
            grads, engaged, _ = clip_gradients(grads, train_cfg.clip)
            clip_engaged += int(engaged)
            opt.step(params.named_tensors(), grads)
    finally:
        writer.close()
    eval_loss, eval_trace = evaluate(
        policy, params, cfg, task_cfg, train_cfg.seed, train_cfg.eval_batches
    )
    if eval_trace.records:
        eval_balance = balance_loss(utilization(eval_trace, cfg), cfg)
    else:
        eval_balance = 0.0
    return TrainResult(
        params=params,
        metrics=metrics,
        trace=eval_trace,
        eval_task_loss=eval_loss,
        eval_balance_hard=eval_balance,
        clip_engaged_steps=clip_engaged,
        final_step=train_cfg.steps - 1,
    )


def measure_latency(
    policy: str,
    params: ModelParams,
    cfg: MoEConfig,
    task_cfg: TaskConfig,
    seed: int,
    n_timed: int = 30,
    warmup: int = 5,
) -> dict:
    """Median and IQR of wall-clock seconds per forward batch (no tape).

    Measured, never derived from FLOP counts; single-threaded evaluation.
    """
    if n_timed < 1:
        raise ConfigError(f"n_timed must be >= 1, got {n_timed}")
    batches = [generate_batch(task_cfg, seed, EVAL_OFFSET + j) for j in range(warmup + n_timed)]
    times = []
    for j, batch in enumerate(batches):
        start = time.perf_counter()
        variant_forward(policy, batch.H, batch.queries, params, cfg, batch_index=j)
        elapsed = time.perf_counter() - start
        if j >= warmup:
            times.append(elapsed)
    arr = np.asarray(times)
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return {"median_s": float(med), "iqr_s": float(q3 - q1), "n": int(arr.size)}

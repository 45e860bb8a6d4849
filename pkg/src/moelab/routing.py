"""Two-level sparse routing: scene pool selection, then per-query expert choice.

The block routes in two stages. A pooled scene descriptor is projected to
scene logits; the top K_s scene routes are kept and the union of their expert
subsets becomes the candidate pool. Each query's gate then produces a
distribution over all N_e experts, entries outside the pool are zeroed
(without renormalizing), the top K surviving entries are selected, and their
probabilities are renormalized into combination weights.

Selection indices (both levels) are constants with respect to the gradient
tape: gradients flow only through the probabilities of selected entries.

`RoutingTrace` is the serializable record of every routing decision; it feeds
the balancing loss and all diagnostics. Its line-oriented JSON form
round-trips bit-exactly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import (
    ConfigError,
    DimensionError,
    InputError,
    RoutingDegeneracyError,
    TraceFormatError,
)
from .ffn import ExpertParams, expert_forward

__all__ = [
    "MoEConfig",
    "RouterParams",
    "ScenePool",
    "RoutingAssignment",
    "TraceRecord",
    "BatchTrace",
    "RoutingTrace",
    "validate_pool",
    "pool_scene",
    "scene_route",
    "mask_to_pool",
    "instance_route",
    "hierarchical_forward",
]


def default_route_map(n_experts: int, n_scene_routes: int) -> tuple[tuple[int, ...], ...]:
    """Equal disjoint partition of experts into contiguous per-route groups."""
    if n_experts % n_scene_routes != 0:
        raise ConfigError(
            "no default route_to_experts: n_experts=%d is not divisible by "
            "n_scene_routes=%d; pass an explicit mapping" % (n_experts, n_scene_routes)
        )
    size = n_experts // n_scene_routes
    return tuple(tuple(range(r * size, (r + 1) * size)) for r in range(n_scene_routes))


@dataclass(frozen=True)
class MoEConfig:
    """Routing hyperparameters. Validated on construction; immutable after.

    route_to_experts maps each scene route to a subset of expert indices.
    Subsets may overlap; together they must cover every expert, and any
    k_scene of them must pool at least k_active experts so top-K selection
    is always satisfiable.
    """

    d: int = 16
    d_g: int = 16
    h: int = 32
    n_experts: int = 8
    k_active: int = 2
    n_scene_routes: int = 4
    k_scene: int = 2
    tau_s: float = 1.0
    tau_q: float = 1.0
    route_to_experts: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        for key in ("d", "d_g", "h", "n_experts", "n_scene_routes"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if not (1 <= self.k_active <= self.n_experts):
            raise ConfigError(
                "k_active must satisfy 1 <= k_active <= n_experts; "
                f"got k_active={self.k_active}, n_experts={self.n_experts}"
            )
        if not (1 <= self.k_scene <= self.n_scene_routes):
            raise ConfigError(
                "k_scene must satisfy 1 <= k_scene <= n_scene_routes; "
                f"got k_scene={self.k_scene}, n_scene_routes={self.n_scene_routes}"
            )
        for key in ("tau_s", "tau_q"):
            v = getattr(self, key)
            if not np.isfinite(v) or v <= 0.0:
                raise ConfigError(f"{key} must be positive and finite, got {v!r}")
        routes = self.route_to_experts
        if routes is None:
            routes = default_route_map(self.n_experts, self.n_scene_routes)
        else:
            routes = tuple(tuple(int(e) for e in r) for r in routes)
        if len(routes) != self.n_scene_routes:
            raise ConfigError(
                f"route_to_experts has {len(routes)} routes, expected {self.n_scene_routes}"
            )
        for r, subset in enumerate(routes):
            if not subset:
                raise ConfigError(f"route_to_experts[{r}] is empty")
            if len(set(subset)) != len(subset):
                raise ConfigError(f"route_to_experts[{r}] has duplicate experts: {subset}")
            bad = [e for e in subset if e < 0 or e >= self.n_experts]
            if bad:
                raise ConfigError(
                    f"route_to_experts[{r}] has out-of-range experts {bad} "
                    f"(n_experts={self.n_experts})"
                )
        routes = tuple(tuple(sorted(s)) for s in routes)
        covered = set().union(*routes)
        missing = sorted(set(range(self.n_experts)) - covered)
        if missing:
            raise ConfigError(f"experts {missing} unreachable: no route contains them")
        worst = min(
            len(set().union(*combo))
            for combo in itertools.combinations(routes, self.k_scene)
        )
        if worst < self.k_active:
            raise ConfigError(
                f"some k_scene={self.k_scene} routes pool only {worst} experts, "
                f"fewer than k_active={self.k_active}"
            )
        object.__setattr__(self, "route_to_experts", routes)
        object.__setattr__(self, "_min_pool", worst)

    @property
    def min_pool_size(self) -> int:
        return self._min_pool

    @property
    def max_pool_size(self) -> int:
        return max(
            len(set().union(*combo))
            for combo in itertools.combinations(self.route_to_experts, self.k_scene)
        )


@dataclass
class RouterParams:
    """Gate weights: W_g (n_scene_routes, d_g) scene gate, W_i (n_experts,
    d + n_scene_routes) instance gate over [q; g], W_t (n_experts, d) flat
    token gate used only by the token-level variant."""

    W_g: nm.Tensor
    W_i: nm.Tensor
    W_t: nm.Tensor

    def validate(self, cfg: MoEConfig) -> None:
        want = {
            "W_g": (cfg.n_scene_routes, cfg.d_g),
            "W_i": (cfg.n_experts, cfg.d + cfg.n_scene_routes),
            "W_t": (cfg.n_experts, cfg.d),
        }
        for key, shape in want.items():
            got = getattr(self, key).data.shape
            if got != shape:
                raise DimensionError(f"{key} shape {got}, expected {shape}")


@dataclass
class ScenePool:
    """Scene-level routing result for one image."""

    selected_routes: list[int]
    expert_pool: list[int]
    g: np.ndarray
    x_global: np.ndarray = field(repr=False, default=None)
    mask: np.ndarray = field(repr=False, default=None)
    g_t: nm.Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class RoutingAssignment:
    """Instance-level routing result for one query."""

    query_index: int
    e: np.ndarray
    masked: np.ndarray
    selected: list[int]
    weights: np.ndarray
    e_t: nm.Tensor | None = field(default=None, repr=False, compare=False)
    masked_t: nm.Tensor | None = field(default=None, repr=False, compare=False)
    weights_t: nm.Tensor | None = field(default=None, repr=False, compare=False)


_RECORD_KEYS = ("batch", "query", "routes", "pool", "experts", "weights", "e_full")


@dataclass
class TraceRecord:
    """One serialized routing decision; exactly the JSONL fields."""

    batch: int
    query: int
    routes: list  # [route, g_route] pairs for the selected routes, rank order
    pool: list
    experts: list
    weights: list
    e_full: list
    masked_t: nm.Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "batch": self.batch,
                "query": self.query,
                "routes": self.routes,
                "pool": self.pool,
                "experts": self.experts,
                "weights": self.weights,
                "e_full": self.e_full,
            }
        )


@dataclass
class BatchTrace:
    """Runtime grouping of one image's routing results (not serialized)."""

    batch: int
    scene: ScenePool | None
    assignments: list[RoutingAssignment]


class RoutingTrace:
    """Accumulates per-query routing records across a batch of images.

    Equality and serialization cover `records` only; `batches` keeps the
    runtime objects (scene pools, taped distributions) for the training step
    that produced them and is dropped on save/load.
    """

    def __init__(self, n_experts: int, records: list[TraceRecord] | None = None):
        if n_experts < 0:
            raise ConfigError(f"n_experts must be >= 0, got {n_experts}")
        self.n_experts = int(n_experts)
        self.records: list[TraceRecord] = list(records) if records else []
        self.batches: list[BatchTrace] = []

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return self.n_experts == other.n_experts and self.records == other.records

    def add_batch(
        self,
        batch_index: int,
        assignments: list[RoutingAssignment],
        scene: ScenePool | None = None,
        pool: list[int] | None = None,
    ) -> None:
        """Append one image's assignments as trace records.

        `pool` defaults to the scene pool when a scene is given, else to all
        experts (flat-routing variants).
        """
        if pool is None:
            pool = scene.expert_pool if scene is not None else list(range(self.n_experts))
        routes = (
            [[int(r), float(scene.g[r])] for r in scene.selected_routes]
            if scene is not None
            else []
        )
        for a in assignments:
            if len(a.e) != self.n_experts:
                raise DimensionError(
                    f"assignment has {len(a.e)} expert probs, trace expects {self.n_experts}"
                )
            self.records.append(
                TraceRecord(
                    batch=int(batch_index),
                    query=int(a.query_index),
                    routes=[list(rv) for rv in routes],
                    pool=[int(p) for p in pool],
                    experts=[int(k) for k in a.selected],
                    weights=[float(w) for w in a.weights],
                    e_full=[float(v) for v in a.e],
                    masked_t=a.masked_t,
                )
            )
        self.batches.append(BatchTrace(int(batch_index), scene, list(assignments)))

    def counts(self) -> np.ndarray:
        """Per-expert assignment counts: the multiset union of selected sets."""
        out = np.zeros(self.n_experts, dtype=np.int64)
        for rec in self.records:
            for k in rec.experts:
                out[k] += 1
        return out

    def save(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(rec.to_json())
                fh.write("\n")

    @classmethod
    def load(cls, path) -> "RoutingTrace":
        path = Path(path)
        records: list[TraceRecord] = []
        n_experts: int | None = None
        with path.open("r") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise TraceFormatError(f"invalid JSON: {exc}", line_number=lineno) from exc
                rec = _parse_record(raw, lineno)
                if n_experts is None:
                    n_experts = len(rec.e_full)
                elif len(rec.e_full) != n_experts:
                    raise TraceFormatError(
                        f"e_full length {len(rec.e_full)} != {n_experts} from first record",
                        line_number=lineno,
                    )
                records.append(rec)
        return cls(n_experts if n_experts is not None else 0, records)


def _parse_record(raw, lineno: int) -> TraceRecord:
    if not isinstance(raw, dict):
        raise TraceFormatError("record is not a JSON object", line_number=lineno)
    if set(raw) != set(_RECORD_KEYS):
        raise TraceFormatError(
            f"record keys {sorted(raw)} != expected {sorted(_RECORD_KEYS)}",
            line_number=lineno,
        )

    def _int(v, what):
        if not isinstance(v, int) or isinstance(v, bool):
            raise TraceFormatError(f"{what} must be an integer, got {v!r}", line_number=lineno)
        return v

    def _float(v, what):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TraceFormatError(f"{what} must be a number, got {v!r}", line_number=lineno)
        return float(v)

    def _list(v, what):
        if not isinstance(v, list):
            raise TraceFormatError(f"{what} must be a list, got {v!r}", line_number=lineno)
        return v

    routes = []
    for item in _list(raw["routes"], "routes"):
        pair = _list(item, "routes entry")
        if len(pair) != 2:
            raise TraceFormatError(
                f"routes entry must be [route, g_route], got {item!r}", line_number=lineno
            )
        routes.append([_int(pair[0], "route index"), _float(pair[1], "route prob")])
    rec = TraceRecord(
        batch=_int(raw["batch"], "batch"),
        query=_int(raw["query"], "query"),
        routes=routes,
        pool=[_int(v, "pool entry") for v in _list(raw["pool"], "pool")],
        experts=[_int(v, "experts entry") for v in _list(raw["experts"], "experts")],
        weights=[_float(v, "weights entry") for v in _list(raw["weights"], "weights")],
        e_full=[_float(v, "e_full entry") for v in _list(raw["e_full"], "e_full")],
    )
    if not rec.e_full:
        raise TraceFormatError("e_full is empty", line_number=lineno)
    n = len(rec.e_full)
    for k in rec.pool + rec.experts:
        if k < 0 or k >= n:
            raise TraceFormatError(f"expert index {k} out of range [0, {n})", line_number=lineno)
    if len(rec.weights) != len(rec.experts):
        raise TraceFormatError(
            f"{len(rec.weights)} weights for {len(rec.experts)} experts", line_number=lineno
        )
    return rec


def validate_pool(pool, n_experts: int) -> list[int]:
    pool = [int(k) for k in pool]
    if not pool:
        raise ConfigError("expert pool is empty")
    bad = [k for k in pool if k < 0 or k >= n_experts]
    if bad:
        raise ConfigError(f"pool entries {bad} out of range [0, {n_experts})")
    if len(set(pool)) != len(pool):
        raise ConfigError(f"pool has duplicates: {pool}")
    return sorted(pool)


def pool_scene(H) -> nm.Tensor:
    """Mean-pool scene features (rows of H) into one global descriptor."""
    arr = H.data if isinstance(H, nm.Tensor) else np.asarray(H, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"H must be a matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InputError("cannot pool an empty feature matrix")
    return nm.Tensor(arr.mean(axis=0))


def scene_route(x_global: nm.Tensor, params: RouterParams, cfg: MoEConfig) -> ScenePool:
    """Scene gate: g = softmax(W_g x / tau_s); keep top k_scene routes."""
    g_t = nm.softmax_temp(nm.matvec(params.W_g, x_global), cfg.tau_s)
    selected = nm.topk(g_t, cfg.k_scene)
    pool = sorted(set().union(*(cfg.route_to_experts[r] for r in selected)))
    mask = np.zeros(cfg.n_experts)
    mask[pool] = 1.0
    return ScenePool(
        selected_routes=selected,
        expert_pool=pool,
        g=g_t.data.copy(),
        x_global=np.array(x_global.data if isinstance(x_global, nm.Tensor) else x_global),
        mask=mask,
        g_t=g_t,
    )


def mask_to_pool(e: nm.Tensor, pool, n_experts: int | None = None) -> nm.Tensor:
    """Zero entries outside the pool; keep the rest unchanged (no renorm)."""
    n = n_experts if n_experts is not None else e.data.shape[0]
    pool = validate_pool(pool, n)
    if e.data.shape != (n,):
        raise DimensionError(f"e has shape {e.data.shape}, expected {(n,)}")
    mask = np.zeros(n)
    mask[pool] = 1.0
    return nm.mul_const(e, mask)


def instance_route(
    q: nm.Tensor,
    g: nm.Tensor,
    pool,
    params: RouterParams,
    cfg: MoEConfig,
    query_index: int = 0,
) -> RoutingAssignment:
    """Instance gate over [q; g], masked to the pool, top-K renormalized.

    `g` enters the gate input as a tensor so gradients reach the scene gate
    through the concatenation even though route selection itself is constant.
    """
    e_t = nm.softmax_temp(nm.matvec(params.W_i, nm.concat(q, g)), cfg.tau_q)
    masked_t = mask_to_pool(e_t, pool, cfg.n_experts)
    positive = int(np.count_nonzero(masked_t.data > 0.0))
    if positive < cfg.k_active:
        raise RoutingDegeneracyError(
            f"query {query_index}: only {positive} strictly positive masked "
            f"probabilities for k_active={cfg.k_active}"
        )
    selected = nm.topk(masked_t, cfg.k_active)
    weights_t = nm.normalize_sum(nm.gather(masked_t, selected))
    return RoutingAssignment(
        query_index=int(query_index),
        e=e_t.data.copy(),
        masked=masked_t.data.copy(),
        selected=selected,
        weights=weights_t.data.copy(),
        e_t=e_t,
        masked_t=masked_t,
        weights_t=weights_t,
    )


def hierarchical_forward(
    H,
    queries,
    params,
    cfg: MoEConfig,
    batch_index: int = 0,
    trace: RoutingTrace | None = None,
) -> tuple[list[nm.Tensor], RoutingTrace]:
    """Full two-level forward for one image: y_i = sum_k w_ik E_k(q_i).

    `params` must expose `.routers` (RouterParams) and `.experts`
    (list of ExpertParams, one per expert). Returns one output tensor per
    query plus the trace, extended in place when one is passed in.
    """
    Q = queries.data if isinstance(queries, nm.Tensor) else np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != cfg.d:
        raise DimensionError(f"queries must be (N_q, {cfg.d}), got {Q.shape}")
    if Q.shape[0] == 0:
        raise InputError("queries are empty")
    routers: RouterParams = params.routers
    experts: list[ExpertParams] = params.experts
    if len(experts) != cfg.n_experts:
        raise DimensionError(f"{len(experts)} experts for n_experts={cfg.n_experts}")
    routers.validate(cfg)

    scene = scene_route(pool_scene(H), routers, cfg)
    outputs: list[nm.Tensor] = []
    assignments: list[RoutingAssignment] = []
    for i in range(Q.shape[0]):
        q_t = nm.Tensor(Q[i])
        a = instance_route(q_t, scene.g_t, scene.expert_pool, routers, cfg, query_index=i)
        y = nm.weighted_sum(a.weights_t, [expert_forward(experts[k], q_t) for k in a.selected])
        outputs.append(y)
        assignments.append(a)
    if trace is None:
        trace = RoutingTrace(cfg.n_experts)
    trace.add_batch(batch_index, assignments, scene=scene)
    return outputs, trace

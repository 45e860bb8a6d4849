"""Expert bank, variant routing policies, compute accounting, checkpoints.

Five policies share one expert bank and one parameter store:

* dense          -- a single dedicated FFN for every query; no routing.
* token_moe      -- flat top-K gate over all experts, applied per token;
                    both the queries and the scene-feature rows count as
                    tokens, so utilization reflects token traffic. Only
                    query outputs are returned; feature-token outputs are
                    not consumed downstream and are not computed, but their
                    routing decisions are traced (query ids N_q, N_q+1, ...).
* instance_only  -- the instance gate with the scene block of its input
                    zeroed and the pool fixed to all experts.
* scene_only     -- scene routing only: the scene distribution is projected
                    onto the selected pool through route membership
                    (each expert inherits g_r / |route r|), renormalized,
                    and every query in the image shares that weighting over
                    the whole pool.
* hierarchical   -- the full two-level procedure (see routing module).

All policies are pure functions of (inputs, params, cfg).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .ffn import ExpertParams, expert_forward, expert_forward_rows
from .routing import (
    MoEConfig,
    RouterParams,
    RoutingAssignment,
    RoutingTrace,
    ScenePool,
    hierarchical_forward,
    pool_scene,
    scene_route,
)

__all__ = [
    "POLICIES",
    "ModelParams",
    "init_params",
    "validate_policy",
    "variant_forward",
    "count_params_flops",
    "save_checkpoint",
    "load_checkpoint",
    "ExpertParams",
    "expert_forward",
    "expert_forward_rows",
]

POLICIES = ("dense", "token_moe", "instance_only", "scene_only", "hierarchical")


def validate_policy(policy: str) -> str:
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    return policy


@dataclass
class ModelParams:
    """All learnable tensors: gates, the expert bank, and the dense baseline
    FFN. `named_tensors` fixes the parameter ordering used by gradients,
    optimizers, and checkpoints."""

    routers: RouterParams
    experts: list[ExpertParams]
    dense: ExpertParams
    seed: int

    def named_tensors(self) -> dict[str, nm.Tensor]:
        out = {"W_g": self.routers.W_g, "W_i": self.routers.W_i, "W_t": self.routers.W_t}
        for k, e in enumerate(self.experts):
            out[f"expert{k}.W1"] = e.W1
            out[f"expert{k}.b1"] = e.b1
            out[f"expert{k}.W2"] = e.W2
            out[f"expert{k}.b2"] = e.b2
        out["dense.W1"] = self.dense.W1
        out["dense.b1"] = self.dense.b1
        out["dense.W2"] = self.dense.W2
        out["dense.b2"] = self.dense.b2
        return out


def _init_expert(rng: np.random.Generator, d: int, h: int, prefix: str) -> ExpertParams:
    return ExpertParams(
        W1=nm.Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d)), name=f"{prefix}.W1"),
        b1=nm.Tensor(np.zeros(h), name=f"{prefix}.b1"),
        W2=nm.Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), size=(d, h)), name=f"{prefix}.W2"),
        b2=nm.Tensor(np.zeros(d), name=f"{prefix}.b2"),
    )


def init_params(cfg: MoEConfig, seed: int, router_std: float = 0.01) -> ModelParams:
    """Seeded init: gates near zero (near-uniform initial routing), experts
    with fan-in scaled normals, zero biases. Each component draws from its
    own derived stream so adding experts never shifts the others."""
    if router_std <= 0.0:
        raise ConfigError(f"router_std must be positive, got {router_std}")

    def stream(index: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))

    r = stream(0)
    routers = RouterParams(
        W_g=nm.Tensor(r.normal(0.0, router_std, size=(cfg.n_scene_routes, cfg.d_g)), name="W_g"),
        W_i=nm.Tensor(
            r.normal(0.0, router_std, size=(cfg.n_experts, cfg.d + cfg.n_scene_routes)),
            name="W_i",
        ),
        W_t=nm.Tensor(r.normal(0.0, router_std, size=(cfg.n_experts, cfg.d)), name="W_t"),
    )
    experts = [
        _init_expert(stream(1 + k), cfg.d, cfg.h, f"expert{k}") for k in range(cfg.n_experts)
    ]
    dense = _init_expert(stream(1 + cfg.n_experts), cfg.d, cfg.h, "dense")
    return ModelParams(routers=routers, experts=experts, dense=dense, seed=int(seed))


def _as_query_matrix(queries, d: int) -> np.ndarray:
    Q = queries.data if isinstance(queries, nm.Tensor) else np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != d:
        raise DimensionError(f"queries must be (N_q, {d}), got {Q.shape}")
    return Q


def _flat_assignment(
    e_t: nm.Tensor, cfg: MoEConfig, query_index: int
) -> RoutingAssignment:
    # pool = all experts: masking is the identity, so skip the mask node
    selected = nm.topk(e_t, cfg.k_active)
    weights_t = nm.normalize_sum(nm.gather(e_t, selected))
    return RoutingAssignment(
        query_index=int(query_index),
        e=e_t.data.copy(),
        masked=e_t.data.copy(),
        selected=selected,
        weights=weights_t.data.copy(),
        e_t=e_t,
        masked_t=e_t,
        weights_t=weights_t,
    )


def _combine(a: RoutingAssignment, q_t: nm.Tensor, experts: list[ExpertParams]) -> nm.Tensor:
    return nm.weighted_sum(a.weights_t, [expert_forward(experts[k], q_t) for k in a.selected])


def _forward_dense(H, Q, params, cfg, batch_index, trace):
    outputs = [expert_forward(params.dense, nm.Tensor(Q[i])) for i in range(Q.shape[0])]
    return outputs, trace


def _forward_instance_only(H, Q, params, cfg, batch_index, trace):
    g_zero = nm.Tensor(np.zeros(cfg.n_scene_routes))
    outputs, assignments = [], []
    for i in range(Q.shape[0]):
        q_t = nm.Tensor(Q[i])
        e_t = nm.softmax_temp(nm.matvec(params.routers.W_i, nm.concat(q_t, g_zero)), cfg.tau_q)
        a = _flat_assignment(e_t, cfg, i)
        outputs.append(_combine(a, q_t, params.experts))
        assignments.append(a)
    trace.add_batch(batch_index, assignments)
    return outputs, trace


def _forward_token_moe(H, Q, params, cfg, batch_index, trace):
    if cfg.d_g != cfg.d:
        raise ConfigError(
            f"token_moe routes feature rows and queries through one gate; requires d_g == d, got d_g={cfg.d_g}, d={cfg.d}"
        )
    Harr = H.data if isinstance(H, nm.Tensor) else np.asarray(H, dtype=np.float64)
    if Harr.ndim != 2 or Harr.shape[1] != cfg.d_g:
        raise DimensionError(f"H must be (n, {cfg.d_g}), got {Harr.shape}")
    outputs, assignments = [], []
    n_q = Q.shape[0]
    for i in range(n_q):
        q_t = nm.Tensor(Q[i])
        e_t = nm.softmax_temp(nm.matvec(params.routers.W_t, q_t), cfg.tau_q)
        a = _flat_assignment(e_t, cfg, i)
        outputs.append(_combine(a, q_t, params.experts))
        assignments.append(a)
    for j in range(Harr.shape[0]):
        t_t = nm.Tensor(Harr[j])
        e_t = nm.softmax_temp(nm.matvec(params.routers.W_t, t_t), cfg.tau_q)
        assignments.append(_flat_assignment(e_t, cfg, n_q + j))
    trace.add_batch(batch_index, assignments)
    return outputs, trace


def _scene_projection(scene: ScenePool, cfg: MoEConfig) -> nm.Tensor:
    """Project g onto the pool: expert k gets sum over selected routes
    containing k of g_r / |route r|, then renormalize over the pool."""
    M = np.zeros((cfg.n_experts, cfg.n_scene_routes))
    for r in scene.selected_routes:
        subset = cfg.route_to_experts[r]
        for k in subset:
            M[k, r] = 1.0 / len(subset)
    return nm.normalize_sum(nm.matvec(nm.Tensor(M), scene.g_t))


def _forward_scene_only(H, Q, params, cfg, batch_index, trace):
    scene = scene_route(pool_scene(H), params.routers, cfg)
    ghat_t = _scene_projection(scene, cfg)
    order = nm.topk(ghat_t, len(scene.expert_pool))
    weights_t = nm.gather(ghat_t, order)  # already sums to 1: ghat is zero off-pool
    outputs, assignments = [], []
    for i in range(Q.shape[0]):
        q_t = nm.Tensor(Q[i])
        a = RoutingAssignment(
            query_index=i,
            e=ghat_t.data.copy(),
            masked=ghat_t.data.copy(),
            selected=list(order),
            weights=weights_t.data.copy(),
            e_t=ghat_t,
            masked_t=ghat_t,
            weights_t=weights_t,
        )
        outputs.append(_combine(a, q_t, params.experts))
        assignments.append(a)
    trace.add_batch(batch_index, assignments, scene=scene)
    return outputs, trace


def _forward_hierarchical(H, Q, params, cfg, batch_index, trace):
    return hierarchical_forward(H, Q, params, cfg, batch_index=batch_index, trace=trace)


_FORWARDS = {
    "dense": _forward_dense,
    "token_moe": _forward_token_moe,
    "instance_only": _forward_instance_only,
    "scene_only": _forward_scene_only,
    "hierarchical": _forward_hierarchical,
}


def variant_forward(
    policy: str,
    H,
    queries,
    params: ModelParams,
    cfg: MoEConfig,
    batch_index: int = 0,
    trace: RoutingTrace | None = None,
) -> tuple[list[nm.Tensor], RoutingTrace]:
    """Run one image through the chosen routing policy.

    Returns one output tensor per query and the routing trace (extended in
    place when passed in; dense leaves it empty).
    """
    validate_policy(policy)
    Q = _as_query_matrix(queries, cfg.d)
    if trace is None:
        trace = RoutingTrace(cfg.n_experts)
    return _FORWARDS[policy](H, Q, params, cfg, batch_index, trace)


def count_params_flops(policy: str, cfg: MoEConfig) -> dict:
    """Parameter and FLOP accounting under fixed, documented conventions.

    Conventions: a multiply-add costs 2 FLOPs, so an m-by-n linear map costs
    2mn plus m for its bias; tanh costs 1 per element; softmax over n costs
    4n (max-subtract, exp, sum, divide); top-k costs n (one scan); weight
    normalization costs 2K (sum + divide); combining K outputs costs 2Kd.
    Per-query figures count per-query work only: the scene gate runs once
    per image and is excluded (its parameters still count in total_params).
    scene_only activates the whole pool per query; its per-query figures use
    the worst-case pool size over route combinations.
    """
    validate_policy(policy)
    d, h, n_e, n_s, k = cfg.d, cfg.h, cfg.n_experts, cfg.n_scene_routes, cfg.k_active
    p_expert = 2 * d * h + d + h
    f_expert = 4 * d * h + 2 * h + d

    router_params = {
        "dense": 0,
        "token_moe": n_e * d,
        "instance_only": n_e * (d + n_s),
        "scene_only": n_s * cfg.d_g,
        "hierarchical": n_s * cfg.d_g + n_e * (d + n_s),
    }[policy]
    expert_params_total = p_expert * (1 if policy == "dense" else n_e)

    gate_in = {"token_moe": d, "instance_only": d + n_s, "hierarchical": d + n_s}
    breakdown: dict[str, int] = {}
    if policy == "dense":
        breakdown = {"experts": f_expert}
        active = p_expert
    elif policy == "scene_only":
        pool = cfg.max_pool_size
        breakdown = {"experts": pool * f_expert, "combine": 2 * pool * d}
        active = pool * p_expert
    else:
        n_in = gate_in[policy]
        breakdown = {
            "gate": 2 * n_e * n_in,
            "softmax": 4 * n_e,
            "topk": n_e,
            "normalize": 2 * k,
            "experts": k * f_expert,
            "combine": 2 * k * d,
        }
        if policy == "hierarchical":
            breakdown["mask"] = n_e
        active = k * p_expert + n_e * n_in

    return {
        "total_params": expert_params_total + router_params,
        "expert_params_total": expert_params_total,
        "router_params": router_params,
        "active_params_per_query": active,
        "flops_per_query": sum(breakdown.values()),
        "flops_breakdown": breakdown,
    }


CHECKPOINT_FORMAT = "moelab-checkpoint-v1"


def save_checkpoint(path, params: ModelParams, cfg: MoEConfig, policy: str | None = None) -> None:
    """Self-describing JSON checkpoint: cfg, seed, every tensor by name."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "cfg": {
            "d": cfg.d,
            "d_g": cfg.d_g,
            "h": cfg.h,
            "n_experts": cfg.n_experts,
            "k_active": cfg.k_active,
            "n_scene_routes": cfg.n_scene_routes,
            "k_scene": cfg.k_scene,
            "tau_s": cfg.tau_s,
            "tau_q": cfg.tau_q,
            "route_to_experts": [list(r) for r in cfg.route_to_experts],
        },
        "seed": params.seed,
        "policy": policy,
        "tensors": {name: t.data.tolist() for name, t in params.named_tensors().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelParams, MoEConfig, dict]:
    """Load and validate a checkpoint; every tensor shape is checked against
    the embedded cfg before anything is returned."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a recognized checkpoint: format={doc.get('format')!r}")
    cfg = MoEConfig(**{k: (tuple(tuple(r) for r in v) if k == "route_to_experts" else v)
                       for k, v in doc["cfg"].items()})
    seed = int(doc["seed"])
    skeleton = init_params(cfg, seed)
    want = {name: t.data.shape for name, t in skeleton.named_tensors().items()}
    got = doc["tensors"]
    missing = sorted(set(want) - set(got))
    unknown = sorted(set(got) - set(want))
    if missing or unknown:
        raise ConfigError(f"checkpoint tensor names mismatch: missing={missing}, unknown={unknown}")
    for name, tensor in skeleton.named_tensors().items():
        arr = np.asarray(got[name], dtype=np.float64)
        if arr.shape != want[name]:
            raise DimensionError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {want[name]}"
            )
        tensor.data = arr
    return skeleton, cfg, {"policy": doc.get("policy"), "seed": seed}

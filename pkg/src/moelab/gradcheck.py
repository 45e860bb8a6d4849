"""Full-pipeline gradient verification against central finite differences.

Top-K selection makes the objective piecewise smooth: a finite-difference
probe is only valid while every routing selection stays constant inside the
probe ball. The harness therefore initializes gates with a larger spread
than training would (well-separated logits), measures the minimum
set-change margin over every routing decision, and retries with a different
parameter draw until the margin safely dominates the probe radius. Margins
compare selected sets only -- rank flips inside a selected set permute the
recorded order but leave the combined output unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, OracleError
from .experts import init_params
from .losses import LossConfig
from .routing import MoEConfig, RoutingTrace
from .synthetic import TaskConfig, generate_batch, generate_probes, loss_for_batches

__all__ = ["GradCheckResult", "selection_margin", "check_gradients", "TOLERANCE"]

TOLERANCE = 1e-4


def selection_margin(trace: RoutingTrace, cfg: MoEConfig) -> float:
    """Smallest probability gap whose sign change would alter a selected set."""
    worst = np.inf
    for bt in trace.batches:
        if bt.scene is not None and cfg.k_scene < cfg.n_scene_routes:
            g = np.sort(bt.scene.g)[::-1]
            worst = min(worst, float(g[cfg.k_scene - 1] - g[cfg.k_scene]))
        for a in bt.assignments:
            in_pool = np.sort(a.masked[a.masked > 0.0])[::-1]
            k = len(a.selected)
            if len(in_pool) > k:
                worst = min(worst, float(in_pool[k - 1] - in_pool[k]))
    return worst


@dataclass
class GradCheckResult:
    blocks: dict[str, float]
    max_rel_error: float
    tolerance: float
    passed: bool
    params_seed: int
    margin: float
    attempts: int

    def failing_blocks(self) -> list[str]:
        return sorted(name for name, err in self.blocks.items() if err > self.tolerance)


def check_gradients(
    policy: str,
    cfg: MoEConfig,
    loss_cfg: LossConfig,
    task_cfg: TaskConfig,
    seed: int = 0,
    n_images: int = 1,
    eps: float = 1e-5,
    router_std: float = 0.3,
    min_margin: float = 5e-4,
    max_tries: int = 25,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    """Compare tape gradients of the full objective with finite differences.

    Only parameter blocks touched by the forward pass are checked (untouched
    blocks have identically zero gradients by construction).
    """
    if cfg.d > 8 or cfg.n_experts > 4:
        raise ConfigError(
            f"gradient check requires d <= 8 and n_experts <= 4 for oracle "
            f"tractability; got d={cfg.d}, n_experts={cfg.n_experts}"
        )
    batches = [generate_batch(task_cfg, seed, j) for j in range(n_images)]
    probes = generate_probes(task_cfg, loss_cfg.n_probes, seed, 0) if policy != "dense" else None

    params = None
    margin = -np.inf
    attempts = 0
    for attempt in range(max_tries):
        attempts = attempt + 1
        candidate = init_params(cfg, seed + 7919 * attempt, router_std=router_std)
        _, trace = loss_for_batches(policy, candidate, cfg, loss_cfg, batches, probes)
        margin = selection_margin(trace, cfg)
        if margin >= min_margin:
            params = candidate
            break
    if params is None:
        raise OracleError(
            f"no parameter draw in {max_tries} tries gave routing margins >= "
            f"{min_margin} (best {margin:.2e}); finite differences would straddle "
            "a selection boundary"
        )

    named = params.named_tensors()
    tape = nm.GradTape()
    with nm.recording(tape):
        breakdown, _ = loss_for_batches(policy, params, cfg, loss_cfg, batches, probes)
    tape_grads = tape.gradients(breakdown.total)

    theta = {name: named[name].data.copy() for name in tape_grads}

    def f(work: dict[str, np.ndarray]) -> float:
        for name, arr in work.items():
            named[name].data = arr.copy()
        b, _ = loss_for_batches(policy, params, cfg, loss_cfg, batches, probes)
        return float(b.total.data)

    try:
        fd_grads = nm.finite_diff_grad(f, theta, eps=eps)
    finally:
        for name, arr in theta.items():
            named[name].data = arr
    blocks = {
        name: nm.max_rel_error(tape_grads[name], fd_grads[name]) for name in sorted(tape_grads)
    }
    worst = max(blocks.values())
    return GradCheckResult(
        blocks=blocks,
        max_rel_error=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
        params_seed=params.seed,
        margin=margin,
        attempts=attempts,
    )

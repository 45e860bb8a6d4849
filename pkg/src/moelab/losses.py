"""Training objective: task loss + lambda1 * balance + lambda2 * diversity.

Balance penalizes uneven expert utilization with sum_k (f_k - 1/N_e)^2.
Hard counts (each query contributes its K selected experts, normalized by
total assignments) are the reported quantity but carry no gradient; the
trainable surrogate replaces f_k with the mean masked probability mass per
expert, which coincides with the hard value when the routing distributions
are one-hot (K = 1).

Diversity is the negative mean pairwise Jensen-Shannon divergence between
expert response distributions on a shared probe set (responses are converted
to distributions by a softmax over output coordinates). Natural log
throughout; each pairwise JSD lies in [0, ln 2]. Minimizing the loss
therefore pushes experts apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError
from .routing import MoEConfig, RoutingTrace

__all__ = [
    "LossConfig",
    "UtilizationStats",
    "utilization",
    "balance_loss",
    "soft_balance_loss",
    "pairwise_jsd",
    "diversity_loss",
    "combine_losses",
    "LossBreakdown",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.001
    n_probes: int = 32

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(
                f"lambda weights must be >= 0, got lambda1={self.lambda1}, lambda2={self.lambda2}"
            )
        if self.n_probes < 1:
            raise ConfigError(f"n_probes must be >= 1, got {self.n_probes}")


@dataclass
class UtilizationStats:
    """Hard assignment frequencies: f_k = count_k / total assignments."""

    counts: np.ndarray
    f: np.ndarray
    total: int


def utilization(trace: RoutingTrace, cfg: MoEConfig) -> UtilizationStats:
    if trace.n_experts != cfg.n_experts:
        raise ConfigError(
            f"trace has {trace.n_experts} experts, cfg expects {cfg.n_experts}"
        )
    if not trace.records:
        raise InputError("cannot compute utilization of an empty trace")
    counts = trace.counts()
    total = int(counts.sum())
    return UtilizationStats(counts=counts, f=counts / total, total=total)


def balance_loss(f, cfg: MoEConfig) -> float:
    """sum_k (f_k - 1/N_e)^2 on hard frequencies; zero iff f is uniform."""
    vec = f.f if isinstance(f, UtilizationStats) else np.asarray(f, dtype=np.float64)
    if vec.shape != (cfg.n_experts,):
        raise ConfigError(f"f has shape {vec.shape}, expected {(cfg.n_experts,)}")
    return float(np.sum((vec - 1.0 / cfg.n_experts) ** 2))


def soft_balance_loss(trace: RoutingTrace) -> nm.Tensor:
    """Differentiable surrogate: f_k := mean masked probability mass."""
    masked = [rec.masked_t for rec in trace.records]
    if not masked:
        raise InputError("cannot compute soft balance of an empty trace")
    if any(m is None for m in masked):
        raise InputError("trace records carry no taped distributions (loaded trace?)")
    f_soft = nm.mean_tensors(masked)
    diff = nm.sub(f_soft, nm.Tensor(np.full(trace.n_experts, 1.0 / trace.n_experts)))
    return nm.dot(diff, diff)


def _row_entropy_mean(P: nm.Tensor) -> nm.Tensor:
    return nm.mean_all(nm.entropy_rows(P))


def pairwise_jsd(P: nm.Tensor, Q: nm.Tensor) -> nm.Tensor:
    """Mean over rows of JSD(p, q) = H((p+q)/2) - (H(p) + H(q))/2."""
    h_mix = _row_entropy_mean(nm.scale(nm.add(P, Q), 0.5))
    return nm.sub(h_mix, nm.scale(nm.add(_row_entropy_mean(P), _row_entropy_mean(Q)), 0.5))


def diversity_loss(expert_outputs) -> nm.Tensor:
    """Negative mean pairwise JSD between expert probe responses.

    `expert_outputs` holds one (M, d) raw response matrix per expert on a
    shared probe set; rows are softmaxed into distributions here.
    """
    if len(expert_outputs) < 2:
        raise ConfigError(
            f"diversity needs >= 2 experts, got {len(expert_outputs)}"
        )
    probs = [nm.softmax_rows(out, 1.0) for out in expert_outputs]
    ents = [_row_entropy_mean(P) for P in probs]
    terms = []
    for a, b in combinations(range(len(probs)), 2):
        h_mix = _row_entropy_mean(nm.scale(nm.add(probs[a], probs[b]), 0.5))
        terms.append(nm.sub(h_mix, nm.scale(nm.add(ents[a], ents[b]), 0.5)))
    return nm.scale(nm.mean_tensors(terms), -1.0)


def combine_losses(task: float, balance: float, diversity: float, loss_cfg: LossConfig) -> float:
    return float(task + loss_cfg.lambda1 * balance + loss_cfg.lambda2 * diversity)


@dataclass
class LossBreakdown:
    total: nm.Tensor
    task: float
    balance_hard: float
    balance_soft: float
    diversity: float


def total_loss(
    task: nm.Tensor,
    trace: RoutingTrace,
    expert_outputs,
    cfg: MoEConfig,
    loss_cfg: LossConfig,
) -> LossBreakdown:
    """Assemble the full objective on the tape.

    The balance term uses the soft surrogate (the trace must carry taped
    distributions); the hard value is reported alongside. An empty trace
    (dense policy) contributes no balance term, and expert_outputs=None
    skips diversity; both report 0.0.
    """
    total = task
    balance_hard = 0.0
    balance_soft = 0.0
    if trace.records:
        balance_hard = balance_loss(utilization(trace, cfg), cfg)
        soft_t = soft_balance_loss(trace)
        balance_soft = float(soft_t.data)
        if loss_cfg.lambda1 > 0:
            total = nm.add(total, nm.scale(soft_t, loss_cfg.lambda1))
    diversity = 0.0
    if expert_outputs is not None:
        div_t = diversity_loss(expert_outputs)
        diversity = float(div_t.data)
        if loss_cfg.lambda2 > 0:
            total = nm.add(total, nm.scale(div_t, loss_cfg.lambda2))
    return LossBreakdown(
        total=total,
        task=float(task.data),
        balance_hard=balance_hard,
        balance_soft=balance_soft,
        diversity=diversity,
    )

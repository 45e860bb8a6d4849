"""Expert feed-forward network: two affine maps around a tanh.

Split out so the routing layer can evaluate selected experts without
importing the variant/parameter-store machinery in `experts`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError

__all__ = ["ExpertParams", "expert_forward", "expert_forward_rows"]


@dataclass
class ExpertParams:
    """One expert's weights: W1 (h, d), b1 (h,), W2 (d, h), b2 (d,)."""

    W1: nm.Tensor
    b1: nm.Tensor
    W2: nm.Tensor
    b2: nm.Tensor

    def __post_init__(self):
        h, d = self.W1.data.shape
        if self.b1.data.shape != (h,):
            raise DimensionError(f"expert b1 shape {self.b1.data.shape}, expected {(h,)}")
        if self.W2.data.shape != (d, h):
            raise DimensionError(f"expert W2 shape {self.W2.data.shape}, expected {(d, h)}")
        if self.b2.data.shape != (d,):
            raise DimensionError(f"expert b2 shape {self.b2.data.shape}, expected {(d,)}")

    @property
    def d_model(self) -> int:
        return self.W1.data.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.W1.data.shape[0]


def expert_forward(p: ExpertParams, q: nm.Tensor) -> nm.Tensor:
    """y = W2 tanh(W1 q + b1) + b2 for a single length-d query."""
    if q.data.shape != (p.d_model,):
        raise DimensionError(f"expert input shape {q.data.shape}, expected {(p.d_model,)}")
    return nm.linear(p.W2, nm.tanh(nm.linear(p.W1, q, p.b1)), p.b2)


def expert_forward_rows(p: ExpertParams, Q: nm.Tensor) -> nm.Tensor:
    """Row-batched expert evaluation for an (M, d) query matrix."""
    if Q.data.ndim != 2 or Q.data.shape[1] != p.d_model:
        raise DimensionError(f"expert input shape {Q.data.shape}, expected (M, {p.d_model})")
    return nm.affine_rows(nm.tanh(nm.affine_rows(Q, p.W1, p.b1)), p.W2, p.b2)

"""Lossless split of a one-hidden-layer MLP into M block experts.

Expert m owns rows ``[m*F/M, (m+1)*F/M)`` of W1/b1 and the matching columns
of W2.  The output bias b2 is applied once, after aggregation, so the sum of
all experts with unit weights reproduces the dense layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .numerics import Tensor


@dataclass(frozen=True)
class ExpertSet:
    w1: tuple[Tensor, ...]  # each (F/M, D)
    b1: tuple[Tensor, ...]  # each (F/M,)
    w2: tuple[Tensor, ...]  # each (D, F/M)
    b2: Tensor  # (D,)

    @property
    def num_experts(self) -> int:
        return len(self.w1)

    def restack(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.concatenate([w.data for w in self.w1], axis=0),
                np.concatenate([b.data for b in self.b1], axis=0),
                np.concatenate([w.data for w in self.w2], axis=1))


def decompose_dense(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, num_experts: int) -> ExpertSet:
    F = w1.shape[0]
    if num_experts < 1 or F % num_experts:
        raise ConfigError(f"mlp hidden size {F} is not divisible by num_experts={num_experts}")
    n = F // num_experts
    blocks = [slice(m * n, (m + 1) * n) for m in range(num_experts)]
    return ExpertSet(
        w1=tuple(w1[s] for s in blocks),
        b1=tuple(b1[s] for s in blocks),
        w2=tuple(w2[:, s] for s in blocks),
        b2=b2,
    )


def dense_forward(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, x: Tensor) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(x, w1, b1)), w2, b2)


def expert_response(experts: ExpertSet, m: int, x: Tensor) -> Tensor:
    """W2^m gelu(W1^m x + b1^m), without the shared output bias."""
    return nx.linear(nx.gelu(nx.linear(x, experts.w1[m], experts.b1[m])), experts.w2[m])


def expert_forward(experts: ExpertSet, x: Tensor, selected: Sequence[int], weights: Sequence[float] | Tensor) -> Tensor:
    """Weighted sum of the selected experts' responses plus the output bias."""
    M = experts.num_experts
    selected = list(selected)
    bad = [m for m in selected if not 0 <= m < M]
    if bad:
        raise IndexError(f"expert index {bad} outside [0, {M})")
    out = nx.mul(experts.b2, np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
    for j, m in enumerate(selected):
        w = weights[j] if isinstance(weights, Tensor) else float(weights[j])
        out = out + expert_response(experts, m, x) * w
    return out


def verify_equivalence(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, experts: ExpertSet,
                       trials: int = 100, seed: int = 0) -> float:
    """Largest |dense(x) - sum of unit-weight experts(x)| over random inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    D = w1.shape[1]
    everyone = list(range(experts.num_experts))
    ones = [1.0] * experts.num_experts
    worst = 0.0
    with nx.no_grad():
        for _ in range(trials):
            x = Tensor(rng.standard_normal(D).astype(w1.dtype))
            dense = dense_forward(w1, b1, w2, b2, x).data
            mixed = expert_forward(experts, x, everyone, ones).data
            worst = max(worst, float(np.max(np.abs(dense - mixed))))
    return worst

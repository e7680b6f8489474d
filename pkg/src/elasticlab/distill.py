"""Self-distillation losses and the combined training objective.

Teacher-side inputs are always treated as constants: anything passed as a
Tensor is unwrapped to its data before entering the graph.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .config import ConfigError, DistillConfig
from .numerics import Tensor
from .routing import INPUT_KINDS, PARAM_KINDS, RoutingDecision, token_budget, topk_mask

LOG_FLOOR = 1e-9


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_temperature(cfg: DistillConfig) -> float:
    if cfg.temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {cfg.temperature}")
    return float(cfg.temperature)


def kl_loss(student_logits: Tensor, teacher_logits, cfg: DistillConfig) -> Tensor:
    """Token-mean KL over the full vocabulary at temperature tau."""
    tau = _check_temperature(cfg)
    t = _const(teacher_logits)
    if t.shape != student_logits.shape:
        raise ConfigError(f"student {student_logits.shape} and teacher {t.shape} logits differ in shape")
    ls = nx.log_softmax(student_logits * (1.0 / tau), axis=-1)
    lt = _np_log_softmax(t.astype(student_logits.dtype) * (1.0 / tau))
    if cfg.direction == "forward":
        per_tok = (nx.exp(ls) * (ls - lt)).sum(axis=-1)
    else:
        per_tok = (np.exp(lt) * (lt - ls)).sum(axis=-1)
    return per_tok.mean()


def topk_kl_loss(student_logits: Tensor, teacher_logits, k: int, cfg: DistillConfig) -> Tensor:
    """KL between (k+1)-vectors: teacher top-k probabilities plus a residual bucket.

    The student is gathered at the teacher's top-k indices (ties to the lower
    index) and gets its own residual.
    """
    tau = _check_temperature(cfg)
    t = _const(teacher_logits).astype(student_logits.dtype)
    V = t.shape[-1]
    if not 1 <= k < V:
        raise ConfigError(f"top-k vocabulary size must lie in [1, {V}), got {k}")
    lt_full = _np_log_softmax(t * (1.0 / tau))
    idx = np.argsort(-lt_full, axis=-1, kind="stable")[..., :k]
    pt_top = np.exp(np.take_along_axis(lt_full, idx, axis=-1))
    pt = np.concatenate([pt_top, np.maximum(1.0 - pt_top.sum(-1, keepdims=True), 0.0)], axis=-1)
    log_pt = np.log(np.maximum(pt, LOG_FLOOR))

    ls_full = nx.log_softmax(student_logits * (1.0 / tau), axis=-1)
    ls_top = nx.take_along_axis(ls_full, idx, axis=-1)
    ps_top = nx.exp(ls_top)
    resid = 1.0 - ps_top.sum(axis=-1, keepdims=True)
    ps = nx.concat([ps_top, nx.maximum(resid, 0.0)], axis=-1)
    log_ps = nx.concat([ls_top, nx.log(nx.maximum(resid, LOG_FLOOR))], axis=-1)
    if cfg.direction == "forward":
        per_tok = (ps * (log_ps - log_pt)).sum(axis=-1)
    else:
        per_tok = (pt * (log_pt - log_ps)).sum(axis=-1)
    return per_tok.mean()


def cosine_distance_loss(student_emb: Tensor, teacher_emb) -> Tensor:
    """Token-mean of 1 - cos(student, teacher) over the last axis."""
    t = _const(teacher_emb).astype(student_emb.dtype)
    s_norm = np.linalg.norm(student_emb.data, axis=-1)
    t_norm = np.linalg.norm(t, axis=-1)
    if (s_norm == 0).any() or (t_norm == 0).any():
        raise nx.NumericError("cosine distance undefined for a zero-norm embedding")
    t_unit = t / t_norm[..., None]
    s_len = nx.sqrt((student_emb * student_emb).sum(axis=-1))
    cos = (student_emb * t_unit).sum(axis=-1) / s_len
    return (1.0 - cos).mean()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Token-mean cosine similarity between two embedding arrays."""
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return float((num / den).mean())


def load_balance_loss(frequencies, mean_probs: Tensor) -> Tensor:
    """Sum over routes of (selection frequency) x (mean routing probability).

    ``frequencies`` are per-token selection rates (they sum to k); they carry
    no gradient.  Uniform routing gives exactly k / M.
    """
    f = np.asarray(_const(frequencies), dtype=mean_probs.dtype)
    if f.shape != mean_probs.shape:
        raise ConfigError(f"frequency shape {f.shape} != probability shape {mean_probs.shape}")
    return (mean_probs * f).sum()


def topk_bce_loss(router_logits: Tensor, capacity: float) -> Tensor:
    """BCE teaching a token router to predict its own training-time top-k membership."""
    T = router_logits.shape[-1]
    targets = topk_mask(router_logits.data, token_budget(capacity, T))
    return nx.bce_with_logits(router_logits, targets.astype(router_logits.dtype))


def distill_loss(student_out: Tensor, teacher_out, cfg: DistillConfig, causal: bool) -> Tensor:
    if cfg.output_loss == "cosine" or not causal:
        return cosine_distance_loss(student_out, teacher_out)
    if cfg.top_k_vocab:
        return topk_kl_loss(student_out, teacher_out, cfg.top_k_vocab, cfg)
    return kl_loss(student_out, teacher_out, cfg)


def auxiliary_terms(decisions: Iterable[RoutingDecision], causal: bool,
                    capacities: dict[str, float] | None = None) -> tuple[list[Tensor], list[Tensor]]:
    """Load-balance terms for parameter routers, top-k BCE terms for causal token routers."""
    load, bce = [], []
    for d in decisions:
        if d.kind in PARAM_KINDS:
            M = d.selected.shape[-1]
            f = d.selected.reshape(-1, M).mean(axis=0)
            P = d.probs.reshape(-1, M).mean(axis=0)
            load.append(load_balance_loss(f, P))
        elif d.kind in INPUT_KINDS and causal and capacities is not None:
            bce.append(topk_bce_loss(d.logits, capacities[d.kind]))
    return load, bce


def total_objective(distill: Tensor, load_terms: Sequence[Tensor], bce_terms: Sequence[Tensor],
                    cfg: DistillConfig, causal: bool = True) -> Tensor:
    """distill + lambda_load * mean(load terms) + lambda_topk * mean(BCE terms)."""
    if bce_terms and not causal:
        raise ConfigError("the top-k BCE term applies to causal language models only")
    total = distill
    if load_terms and cfg.lambda_load:
        total = total + _mean(load_terms) * float(cfg.lambda_load)
    if bce_terms and cfg.lambda_topk:
        total = total + _mean(bce_terms) * float(cfg.lambda_topk)
    return total


def _mean(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))

"""Optimizer, learning-rate schedule, teacher pretraining and the distillation loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import backbone as bb
from . import distill as dl
from . import numerics as nx
from .config import DistillConfig, ElasticConfig, ModelConfig, TrainConfig
from .data import epoch_batches, windows
from .numerics import Tensor
from .routing import INPUT_KINDS, ElasticModel, selection_stats

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")
        self.record = record


def cosine_warmup_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine decay to 0 at ``total_steps``."""
    warmup = int(math.ceil(cfg.warmup_frac * total_steps))
    if warmup and step < warmup:
        return cfg.lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, cfg: TrainConfig, step: int) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p -= (lr * (update + cfg.weight_decay * p)).astype(p.dtype)


def clip_gradients(tensors: dict[str, Tensor], max_norm: float) -> tuple[float, float]:
    """Rescale grads to global norm <= max_norm; returns (norm before, norm after)."""
    sq = sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in tensors.values() if t.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors.values():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
        return norm, norm * scale
    return norm, norm


def _planned_steps(n_examples: int, cfg: TrainConfig) -> int:
    per_epoch = max(n_examples // cfg.batch_size, 1)
    total = per_epoch * cfg.epochs
    return min(total, cfg.max_steps) if cfg.max_steps else total


def _batch_stream(data: np.ndarray, cfg: TrainConfig, total: int):
    rng = np.random.default_rng(cfg.seed)
    step = 0
    while step < total:
        for batch in epoch_batches(data, cfg.batch_size, rng):
            yield batch
            step += 1
            if step >= total:
                return


class TrainLog:
    """Per-step records, optionally streamed as JSON lines."""

    def __init__(self, path: Optional[str | Path] = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("train log steps must increase")
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _optimize(trainable: dict[str, Tensor], loss_fn, data: np.ndarray, cfg: TrainConfig,
              train_log: TrainLog, extra=None) -> None:
    total = _planned_steps(len(data), cfg)
    state = AdamState()
    for step, batch in enumerate(_batch_stream(data, cfg, total), start=1):
        nx.zero_grads(trainable.values())
        lr = cosine_warmup_lr(step, total, cfg)
        try:
            loss, parts = loss_fn(batch)
        except nx.NumericError as exc:
            record = {"step": step, "lr": lr, "loss": float("nan"), "error": str(exc)}
            train_log.append(record)
            raise TrainingDiverged(record) from exc
        record = {"step": step, "lr": lr, "loss": float(loss.data), **parts}
        if not np.isfinite(loss.data).all():
            train_log.append(record)
            raise TrainingDiverged(record)
        loss.backward()
        pre, post = clip_gradients(trainable, cfg.grad_clip)
        record["grad_norm"] = pre
        record["grad_norm_clipped"] = post
        adamw_step({k: t.data for k, t in trainable.items()},
                   {k: t.grad for k, t in trainable.items() if t.grad is not None}, state, lr, cfg, step)
        if extra:
            record.update(extra())
        train_log.append(record)
        if step % 50 == 0 or step == total:
            log.info("step %d/%d loss %.4f", step, total, record["loss"])
    nx.zero_grads(trainable.values())


# ---------------------------------------------------------------------------
# teacher pretraining
# ---------------------------------------------------------------------------

def pretrain_teacher(cfg: ModelConfig, data: np.ndarray, train_cfg: TrainConfig,
                     log_path: Optional[str | Path] = None) -> tuple[bb.TransformerParams, TrainLog]:
    """Train the backbone from scratch and return it frozen.

    Causal mode: ``data`` is a token stream, trained with next-token
    cross-entropy.  Encoder mode: ``data`` is (N, T, P) patches, trained to
    reconstruct every patch from an input where a random fraction of patches
    is zeroed, through a linear head that is discarded afterwards.
    """
    if len(data) == 0:
        raise ValueError("pretraining data is empty")
    train_cfg.check()
    params = bb.build_model(cfg)
    train_log = TrainLog(log_path)
    trainable = dict(params.tensors)
    if cfg.mode == "causal_lm":
        seq = min(train_cfg.seq_len, cfg.max_seq)
        examples = windows(np.asarray(data), seq + 1)

        def loss_fn(batch):
            return bb.lm_loss(params, batch), {}
    else:
        examples = np.asarray(data, dtype=np.float32)
        rng = np.random.default_rng(train_cfg.seed + 7)
        head_rng = np.random.default_rng(cfg.seed + 7)
        head_w = Tensor(head_rng.normal(0, cfg.init_std, (cfg.patch_dim, cfg.hidden)).astype(np.float32),
                        requires_grad=True)
        head_b = Tensor(np.zeros(cfg.patch_dim, np.float32), requires_grad=True)
        trainable.update({"recon.w": head_w, "recon.b": head_b})

        def loss_fn(batch):
            keep = rng.random(batch.shape[:2]) >= train_cfg.mask_ratio
            emb = bb.forward_encoder(params, batch * keep[..., None])
            diff = nx.linear(emb, head_w, head_b) - batch
            return (diff * diff).mean(), {}

    _optimize(trainable, loss_fn, examples, train_cfg, train_log)
    return params.freeze(), train_log


# ---------------------------------------------------------------------------
# self-distillation
# ---------------------------------------------------------------------------

def teacher_output(teacher: bb.TransformerParams, inputs) -> np.ndarray:
    with nx.no_grad():
        if teacher.config.mode == "causal_lm":
            return bb.forward_lm(teacher, inputs).data
        return bb.forward_encoder(teacher, inputs).data


def distill_step_loss(model: ElasticModel, teacher: bb.TransformerParams, inputs, cfg: DistillConfig,
                      mode: str = "train"):
    """Total objective and its parts for one batch."""
    target = teacher_output(teacher, inputs)
    result = model.forward(inputs, mode=mode)
    d = dl.distill_loss(result.output, target, cfg, model.causal)
    capacities = {k: getattr(model.elastic, k) for k in INPUT_KINDS}
    use_bce = model.causal and model.elastic.input_weight_mode == "sigmoid"
    load, bce = dl.auxiliary_terms(result.decisions, model.causal, capacities if use_bce else None)
    total = dl.total_objective(d, load, bce, cfg, model.causal)
    parts = {
        "distill_loss": float(d.data),
        "load_loss": float(np.mean([t.data for t in load])) if load else 0.0,
        "bce_loss": float(np.mean([t.data for t in bce])) if bce else 0.0,
    }
    return total, parts, result


def selection_rates(decisions) -> dict[str, float]:
    rates: dict[str, list[float]] = {}
    for (layer, kind), u in selection_stats(decisions).items():
        rates.setdefault(kind, []).append(u.token_rate)
    return {f"rate_{k}": float(np.mean(v)) for k, v in sorted(rates.items())}


def train_distill(teacher: bb.TransformerParams, elastic: ElasticConfig, distill_cfg: DistillConfig,
                  train_cfg: TrainConfig, data: np.ndarray, log_path: Optional[str | Path] = None,
                  routers: dict[str, Tensor] | None = None) -> tuple[ElasticModel, TrainLog]:
    """Fit routers (and LoRA adapters, if configured) against the frozen teacher.

    ``data`` is a token stream (causal) or a patch array (encoder).  The
    student shares the teacher's backbone tensors, which never receive
    updates.
    """
    if not teacher.frozen:
        raise ValueError("train_distill needs a frozen teacher")
    train_cfg.check()
    distill_cfg.check(teacher.config.vocab_size if teacher.config.mode == "causal_lm" else None)
    model = ElasticModel(teacher, elastic, routers)
    trainable = model.trainable()
    if teacher.config.mode == "causal_lm":
        seq = min(train_cfg.seq_len, teacher.config.max_seq)
        examples = windows(np.asarray(data), seq)
    else:
        examples = np.asarray(data, dtype=np.float32)
    train_log = TrainLog(log_path)
    holder = {}

    def loss_fn(batch):
        total, parts, result = distill_step_loss(model, teacher, batch, distill_cfg)
        holder["decisions"] = result.decisions
        return total, parts

    def extra():
        return selection_rates(holder.pop("decisions", []))

    _optimize(trainable, loss_fn, examples, train_cfg, train_log, extra)
    return model, train_log


def evaluate(model: ElasticModel, teacher: bb.TransformerParams, batches: list[np.ndarray],
             cfg: DistillConfig, mode: str = "train") -> dict:
    """Held-out metrics for a student against its teacher.

    Causal batches are (B, T+1) token windows: the first T tokens are fed and
    the next-token targets give LM losses.  Encoder batches are patch arrays.
    """
    totals: dict[str, list[float]] = {}

    def add(key, value):
        totals.setdefault(key, []).append(float(value))

    with nx.no_grad():
        for batch in batches:
            inputs = batch[:, :-1] if model.causal else batch
            target = teacher_output(teacher, inputs)
            result = model.forward(inputs, mode=mode)
            add("eval_distill_loss", dl.distill_loss(result.output, target, cfg, model.causal).data)
            if model.causal:
                add("eval_lm_loss", nx.cross_entropy(result.output, batch[:, 1:]).data)
                add("teacher_lm_loss", nx.cross_entropy(Tensor(target), batch[:, 1:]).data)
                add("top1_match", np.mean(result.output.data.argmax(-1) == target.argmax(-1)))
            else:
                add("eval_cosine", dl.cosine_similarity(result.output.data, target))
            for key, value in selection_rates(result.decisions).items():
                add(key, value)
    return {k: float(np.mean(v)) for k, v in sorted(totals.items())}

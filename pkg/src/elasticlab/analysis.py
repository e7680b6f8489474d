"""Redundancy probes, capacity sweeps, compute accounting and router comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import backbone as bb
from . import numerics as nx
from .config import ConfigError, DistillConfig, ElasticConfig, ModelConfig, PruneSpec, TrainConfig
from .numerics import Tensor
from .routing import INPUT_KINDS, ElasticModel, router_shapes
from .trainer import evaluate, teacher_output, train_distill

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["kind", "capacity", "eval_distill_loss", "eval_task_metric", "active_params",
                 "active_token_frac", "router_params", "seed"]
PRUNE_COLUMNS = ["corpus", "kind", "count", "fraction", "mean_delta_loss", "std_delta_loss",
                 "mean_top1_match", "std_top1_match", "groups"]


# ---------------------------------------------------------------------------
# static pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneRow:
    corpus: str
    kind: str
    count: int
    fraction: float
    mean_delta_loss: float
    std_delta_loss: float
    mean_top1_match: float
    std_top1_match: float
    groups: int


@dataclass
class PruneResult:
    rows: list[PruneRow] = field(default_factory=list)

    def curve(self, corpus: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        rows = [r for r in self.rows if corpus is None or r.corpus == corpus]
        return np.array([r.count for r in rows]), np.array([r.mean_delta_loss for r in rows])

    def to_csv(self) -> str:
        return _csv(PRUNE_COLUMNS, [asdict(r) for r in self.rows])


def _components(cfg: ModelConfig, kind: str) -> list[tuple[int, int]]:
    if kind == "attention_head":
        return [(i, h) for i in range(cfg.layers) for h in range(cfg.heads)]
    return [(i, -1) for i in range(cfg.layers)]


def pruned_layer_fn(cfg: ModelConfig, kind: str, removed: Sequence[tuple[int, int]]):
    """Layer function that drops the given heads / MLP sub-blocks / whole layers."""
    head_keep = np.ones((cfg.layers, cfg.heads))
    skip = set()
    for layer, head in removed:
        if kind == "attention_head":
            head_keep[layer, head] = 0.0
        else:
            skip.add(layer)

    def layer(params, i, x, causal):
        if kind == "transformer_layer" and i in skip:
            return x
        B, T, _ = x.shape
        gate = None
        if kind == "attention_head" and head_keep[i].min() < 1.0:
            gate = Tensor(np.broadcast_to(head_keep[i].astype(x.dtype), (B, T, cfg.heads)).copy())
        x = x + bb.attention(params, i, bb.norm(params, x, f"layers.{i}.ln1"), causal, head_gate=gate)
        if kind == "mlp_layer" and i in skip:
            return x
        return x + bb.mlp(params, i, bb.norm(params, x, f"layers.{i}.ln2"))

    return layer


def _lm_metrics(params, batches, layer_fn, reference_preds=None):
    losses, preds = [], []
    with nx.no_grad():
        for batch in batches:
            logits = bb.forward_lm(params, batch[:, :-1], layer_fn)
            losses.append(float(nx.cross_entropy(logits, batch[:, 1:]).data))
            preds.append(logits.data.argmax(-1))
    loss = float(np.mean(losses))
    if reference_preds is None:
        return loss, preds, 1.0
    match = float(np.mean(np.concatenate([(p == r).reshape(-1) for p, r in zip(preds, reference_preds)])))
    return loss, preds, match


def prune_eval(teacher: bb.TransformerParams, spec: PruneSpec, eval_batches: list[np.ndarray],
               corpus: str = "eval") -> PruneResult:
    """Average ΔLM-loss and top-1 agreement over ``spec.groups`` random removal sets per count.

    No parameter is added or trained.
    """
    cfg = teacher.config
    spec.check(cfg)
    components = _components(cfg, spec.kind)
    rng = np.random.default_rng(spec.seed)
    base_loss, base_preds, _ = _lm_metrics(teacher, eval_batches, None)
    result = PruneResult()
    for count in spec.counts:
        deltas, matches = [], []
        for _ in range(spec.groups):
            if count == 0:
                deltas.append(0.0)
                matches.append(1.0)
                continue
            pick = rng.choice(len(components), size=count, replace=False)
            fn = pruned_layer_fn(cfg, spec.kind, [components[j] for j in sorted(pick)])
            loss, _, match = _lm_metrics(teacher, eval_batches, fn, base_preds)
            deltas.append(loss - base_loss)
            matches.append(match)
        result.rows.append(PruneRow(corpus, spec.kind, count, count / len(components),
                                    float(np.mean(deltas)), float(np.std(deltas)),
                                    float(np.mean(matches)), float(np.std(matches)), spec.groups))
    return result


def rank_correlation(x, y) -> float:
    """Spearman correlation; NaN when either side is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# compute accounting
# ---------------------------------------------------------------------------

def active_compute(model_cfg: ModelConfig, elastic: ElasticConfig) -> dict:
    """Expected backbone parameters touched per token, plus router/adapter sizes.

    Keeping k of M experts uses k/M of W1, b1 and W2 (b2 is shared); keeping k
    of H heads uses k/H of the four attention projections; an input capacity
    c scales its module's share by c.  Layer norms and embeddings always count.
    """
    D, F, H, L = model_cfg.hidden, model_cfg.mlp_hidden, model_cfg.heads, model_cfg.layers
    total = bb.closed_form_param_count(model_cfg)
    routed = set(elastic.routed_layers(L))
    attn_full = 4 * D * D
    mlp_blocks = 2 * F * D + F
    active = total - L * (attn_full + mlp_blocks + D)
    for i in range(L):
        a_frac = m_in = e_frac = 1.0
        if i in routed:
            if elastic.input_mha is not None:
                a_frac *= elastic.input_mha
            if elastic.param_mha is not None:
                a_frac *= elastic.param_mha / H
            if elastic.input_mlp is not None:
                m_in = elastic.input_mlp
            if elastic.param_mlp is not None:
                e_frac = elastic.param_mlp / elastic.num_experts
        active += attn_full * a_frac + m_in * (mlp_blocks * e_frac + D)
    router = sum(int(np.prod(s)) for s in router_shapes(model_cfg, elastic).values())
    lora = 0
    if elastic.lora_rank:
        lora = 2 * D * elastic.lora_rank * len(elastic.lora_targets) * L
    return {
        "active_params": float(active),
        "total_params": int(total),
        "router_params": int(router),
        "lora_params": int(lora),
        "active_fraction": float(active / total),
    }


# ---------------------------------------------------------------------------
# capacity sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    kind: str
    capacity: float
    eval_distill_loss: float
    eval_task_metric: float
    active_params: float
    active_token_frac: float
    router_params: int
    seed: int


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    baseline: Optional[SweepRow] = None
    logs: dict[str, list[dict]] = field(default_factory=dict)

    def cells(self, kind: str) -> list[SweepRow]:
        return sorted((r for r in self.rows if r.kind == kind), key=lambda r: r.capacity)

    def to_csv(self) -> str:
        rows = ([asdict(self.baseline)] if self.baseline else []) + [asdict(r) for r in self.rows]
        return _csv(SWEEP_COLUMNS, rows)

    def to_json(self, config_echo: dict | None = None) -> str:
        doc = {
            "columns": SWEEP_COLUMNS,
            "baseline": asdict(self.baseline) if self.baseline else None,
            "rows": [asdict(r) for r in self.rows],
            "config": config_echo or {},
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def cell_config(base: ElasticConfig, model_cfg: ModelConfig, kind: str, capacity: float) -> ElasticConfig:
    """Elastic config routing only ``kind``; parameter capacities are fractions k/M."""
    fields = base.model_dump()
    for k in ("input_mha", "input_mlp", "param_mha", "param_mlp"):
        fields[k] = None
    if kind in INPUT_KINDS:
        if not 0.0 < capacity <= 1.0:
            raise ConfigError(f"{kind} capacity must lie in (0, 1], got {capacity}")
        fields[kind] = float(capacity)
    else:
        M = model_cfg.heads if kind == "param_mha" else base.num_experts
        k = int(round(capacity * M))
        if abs(k - capacity * M) > 1e-6 or not 1 <= k <= M:
            raise ConfigError(f"{kind} capacity {capacity} is not a multiple of 1/{M}")
        fields[kind] = k
    return ElasticConfig(**fields).check(model_cfg)


def capacity_sweep(teacher: bb.TransformerParams, kinds: Sequence[str], capacities: Sequence[float],
                   distill_cfg: DistillConfig, train_cfg: TrainConfig, train_data: np.ndarray,
                   eval_data: list[np.ndarray], base_elastic: ElasticConfig | None = None,
                   eval_routing: str = "topk", threads: int = 1) -> SweepResult:
    """Train and evaluate one router set per (kind, capacity) cell."""
    base_elastic = base_elastic or ElasticConfig()
    cfg = teacher.config
    mode = "infer" if eval_routing == "threshold" else "train"
    cells = [(kind, float(c)) for kind in kinds for c in sorted(capacities)]
    for kind, c in cells:
        cell_config(base_elastic, cfg, kind, c)

    def run(cell):
        kind, c = cell
        elastic = cell_config(base_elastic, cfg, kind, c)
        model, train_log = train_distill(teacher, elastic, distill_cfg, train_cfg, train_data)
        metrics = evaluate(model, teacher, eval_data, distill_cfg, mode=mode)
        task = metrics["eval_lm_loss"] if model.causal else metrics["eval_cosine"]
        frac = metrics.get(f"rate_{kind}", 1.0) if kind in INPUT_KINDS else 1.0
        acct = active_compute(cfg, elastic)
        row = SweepRow(kind, c, metrics["eval_distill_loss"], task, acct["active_params"], frac,
                       bb.count_params(model, trainable_only=True), train_cfg.seed)
        log.info("sweep cell %s c=%.3f distill=%.5f", kind, c, row.eval_distill_loss)
        return row, train_log.records

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(cell) for cell in cells]

    result = SweepResult()
    for (kind, c), (row, records) in zip(cells, outcomes):
        result.rows.append(row)
        result.logs[f"{kind}@{c:g}"] = records
    result.baseline = teacher_baseline(teacher, eval_data, train_cfg.seed)
    return result


def teacher_baseline(teacher: bb.TransformerParams, eval_data: list[np.ndarray], seed: int) -> SweepRow:
    cfg = teacher.config
    if cfg.mode == "causal_lm":
        with nx.no_grad():
            losses = [float(nx.cross_entropy(bb.forward_lm(teacher, b[:, :-1]), b[:, 1:]).data) for b in eval_data]
        metric = float(np.mean(losses))
    else:
        metric = 1.0
    return SweepRow("teacher", 1.0, 0.0, metric, float(bb.closed_form_param_count(cfg)), 1.0, 0, seed)


# ---------------------------------------------------------------------------
# router comparison
# ---------------------------------------------------------------------------

def probe_activations(params: bb.TransformerParams, probe) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-layer (LN1, LN2) outputs of the unrouted backbone: the router inputs."""
    acts = {}

    def layer(p, i, x, causal):
        h1 = bb.norm(p, x, f"layers.{i}.ln1")
        x = x + bb.attention(p, i, h1, causal)
        h2 = bb.norm(p, x, f"layers.{i}.ln2")
        acts[i] = (h1.data, h2.data)
        return x + bb.mlp(p, i, h2)

    with nx.no_grad():
        if params.config.mode == "causal_lm":
            bb.forward_lm(params, probe, layer)
        else:
            bb.forward_encoder(params, probe, layer)
    return acts


def router_logits(model: ElasticModel, probe, acts=None) -> dict[tuple[int, str], np.ndarray]:
    """Every router's logits on the same backbone activations.

    Using the unrouted backbone's states (rather than each model's own routed
    states) makes the comparison depend on router parameters only.
    """
    acts = acts if acts is not None else probe_activations(model.params, probe)
    out = {}
    for name in sorted(model.routers, key=_router_order):
        _, layer, kind, leaf = name.split(".")
        if leaf != "w":
            continue
        h = acts[int(layer)][0 if kind.endswith("mha") else 1].astype(np.float64)
        w = model.routers[name].data.astype(np.float64)
        if kind in INPUT_KINDS:
            logits = h @ w + model.routers[f"router.{layer}.{kind}.b"].data.astype(np.float64)
        else:
            logits = h @ w.T
        out[(int(layer), kind)] = logits
    return out


def _router_order(name: str):
    _, layer, kind, leaf = name.split(".")
    return int(layer), kind, leaf


def _cos(a: np.ndarray, b: np.ndarray, centered: bool) -> float:
    a, b = a.reshape(-1), b.reshape(-1)
    if centered:
        a, b = a - a.mean(), b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def router_similarity(model_a: ElasticModel, model_b: ElasticModel, probe, centered: bool = True) -> dict:
    """Cosine similarity of router logits on shared probe inputs.

    With ``centered`` each layer's logits are mean-centered first, which
    removes the bias term that top-k selection ignores anyway.
    """
    if router_shapes(model_a.config, model_a.elastic) != router_shapes(model_b.config, model_b.elastic):
        raise ConfigError("router architectures differ; cannot compare")
    acts = probe_activations(model_a.params, probe)
    la, lb = router_logits(model_a, probe, acts), router_logits(model_b, probe, acts)
    if centered:
        la = {k: v - v.mean() for k, v in la.items()}
        lb = {k: v - v.mean() for k, v in lb.items()}
    keys = list(la)
    flat_a = np.concatenate([la[k].reshape(-1) for k in keys])
    flat_b = np.concatenate([lb[k].reshape(-1) for k in keys])
    return {
        "similarity": _cos(flat_a, flat_b, False),
        "per_layer": {f"{layer}.{kind}": _cos(la[(layer, kind)], lb[(layer, kind)], False) for layer, kind in keys},
    }


def similarity_matrix(models: dict[str, ElasticModel], probe, centered: bool = True) -> dict:
    names = list(models)
    mat = np.eye(len(names))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            s = router_similarity(models[a], models[names[j]], probe, centered)["similarity"]
            mat[i, j] = mat[j, i] = s
    return {"names": names, "matrix": np.round(mat, 12).tolist()}


def selection_heatmaps(model: ElasticModel, probe) -> dict:
    """Per-image 0/1 patch-selection grids for every token router, keyed 'layer.kind'."""
    grid = model.config.image_grid
    with nx.no_grad():
        result = model.forward(probe, mode="train")
    maps = {}
    for d in result.decisions:
        if d.kind in INPUT_KINDS:
            maps[f"{d.layer}.{d.kind}"] = d.selected.reshape(-1, grid, grid).astype(int).tolist()
    return maps


def random_routers(model_cfg: ModelConfig, elastic: ElasticConfig, seed: int, std: float = 0.02) -> dict[str, Tensor]:
    """Gaussian-initialized router tensors (a reference point for similarity)."""
    rng = np.random.default_rng(seed)
    return {name: Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True, name=name)
            for name, shape in router_shapes(model_cfg, elastic).items()}


def _csv(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)

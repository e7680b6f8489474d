"""Learned routers around and inside a frozen transformer.

Two families:

* parameter subset selection: per token, keep the top-k of M heads or MLP
  experts.  Routing weights are ``M * softmax(W_r x)`` so that k = M with a
  uniform router reproduces the frozen layer exactly.
* input subset selection: per sequence, keep the top ceil(c*T) tokens for a
  module; the rest bypass it through the residual stream.  At inference a
  causal model instead thresholds each token's sigmoid score.

Selected outputs are multiplied by their routing weights, which is how the
hard selection passes gradient to the router.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import backbone as bb
from . import numerics as nx
from .config import ConfigError, ElasticConfig
from .numerics import Tensor

INPUT_KINDS = ("input_mha", "input_mlp")
PARAM_KINDS = ("param_mha", "param_mlp")


class UnsupportedModeError(RuntimeError):
    pass


@dataclass
class ParamRouter:
    weight: Tensor  # (M, D)
    k: int

    @property
    def num_routes(self) -> int:
        return self.weight.shape[0]


@dataclass
class InputRouter:
    weight: Tensor  # (D,)
    bias: Tensor  # (1,)
    capacity: float = 1.0
    weight_mode: str = "sigmoid"
    threshold: float = 0.5


@dataclass
class RoutingDecision:
    layer: int
    kind: str
    logits: Tensor
    weights: Tensor
    selected: np.ndarray  # bool; (..., M) for parameter routing, (..., T) for input routing
    probs: Optional[Tensor] = None  # softmax probabilities, parameter routing only

    @property
    def gate(self) -> Tensor:
        """Routing weight where selected, zero elsewhere."""
        return self.weights * self.selected.astype(self.weights.dtype)

    def selected_indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected.reshape(-1)) if self.selected.ndim == 1 else np.argwhere(self.selected)

    def to_record(self, step: int = 0) -> dict:
        return {
            "layer": self.layer,
            "kind": self.kind,
            "step": step,
            "selected": self.selected.astype(int).tolist(),
            "weights": np.round(self.weights.data.astype(np.float64), 6).tolist(),
        }


def token_budget(capacity: float, T: int) -> int:
    """k = ceil(c * T), guarded against float noise such as 0.1 * 30."""
    if T < 1:
        raise bb.DataError("cannot route an empty sequence")
    k = math.ceil(capacity * T - 1e-9)
    if not 1 <= k <= T:
        raise ConfigError(f"capacity {capacity} gives k={k} outside [1, {T}]")
    return k


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis; ties go to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def param_route(router: ParamRouter, x: Tensor, layer: int = 0, kind: str = "param_mlp") -> RoutingDecision:
    M = router.num_routes
    if not 1 <= router.k <= M:
        raise ConfigError(f"k={router.k} must lie in [1, M={M}]")
    logits = nx.linear(x, router.weight)
    probs = nx.softmax(logits, axis=-1)
    weights = probs * float(M)
    selected = topk_mask(weights.data, router.k)
    return RoutingDecision(layer, kind, logits, weights, selected, probs)


def _input_logits(router: InputRouter, x: Tensor) -> Tensor:
    return nx.linear(x, router.weight.reshape(1, -1), router.bias).reshape(x.shape[:-1])


def input_route_train(router: InputRouter, x: Tensor, capacity: float | None = None,
                      layer: int = 0, kind: str = "input_mlp") -> RoutingDecision:
    """Top-ceil(c*T) token selection over the sequence axis of ``x`` (..., T, D)."""
    c = router.capacity if capacity is None else capacity
    T = x.shape[-2]
    k = token_budget(c, T)
    logits = _input_logits(router, x)
    if router.weight_mode == "sigmoid":
        weights = nx.sigmoid(logits)
    elif router.weight_mode == "seq_softmax":
        weights = nx.softmax(logits, axis=-1)
    else:
        raise ConfigError(f"unknown weight_mode {router.weight_mode!r}")
    selected = topk_mask(weights.data, k)
    return RoutingDecision(layer, kind, logits, weights, selected)


def input_route_infer(router: InputRouter, x: Tensor, threshold: float | None = None,
                      layer: int = 0, kind: str = "input_mlp") -> RoutingDecision:
    """Per-token decision ``sigmoid(w.x + b) > threshold``; uses no other token."""
    if router.weight_mode != "sigmoid":
        raise UnsupportedModeError(
            f"threshold inference needs per-token sigmoid weights; weight_mode={router.weight_mode!r} "
            "normalizes over the sequence and is not causal")
    theta = router.threshold if threshold is None else threshold
    logits = _input_logits(router, x)
    weights = nx.sigmoid(logits)
    return RoutingDecision(layer, kind, logits, weights, weights.data > theta)


# ---------------------------------------------------------------------------
# router parameter tables
# ---------------------------------------------------------------------------

def router_shapes(model_cfg, elastic: ElasticConfig) -> dict[str, tuple[int, ...]]:
    D = model_cfg.hidden
    shapes = {}
    for i in elastic.routed_layers(model_cfg.layers):
        for kind in elastic.kinds:
            p = f"router.{i}.{kind}"
            if kind in INPUT_KINDS:
                shapes[p + ".w"] = (D,)
                shapes[p + ".b"] = (1,)
            elif kind == "param_mha":
                shapes[p + ".w"] = (model_cfg.heads, D)
            else:
                shapes[p + ".w"] = (elastic.num_experts, D)
    return shapes


def init_routers(model_cfg, elastic: ElasticConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Input routers start at weight 0 / bias b0 (near-identity); parameter routers at zero."""
    tensors = {}
    for name, shape in router_shapes(model_cfg, elastic).items():
        value = elastic.input_router_bias_init if name.endswith(".b") else 0.0
        tensors[name] = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)
    return tensors


def layer_entries(model_cfg, elastic: ElasticConfig) -> dict[int, dict[str, float]]:
    kinds = {k: getattr(elastic, k) for k in elastic.kinds}
    return {i: dict(kinds) for i in elastic.routed_layers(model_cfg.layers)} if kinds else {}


# ---------------------------------------------------------------------------
# elastic layer
# ---------------------------------------------------------------------------

def _route_input(routers, elastic, i, kind, capacity, h, mode, causal, sink) -> RoutingDecision:
    p = f"router.{i}.{kind}"
    router = InputRouter(routers[p + ".w"], routers[p + ".b"], capacity,
                         elastic.input_weight_mode, elastic.threshold)
    if mode == "infer" and causal:
        dec = input_route_infer(router, h, layer=i, kind=kind)
    else:
        dec = input_route_train(router, h, layer=i, kind=kind)
    sink.append(dec)
    return dec


def _route_params(routers, i, kind, k, h, sink) -> RoutingDecision:
    dec = param_route(ParamRouter(routers[f"router.{i}.{kind}.w"], int(k)), h, layer=i, kind=kind)
    sink.append(dec)
    return dec


def elastic_block(params: bb.TransformerParams, i: int, x: Tensor, causal: bool,
                  routers: dict[str, Tensor], elastic: ElasticConfig, entry: dict[str, float],
                  mode: str, sink: list) -> Tensor:
    """One transformer layer with the routers named in ``entry`` applied."""
    h = bb.norm(params, x, f"layers.{i}.ln1")
    token_gate = key_mask = head_gate = None
    if "input_mha" in entry:
        dec = _route_input(routers, elastic, i, "input_mha", entry["input_mha"], h, mode, causal, sink)
        key_mask, token_gate = dec.selected, dec.gate
    if "param_mha" in entry:
        head_gate = _route_params(routers, i, "param_mha", entry["param_mha"], h, sink).gate
    out = bb.attention(params, i, h, causal, key_mask=key_mask, head_gate=head_gate)
    x = x + (out * token_gate.reshape(token_gate.shape + (1,)) if token_gate is not None else out)

    h = bb.norm(params, x, f"layers.{i}.ln2")
    token_gate = expert_gate = None
    if "input_mlp" in entry:
        token_gate = _route_input(routers, elastic, i, "input_mlp", entry["input_mlp"], h, mode, causal, sink).gate
    if "param_mlp" in entry:
        expert_gate = _route_params(routers, i, "param_mlp", entry["param_mlp"], h, sink).gate
    out = bb.mlp(params, i, h, expert_gate=expert_gate)
    return x + (out * token_gate.reshape(token_gate.shape + (1,)) if token_gate is not None else out)


def wrap_layer(routers: dict[str, Tensor], elastic: ElasticConfig, entry: dict[str, float] | None,
               mode: str = "train", sink: list | None = None):
    """Layer function usable as ``backbone.run_layers(layer_fn=...)`` for a single layer's entry."""
    sink = [] if sink is None else sink
    if not entry:
        return bb.block

    def layer(params, i, x, causal):
        return elastic_block(params, i, x, causal, routers, elastic, entry, mode, sink)

    return layer


@dataclass
class ForwardResult:
    output: Tensor
    decisions: list[RoutingDecision] = field(default_factory=list)


class ElasticModel:
    """A frozen backbone plus routers (and optional LoRA adapters)."""

    def __init__(self, params: bb.TransformerParams, elastic: ElasticConfig,
                 routers: dict[str, Tensor] | None = None):
        elastic.check(params.config)
        params.config.check((elastic.num_experts,))
        if elastic.lora_rank is not None and not params.lora:
            params = bb.attach_lora(params, elastic.lora_targets, elastic.lora_rank, elastic.lora_alpha,
                                    seed=params.config.seed + 1)
        elif not params.frozen:
            params = bb.TransformerParams(params.config, params.tensors, False, params.lora).freeze()
        self.params = params
        self.elastic = elastic
        self.routers = routers if routers is not None else init_routers(params.config, elastic, params.dtype)
        expected = router_shapes(params.config, elastic)
        got = {k: v.shape for k, v in self.routers.items()}
        if got != expected:
            raise ConfigError(f"router tensors {sorted(got)} do not match the elastic config {sorted(expected)}")
        self.entries = layer_entries(params.config, elastic)

    @property
    def config(self):
        return self.params.config

    @property
    def causal(self) -> bool:
        return self.config.mode == "causal_lm"

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        named = self.params.parameters(trainable_only)
        named.update(self.routers)
        return named

    def trainable(self) -> dict[str, Tensor]:
        return self.parameters(trainable_only=True)

    def astype(self, dtype) -> "ElasticModel":
        routers = {k: v.astype(dtype) for k, v in self.routers.items()}
        return ElasticModel(self.params.astype(dtype), self.elastic, routers)

    def layer_fn(self, mode: str, sink: list):
        def layer(params, i, x, causal):
            entry = self.entries.get(i)
            if not entry:
                return bb.block(params, i, x, causal)
            return elastic_block(params, i, x, causal, self.routers, self.elastic, entry, mode, sink)
        return layer

    def forward(self, inputs, mode: str = "train") -> ForwardResult:
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        sink: list[RoutingDecision] = []
        fn = self.layer_fn(mode, sink)
        if self.causal:
            out = bb.forward_lm(self.params, inputs, fn)
        else:
            out = bb.forward_encoder(self.params, inputs, fn)
        return ForwardResult(out, sink)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class Utilization:
    layer: int
    kind: str
    frequency: np.ndarray  # f_m (parameter) or per-position selection rate (input)
    mean_prob: Optional[np.ndarray]
    token_rate: float  # fraction of (token, route) slots selected

    def entropy(self) -> float:
        """Entropy (nats) of the normalized selection frequencies."""
        f = self.frequency / max(self.frequency.sum(), 1e-12)
        nz = f[f > 0]
        return float(-(nz * np.log(nz)).sum())


def selection_stats(decisions: Iterable[RoutingDecision]) -> dict[tuple[int, str], Utilization]:
    """Merge decisions per (layer, kind) in first-seen order."""
    grouped: dict[tuple[int, str], list[RoutingDecision]] = {}
    for d in decisions:
        grouped.setdefault((d.layer, d.kind), []).append(d)
    stats = {}
    for key, decs in grouped.items():
        if key[1] in PARAM_KINDS:
            M = decs[0].selected.shape[-1]
            sel = np.concatenate([d.selected.reshape(-1, M) for d in decs]).astype(np.float64)
            probs = np.concatenate([d.probs.data.reshape(-1, M) for d in decs]).astype(np.float64)
            stats[key] = Utilization(key[0], key[1], sel.mean(axis=0), probs.mean(axis=0), float(sel.mean()))
        else:
            sel = np.concatenate([d.selected.reshape(-1, d.selected.shape[-1]) for d in decs]).astype(np.float64)
            stats[key] = Utilization(key[0], key[1], sel.mean(axis=0), None, float(sel.mean()))
    return stats


def export_trace(decisions: Iterable[RoutingDecision], step: int = 0) -> list[dict]:
    return [d.to_record(step) for d in decisions]

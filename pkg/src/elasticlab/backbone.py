"""Desk-scale pre-norm transformer: causal LM and bidirectional encoder.

Parameters live in a flat ``name -> Tensor`` table.  Weights are stored as
(out, in) so a projection is ``linear(x, W)``.  The per-layer building blocks
(``attention``, ``mlp``) take optional gates so routing and pruning can
reuse them without copying the forward pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .config import ConfigError, ModelConfig
from .numerics import Tensor

LN_EPS = 1e-5
LORA_TARGETS = {"q_proj": "q", "v_proj": "v"}


class DataError(ValueError):
    pass


@dataclass
class LoraAdapter:
    target: str
    layer: int
    rank: int
    alpha: float
    down: Tensor  # A: (r, D)
    up: Tensor  # B: (D, r)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.up.data @ self.down.data)


@dataclass
class TransformerParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    frozen: bool = False
    lora: dict[str, LoraAdapter] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def lora_tensors(self) -> dict[str, Tensor]:
        out = {}
        for key, ad in self.lora.items():
            out[f"{key}.A"] = ad.down
            out[f"{key}.B"] = ad.up
        return out

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        named = {} if (trainable_only and self.frozen) else dict(self.tensors)
        named.update(self.lora_tensors())
        return named

    def freeze(self) -> "TransformerParams":
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "TransformerParams":
        self.frozen = False
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def astype(self, dtype) -> "TransformerParams":
        tensors = {k: v.astype(dtype) for k, v in self.tensors.items()}
        lora = {k: replace(a, down=a.down.astype(dtype), up=a.up.astype(dtype)) for k, a in self.lora.items()}
        return TransformerParams(self.config, tensors, self.frozen, lora)

    def digest(self) -> str:
        """SHA-256 over the backbone tensors (names, shapes, dtypes, bytes)."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name].data
            h.update(f"{name}:{t.shape}:{t.dtype}".encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()


def layer_names(i: int) -> dict[str, str]:
    p = f"layers.{i}."
    return {k: p + k for k in ("ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.o",
                               "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.hidden, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.mode == "causal_lm":
        shapes["tok_emb"] = (cfg.vocab_size, D)
    else:
        shapes["patch_proj"] = (D, cfg.patch_dim)
        shapes["patch_bias"] = (D,)
    shapes["pos_emb"] = (cfg.seq_len, D)
    for i in range(cfg.layers):
        n = layer_names(i)
        shapes[n["ln1.gain"]] = (D,)
        shapes[n["ln1.bias"]] = (D,)
        for proj in ("q", "k", "v", "o"):
            shapes[n[f"attn.{proj}"]] = (D, D)
        shapes[n["ln2.gain"]] = (D,)
        shapes[n["ln2.bias"]] = (D,)
        shapes[n["mlp.w1"]] = (F, D)
        shapes[n["mlp.b1"]] = (F,)
        shapes[n["mlp.w2"]] = (D, F)
        shapes[n["mlp.b2"]] = (D,)
    shapes["ln_f.gain"] = (D,)
    shapes["ln_f.bias"] = (D,)
    return shapes


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Backbone size from architecture hyperparameters alone."""
    D, F, L = cfg.hidden, cfg.mlp_hidden, cfg.layers
    embed = cfg.vocab_size * D if cfg.mode == "causal_lm" else D * cfg.patch_dim + D
    per_layer = 4 * D + 4 * D * D + 2 * F * D + F + D
    return embed + cfg.seq_len * D + L * per_layer + 2 * D


def build_model(cfg: ModelConfig, dtype=np.float32) -> TransformerParams:
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf in ("bias", "b1", "b2") or name == "patch_bias":
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return TransformerParams(cfg, tensors)


def attach_lora(params: TransformerParams, targets=("q_proj", "v_proj"), rank: int = 1,
                alpha: float | None = None, seed: int = 0) -> TransformerParams:
    """Return a view of ``params`` with zero-initialized low-rank adapters.

    Base tensors are shared with the input and frozen; only adapters train.
    """
    if rank < 1:
        raise ConfigError(f"lora rank must be >= 1, got {rank}")
    unknown = [t for t in targets if t not in LORA_TARGETS]
    if unknown:
        raise ConfigError(f"unknown lora target(s) {unknown}; expected a subset of {sorted(LORA_TARGETS)}")
    alpha = 2.0 * rank if alpha is None else alpha
    cfg = params.config
    D = cfg.hidden
    rng = np.random.default_rng(seed)
    lora = dict(params.lora)
    for i in range(cfg.layers):
        for target in targets:
            down = rng.normal(0.0, 1.0 / math.sqrt(D), size=(rank, D)).astype(params.dtype)
            up = np.zeros((D, rank), dtype=params.dtype)
            key = f"lora.{i}.{target}"
            lora[key] = LoraAdapter(target, i, rank, alpha,
                                    Tensor(down, requires_grad=True, name=key + ".A"),
                                    Tensor(up, requires_grad=True, name=key + ".B"))
    out = TransformerParams(cfg, params.tensors, True, lora)
    return out.freeze()


def count_params(model, trainable_only: bool = False) -> int:
    return sum(t.size for t in model.parameters(trainable_only=trainable_only).values())


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------

def norm(params: TransformerParams, x: Tensor, prefix: str) -> Tensor:
    return nx.layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"], LN_EPS)


def _project(params: TransformerParams, i: int, h: Tensor, proj: str) -> Tensor:
    out = nx.linear(h, params[f"layers.{i}.attn.{proj}"])
    for target, short in LORA_TARGETS.items():
        if short == proj and (ad := params.lora.get(f"lora.{i}.{target}")) is not None:
            out = out + nx.linear(nx.linear(h, ad.down), ad.up) * ad.scale
    return out


def attention_bias(T: int, causal: bool, key_mask: Optional[np.ndarray], dtype) -> np.ndarray:
    """Additive score bias (0 or -inf), shape (B|1, 1, T, T).

    ``key_mask`` (B, T) restricts which positions may be attended to; every
    query keeps its own key so no row is empty.
    """
    allowed = np.tril(np.ones((T, T), dtype=bool)) if causal else np.ones((T, T), dtype=bool)
    allowed = allowed[None]
    if key_mask is not None:
        allowed = allowed & (key_mask[:, None, :].astype(bool) | np.eye(T, dtype=bool)[None])
    return np.where(allowed, 0.0, -np.inf).astype(dtype)[:, None]


def attention(params: TransformerParams, i: int, h: Tensor, causal: bool,
              key_mask: Optional[np.ndarray] = None, head_gate: Optional[Tensor] = None) -> Tensor:
    """Multi-head attention on normalized input ``h`` (B, T, D).

    ``head_gate`` (B, T, H) scales each head's output before the output
    projection; a zero entry removes that head for that token.
    """
    cfg = params.config
    B, T, D = h.shape
    H, hd = cfg.heads, cfg.head_dim
    q = _project(params, i, h, "q").reshape(B, T, H, hd).transpose(0, 2, 1, 3)
    k = _project(params, i, h, "k").reshape(B, T, H, hd).transpose(0, 2, 3, 1)
    v = _project(params, i, h, "v").reshape(B, T, H, hd).transpose(0, 2, 1, 3)
    scores = nx.matmul(q, k) * (1.0 / math.sqrt(hd))
    scores = scores + Tensor(attention_bias(T, causal, key_mask, h.dtype))
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v).transpose(0, 2, 1, 3)
    if head_gate is not None:
        ctx = ctx * head_gate.reshape(B, T, H, 1)
    return nx.linear(ctx.reshape(B, T, D), params[f"layers.{i}.attn.o"])


def mlp(params: TransformerParams, i: int, h: Tensor, expert_gate: Optional[Tensor] = None) -> Tensor:
    """Dense MLP; ``expert_gate`` (B, T, M) scales contiguous hidden blocks."""
    p = f"layers.{i}.mlp."
    act = nx.gelu(nx.linear(h, params[p + "w1"], params[p + "b1"]))
    if expert_gate is not None:
        B, T, F = act.shape
        M = expert_gate.shape[-1]
        act = (act.reshape(B, T, M, F // M) * expert_gate.reshape(B, T, M, 1)).reshape(B, T, F)
    return nx.linear(act, params[p + "w2"], params[p + "b2"])


def block(params: TransformerParams, i: int, x: Tensor, causal: bool) -> Tensor:
    x = x + attention(params, i, norm(params, x, f"layers.{i}.ln1"), causal)
    return x + mlp(params, i, norm(params, x, f"layers.{i}.ln2"))


LayerFn = Callable[[TransformerParams, int, Tensor, bool], Tensor]


def embed_tokens(params: TransformerParams, tokens: np.ndarray) -> Tensor:
    cfg = params.config
    if cfg.mode != "causal_lm":
        raise ConfigError("forward_lm requires mode='causal_lm'")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be (B, T), got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds max_seq={cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError(f"token ids must lie in [0, {cfg.vocab_size})")
    T = tokens.shape[1]
    return params["tok_emb"][tokens] + params["pos_emb"][:T]


def embed_patches(params: TransformerParams, patches) -> Tensor:
    cfg = params.config
    if cfg.mode != "encoder":
        raise ConfigError("forward_encoder requires mode='encoder'")
    patches = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=params.dtype))
    if patches.ndim != 3 or patches.shape[1] != cfg.seq_len or patches.shape[2] != cfg.patch_dim:
        raise DataError(f"patches must be (B, {cfg.seq_len}, {cfg.patch_dim}), got {patches.shape}")
    return nx.linear(patches, params["patch_proj"], params["patch_bias"]) + params["pos_emb"]


def run_layers(params: TransformerParams, x: Tensor, causal: bool, layer_fn: Optional[LayerFn]) -> Tensor:
    fn = layer_fn or block
    for i in range(params.config.layers):
        x = fn(params, i, x, causal)
    return norm(params, x, "ln_f")


def forward_lm(params: TransformerParams, tokens: np.ndarray, layer_fn: Optional[LayerFn] = None) -> Tensor:
    """Next-token logits (B, T, V); the output head is the tied embedding."""
    h = run_layers(params, embed_tokens(params, tokens), True, layer_fn)
    return nx.linear(h, params["tok_emb"])


def forward_encoder(params: TransformerParams, patches, layer_fn: Optional[LayerFn] = None) -> Tensor:
    """Normalized token embeddings (B, T, D) with bidirectional attention."""
    return run_layers(params, embed_patches(params, patches), False, layer_fn)


def lm_loss(params: TransformerParams, tokens: np.ndarray, layer_fn: Optional[LayerFn] = None) -> Tensor:
    """Mean next-token cross-entropy over positions 0..T-2."""
    logits = forward_lm(params, tokens[:, :-1], layer_fn)
    return nx.cross_entropy(logits, tokens[:, 1:])

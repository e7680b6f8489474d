"""Configuration records shared by every pipeline stage.

All records reject unknown keys.  Cross-field rules that pydantic cannot
express locally live in ``check()`` methods, which raise ``ConfigError``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    mode: Literal["causal_lm", "encoder"] = "causal_lm"
    vocab_size: int = 128
    patch_dim: int = 12
    image_grid: int = 8
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    max_seq: int = 128
    seed: int = 0
    init_std: float = 0.02

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def seq_len(self) -> int:
        """Sequence length seen by the positional table."""
        return self.image_grid ** 2 if self.mode == "encoder" else self.max_seq

    def check(self, expert_counts: tuple[int, ...] = ()) -> "ModelConfig":
        for name in ("vocab_size", "patch_dim", "image_grid", "layers", "hidden", "heads", "mlp_hidden", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.layers < 2:
            raise ConfigError(f"layers must be >= 2, got {self.layers}")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be >= 2, got {self.max_seq}")
        for m in expert_counts:
            if m < 1 or self.mlp_hidden % m:
                raise ConfigError(f"mlp_hidden={self.mlp_hidden} is not divisible by num_experts={m}")
        return self


LayerSchedule = Union[Literal["all", "even"], list[int]]


class ElasticConfig(_Strict):
    """Which routers exist, where, and at what capacity.

    ``input_*`` hold a token capacity c in (0, 1]; ``param_*`` hold the number
    of heads / experts kept per token.
    """

    input_mha: Optional[float] = None
    input_mlp: Optional[float] = None
    param_mha: Optional[int] = None
    param_mlp: Optional[int] = None
    num_experts: int = 4
    layer_schedule: LayerSchedule = "all"
    input_weight_mode: Literal["sigmoid", "seq_softmax"] = "sigmoid"
    threshold: float = 0.5
    input_router_bias_init: float = 4.0
    lora_rank: Optional[int] = None
    lora_targets: list[str] = Field(default_factory=lambda: ["q_proj", "v_proj"])
    lora_alpha: Optional[float] = None

    @property
    def kinds(self) -> list[str]:
        return [k for k in ("input_mha", "input_mlp", "param_mha", "param_mlp") if getattr(self, k) is not None]

    def routed_layers(self, n_layers: int) -> list[int]:
        if self.layer_schedule == "all":
            return list(range(n_layers))
        if self.layer_schedule == "even":
            return [i for i in range(n_layers) if i % 2 == 0]
        return sorted(self.layer_schedule)

    def check(self, model: ModelConfig) -> "ElasticConfig":
        for kind in ("input_mha", "input_mlp"):
            c = getattr(self, kind)
            if c is not None and not 0.0 < c <= 1.0:
                raise ConfigError(f"{kind} capacity must lie in (0, 1], got {c}")
        if self.param_mha is not None and not 1 <= self.param_mha <= model.heads:
            raise ConfigError(f"param_mha k={self.param_mha} must lie in [1, heads={model.heads}]")
        if self.param_mlp is not None:
            if not 1 <= self.param_mlp <= self.num_experts:
                raise ConfigError(f"param_mlp k={self.param_mlp} must lie in [1, num_experts={self.num_experts}]")
        if self.num_experts < 1 or model.mlp_hidden % self.num_experts:
            raise ConfigError(f"num_experts={self.num_experts} does not divide mlp_hidden={model.mlp_hidden}")
        if isinstance(self.layer_schedule, list):
            sched = self.layer_schedule
            if len(set(sched)) != len(sched) or any(not 0 <= i < model.layers for i in sched):
                raise ConfigError(f"layer_schedule {sched} has duplicates or indices outside [0, {model.layers})")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.lora_rank is not None:
            if self.lora_rank < 1:
                raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
            bad = [t for t in self.lora_targets if t not in ("q_proj", "v_proj")]
            if bad:
                raise ConfigError(f"lora_targets contains unknown projection(s) {bad}")
        return self


class DistillConfig(_Strict):
    direction: Literal["forward", "reverse"] = "forward"
    top_k_vocab: int = 16
    temperature: float = 1.0
    output_loss: Literal["kl", "cosine"] = "kl"
    lambda_load: float = 1.0
    lambda_topk: float = 1.0

    def check(self, vocab_size: int | None = None) -> "DistillConfig":
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k_vocab < 0 or (vocab_size is not None and self.top_k_vocab >= vocab_size):
            raise ConfigError(f"top_k_vocab must lie in [0, vocab_size), got {self.top_k_vocab}")
        return self


class TrainConfig(_Strict):
    lr: float = 1e-4
    warmup_frac: float = 0.03
    schedule: Literal["cosine"] = "cosine"
    epochs: int = 3
    batch_size: int = 32
    seq_len: int = 64
    max_steps: Optional[int] = None
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    mask_ratio: float = 0.25

    def check(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.batch_size < 1 or self.epochs < 1 or self.seq_len < 2:
            raise ConfigError("batch_size and epochs must be >= 1 and seq_len >= 2")
        return self


class PruneSpec(_Strict):
    kind: Literal["mlp_layer", "attention_head", "transformer_layer"] = "attention_head"
    counts: list[int] = Field(default_factory=lambda: [0, 1, 2])
    groups: int = 5
    seed: int = 0

    def check(self, model: ModelConfig) -> "PruneSpec":
        total = model.layers * model.heads if self.kind == "attention_head" else model.layers
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        bad = [c for c in self.counts if not 0 <= c <= total]
        if bad:
            raise ConfigError(f"prune counts {bad} exceed the {total} available {self.kind} components")
        return self


class SweepSpec(_Strict):
    kinds: list[Literal["input_mha", "input_mlp", "param_mha", "param_mlp"]] = Field(
        default_factory=lambda: ["param_mlp"])
    capacities: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    eval_routing: Literal["topk", "threshold"] = "topk"

    @field_validator("capacities")
    @classmethod
    def _sorted(cls, v):
        return sorted(v)


class DataConfig(_Strict):
    corpus: Literal["arith", "code", "mixed"] = "arith"
    teacher_corpus: Literal["arith", "code", "mixed"] = "mixed"
    eval_corpora: list[Literal["arith", "code"]] = Field(default_factory=lambda: ["arith", "code"])
    eval_frac: float = 0.1
    eval_batches: int = 4
    n_images: int = 512
    image_classes: int = 4
    train_classes: Optional[list[int]] = None
    compare_classes: list[list[int]] = Field(default_factory=lambda: [[0], [1]])


class RunConfig(_Strict):
    """One JSON document per run; sections unused by a command may be omitted."""

    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    elastic: ElasticConfig = Field(default_factory=ElasticConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    teacher_train: TrainConfig = Field(default_factory=lambda: TrainConfig(lr=3e-3, epochs=1, max_steps=600))
    prune: PruneSpec = Field(default_factory=PruneSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    data: DataConfig = Field(default_factory=DataConfig)
    teacher: Optional[str] = None
    student: Optional[str] = None

    def check(self) -> "RunConfig":
        experts = (self.elastic.num_experts,)
        self.model.check(experts)
        self.elastic.check(self.model)
        self.distill.check(self.model.vocab_size if self.model.mode == "causal_lm" else None)
        self.train.check()
        self.teacher_train.check()
        self.prune.check(self.model)
        return self

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.model_validate(json.loads(Path(path).read_text()))

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

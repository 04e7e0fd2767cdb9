"""Relevance module: low-rank attention deltas plus parallel adapters.

The module lives in its own ``rem.`` namespace so one trained instance can be
inserted into any backbone of matching shape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from .encoder import DAM_PREFIX, MLM_PREFIX, EncoderBackbone, EncoderConfig
from .numerics import DEFAULT_DTYPE, ParamSet, make_generator

REM_PREFIX = "rem."
PHASES = ("dam_adaptation", "rem_finetuning", "full_finetuning")
LORA_TARGETS = ("q", "k", "v", "o")


class RemError(ValueError):
    pass


@dataclass(frozen=True)
class RemConfig:
    num_layers: int
    hidden_dim: int
    lora_rank: int = 192
    pa_bottleneck: int = 192
    # None means alpha == rank, i.e. a delta scale of 1.
    lora_alpha: float | None = None
    pa_scale: float = 1.0
    lora_targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise RemError("num_layers and hidden_dim must be >= 1")
        if self.lora_rank < 0 or self.pa_bottleneck < 0:
            raise RemError("bottleneck sizes must be non-negative")
        if not (self.lora_rank or self.pa_bottleneck):
            raise RemError("a relevance module needs a low-rank delta, an adapter, or both")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise RemError(f"unknown low-rank targets {sorted(bad)}")

    @classmethod
    def for_encoder(cls, cfg: EncoderConfig, **kw) -> "RemConfig":
        return cls(num_layers=cfg.num_layers, hidden_dim=cfg.hidden_dim, **kw)

    @property
    def lora_scale(self) -> float:
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return alpha / self.lora_rank if self.lora_rank else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lora_targets"] = list(self.lora_targets)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RemConfig":
        return cls(**data)


def rem_shapes(cfg: RemConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.num_layers):
        if cfg.lora_rank:
            for t in cfg.lora_targets:
                shapes[f"{REM_PREFIX}layer.{i}.lora.{t}.a"] = (d, cfg.lora_rank)
                shapes[f"{REM_PREFIX}layer.{i}.lora.{t}.b"] = (cfg.lora_rank, d)
        if cfg.pa_bottleneck:
            shapes[f"{REM_PREFIX}layer.{i}.pa.down"] = (d, cfg.pa_bottleneck)
            shapes[f"{REM_PREFIX}layer.{i}.pa.up"] = (cfg.pa_bottleneck, d)
    return shapes


@dataclass
class RemModule:
    config: RemConfig
    params: ParamSet

    def lora(self, layer: int, target: str) -> tuple[Tensor, Tensor, float] | None:
        if not self.config.lora_rank or target not in self.config.lora_targets:
            return None
        pre = f"{REM_PREFIX}layer.{layer}.lora.{target}."
        return self.params[pre + "a"], self.params[pre + "b"], self.config.lora_scale

    def adapter(self, layer: int) -> tuple[Tensor, Tensor, float] | None:
        if not self.config.pa_bottleneck:
            return None
        pre = f"{REM_PREFIX}layer.{layer}.pa."
        return self.params[pre + "down"], self.params[pre + "up"], self.config.pa_scale

    def clone(self) -> "RemModule":
        return RemModule(self.config, self.params.clone())

    def without_lora(self) -> "RemModule | None":
        if not self.config.pa_bottleneck:
            return None
        cfg = RemConfig(**{**self.config.to_dict(), "lora_rank": 0})
        params = ParamSet()
        for name in rem_shapes(cfg):
            params.add(name, self.params[name], trainable=self.params.is_trainable(name))
        return RemModule(cfg, params)


def init_rem(cfg: RemConfig, seed: int = 0, dtype: torch.dtype = DEFAULT_DTYPE) -> RemModule:
    """Down projections get N(0, 2/d) entries; up projections start at zero.

    Zero up-projections make a fresh module an exact no-op on the backbone.
    """
    gen = make_generator(seed)
    std = math.sqrt(2.0 / cfg.hidden_dim)
    params = ParamSet()
    for name, shape in rem_shapes(cfg).items():
        if name.endswith((".a", ".down")):
            value = torch.randn(shape, generator=gen, dtype=torch.float64).mul_(std).to(dtype)
        else:
            value = torch.zeros(shape, dtype=dtype)
        params.add(name, value)
    return RemModule(cfg, params)


@dataclass
class AssembledModel:
    backbone: EncoderBackbone
    rem: RemModule | None = None

    @property
    def config(self) -> EncoderConfig:
        return self.backbone.config

    def param_sets(self) -> list[ParamSet]:
        return [self.backbone.params] + ([self.rem.params] if self.rem is not None else [])

    def all_params(self) -> ParamSet:
        out = self.backbone.params
        if self.rem is not None:
            out = out.union(self.rem.params)
        return out


def insert_rem(backbone: EncoderBackbone, rem: RemModule | None) -> AssembledModel:
    if rem is not None:
        cfg = backbone.config
        if rem.config.num_layers != cfg.num_layers or rem.config.hidden_dim != cfg.hidden_dim:
            raise RemError(
                f"relevance module shaped for L={rem.config.num_layers}, d={rem.config.hidden_dim} "
                f"cannot attach to a backbone with L={cfg.num_layers}, d={cfg.hidden_dim}"
            )
    return AssembledModel(backbone, rem)


def merge_lora(model: AssembledModel) -> AssembledModel:
    """Fold the low-rank deltas into the attention weights.

    The result carries a new backbone and only the adapter part of the module.
    """
    rem = model.rem
    if rem is None or not rem.config.lora_rank:
        raise RemError("model has no low-rank delta to merge")
    merged = model.backbone.clone()
    for i in range(rem.config.num_layers):
        for t in rem.config.lora_targets:
            a, b, scale = rem.lora(i, t)
            name = f"{DAM_PREFIX}layer.{i}.attn.w{t}"
            with torch.no_grad():
                merged.params[name] = merged.params[name] + scale * (a @ b)
    return AssembledModel(merged, rem.without_lora())


def partition_parameters(model, phase: str) -> tuple[list[str], list[str]]:
    """Split parameter names into (trainable, frozen) for a training phase."""
    if phase not in PHASES:
        raise RemError(f"unknown phase {phase!r}; expected one of {PHASES}")
    if isinstance(model, EncoderBackbone):
        model = AssembledModel(model)
    names = model.all_params().names()
    if phase == "rem_finetuning":
        if model.rem is None:
            raise RemError("rem_finetuning needs an inserted relevance module")
        trainable = [n for n in names if n.startswith(REM_PREFIX)]
    elif phase == "dam_adaptation":
        trainable = [n for n in names if n.startswith(DAM_PREFIX)]
    else:
        trainable = [n for n in names if n.startswith(DAM_PREFIX) and not n.startswith(MLM_PREFIX)]
    chosen = set(trainable)
    return trainable, [n for n in names if n not in chosen]


def apply_partition(model, phase: str) -> list[str]:
    """Set trainable flags in place for ``phase``; returns the trainable names."""
    if isinstance(model, EncoderBackbone):
        model = AssembledModel(model)
    trainable, _ = partition_parameters(model, phase)
    chosen = set(trainable)
    for ps in model.param_sets():
        for name in ps:
            ps.set_flag(name, name in chosen)
    return trainable

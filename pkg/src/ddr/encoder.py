"""Transformer backbone (the domain-modelling half of the model), pooling and scoring."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .numerics import DEFAULT_DTYPE, ParamSet, make_generator

PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID = range(5)
SPECIAL_IDS = (PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID)
NUM_SPECIALS = len(SPECIAL_IDS)

DAM_PREFIX = "dam."
MLM_PREFIX = "dam.mlm."

SIMILARITY_ALIASES = {"dot": "inner_product", "inner_product": "inner_product", "cosine": "cosine"}


class EncoderError(ValueError):
    pass


def normalize_similarity(kind: str) -> str:
    try:
        return SIMILARITY_ALIASES[kind]
    except KeyError:
        raise EncoderError(f"unknown similarity kind {kind!r}") from None


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 2000
    max_len: int = 64
    similarity_kind: str = "inner_product"
    # Whether [CLS]/[SEP] take part in mean pooling.
    pool_specials: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise EncoderError("hidden_dim must be divisible by num_heads")
        if self.vocab_size <= NUM_SPECIALS:
            raise EncoderError("vocab_size must exceed the number of reserved ids")
        object.__setattr__(self, "similarity_kind", normalize_similarity(self.similarity_kind))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[int, ...] = field(default=())

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        mask = tuple(int(m) for m in self.mask) if self.mask else (1,) * len(ids)
        if len(mask) != len(ids):
            raise EncoderError("ids and mask differ in length")
        if not any(mask):
            raise EncoderError("a sequence needs at least one non-padding token")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return len(self.ids)

    def padded(self, length: int) -> "TokenSequence":
        extra = length - len(self.ids)
        if extra < 0:
            raise EncoderError("cannot pad to a shorter length")
        return TokenSequence(self.ids + (PAD_ID,) * extra, self.mask + (0,) * extra)


def collate(seqs: Sequence[TokenSequence], max_len: int | None = None) -> tuple[Tensor, Tensor]:
    """Right-pad a list of sequences into ``(ids, mask)`` tensors."""
    if not seqs:
        raise EncoderError("cannot collate an empty batch")
    width = max(len(s) for s in seqs)
    if max_len is not None and width > max_len:
        raise EncoderError(f"sequence of length {width} exceeds max_len {max_len}")
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.long)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = torch.tensor(seq.ids, dtype=torch.long)
        mask[row, : len(seq)] = torch.tensor(seq.mask, dtype=torch.long)
    return ids, mask


class RemHooks(Protocol):
    """What the forward pass needs from an inserted relevance module."""

    def lora(self, layer: int, target: str) -> tuple[Tensor, Tensor, float] | None: ...

    def adapter(self, layer: int) -> tuple[Tensor, Tensor, float] | None: ...


@dataclass
class EncoderBackbone:
    config: EncoderConfig
    params: ParamSet

    def clone(self) -> "EncoderBackbone":
        return EncoderBackbone(self.config, self.params.clone())

    def layer_param(self, layer: int, name: str) -> Tensor:
        return self.params[f"{DAM_PREFIX}layer.{layer}.{name}"]


def backbone_shapes(cfg: EncoderConfig, include_mlm_head: bool = True) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (v, d),
        "embed.pos": (cfg.max_len, d),
        "embed.ln.g": (d,),
        "embed.ln.b": (d,),
    }
    for i in range(cfg.num_layers):
        pre = f"layer.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[f"{pre}attn.w{proj}"] = (d, d)
            shapes[f"{pre}attn.b{proj}"] = (d,)
        shapes[f"{pre}attn_ln.g"] = (d,)
        shapes[f"{pre}attn_ln.b"] = (d,)
        shapes[f"{pre}ffn.w1"] = (d, f)
        shapes[f"{pre}ffn.b1"] = (f,)
        shapes[f"{pre}ffn.w2"] = (f, d)
        shapes[f"{pre}ffn.b2"] = (d,)
        shapes[f"{pre}ffn_ln.g"] = (d,)
        shapes[f"{pre}ffn_ln.b"] = (d,)
    if include_mlm_head:
        shapes["mlm.dense.w"] = (d, d)
        shapes["mlm.dense.b"] = (d,)
        shapes["mlm.ln.g"] = (d,)
        shapes["mlm.ln.b"] = (d,)
        shapes["mlm.bias"] = (v,)
    return {DAM_PREFIX + k: s for k, s in shapes.items()}


def init_backbone(cfg: EncoderConfig, seed: int = 0, dtype: torch.dtype = DEFAULT_DTYPE) -> EncoderBackbone:
    """BERT-style initialisation: N(0, init_std) matrices, zero biases, unit LN scales."""
    gen = make_generator(seed)
    params = ParamSet()
    for name, shape in backbone_shapes(cfg).items():
        if name.endswith(".g"):
            value = torch.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            value = torch.zeros(shape, dtype=dtype)
        else:
            value = torch.randn(shape, generator=gen, dtype=torch.float64).mul_(cfg.init_std).to(dtype)
        params.add(name, value)
    return EncoderBackbone(cfg, params)


def split_model(model) -> tuple[EncoderBackbone, RemHooks | None]:
    """Accept a bare backbone or anything with ``backbone``/``rem`` attributes."""
    if isinstance(model, EncoderBackbone):
        return model, None
    return model.backbone, model.rem


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), g, b, eps)


def _project(x: Tensor, w: Tensor, b: Tensor, delta: tuple[Tensor, Tensor, float] | None) -> Tensor:
    out = x @ w + b
    if delta is not None:
        a, bb, scale = delta
        out = out + scale * ((x @ a) @ bb)
    return out


def hidden_states(model, ids: Tensor, mask: Tensor) -> Tensor:
    """Final-layer hidden states, shape ``(batch, length, hidden_dim)``."""
    backbone, rem = split_model(model)
    cfg = backbone.config
    P = backbone.params
    batch, length = ids.shape
    if length > cfg.max_len:
        raise EncoderError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    d, h = cfg.hidden_dim, cfg.num_heads
    dh = d // h
    x = P["dam.embed.tok"][ids] + P["dam.embed.pos"][:length]
    x = _layer_norm(x, P["dam.embed.ln.g"], P["dam.embed.ln.b"], cfg.ln_eps)
    key_block = (mask == 0)[:, None, None, :]
    for i in range(cfg.num_layers):
        lp = lambda name: P[f"dam.layer.{i}.{name}"]  # noqa: E731
        q = _project(x, lp("attn.wq"), lp("attn.bq"), rem.lora(i, "q") if rem else None)
        k = _project(x, lp("attn.wk"), lp("attn.bk"), rem.lora(i, "k") if rem else None)
        v = _project(x, lp("attn.wv"), lp("attn.bv"), rem.lora(i, "v") if rem else None)
        q = q.view(batch, length, h, dh).transpose(1, 2)
        k = k.view(batch, length, h, dh).transpose(1, 2)
        v = v.view(batch, length, h, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(key_block, float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        ctx = ctx.transpose(1, 2).reshape(batch, length, d)
        attn_out = _project(ctx, lp("attn.wo"), lp("attn.bo"), rem.lora(i, "o") if rem else None)
        x = _layer_norm(x + attn_out, lp("attn_ln.g"), lp("attn_ln.b"), cfg.ln_eps)
        ffn_out = F.gelu(x @ lp("ffn.w1") + lp("ffn.b1")) @ lp("ffn.w2") + lp("ffn.b2")
        adapter = rem.adapter(i) if rem else None
        if adapter is not None:
            down, up, scale = adapter
            ffn_out = ffn_out + scale * (torch.relu(x @ down) @ up)
        x = _layer_norm(x + ffn_out, lp("ffn_ln.g"), lp("ffn_ln.b"), cfg.ln_eps)
    return x


def pooling_mask(cfg: EncoderConfig, ids: Tensor, mask: Tensor) -> Tensor:
    keep = mask.clone()
    if not cfg.pool_specials:
        keep = keep * (ids != CLS_ID) * (ids != SEP_ID)
    return keep


def embed(model, ids: Tensor, mask: Tensor) -> Tensor:
    """Mean-pooled sequence embeddings, shape ``(batch, hidden_dim)``; differentiable."""
    backbone, _ = split_model(model)
    hidden = hidden_states(model, ids, mask)
    keep = pooling_mask(backbone.config, ids, mask).to(hidden.dtype)
    counts = keep.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise EncoderError("a sequence has no poolable tokens")
    return (hidden * keep.unsqueeze(-1)).sum(dim=1) / counts


def encode(model, seq: TokenSequence) -> Tensor:
    ids, mask = collate([seq], split_model(model)[0].config.max_len)
    with torch.no_grad():
        return embed(model, ids, mask)[0]


def encode_many(model, seqs: Sequence[TokenSequence], batch_size: int = 64) -> Tensor:
    """Encode sequences in fixed-size chunks; rows follow input order."""
    max_len = split_model(model)[0].config.max_len
    chunks = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            ids, mask = collate(seqs[start : start + batch_size], max_len)
            chunks.append(embed(model, ids, mask))
    if not chunks:
        raise EncoderError("nothing to encode")
    return torch.cat(chunks)


def mlm_logits(backbone: EncoderBackbone, hidden: Tensor) -> Tensor:
    """Vocabulary logits through the head tied to the token embedding matrix."""
    P = backbone.params
    t = F.gelu(hidden @ P["dam.mlm.dense.w"] + P["dam.mlm.dense.b"])
    t = _layer_norm(t, P["dam.mlm.ln.g"], P["dam.mlm.ln.b"], backbone.config.ln_eps)
    return t @ P["dam.embed.tok"].T + P["dam.mlm.bias"]


def score_matrix(queries: Tensor, docs: Tensor, kind: str, scale: float = 1.0) -> Tensor:
    """Pairwise similarities, ``(n_queries, n_docs)``."""
    kind = normalize_similarity(kind)
    if queries.shape[-1] != docs.shape[-1]:
        raise EncoderError("query and document dimensions differ")
    if kind == "cosine":
        qn = queries.norm(dim=-1, keepdim=True)
        dn = docs.norm(dim=-1, keepdim=True)
        if (qn == 0).any() or (dn == 0).any():
            raise EncoderError("cosine similarity is undefined for a zero vector")
        queries, docs = queries / qn, docs / dn
    return scale * (queries @ docs.T)


def similarity(q, doc, kind: str = "inner_product") -> float:
    q = torch.as_tensor(q, dtype=torch.float64)
    doc = torch.as_tensor(doc, dtype=torch.float64)
    if q.shape != doc.shape:
        raise EncoderError("similarity needs vectors of equal dimension")
    return score_matrix(q[None], doc[None], kind)[0, 0].item()


@dataclass(frozen=True)
class ParameterCounts:
    backbone_total: int
    rem_trainable: int
    inference_extra: int

    @property
    def trainable_fraction(self) -> float:
        return self.rem_trainable / self.backbone_total

    @property
    def inference_overhead_fraction(self) -> float:
        return self.inference_extra / self.backbone_total


def count_parameters(cfg: EncoderConfig, rem_cfg=None) -> ParameterCounts:
    """Backbone size (embeddings included, MLM head excluded) against REM size.

    Low-rank deltas fold into the attention matrices after merging, so only
    parallel adapters count toward inference overhead.
    """
    backbone_total = sum(math.prod(s) for s in backbone_shapes(cfg, include_mlm_head=False).values())
    lora = adapter = 0
    if rem_cfg is not None:
        d, layers = cfg.hidden_dim, cfg.num_layers
        if rem_cfg.lora_rank:
            lora = layers * len(rem_cfg.lora_targets) * 2 * d * rem_cfg.lora_rank
        if rem_cfg.pa_bottleneck:
            adapter = layers * 2 * d * rem_cfg.pa_bottleneck
    return ParameterCounts(backbone_total, lora + adapter, adapter)

"""Optimisation procedures: masked-LM adaptation of the backbone, supervised
training of the relevance module (or of a whole model for baselines), and the
losses they use."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from .encoder import (
    DAM_PREFIX,
    MASK_ID,
    MLM_PREFIX,
    NUM_SPECIALS,
    SPECIAL_IDS,
    EncoderBackbone,
    TokenSequence,
    collate,
    embed,
    hidden_states,
    mlm_logits,
    normalize_similarity,
    score_matrix,
    split_model,
)
from .numerics import AdamWState, ParamSet, adamw_step, cross_entropy_rows, make_generator
from .rem import AssembledModel, RemConfig, RemModule, apply_partition, init_rem, insert_rem

IGNORE = -100

# Learning rates used by the original large-scale recipe.
PAPER_LR_SOURCE_DAM = 5e-5
PAPER_LR_TARGET_DAM = 2e-5
PAPER_LR_REM = 2e-5
PAPER_LR_DR = 1e-5

COSINE_SCALE = 20.0


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskingPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.80
    random_frac: float = 0.10
    keep_frac: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.select_prob <= 1.0:
            raise TrainingError("select_prob must lie in [0, 1]")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise TrainingError("mask/random/keep fractions must be non-negative and sum to 1")


@dataclass
class TrainingConfig:
    phase: str = "rem_finetuning"
    lr: float = PAPER_LR_REM
    steps: int = 1000
    queries_per_batch: int = 128
    hard_negatives_per_query: int = 3
    mlm_batch_size: int = 64
    seed: int = 0
    loss_kind: str = "contrastive"
    weight_decay: float = 0.01
    cosine_scale: float = COSINE_SCALE
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    # 0 disables intermediate evaluation callbacks.
    eval_every: int = 0
    # During masked-LM training, only embedding rows (and output biases) of
    # tokens present in the batch receive gradient.
    lazy_embeddings: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")
        if self.steps < 0:
            raise TrainingError("steps must be non-negative")
        if self.queries_per_batch < 1 or self.mlm_batch_size < 1 or self.hard_negatives_per_query < 0:
            raise TrainingError("batch sizes must be >= 1")
        if self.loss_kind not in ("contrastive", "margin_mse"):
            raise TrainingError(f"unknown loss kind {self.loss_kind!r}")


# --------------------------------------------------------------------------- masking


def mask_tokens(
    ids: Tensor,
    attention: Tensor,
    policy: MaskingPolicy,
    vocab_size: int,
    gen: torch.Generator,
) -> tuple[Tensor, Tensor]:
    """Masked copy of ``ids`` and labels holding originals at selected positions (else IGNORE)."""
    eligible = attention.bool()
    for special in SPECIAL_IDS:
        eligible &= ids != special
    selected = eligible & (torch.rand(ids.shape, generator=gen) < policy.select_prob)
    action = torch.rand(ids.shape, generator=gen)
    random_ids = torch.randint(NUM_SPECIALS, vocab_size, ids.shape, generator=gen)
    to_mask = selected & (action < policy.mask_frac)
    to_random = selected & (action >= policy.mask_frac) & (action < policy.mask_frac + policy.random_frac)
    masked = ids.clone()
    masked[to_mask] = MASK_ID
    masked[to_random] = random_ids[to_random]
    labels = torch.full_like(ids, IGNORE)
    labels[selected] = ids[selected]
    return masked, labels


def apply_masking(
    seq: TokenSequence,
    policy: MaskingPolicy,
    gen: torch.Generator,
    vocab_size: int,
) -> tuple[TokenSequence, dict[int, int]]:
    ids = torch.tensor([seq.ids])
    attention = torch.tensor([seq.mask])
    masked, labels = mask_tokens(ids, attention, policy, vocab_size, gen)
    picked = {int(i): int(labels[0, i]) for i in torch.nonzero(labels[0] != IGNORE).flatten()}
    return TokenSequence(tuple(masked[0].tolist()), seq.mask), picked


# --------------------------------------------------------------------------- losses


def masked_token_loss(logits: Tensor, targets: Tensor) -> Tensor:
    if logits.shape[0] == 0:
        raise TrainingError("no labelled positions; resample the mask")
    return cross_entropy_rows(logits, targets)


def mlm_loss(model, masked_ids: Tensor, attention: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy of the tied MLM head over labelled positions."""
    backbone, _ = split_model(model)
    where = labels != IGNORE
    if not where.any():
        raise TrainingError("no labelled positions; resample the mask")
    hidden = hidden_states(model, masked_ids, attention)
    return masked_token_loss(mlm_logits(backbone, hidden[where]), labels[where])


def contrastive_loss(
    q_embs: Tensor,
    pos_embs: Tensor,
    neg_embs: Tensor | None,
    similarity_kind: str = "inner_product",
    cosine_scale: float = COSINE_SCALE,
) -> Tensor:
    """In-batch softmax loss; every positive and every hard negative is a candidate for every query."""
    if q_embs.shape[0] == 0:
        raise TrainingError("empty batch")
    if pos_embs.shape[0] != q_embs.shape[0]:
        raise TrainingError("queries and positives are not aligned")
    kind = normalize_similarity(similarity_kind)
    pool = pos_embs if neg_embs is None or neg_embs.shape[0] == 0 else torch.cat([pos_embs, neg_embs])
    scale = cosine_scale if kind == "cosine" else 1.0
    scores = score_matrix(q_embs, pool, kind, scale)
    return cross_entropy_rows(scores, torch.arange(q_embs.shape[0]))


def margin_mse_loss(student_pos: Tensor, student_neg: Tensor, teacher_pos, teacher_neg) -> Tensor:
    """Mean squared gap between student and teacher positive-minus-negative margins."""
    if teacher_pos is None or teacher_neg is None:
        raise TrainingError("margin-MSE needs teacher scores for every pair")
    teacher_pos = torch.as_tensor(teacher_pos, dtype=student_pos.dtype)
    teacher_neg = torch.as_tensor(teacher_neg, dtype=student_pos.dtype)
    if student_pos.shape != teacher_pos.shape or student_neg.shape != teacher_neg.shape:
        raise TrainingError("teacher scores are not aligned with student scores")
    if torch.isnan(teacher_pos).any() or torch.isnan(teacher_neg).any():
        raise TrainingError("missing teacher score")
    return (((student_pos - student_neg) - (teacher_pos - teacher_neg)) ** 2).mean()


# --------------------------------------------------------------------------- supervised data


@dataclass(frozen=True)
class TrainingExample:
    query: TokenSequence
    positive: TokenSequence
    negatives: tuple[TokenSequence, ...] = ()
    teacher_pos: float | None = None
    teacher_neg: tuple[float, ...] = ()


@dataclass
class TripleBatch:
    queries: list[TokenSequence]
    positives: list[TokenSequence]
    negatives: list[TokenSequence]
    teacher_pos: list[float] | None = None
    teacher_neg: list[list[float]] | None = None

    def __post_init__(self):
        if len(self.queries) != len(self.positives):
            raise TrainingError("queries and positives differ in length")
        if (self.teacher_pos is None) != (self.teacher_neg is None):
            raise TrainingError("teacher scores must cover positives and negatives together")

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample], negatives_per_query: int, with_teacher: bool):
        negatives, t_pos, t_neg = [], [], []
        for ex in examples:
            if len(ex.negatives) < negatives_per_query:
                raise TrainingError("example has fewer hard negatives than the batch layout needs")
            negatives.extend(ex.negatives[:negatives_per_query])
            if with_teacher:
                if ex.teacher_pos is None or len(ex.teacher_neg) < negatives_per_query:
                    raise TrainingError("margin-MSE training needs teacher scores for every pair")
                t_pos.append(ex.teacher_pos)
                t_neg.append(list(ex.teacher_neg[:negatives_per_query]))
        return cls(
            [ex.query for ex in examples],
            [ex.positive for ex in examples],
            negatives,
            t_pos if with_teacher else None,
            t_neg if with_teacher else None,
        )


def batch_loss(model, batch: TripleBatch, cfg: TrainingConfig) -> Tensor:
    backbone, _ = split_model(model)
    kind = backbone.config.similarity_kind
    max_len = backbone.config.max_len
    q = embed(model, *collate(batch.queries, max_len))
    docs = embed(model, *collate(batch.positives + batch.negatives, max_len))
    n = len(batch.queries)
    pos, neg = docs[:n], docs[n:]
    if cfg.loss_kind == "contrastive":
        return contrastive_loss(q, pos, neg, kind, cfg.cosine_scale)
    if batch.teacher_pos is None:
        raise TrainingError("margin-MSE training needs teacher scores")
    k = neg.shape[0] // n
    if k == 0:
        raise TrainingError("margin-MSE training needs at least one negative per query")
    if kind == "cosine":
        q = q / q.norm(dim=-1, keepdim=True)
        pos = pos / pos.norm(dim=-1, keepdim=True)
        neg = neg / neg.norm(dim=-1, keepdim=True)
    s_pos = (q * pos).sum(-1, keepdim=True).expand(n, k)
    s_neg = (q.unsqueeze(1) * neg.view(n, k, -1)).sum(-1)
    t_pos = torch.tensor(batch.teacher_pos, dtype=q.dtype).unsqueeze(1).expand(n, k)
    return margin_mse_loss(s_pos, s_neg, t_pos, torch.tensor(batch.teacher_neg, dtype=q.dtype))


# --------------------------------------------------------------------------- generic loop

StepCallback = Callable[[int, object], None]


def optimize(
    model: AssembledModel,
    phase: str,
    loss_at_step: Callable[[int], Tensor],
    steps: int,
    lr: float,
    weight_decay: float = 0.01,
    eval_every: int = 0,
    on_eval: StepCallback | None = None,
    grad_filter: Callable[[dict[str, Tensor]], None] | None = None,
) -> list[tuple[int, float]]:
    """AdamW over the parameters ``phase`` marks trainable.

    Returns ``(step, loss)`` with the loss measured before that step's update.
    ``on_eval(step, model)`` fires at step 0, every ``eval_every`` steps, and
    after the final update.
    """
    apply_partition(model, phase)
    params: ParamSet = model.all_params()
    names = params.trainable_names()
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    curve: list[tuple[int, float]] = []
    leaves = [params[n] for n in names]
    for leaf in leaves:
        leaf.requires_grad_(True)
    try:
        for step in range(steps):
            if on_eval is not None and eval_every and step % eval_every == 0:
                on_eval(step, model)
            loss = loss_at_step(step)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = torch.autograd.grad(loss, leaves, allow_unused=True)
            grad_map = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, leaves, grads)}
            if grad_filter is not None:
                grad_filter(grad_map)
            adamw_step(params, grad_map, state)
            curve.append((step, float(loss.detach())))
    finally:
        for leaf in leaves:
            leaf.requires_grad_(False)
    if on_eval is not None and (eval_every or steps == 0):
        on_eval(steps, model)
    return curve


# --------------------------------------------------------------------------- procedures


def adapt_dam(
    backbone: EncoderBackbone,
    corpus: Sequence[TokenSequence],
    cfg: TrainingConfig,
    rem: RemModule | None = None,
    on_eval: StepCallback | None = None,
) -> tuple[EncoderBackbone, list[tuple[int, float]]]:
    """Masked-LM training of a copy of ``backbone`` on an unlabelled corpus.

    ``rem``, when given, stays inserted but frozen throughout. The callback
    receives the assembled model, so it can score retrieval mid-training.
    """
    if not corpus:
        raise TrainingError("cannot adapt on an empty corpus")
    dam = backbone.clone()
    model = insert_rem(dam, rem)
    gen = make_generator(cfg.seed)
    vocab = dam.config.vocab_size
    max_len = dam.config.max_len

    present = torch.zeros(vocab, dtype=torch.bool)

    def loss_at_step(step: int) -> Tensor:
        while True:
            idx = torch.randint(len(corpus), (cfg.mlm_batch_size,), generator=gen).tolist()
            ids, attention = collate([corpus[i] for i in idx], max_len)
            masked, labels = mask_tokens(ids, attention, cfg.masking, vocab, gen)
            if (labels != IGNORE).any():
                present.zero_()
                present[ids] = True
                present[masked] = True
                return mlm_loss(model, masked, attention, labels)

    def drop_absent_rows(grads: dict[str, Tensor]) -> None:
        # Without this, Adam turns the tiny softmax-negative gradient of every
        # absent token into a full-size step in a shared direction.
        for name in (f"{DAM_PREFIX}embed.tok", f"{MLM_PREFIX}bias"):
            if name in grads:
                grads[name][~present] = 0.0

    curve = optimize(
        model, "dam_adaptation", loss_at_step, cfg.steps, cfg.lr, cfg.weight_decay, cfg.eval_every, on_eval,
        grad_filter=drop_absent_rows if cfg.lazy_embeddings else None,
    )
    return dam, curve


def train_supervised(
    model: AssembledModel,
    examples: Sequence[TrainingExample],
    cfg: TrainingConfig,
    phase: str,
    on_eval: StepCallback | None = None,
) -> list[tuple[int, float]]:
    """Contrastive or margin-MSE training in place; ``phase`` picks what moves."""
    if not examples:
        raise TrainingError("no labelled examples")
    gen = make_generator(cfg.seed)
    per_batch = min(cfg.queries_per_batch, len(examples))
    with_teacher = cfg.loss_kind == "margin_mse"
    order: list[int] = []

    def loss_at_step(step: int) -> Tensor:
        nonlocal order
        if len(order) < per_batch:
            order = order + torch.randperm(len(examples), generator=gen).tolist()
        chosen, order = order[:per_batch], order[per_batch:]
        batch = TripleBatch.from_examples(
            [examples[i] for i in chosen], cfg.hard_negatives_per_query, with_teacher
        )
        return batch_loss(model, batch, cfg)

    return optimize(model, phase, loss_at_step, cfg.steps, cfg.lr, cfg.weight_decay, cfg.eval_every, on_eval)


def sequential_init(source_dam: EncoderBackbone | None, base: EncoderBackbone, mode: str = "sequential") -> EncoderBackbone:
    """Initial weights for a target-domain backbone.

    ``sequential`` starts from the source backbone the relevance module was
    trained against; ``base`` starts from the untuned base backbone.
    """
    if mode == "sequential":
        if source_dam is None:
            raise TrainingError("sequential initialisation needs a source backbone")
        return source_dam.clone()
    if mode == "base":
        return base.clone()
    raise TrainingError(f"unknown initialisation mode {mode!r}")


@dataclass
class FinetuneResult:
    source_dam: EncoderBackbone
    rem: RemModule
    dam_curve: list[tuple[int, float]]
    rem_curve: list[tuple[int, float]]


def disentangled_finetune(
    base: EncoderBackbone,
    source_corpus: Sequence[TokenSequence],
    examples: Sequence[TrainingExample],
    dam_cfg: TrainingConfig,
    rem_cfg: TrainingConfig,
    rem_shape: RemConfig,
    df_mode: str = "on",
) -> FinetuneResult:
    """Two-step recipe: fit a backbone to the source corpus, then train a fresh
    relevance module against that frozen backbone.

    With ``df_mode="off"`` the first step is skipped and the base backbone
    plays the source role.
    """
    if df_mode == "on":
        source_dam, dam_curve = adapt_dam(base, source_corpus, dam_cfg)
    elif df_mode == "off":
        source_dam, dam_curve = base.clone(), []
    else:
        raise TrainingError(f"df_mode must be 'on' or 'off', not {df_mode!r}")
    rem = init_rem(rem_shape, seed=rem_cfg.seed)
    model = insert_rem(source_dam, rem)
    rem_curve = train_supervised(model, examples, rem_cfg, "rem_finetuning")
    return FinetuneResult(source_dam, rem, dam_curve, rem_curve)

"""Tensor plumbing shared by every model component.

Autodiff is delegated to torch; this module owns the pieces the rest of the
package relies on for correctness: the named parameter container with
trainable flags, a finite-difference gradient checker, an AdamW step that
honours freeze flags, and a stabilised softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import torch
from torch import Tensor

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class NumericsError(ValueError):
    pass


class GradCheckError(NumericsError):
    pass


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def assert_finite(t: Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericsError(f"non-finite values in {what}")


class ParamSet:
    """Ordered ``name -> tensor`` mapping where each entry carries a trainable flag.

    Names are dotted paths such as ``dam.layer.0.attn.wq``.
    """

    def __init__(self, entries: Mapping[str, Tensor] | None = None, trainable: bool = True):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        for name, value in (entries or {}).items():
            self.add(name, value, trainable=trainable)

    def add(self, name: str, value: Tensor, trainable: bool = True) -> None:
        if name in self._tensors:
            raise NumericsError(f"duplicate parameter name {name!r}")
        if value.numel() == 0 or any(s < 1 for s in value.shape):
            raise NumericsError(f"parameter {name!r} has an empty shape {tuple(value.shape)}")
        assert_finite(value, name)
        self._tensors[name] = value
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        if value.shape != self._tensors[name].shape:
            raise NumericsError(
                f"shape mismatch for {name!r}: {tuple(value.shape)} vs {tuple(self._tensors[name].shape)}"
            )
        assert_finite(value, name)
        self._tensors[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if not t]

    def set_flag(self, name: str, flag: bool) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        self._trainable[name] = bool(flag)

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        for name in self._tensors:
            if name.startswith(prefix):
                self._trainable[name] = bool(flag)

    def numel(self, trainable_only: bool = False) -> int:
        return sum(
            t.numel() for n, t in self._tensors.items() if self._trainable[n] or not trainable_only
        )

    def clone(self, dtype: torch.dtype | None = None) -> "ParamSet":
        out = ParamSet()
        for name, value in self._tensors.items():
            copy = value.detach().clone()
            if dtype is not None:
                copy = copy.to(dtype)
            out.add(name, copy, trainable=self._trainable[name])
        return out

    def union(self, other: "ParamSet") -> "ParamSet":
        """Shallow union; tensors are shared, not copied."""
        clash = set(self._tensors) & set(other._tensors)
        if clash:
            raise NumericsError(f"parameter namespaces collide: {sorted(clash)[:3]}")
        out = ParamSet()
        for src in (self, other):
            for name, value in src._tensors.items():
                out.add(name, value, trainable=src._trainable[name])
        return out

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(
            self[n].dtype == other[n].dtype and torch.equal(self[n], other[n]) for n in self._tensors
        )


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)


def adamw_step(params: ParamSet, grads: Mapping[str, Tensor], state: AdamWState) -> tuple[ParamSet, AdamWState]:
    """One decoupled-weight-decay Adam update over the trainable entries of ``params``.

    Updates happen in place; frozen entries are never read for writing.
    """
    names = params.trainable_names()
    for name in names:
        if name not in grads:
            raise NumericsError(f"missing gradient for trainable parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise NumericsError(
                f"gradient shape {tuple(grads[name].shape)} does not match parameter "
                f"{name!r} of shape {tuple(params[name].shape)}"
            )
    state.step += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name in names:
            p = params[name]
            g = grads[name].to(p.dtype)
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            if m.shape != p.shape:
                raise NumericsError(f"optimizer moment shape mismatch for {name!r}")
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bias2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bias1, denom, value=-state.lr)
            assert_finite(p, name)
    return params, state


def _logsumexp(logits: Tensor) -> Tensor:
    peak = logits.max(dim=-1, keepdim=True).values.detach()
    return (logits - peak).exp().sum(dim=-1).log() + peak.squeeze(-1)


def softmax_cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """``-log softmax(logits)[target_index]`` for a 1-D logit vector."""
    logits = torch.as_tensor(logits)
    if logits.dim() != 1 or logits.numel() == 0:
        raise NumericsError("logits must be a non-empty 1-D tensor")
    if not 0 <= int(target_index) < logits.numel():
        raise NumericsError(f"target index {target_index} out of range for {logits.numel()} classes")
    return _logsumexp(logits) - logits[int(target_index)]


def cross_entropy_rows(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean softmax cross-entropy over the rows of a 2-D logit matrix."""
    if logits.dim() != 2 or logits.shape[0] == 0:
        raise NumericsError("expected a non-empty (rows, classes) logit matrix")
    picked = logits.gather(1, targets.long().unsqueeze(1)).squeeze(1)
    return (_logsumexp(logits) - picked).mean()


def grad_check(
    fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-6,
) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps a ParamSet to a scalar tensor. Every trainable scalar is
    perturbed; the check runs on a float64 copy of ``params``.
    """
    if eps <= 0:
        raise GradCheckError("eps must be positive")
    work = params.clone(dtype=CHECK_DTYPE)
    names = work.trainable_names()
    leaves = [work[n].requires_grad_(True) for n in names]
    loss = fn(work)
    if not torch.isfinite(loss):
        raise GradCheckError("loss is non-finite at the unperturbed point")
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    for leaf in leaves:
        leaf.requires_grad_(False)

    worst = 0.0
    with torch.no_grad():
        for name, leaf, grad in zip(names, leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn(work)
                flat[i] = orig - eps
                down = fn(work)
                flat[i] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (up - down).item() / (2 * eps)
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst

"""Adaptive weighting of the two scores and the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .matching import MemoryBank, decorrelation_loss

FR = "FR"
NR = "NR"


class FusionError(ValueError):
    pass


@dataclass
class AwnParams:
    """2D -> hidden -> 1 MLP with ReLU and a sigmoid output."""

    w1: nx.Tensor
    b1: nx.Tensor
    w2: nx.Tensor
    b2: nx.Tensor

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> list[tuple[str, nx.Tensor]]:
        return [("awn.w1", self.w1), ("awn.b1", self.b1), ("awn.w2", self.w2), ("awn.b2", self.b2)]


def init_awn(feature_dim: int = 64, hidden: int = 64, seed: int = 0, dtype=np.float32) -> AwnParams:
    """Hidden layer gets Kaiming-uniform weights; the output layer starts at zero (alpha = 0.5)."""
    rng = np.random.default_rng(seed)
    fan_in = 2 * feature_dim
    bound = math.sqrt(6.0 / fan_in)
    w1 = rng.uniform(-bound, bound, size=(fan_in, hidden)).astype(dtype)
    return AwnParams(
        nx.Tensor(w1, requires_grad=True),
        nx.Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        nx.Tensor(np.zeros((hidden, 1), dtype=dtype), requires_grad=True),
        nx.Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def adaptive_weight(f_ref, f_dist, awn: AwnParams) -> nx.Tensor:
    """alpha = AWN(concat(F_dist, F_ref)); inputs are detached so only the AWN learns from it."""
    f_ref, f_dist = nx.detach(f_ref), nx.detach(f_dist)
    if f_ref.shape != f_dist.shape:
        raise nx.ShapeError("adaptive_weight", f_ref.shape, f_dist.shape)
    x = nx.concat([f_dist, f_ref], axis=-1)
    if x.shape[-1] != awn.input_dim:
        raise nx.ShapeError("adaptive_weight", x.shape, awn.w1.shape)
    hidden = nx.relu(nx.matmul(x, awn.w1) + awn.b1)
    logit = nx.matmul(hidden, awn.w2) + awn.b2
    alpha = nx.sigmoid(logit)
    return nx.reshape(alpha, alpha.shape[:-1])


def alpha_target(s_ref, s_dist, q_true, inverted: bool = False):
    """Confidence target from the two scores' absolute errors.

    ``e^{|s_dist-q|} / (e^{|s_dist-q|} + e^{|s_ref-q|})``, a constant for training.
    ``inverted`` swaps the errors, which gives the larger weight to the score
    with the smaller error.
    """
    s_ref = np.asarray(getattr(s_ref, "values", s_ref), dtype=np.float64)
    s_dist = np.asarray(getattr(s_dist, "values", s_dist), dtype=np.float64)
    q_true = np.asarray(q_true, dtype=np.float64)
    # a constant for training, so plain abs (no smoothing) is fine
    err_dist = np.abs(s_dist - q_true)
    err_ref = np.abs(s_ref - q_true)
    if inverted:
        err_dist, err_ref = err_ref, err_dist
    # softmax over the two errors, shifted for overflow safety
    top = np.maximum(err_dist, err_ref)
    a, b = np.exp(err_dist - top), np.exp(err_ref - top)
    out = a / (a + b)
    return float(out) if out.ndim == 0 else out


@dataclass
class QualityResult:
    q: float
    mode: str
    s_dist: float
    alpha: Optional[float] = None
    s_ref: Optional[float] = None
    q_raw: Optional[float] = None

    def line(self) -> str:
        parts = [f"mode={self.mode}", f"q={self.q:.6f}", f"s_dist={self.s_dist:.6f}"]
        if self.mode == FR:
            parts += [f"s_ref={self.s_ref:.6f}", f"alpha={self.alpha:.6f}"]
        return " ".join(parts)


def fuse(s_dist, s_ref=None, alpha=None):
    """Raw (unclamped) fused score as a tensor; NR when ``s_ref`` is None."""
    if s_ref is None:
        if alpha is not None:
            raise FusionError("NR mode takes no alpha")
        return s_dist
    if alpha is None:
        raise FusionError("FR mode requires alpha")
    return alpha * s_ref + (1.0 - alpha) * s_dist


def quality_score(s_dist, s_ref=None, alpha=None, mode: str | None = None) -> QualityResult:
    """``q = alpha*s_ref + (1-alpha)*s_dist`` in FR, ``q = s_dist`` in NR.

    The reported ``q`` is clamped to [0, 1]; ``q_raw`` keeps the unclamped value.
    """
    if mode is None:
        mode = NR if s_ref is None else FR
    s_dist = _scalar(s_dist)
    if mode == NR:
        if s_ref is not None or alpha is not None:
            raise FusionError("NR mode forbids s_ref and alpha")
        return QualityResult(q=min(max(s_dist, 0.0), 1.0), mode=NR, s_dist=s_dist, q_raw=s_dist)
    if mode != FR:
        raise FusionError(f"unknown mode {mode!r}")
    if s_ref is None or alpha is None:
        raise FusionError("FR mode requires both s_ref and alpha")
    s_ref, alpha = _scalar(s_ref), _scalar(alpha)
    raw = alpha * s_ref + (1.0 - alpha) * s_dist
    return QualityResult(q=min(max(raw, 0.0), 1.0), mode=FR, s_dist=s_dist, alpha=alpha, s_ref=s_ref, q_raw=raw)


def _scalar(x) -> float:
    if isinstance(x, nx.Tensor):
        return x.item()
    return float(x)


@dataclass
class LossBreakdown:
    l_pre: nx.Tensor
    l_memory: nx.Tensor
    l_alpha: nx.Tensor
    l_total: nx.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {
            "l_pre": self.l_pre.item(),
            "l_memory": self.l_memory.item(),
            "l_alpha": self.l_alpha.item(),
            "l_total": self.l_total.item(),
            "lambda": self.lam,
        }


def total_loss(q, q_true, alpha, alpha_tgt, bank: MemoryBank | None, lam: float = 0.1,
               eps: float = 1e-8, covariance_axis: str = "units") -> LossBreakdown:
    """l_pre + lam * l_memory + l_alpha.

    ``alpha``/``alpha_tgt`` are None for an NR batch, which makes l_alpha exactly 0.
    ``bank`` may be None when the memory branch is disabled.
    """
    q = nx.as_tensor(q)
    q_true = np.asarray(q_true, dtype=q.dtype)
    if q.values.size == 0:
        raise FusionError("empty batch")
    if q.shape != q_true.shape:
        raise nx.ShapeError("total_loss", q.shape, q_true.shape)
    diff = q - q_true
    l_pre = nx.mean(diff * diff)
    zero = nx.Tensor(np.zeros((), dtype=q.dtype))
    if alpha is None:
        l_alpha = zero
    else:
        alpha = nx.as_tensor(alpha)
        tgt = np.asarray(alpha_tgt, dtype=alpha.dtype)
        if alpha.shape != tgt.shape or alpha.shape != q.shape:
            raise nx.ShapeError("total_loss", alpha.shape, tgt.shape)
        da = alpha - tgt
        l_alpha = nx.mean(da * da)
    if bank is None or (lam == 0 and bank.size < 2):
        l_memory = zero
    else:
        l_memory = decorrelation_loss(bank, eps=eps, axis=covariance_axis)
    l_total = l_pre + l_memory * lam + l_alpha
    return LossBreakdown(l_pre, l_memory, l_alpha, l_total, lam)

"""Reference matching, memory-bank matching and the decorrelation loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class MemoryBank:
    """K x D trainable distortion-pattern prototypes."""

    units: nx.Tensor

    @property
    def size(self) -> int:
        return self.units.shape[0]

    @property
    def dim(self) -> int:
        return self.units.shape[1]

    def row_normalized(self) -> nx.Tensor:
        return nx.l2_normalize(self.units, axis=1)

    def cosine_matrix(self) -> np.ndarray:
        v = self.units.values.astype(np.float64)
        n = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.where(n > 0, n, 1.0)
        return v @ v.T


def init_memory(size: int = 32, dim: int = 64, seed: int = 0, scale: float = 0.05, dtype=np.float32) -> MemoryBank:
    if size < 1:
        raise ValueError(f"memory size K must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    units = rng.normal(0.0, scale, size=(size, dim)).astype(dtype)
    return MemoryBank(nx.Tensor(units, requires_grad=True))


@dataclass
class ReferenceMatch:
    s_ref: nx.Tensor
    s_cos: nx.Tensor
    s_norm: nx.Tensor
    degenerate: np.ndarray


def reference_match(f_ref, f_dist) -> ReferenceMatch:
    """Direction and magnitude agreement of reference and distorted features.

    Works on a single vector or a batch (N, D); returns per-sample tensors.
    A zero vector on either side yields s_cos = s_norm = 0, flagged degenerate.
    """
    f_ref, f_dist = nx.as_tensor(f_ref), nx.as_tensor(f_dist)
    if f_ref.shape != f_dist.shape:
        raise nx.ShapeError("reference_match", f_ref.shape, f_dist.shape)
    n_ref = nx.norm(f_ref, axis=-1)
    n_dist = nx.norm(f_dist, axis=-1)
    degenerate = (n_ref.values == 0) | (n_dist.values == 0)
    dot = nx.sum(f_ref * f_dist, axis=-1)
    safe = np.where(degenerate, 1.0, 0.0).astype(n_ref.dtype)
    s_cos = dot / (n_ref * n_dist + safe)
    hi = nx.maximum(n_ref, n_dist)
    lo = nx.minimum(n_ref, n_dist)
    # 1 - |a - b| / max(a, b) == min(a, b) / max(a, b) for nonnegative norms
    s_norm = lo / (hi + safe)
    s_ref = s_cos * s_norm
    return ReferenceMatch(s_ref, s_cos, s_norm, degenerate)


def memory_match(fmap, bank: MemoryBank) -> tuple[nx.Tensor, nx.Tensor]:
    """Memory matching score of a distorted feature map against the bank.

    ``fmap`` is (D, H, W) or (N, D, H, W) with unit-norm channel vectors.
    Each normalized bank row acts as a 1x1 cross-correlation kernel; the
    responses are averaged over locations into a K-vector ``m`` and the score is
    ``||m|| / sqrt(K)``. Returns (s_dist, m).
    """
    fmap = nx.as_tensor(fmap)
    single = fmap.ndim == 3
    if single:
        fmap = nx.reshape(fmap, (1,) + fmap.shape)
    if fmap.ndim != 4 or fmap.shape[1] != bank.dim:
        raise nx.ShapeError("memory_match", fmap.shape, bank.units.shape)
    kernels = nx.reshape(bank.row_normalized(), (bank.size, bank.dim, 1, 1))
    response = nx.conv2d(fmap, kernels)
    m = nx.global_avg_pool(response)
    s_dist = nx.norm(m, axis=-1) * (1.0 / math.sqrt(bank.size))
    if single:
        return nx.reshape(s_dist, ()), nx.reshape(m, (bank.size,))
    return s_dist, m


def bank_covariance(units, axis: str = "units") -> nx.Tensor:
    """K x K covariance across units (rows centered over features), or D x D across dims."""
    units = nx.as_tensor(units)
    if axis == "units":
        return nx.covariance(units, rowvar=True)
    if axis == "dims":
        return nx.covariance(units, rowvar=False)
    raise ValueError(f"covariance_axis must be 'units' or 'dims', got {axis!r}")


def decorrelation_loss(bank: MemoryBank | nx.Tensor, eps: float = 1e-8, axis: str = "units") -> nx.Tensor:
    """``||C||_F - sum_i sqrt(C_ii^2 + eps)``; unscaled, may be negative."""
    units = bank.units if isinstance(bank, MemoryBank) else nx.as_tensor(bank)
    if units.shape[0] < 2:
        raise ValueError(f"decorrelation loss needs K >= 2 memory units, got {units.shape[0]}")
    c = bank_covariance(units, axis)
    diag = nx.diagonal(c)
    return nx.frobenius_norm(c) - nx.sum(nx.sqrt(diag * diag, eps=eps))


def mean_offdiag_abs_cosine(bank: MemoryBank) -> float:
    cos = bank.cosine_matrix()
    k = cos.shape[0]
    if k < 2:
        return 0.0
    off = cos[~np.eye(k, dtype=bool)]
    return float(np.mean(np.abs(off)))

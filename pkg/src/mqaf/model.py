"""Model state (extractor, memory bank, AWN) and the batched scoring graph."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .extractor import ExtractorConfig, ExtractorParams, forward as extractor_forward, init_extractor
from .fusion import FR, NR, AwnParams, adaptive_weight, init_awn
from .matching import MemoryBank, init_memory, memory_match, reference_match

FORMAT_VERSION = 1


class NoReferenceModeUnavailable(RuntimeError):
    """Raised when NR scoring is requested from a model without a memory branch."""


@dataclass
class ModelConfig:
    input_size: int = 64
    blocks: int = 3
    dim: int = 64
    memory_size: int = 32
    awn_hidden: int = 64
    normalize_before_pool: bool = True
    use_memory: bool = True
    memory_init_scale: float = 0.05

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(
            input_size=self.input_size,
            blocks=self.blocks,
            dim=self.dim,
            normalize_before_pool=self.normalize_before_pool,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    config: ModelConfig
    extractor: ExtractorParams
    awn: AwnParams
    bank: Optional[MemoryBank] = None
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def named_tensors(self) -> list[tuple[str, nx.Tensor]]:
        """Parameters in their fixed serialization order."""
        out = list(self.extractor.tensors())
        if self.bank is not None:
            out.append(("memory.units", self.bank.units))
        out.extend(self.awn.tensors())
        return out

    def groups(self) -> dict[str, list[nx.Tensor]]:
        return {
            "extractor": [t for _, t in self.extractor.tensors()],
            "memory": [] if self.bank is None else [self.bank.units],
            "awn": [t for _, t in self.awn.tensors()],
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_tensors()}

    def restore(self, snap: dict[str, np.ndarray]):
        for name, t in self.named_tensors():
            t.values = snap[name].copy()

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None


def init_model(config: ModelConfig | None = None, seed: int = 0) -> ModelState:
    config = config or ModelConfig()
    ss = np.random.SeedSequence(seed)
    s_ext, s_mem, s_awn = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    extractor = init_extractor(config.extractor_config(), seed=s_ext)
    bank = None
    if config.use_memory:
        bank = init_memory(config.memory_size, config.dim, seed=s_mem, scale=config.memory_init_scale)
    awn = init_awn(config.dim, config.awn_hidden, seed=s_awn)
    return ModelState(config, extractor, awn, bank)


@dataclass
class BatchScores:
    s_dist: Optional[nx.Tensor]
    s_ref: Optional[nx.Tensor]
    alpha: Optional[nx.Tensor]
    q: nx.Tensor
    f_dist: nx.Tensor
    f_ref: Optional[nx.Tensor]

    @property
    def mode(self) -> str:
        return NR if self.s_ref is None else FR


def score_batch(state: ModelState, dist_batch, ref_batch=None, detach_alpha_in_q: bool = False) -> BatchScores:
    """Score an (N, 3, S, S) batch of distorted images, FR when ``ref_batch`` is given.

    Without a memory branch the FR score is ``s_ref`` and NR scoring is undefined.
    """
    fmap_d, f_d = extractor_forward(dist_batch, state.extractor)
    s_dist = None
    if state.bank is not None:
        s_dist, _ = memory_match(fmap_d, state.bank)
    if ref_batch is None:
        if s_dist is None:
            raise NoReferenceModeUnavailable("model has no memory branch; NR score is undefined")
        return BatchScores(s_dist, None, None, s_dist, f_d, None)

    _, f_r = extractor_forward(ref_batch, state.extractor)
    s_ref = reference_match(f_r, f_d).s_ref
    if s_dist is None:
        return BatchScores(None, s_ref, None, s_ref, f_d, f_r)
    alpha = adaptive_weight(f_r, f_d, state.awn)
    a = nx.detach(alpha) if detach_alpha_in_q else alpha
    q = a * s_ref + (1.0 - a) * s_dist
    return BatchScores(s_dist, s_ref, alpha, q, f_d, f_r)

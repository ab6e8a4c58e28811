"""Adam with decoupled weight decay, the training loop and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .evaluation import build_report, score_arrays
from .extractor import ExtractorParams, center_crop, crop_at, images_to_array
from .fusion import FR, NR, AwnParams, alpha_target, total_loss
from .imaging import CorpusManifest, CorpusSample
from .matching import MemoryBank
from .model import FORMAT_VERSION, ModelConfig, ModelState, init_model, score_batch

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """A NaN or infinite value showed up in the loss or a gradient."""


class TrainConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0, names=None) -> AdamState:
    """In-place Adam update with bias correction and decoupled weight decay.

    ``params`` are arrays (updated in place); a ``None`` grad skips that
    parameter entirely, decay included.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    names = names or [f"param{i}" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if g is None:
            continue
        if g.shape != p.shape:
            raise nx.ShapeError("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p, dtype=np.float64)
            state.v[i] = np.zeros_like(p, dtype=np.float64)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * weight_decay * p + lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= update.astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 40
    lam: float = 0.1
    eps: float = 1e-8
    seed: int = 0
    mode_mix: float = 1.0
    val_fraction: float = 0.1
    covariance_axis: str = "units"
    alpha_target_inverted: bool = False
    detach_alpha_in_q: bool = False

    def validate(self):
        for name in ("lr", "batch_size", "epochs", "eps"):
            if not getattr(self, name) > 0:
                raise TrainConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.lam < 0:
            raise TrainConfigError("weight_decay and lam must be nonnegative")
        if not 0.0 <= self.mode_mix <= 1.0:
            raise TrainConfigError(f"mode_mix must be in [0, 1], got {self.mode_mix}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.covariance_axis not in ("units", "dims"):
            raise TrainConfigError(f"covariance_axis must be 'units' or 'dims', got {self.covariance_axis!r}")


@dataclass
class EpochLog:
    epoch: int
    l_pre: float
    l_memory: float
    l_alpha: float
    mean_alpha: float
    val_plcc: Optional[float]
    val_srcc: Optional[float]


LOG_FIELDS = ["epoch", "l_pre", "l_memory", "l_alpha", "mean_alpha", "val_plcc", "val_srcc"]


def metrics_csv(logs: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for e in logs:
        row = asdict(e)
        w.writerow(["" if row[k] is None else (row[k] if k == "epoch" else repr(float(row[k]))) for k in LOG_FIELDS])
    return buf.getvalue()


@dataclass
class TrainResult:
    state: ModelState
    logs: list[EpochLog]
    best_epoch: int
    train_refs: list[str]
    val_refs: list[str]
    routing: dict = field(default_factory=dict)


def _params_and_grads(state: ModelState):
    names, params, grads = [], [], []
    for name, t in state.named_tensors():
        names.append(name)
        params.append(t.values)
        grads.append(t.grad)
    return names, params, grads


def train_step(state: ModelState, adam: AdamState, dist, ref, q_true, cfg: TrainConfig):
    """One optimizer step on a batch; ``ref`` is None for an NR batch. Returns (loss, mean alpha)."""
    state.zero_grad()
    res = score_batch(state, dist, ref, detach_alpha_in_q=cfg.detach_alpha_in_q)
    if res.alpha is not None:
        tgt = alpha_target(res.s_ref, res.s_dist, q_true, inverted=cfg.alpha_target_inverted)
        alpha = res.alpha
    else:
        tgt, alpha = None, None
    bank = state.bank if state.bank is not None and state.bank.size >= 2 else None
    losses = total_loss(res.q, q_true, alpha, tgt, bank, lam=cfg.lam, eps=cfg.eps,
                        covariance_axis=cfg.covariance_axis)
    if not np.isfinite(losses.l_total.values):
        raise NumericalAbort(f"non-finite loss {losses.as_floats()}")
    nx.backward(losses.l_total)
    names, params, grads = _params_and_grads(state)
    adam_step(params, grads, adam, cfg.lr, weight_decay=cfg.weight_decay, names=names)
    mean_alpha = float(np.mean(alpha.values)) if alpha is not None else float("nan")
    return losses, mean_alpha


def gradient_routing(state: ModelState, dist, ref, q_true, cfg: TrainConfig) -> dict[str, set[str]]:
    """Which parameter groups each loss term reaches, from separate backward passes.

    Expected: l_memory -> {memory}; l_alpha -> {awn}; l_pre -> {extractor, memory},
    plus awn through alpha unless ``detach_alpha_in_q``. Leaves grads zeroed.
    """
    out = {}
    for term in ("l_pre", "l_memory", "l_alpha"):
        state.zero_grad()
        res = score_batch(state, dist, ref, detach_alpha_in_q=cfg.detach_alpha_in_q)
        tgt = None
        if res.alpha is not None:
            tgt = alpha_target(res.s_ref, res.s_dist, q_true, inverted=cfg.alpha_target_inverted)
        bank = state.bank if state.bank is not None and state.bank.size >= 2 else None
        losses = total_loss(res.q, q_true, res.alpha, tgt, bank, lam=cfg.lam, eps=cfg.eps,
                            covariance_axis=cfg.covariance_axis)
        getattr(losses, term).backward()
        out[term] = {g for g, ts in state.groups().items()
                     if any(t.grad is not None and np.any(t.grad != 0) for t in ts)}
    state.zero_grad()
    return out


def expected_routing(cfg: TrainConfig, fr: bool, has_memory: bool) -> dict[str, set[str]]:
    pre = {"extractor"} | ({"memory"} if has_memory else set())
    if fr and has_memory and not cfg.detach_alpha_in_q:
        pre.add("awn")
    return {
        "l_pre": pre,
        "l_memory": {"memory"} if has_memory and cfg.lam > 0 else set(),
        "l_alpha": {"awn"} if fr and has_memory else set(),
    }


@dataclass
class TrainData:
    """Decoded images held in memory; ``records`` carry ids, types and labels."""

    records: list[CorpusSample]
    dist: list[np.ndarray]
    ref: list[Optional[np.ndarray]]

    @property
    def q(self) -> np.ndarray:
        return np.array([r.q_true for r in self.records])

    def ref_ids(self) -> list[str]:
        return sorted({r.ref_id for r in self.records})

    def select(self, ref_ids) -> "TrainData":
        wanted = set(ref_ids)
        keep = [i for i, r in enumerate(self.records) if r.ref_id in wanted]
        return TrainData([self.records[i] for i in keep], [self.dist[i] for i in keep], [self.ref[i] for i in keep])

    @classmethod
    def from_manifest(cls, manifest: CorpusManifest) -> "TrainData":
        refs: dict[str, np.ndarray] = {}
        dist, ref = [], []
        for s in manifest.samples:
            dist.append(manifest.load_distorted(s).pixels)
            if s.ref_id not in refs:
                refs[s.ref_id] = manifest.load_reference(s).pixels
            ref.append(refs[s.ref_id])
        return cls(list(manifest.samples), dist, ref)


def split_refs(ref_ids, val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Disjoint (train_refs, val_refs); never splits one reference's samples."""
    refs = sorted(ref_ids)
    if val_fraction <= 0 or len(refs) < 2:
        return refs, []
    n_val = min(max(1, int(round(val_fraction * len(refs)))), len(refs) - 1)
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(len(refs))
    val = sorted(refs[i] for i in perm[:n_val])
    train = [r for r in refs if r not in set(val)]
    return train, val


def train(manifest: CorpusManifest, config: TrainConfig | None = None,
          model_config: ModelConfig | None = None, state: ModelState | None = None) -> TrainResult:
    """Train on a corpus manifest; see ``train_on``."""
    if not manifest.samples:
        raise ValueError("cannot train on an empty corpus")
    return train_on(TrainData.from_manifest(manifest), config, model_config, state)


def train_on(data: TrainData, config: TrainConfig | None = None,
             model_config: ModelConfig | None = None, state: ModelState | None = None) -> TrainResult:
    """Fit extractor, memory bank and AWN; returns the best-by-validation-SRCC state.

    Samples are split 90/10 by reference id. Each batch is FR with probability
    ``mode_mix`` (always FR without a memory branch), NR otherwise. Crops are
    random in training and centered for validation; distorted and reference
    crops share one window.
    """
    config = config or TrainConfig()
    config.validate()
    if not data.records:
        raise ValueError("cannot train on an empty corpus")
    model_config = model_config or (state.config if state is not None else ModelConfig())
    state = state or init_model(model_config, seed=config.seed)
    size = state.config.input_size

    train_refs, val_refs = split_refs(data.ref_ids(), config.val_fraction, config.seed)
    train_data = data.select(train_refs)
    val_data = data.select(val_refs) if val_refs else None
    val_mode = FR if (config.mode_mix > 0 or state.bank is None) else NR
    if val_data is not None:
        val_dist = [center_crop(p, size) for p in val_data.dist]
        val_ref = [center_crop(p, size) for p in val_data.ref] if val_mode == FR else None

    rng = np.random.default_rng([config.seed, 2])
    adam = AdamState()
    dtype = state.extractor.kernels[0].dtype
    q_all = train_data.q
    logs: list[EpochLog] = []
    best = (-np.inf, -1, state.snapshot())
    routing: dict = {}
    n = len(train_data.records)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        alphas = []
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            fr = state.bank is None or rng.random() < config.mode_mix
            dist, ref = [], []
            for i in idx:
                h, w = train_data.dist[i].shape[:2]
                y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
                dist.append(crop_at(train_data.dist[i], y, x, size))
                if fr:
                    ref.append(crop_at(train_data.ref[i], y, x, size))
            db = images_to_array(dist, dtype=dtype)
            rb = images_to_array(ref, dtype=dtype) if fr else None
            if epoch == 0 and steps == 0:
                routing = gradient_routing(state, db, rb, q_all[idx], config)
                want = expected_routing(config, fr, state.bank is not None)
                for term, groups in routing.items():
                    # a term may legitimately have an all-zero gradient on one batch, never a foreign one
                    if not groups <= want[term]:
                        log.warning("gradient routing: %s reaches %s, expected only %s",
                                    term, sorted(groups), sorted(want[term]))
            try:
                losses, mean_alpha = train_step(state, adam, db, rb, q_all[idx], config)
            except NumericalAbort as exc:
                raise NumericalAbort(f"epoch {epoch} step {steps}: {exc}") from exc
            f = losses.as_floats()
            sums += (f["l_pre"], f["l_memory"], f["l_alpha"])
            if not np.isnan(mean_alpha):
                alphas.append(mean_alpha)
            steps += 1
        sums /= max(steps, 1)
        vp = vs = None
        if val_data is not None:
            report = build_report("val", val_mode, score_arrays(state, val_data.records, val_dist, val_ref))
            vp, vs = report.plcc, report.srcc
        mean_alpha = float(np.mean(alphas)) if alphas else float("nan")
        logs.append(EpochLog(epoch, float(sums[0]), float(sums[1]), float(sums[2]), mean_alpha, vp, vs))
        log.info("epoch %d l_pre=%.5f l_mem=%.5f l_alpha=%.5f val_srcc=%s", epoch, *sums, vs)
        score = vs if vs is not None else -float(sums[0])
        if score > best[0]:
            best = (score, epoch, state.snapshot())
    state.restore(best[2])
    state.zero_grad()
    state.meta = {"best_epoch": best[1]}
    return TrainResult(state, logs, best[1], train_refs, val_refs, routing)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MQAF"


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format version {found} is not supported by this reader (version {expected})")


class TruncatedCheckpointError(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(state: ModelState) -> bytes:
    """magic | u32 version | u32 header length | JSON header | f32 LE payload | 8-byte checksum."""
    tensors = state.named_tensors()
    header = {
        "config": state.config.to_dict(),
        "params": [[name, list(t.shape)] for name, t in tensors],
        "meta": state.meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(t.values, dtype="<f4").tobytes() for _, t in tensors)
    body = MAGIC + struct.pack("<II", state.version, len(hb)) + hb + payload
    return body + _checksum(body)


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def parse_checkpoint(data: bytes, expected_version: int = FORMAT_VERSION) -> ModelState:
    if len(data) < 12:
        raise TruncatedCheckpointError(f"checkpoint is {len(data)} bytes, shorter than the fixed header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != expected_version:
        raise VersionError(version, expected_version)
    if len(data) < 12 + hlen:
        raise TruncatedCheckpointError(f"header declares {hlen} bytes but only {len(data) - 12} remain")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise ChecksumError(f"unreadable header: {exc}") from exc
    expected_payload = sum(4 * int(np.prod(shape)) for _, shape in header["params"])
    total = 12 + hlen + expected_payload + 8
    if len(data) < total:
        raise TruncatedCheckpointError(f"checkpoint truncated: expected {total} bytes, got {len(data)}")
    if len(data) > total:
        raise CheckpointError(f"{len(data) - total} trailing bytes after checkpoint")
    if _checksum(data[:-8]) != data[-8:]:
        raise ChecksumError("checkpoint checksum mismatch")

    config = ModelConfig(**header["config"])
    arrays = {}
    pos = 12 + hlen
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * count
    state = _state_from_arrays(config, arrays)
    state.version = version
    state.meta = header.get("meta", {})
    return state


def _state_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelState:
    def t(name):
        return nx.Tensor(arrays[name].copy(), requires_grad=True)

    ext = ExtractorParams(config.extractor_config())
    for i in range(config.blocks):
        ext.kernels.append(t(f"extractor.conv{i}.weight"))
        ext.biases.append(t(f"extractor.conv{i}.bias"))
    bank = MemoryBank(t("memory.units")) if config.use_memory else None
    awn = AwnParams(t("awn.w1"), t("awn.b1"), t("awn.w2"), t("awn.b2"))
    return ModelState(config, ext, awn, bank)


def load_checkpoint(path) -> ModelState:
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_hash(state: ModelState) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()

"""Correlation metrics, evaluation protocols and gMAD pair search."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .extractor import center_crop, images_to_array
from .fusion import FR, NR
from .imaging import CorpusManifest, CorpusSample, psnr
from .model import ModelState, score_batch

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Correlation requested on inputs with zero variance."""


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateInputError(f"need at least 2 samples, got {x.size}")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation, no nonlinear remapping."""
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.sum(xc * xc), np.sum(yc * yc)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("zero variance input to plcc")
    r = np.sum(xc * yc) / (np.sqrt(sxx) * np.sqrt(syy))
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman rank correlation.

    Tie-free data uses ``1 - 6 sum d^2 / (n (n^2 - 1))``; with ties, the Pearson
    correlation of average ranks.
    """
    x, y = _pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    n = x.size
    tied = np.unique(x).size < n or np.unique(y).size < n
    if tied:
        try:
            return plcc(rx, ry)
        except DegenerateInputError:
            raise DegenerateInputError("zero rank variance input to srcc") from None
    d = rx - ry
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1.0)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class TypeStats:
    plcc: Optional[float]
    srcc: Optional[float]
    n: int


@dataclass
class SampleScore:
    sample_id: str
    distortion_type: str
    q_true: float
    q: float
    s_dist: Optional[float] = None
    s_ref: Optional[float] = None
    alpha: Optional[float] = None


@dataclass
class EvalReport:
    split: str
    mode: str
    plcc: Optional[float]
    srcc: Optional[float]
    n: int
    per_type: dict[str, TypeStats] = field(default_factory=dict)
    samples: list[SampleScore] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.errors)

    def summary(self) -> str:
        def f(v):
            return "n/a" if v is None else f"{v:.4f}"

        return f"{self.split} [{self.mode}] n={self.n} PLCC={f(self.plcc)} SRCC={f(self.srcc)}"

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "mode": self.mode,
            "plcc": self.plcc,
            "srcc": self.srcc,
            "n": self.n,
            "skipped": self.skipped,
            "per_type": {k: asdict(v) for k, v in sorted(self.per_type.items())},
            "errors": list(self.errors),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "mode", "distortion_type", "plcc", "srcc", "n"])
        w.writerow([self.split, self.mode, "all", _fmt(self.plcc), _fmt(self.srcc), self.n])
        for t, st in sorted(self.per_type.items()):
            w.writerow([self.split, self.mode, t, _fmt(st.plcc), _fmt(st.srcc), st.n])
        return buf.getvalue()

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "distortion_type", "s_ref", "s_dist", "alpha", "q", "q_true"])
        for s in self.samples:
            w.writerow([s.sample_id, s.distortion_type, _fmt(s.s_ref), _fmt(s.s_dist), _fmt(s.alpha), _fmt(s.q), _fmt(s.q_true)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _safe_corr(fn, x, y) -> Optional[float]:
    try:
        return fn(x, y)
    except DegenerateInputError:
        return None


def build_report(split: str, mode: str, samples: list[SampleScore], errors=()) -> EvalReport:
    q = [s.q for s in samples]
    t = [s.q_true for s in samples]
    report = EvalReport(split, mode, _safe_corr(plcc, q, t), _safe_corr(srcc, q, t), len(samples),
                        samples=samples, errors=list(errors))
    for kind in sorted({s.distortion_type for s in samples}):
        sub = [s for s in samples if s.distortion_type == kind]
        qs, ts = [s.q for s in sub], [s.q_true for s in sub]
        report.per_type[kind] = TypeStats(_safe_corr(plcc, qs, ts), _safe_corr(srcc, qs, ts), len(sub))
    return report


def score_samples(state: ModelState, manifest: CorpusManifest, samples: Sequence[CorpusSample], mode: str,
                  batch_size: int = 32) -> tuple[list[SampleScore], list[str]]:
    """Center-crop scoring of manifest samples; unreadable FR references are skipped and reported."""
    size = state.config.input_size
    dist, refs, kept, errors = [], [], [], []
    for s in samples:
        try:
            d = center_crop(manifest.load_distorted(s).pixels, size)
            r = center_crop(manifest.load_reference(s).pixels, size) if mode == FR else None
        except (OSError, ValueError) as exc:
            errors.append(f"{s.sample_id}: {exc}")
            continue
        dist.append(d)
        refs.append(r)
        kept.append(s)
    return score_arrays(state, kept, dist, refs if mode == FR else None), errors


def score_arrays(state: ModelState, samples: Sequence[CorpusSample], dist: list, refs: Optional[list],
                 batch_size: int = 32) -> list[SampleScore]:
    dtype = state.extractor.kernels[0].dtype
    out: list[SampleScore] = []
    for start in range(0, len(samples), batch_size):
        sl = slice(start, start + batch_size)
        db = images_to_array(dist[sl], dtype=dtype)
        rb = images_to_array(refs[sl], dtype=dtype) if refs is not None else None
        res = score_batch(state, db, rb)
        q = np.clip(res.q.values, 0.0, 1.0)
        for i, s in enumerate(samples[sl]):
            out.append(
                SampleScore(
                    s.sample_id,
                    s.distortion_type,
                    s.q_true,
                    float(q[i]),
                    None if res.s_dist is None else float(res.s_dist.values[i]),
                    None if res.s_ref is None else float(res.s_ref.values[i]),
                    None if res.alpha is None else float(res.alpha.values[i]),
                )
            )
    return out


def evaluate(state: ModelState, manifest: CorpusManifest, mode: str = FR, split: str = "test") -> EvalReport:
    if mode not in (FR, NR):
        raise ValueError(f"unknown mode {mode!r}")
    if not manifest.samples:
        raise ValueError("cannot evaluate an empty manifest")
    samples, errors = score_samples(state, manifest, manifest.samples, mode)
    return build_report(split, mode, samples, errors)


# ---------------------------------------------------------------------------
# leave-one-distortion-out


@dataclass
class LodoFold:
    held_out: str
    train_manifest: CorpusManifest
    test_manifest: CorpusManifest
    report: EvalReport


def lodo_splits(manifest: CorpusManifest) -> Iterable[tuple[str, CorpusManifest, CorpusManifest]]:
    types = manifest.distortion_types()
    if len(types) < 2:
        raise ValueError(f"leave-one-distortion-out needs >= 2 distortion types, got {types}")
    for t in types:
        test = manifest.subset(lambda s, t=t: s.distortion_type == t)
        if len(test.samples) < 2:
            log.warning("skipping distortion type %s: only %d samples", t, len(test.samples))
            continue
        train = manifest.subset(lambda s, t=t: s.distortion_type != t)
        yield t, train, test


def lodo_eval(model_factory: Callable[[CorpusManifest], ModelState], manifest: CorpusManifest,
              mode: str = FR) -> list[LodoFold]:
    """Train on all distortion types but one, evaluate on the held-out type, for each type."""
    folds = []
    for t, train, test in lodo_splits(manifest):
        state = model_factory(train)
        report = evaluate(state, test, mode=mode, split=f"lodo:{t}")
        folds.append(LodoFold(t, train, test, report))
    return folds


# ---------------------------------------------------------------------------
# gMAD


@dataclass(frozen=True)
class GmadPair:
    id_a: str
    id_b: str
    defender_gap: float
    attacker_gap: float


def gmad_search(defender: dict[str, float], attacker: dict[str, float], tolerance: float,
                top: int = 5) -> list[GmadPair]:
    """Pairs the defender rates alike (gap <= tolerance), ranked by attacker disagreement.

    Exhaustive over all pairs. Ties in attacker gap break by (id_a, id_b).
    """
    ids = sorted(set(defender) & set(attacker))
    if len(ids) < 2:
        raise ValueError("gMAD search needs at least 2 scored samples")
    d = np.array([defender[i] for i in ids], dtype=np.float64)
    a = np.array([attacker[i] for i in ids], dtype=np.float64)
    dgap = np.abs(d[:, None] - d[None, :])
    agap = np.abs(a[:, None] - a[None, :])
    ii, jj = np.triu_indices(len(ids), k=1)
    ok = dgap[ii, jj] <= tolerance
    ii, jj = ii[ok], jj[ok]
    # sort: attacker gap descending, then ids ascending (ids already sorted so i<j)
    order = np.lexsort((jj, ii, -agap[ii, jj]))[:top]
    return [GmadPair(ids[ii[k]], ids[jj[k]], float(dgap[ii[k], jj[k]]), float(agap[ii[k], jj[k]])) for k in order]


def model_scores(state: ModelState, manifest: CorpusManifest, mode: str = FR) -> dict[str, float]:
    return {s.sample_id: s.q for s in evaluate(state, manifest, mode=mode).samples}


def psnr_scores(manifest: CorpusManifest) -> dict[str, float]:
    """PSNR attacker baseline, capped at 100 dB for identical images."""
    out = {}
    for s in manifest.samples:
        v = psnr(manifest.load_reference(s), manifest.load_distorted(s))
        out[s.sample_id] = min(v, 100.0)
    return out


def gmad_csv(pairs: list[GmadPair]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id_a", "id_b", "defender_gap", "attacker_gap"])
    for p in pairs:
        w.writerow([p.id_a, p.id_b, repr(p.defender_gap), repr(p.attacker_gap)])
    return buf.getvalue()

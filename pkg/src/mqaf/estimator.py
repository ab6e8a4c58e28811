"""scikit-learn style wrapper around the training and scoring pipeline."""

from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import score_arrays, srcc
from .extractor import center_crop
from .imaging import CorpusSample
from .model import ModelConfig, NoReferenceModeUnavailable
from .training import TrainConfig, TrainData, train_on


def check_images(X, name: str = "X") -> list[np.ndarray]:
    """Validate a batch of RGB images: an (N, H, W, 3) array or a list of (H, W, 3) arrays.

    Returns a list of uint8 arrays. Float input must already lie in [0, 255].
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, (list, tuple)):
        items = list(X)
    else:
        raise ValueError(f"{name} must be an (N, H, W, 3) array or a list of (H, W, 3) images")
    if not items:
        raise ValueError(f"{name} is empty")
    out = []
    for i, im in enumerate(items):
        im = getattr(im, "pixels", im)  # accept ImageBuffer
        a = np.asarray(im)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"{name}[{i}] has shape {a.shape}, expected (H, W, 3)")
        if a.dtype != np.uint8:
            if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 255:
                raise ValueError(f"{name}[{i}] has values outside [0, 255]")
            a = np.rint(a).astype(np.uint8)
        out.append(a)
    return out


def _content_id(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


class MQAFRegressor(RegressorMixin, BaseEstimator):
    """Quality regressor with a full-reference and a no-reference mode.

    ``fit(X, y, refs=...)`` trains on distorted images ``X`` with labels ``y``
    in [0, 1] and their pristine references. ``predict(X)`` scores without
    references (NR), ``predict(X, refs=...)`` scores with them (FR).
    ``score`` reports Spearman correlation rather than R^2.
    """

    def __init__(self, input_size=64, blocks=3, dim=64, memory_size=32, awn_hidden=64, use_memory=True,
                 lr=TrainConfig.lr, weight_decay=1e-5, batch_size=16, epochs=40, lam=0.1, mode_mix=1.0,
                 val_fraction=0.1, random_state=0):
        self.input_size = input_size
        self.blocks = blocks
        self.dim = dim
        self.memory_size = memory_size
        self.awn_hidden = awn_hidden
        self.use_memory = use_memory
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.lam = lam
        self.mode_mix = mode_mix
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self):
        mc = ModelConfig(input_size=self.input_size, blocks=self.blocks, dim=self.dim,
                         memory_size=self.memory_size, awn_hidden=self.awn_hidden, use_memory=self.use_memory)
        tc = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                         epochs=self.epochs, lam=self.lam, mode_mix=self.mode_mix,
                         val_fraction=self.val_fraction, seed=int(self.random_state or 0))
        return mc, tc

    def fit(self, X, y, refs=None, groups=None):
        """Train. ``groups`` keeps samples of one scene on the same side of the
        validation split; it defaults to the reference content."""
        dist = check_images(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(dist):
            raise ValueError(f"X has {len(dist)} images but y has {len(y)} labels")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        mc, tc = self._configs()
        if refs is None:
            if mc.use_memory is False:
                raise NoReferenceModeUnavailable("training without references needs the memory branch")
            tc.mode_mix = 0.0
            ref = [None] * len(dist)
        else:
            ref = check_images(refs, "refs")
            if len(ref) != len(dist):
                raise ValueError("refs must pair one reference with each image in X")
            for i, (d, r) in enumerate(zip(dist, ref)):
                if d.shape != r.shape:
                    raise ValueError(f"X[{i}] and refs[{i}] differ in shape")
        for i, d in enumerate(dist):
            if min(d.shape[:2]) < mc.input_size:
                raise ValueError(f"X[{i}] is smaller than input_size={mc.input_size}")
        if groups is None:
            groups = [_content_id(r) if r is not None else str(i) for i, r in enumerate(ref)]
        records = [CorpusSample(str(i), "", str(g), "", "unknown", 0, float(q))
                   for i, (g, q) in enumerate(zip(groups, y))]
        result = train_on(TrainData(records, dist, ref), tc, mc)
        self.state_ = result.state
        self.history_ = result.logs
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X, refs=None) -> np.ndarray:
        check_is_fitted(self, "state_")
        size = self.state_.config.input_size
        dist = [center_crop(a, size) for a in check_images(X)]
        ref = None if refs is None else [center_crop(a, size) for a in check_images(refs, "refs")]
        if ref is not None and len(ref) != len(dist):
            raise ValueError("refs must pair one reference with each image in X")
        records = [CorpusSample(str(i), "", "", "", "unknown", 0, 0.0) for i in range(len(dist))]
        return np.array([s.q for s in score_arrays(self.state_, records, dist, ref)])

    def score(self, X, y, refs=None, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        return srcc(self.predict(X, refs=refs), np.asarray(y, dtype=np.float64))

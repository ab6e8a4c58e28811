"""Binary PPM I/O, parametric distortions and the synthetic quality corpus."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DISTORTION_TYPES = (
    "gaussian-noise",
    "gaussian-blur",
    "block-averaging",
    "contrast-scaling",
    "salt-pepper",
)

# severity 1..5 parameterization
NOISE_SIGMA = (5 / 255, 10 / 255, 20 / 255, 35 / 255, 50 / 255)
BLUR_SIGMA = (0.5, 1.0, 2.0, 3.0, 5.0)
BLOCK_SIZE = (2, 4, 8, 12, 16)
CONTRAST_FACTOR = (0.8, 0.6, 0.45, 0.3, 0.2)
SALT_PEPPER_PROB = (0.005, 0.01, 0.02, 0.05, 0.10)


class PPMError(ValueError):
    """Malformed or unsupported PPM data; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class UnsupportedMaxvalError(PPMError):
    pass


class TruncatedPayloadError(PPMError):
    def __init__(self, expected: int, actual: int, offset: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated pixel payload: expected {expected} bytes, got {actual}", offset)


class CorpusError(ValueError):
    pass


@dataclass(eq=False)
class ImageBuffer:
    """8-bit RGB raster, row-major, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) pixels, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)

    def to_bytes(self) -> bytes:
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()


# ---------------------------------------------------------------------------
# PPM (P6)


def _skip_space_and_comments(data: bytes, pos: int) -> int:
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    return pos


def _read_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_space_and_comments(data, pos)
    start = pos
    while pos < len(data) and data[pos : pos + 1].isdigit():
        pos += 1
    if pos == start:
        if pos >= len(data):
            raise PPMError(f"unexpected end of header while reading {what}", pos)
        raise PPMError(f"expected integer {what}", pos)
    return int(data[start:pos]), pos


def parse_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise PPMError("bad magic, expected P6", 0)
    pos = 2
    if pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        raise PPMError("missing whitespace after magic", pos)
    width, pos = _read_int(data, pos, "width")
    height, pos = _read_int(data, pos, "height")
    maxval_at = _skip_space_and_comments(data, pos)
    maxval, pos = _read_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PPMError(f"invalid dimensions {width}x{height}", maxval_at)
    if maxval != 255:
        raise UnsupportedMaxvalError(f"unsupported maxval {maxval}, only 255 is supported", maxval_at)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PPMError("expected single whitespace before pixel data", pos)
    pos += 1
    expected = width * height * 3
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(expected, len(payload), pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageBuffer(pixels)


def load_image(path) -> ImageBuffer:
    return parse_ppm(Path(path).read_bytes())


def save_image(img: ImageBuffer, path) -> None:
    Path(path).write_bytes(img.to_bytes())


# ---------------------------------------------------------------------------
# distortions


def _check_severity(severity: int):
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def apply_distortion(img: ImageBuffer, kind: str, severity: int, seed: int = 0) -> ImageBuffer:
    """Return a distorted copy of ``img``; deterministic in (img, kind, severity, seed)."""
    _check_severity(severity)
    idx = severity - 1
    px = img.pixels.astype(np.float64)
    rng = np.random.default_rng(seed)
    if kind == "gaussian-noise":
        out = px + rng.normal(0.0, NOISE_SIGMA[idx] * 255.0, size=px.shape)
    elif kind == "gaussian-blur":
        s = BLUR_SIGMA[idx]
        out = ndimage.gaussian_filter(px, sigma=(s, s, 0), mode="nearest", truncate=3.0)
    elif kind == "block-averaging":
        out = _block_average(px, BLOCK_SIZE[idx])
    elif kind == "contrast-scaling":
        out = 128.0 + CONTRAST_FACTOR[idx] * (px - 128.0)
    elif kind == "salt-pepper":
        p = SALT_PEPPER_PROB[idx]
        u = rng.random(px.shape[:2])
        out = px.copy()
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 255.0
    else:
        raise ValueError(f"unknown distortion type {kind!r}; expected one of {DISTORTION_TYPES}")
    return ImageBuffer(_to_uint8(out))


def _block_average(px: np.ndarray, block: int) -> np.ndarray:
    h, w, _ = px.shape
    out = np.empty_like(px)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = px[y : y + block, x : x + block]
            out[y : y + block, x : x + block] = tile.mean(axis=(0, 1))
    return out


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    mse = np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))


# ---------------------------------------------------------------------------
# procedural references


def make_reference(size: int, seed: int) -> ImageBuffer:
    """Smooth gradient + colored blobs + band-limited texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.zeros((size, size, 3))
    # linear color gradient
    c0, c1 = rng.uniform(40, 215, 3), rng.uniform(40, 215, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    img += c0 * (1 - t[..., None]) + c1 * t[..., None]
    # blobs with hard-ish edges
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = 1.0 / (1.0 + np.exp((d - r) * size / 1.5))
        color = rng.uniform(-90, 90, 3)
        img += mask[..., None] * color
    # texture
    for scale in (1.0, 2.5):
        noise = ndimage.gaussian_filter(rng.normal(0, 1, (size, size, 3)), sigma=(scale, scale, 0))
        noise /= noise.std() + 1e-12
        img += noise * rng.uniform(6, 16)
    # stripes
    freq = rng.uniform(4, 12)
    phase = rng.uniform(0, 2 * np.pi)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img += stripes[..., None] * rng.uniform(8, 25)
    return ImageBuffer(_to_uint8(img))


# ---------------------------------------------------------------------------
# corpus


def quality_label(severity: int) -> float:
    """1 for the pristine reference, then 0.9, 0.7, 0.5, 0.3, 0.1."""
    if severity == 0:
        return 1.0
    _check_severity(severity)
    return 1.0 - (severity - 0.5) / 5.0


def sample_seed(master_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class CorpusConfig:
    n_references: int = 8
    image_size: int = 128
    distortion_types: tuple[str, ...] = DISTORTION_TYPES
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)

    def validate(self):
        if self.n_references < 1:
            raise CorpusError(f"n_references must be >= 1, got {self.n_references}")
        if self.image_size < 8:
            raise CorpusError(f"image_size must be >= 8, got {self.image_size}")
        for t in self.distortion_types:
            if t not in DISTORTION_TYPES:
                raise CorpusError(f"unknown distortion type {t!r}")
        for s in self.severities:
            _check_severity(s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distortion_types"] = list(self.distortion_types)
        d["severities"] = list(self.severities)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CorpusSample:
    sample_id: str
    path: str
    ref_id: str
    ref_path: str
    distortion_type: str
    severity: int
    q_true: float

    def __post_init__(self):
        self.severity = int(self.severity)
        self.q_true = float(self.q_true)


@dataclass
class CorpusManifest:
    samples: list[CorpusSample]
    seed: int
    config_hash: str
    root: str = "."
    references: dict[str, str] = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel

    def load_distorted(self, sample: CorpusSample) -> ImageBuffer:
        return load_image(self.resolve(sample.path))

    def load_reference(self, sample: CorpusSample) -> ImageBuffer:
        return load_image(self.resolve(sample.ref_path))

    def ref_ids(self) -> list[str]:
        return sorted({s.ref_id for s in self.samples})

    def distortion_types(self) -> list[str]:
        return sorted({s.distortion_type for s in self.samples})

    def subset(self, predicate) -> "CorpusManifest":
        kept = [s for s in self.samples if predicate(s)]
        refs = {s.ref_id: self.references[s.ref_id] for s in kept if s.ref_id in self.references}
        return CorpusManifest(kept, self.seed, self.config_hash, self.root, refs)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "references": dict(sorted(self.references.items())),
            "samples": [asdict(s) for s in self.samples],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        samples = [CorpusSample(**s) for s in doc["samples"]]
        return cls(samples, doc["seed"], doc["config_hash"], str(path.parent), doc.get("references", {}))


def generate_corpus(config: CorpusConfig, seed: int, out_dir) -> CorpusManifest:
    """Write reference and distorted PPMs plus ``manifest.json`` under ``out_dir``."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "ref").mkdir(parents=True, exist_ok=True)
        (out / "dist").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise CorpusError(f"output directory {out} is not writable")

    samples: list[CorpusSample] = []
    references: dict[str, str] = {}
    index = 0
    for r in range(config.n_references):
        ref_id = f"ref{r:03d}"
        ref_img = make_reference(config.image_size, sample_seed(seed, -1 - r))
        ref_rel = f"ref/{ref_id}.ppm"
        save_image(ref_img, out / ref_rel)
        references[ref_id] = ref_rel
        for kind in config.distortion_types:
            for sev in config.severities:
                sid = f"{ref_id}_{kind}_{sev}"
                rel = f"dist/{sid}.ppm"
                img = apply_distortion(ref_img, kind, sev, seed=sample_seed(seed, index))
                save_image(img, out / rel)
                samples.append(CorpusSample(sid, rel, ref_id, ref_rel, kind, sev, quality_label(sev)))
                index += 1
    manifest = CorpusManifest(samples, seed, config.hash(), str(out), references)
    manifest.save(out / "manifest.json")
    return manifest

"""Toy convolutional feature extractor.

Blocks of conv3x3 -> ReLU -> avg-pool 2x2, then per-location channel L2
normalization and global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .imaging import ImageBuffer


class ExtractorConfigError(ValueError):
    pass


@dataclass
class ExtractorConfig:
    input_size: int = 64
    blocks: int = 3
    dim: int = 64
    widths: tuple[int, ...] | None = None
    normalize_before_pool: bool = True

    def layer_widths(self) -> tuple[int, ...]:
        if self.widths is not None:
            return tuple(self.widths)
        return tuple(max(self.dim // 2 ** (self.blocks - 1 - i), 1) for i in range(self.blocks))

    def validate(self):
        if self.dim < 2:
            raise ExtractorConfigError(f"feature dimension must be >= 2, got {self.dim}")
        if self.blocks < 1:
            raise ExtractorConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.input_size % 2**self.blocks:
            raise ExtractorConfigError(
                f"input_size {self.input_size} is not divisible by 2**blocks = {2**self.blocks}"
            )
        widths = self.layer_widths()
        if len(widths) != self.blocks or widths[-1] != self.dim:
            raise ExtractorConfigError(f"widths {widths} must have {self.blocks} entries ending in {self.dim}")

    @property
    def map_size(self) -> int:
        return self.input_size // 2**self.blocks


@dataclass
class ExtractorParams:
    config: ExtractorConfig
    kernels: list[nx.Tensor] = field(default_factory=list)
    biases: list[nx.Tensor] = field(default_factory=list)

    def tensors(self) -> list[tuple[str, nx.Tensor]]:
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out.append((f"extractor.conv{i}.weight", k))
            out.append((f"extractor.conv{i}.bias", b))
        return out


def init_extractor(config: ExtractorConfig | None = None, seed: int = 0, dtype=np.float32) -> ExtractorParams:
    """Kaiming-uniform kernels, zero biases.

    First-layer kernels have their mean removed so that they respond to local
    structure rather than to the image's mean color; with a [0, 1] input the DC
    term otherwise dominates every normalized feature vector.
    """
    config = config or ExtractorConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    params = ExtractorParams(config)
    c_in = 3
    for i, width in enumerate(config.layer_widths()):
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(width, c_in, 3, 3))
        if i == 0:
            w -= w.mean(axis=(1, 2, 3), keepdims=True)
        params.kernels.append(nx.Tensor(w.astype(dtype), requires_grad=True))
        params.biases.append(nx.Tensor(np.zeros(width, dtype=dtype), requires_grad=True))
        c_in = width
    return params


def images_to_array(images, dtype=np.float32) -> np.ndarray:
    """Stack ImageBuffers (or uint8 HWC arrays) into an (N, 3, H, W) array in [0, 1]."""
    arrs = [im.pixels if isinstance(im, ImageBuffer) else np.asarray(im) for im in images]
    batch = np.stack(arrs).astype(dtype) / np.asarray(255.0, dtype=dtype)
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def forward(batch, params: ExtractorParams) -> tuple[nx.Tensor, nx.Tensor]:
    """Run the network on an (N, 3, S, S) batch; returns (normalized map, pooled vector)."""
    cfg = params.config
    x = nx.as_tensor(batch)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise nx.ShapeError("extract", x.shape, (None, 3, cfg.input_size, cfg.input_size))
    for k, b in zip(params.kernels, params.biases):
        x = nx.conv2d(x, k, b, padding=1)
        x = nx.relu(x)
        x = nx.avg_pool2d(x, 2)
    fmap = nx.l2_normalize(x, axis=1)
    if cfg.normalize_before_pool:
        vec = nx.global_avg_pool(fmap)
    else:
        vec = nx.l2_normalize(nx.global_avg_pool(x), axis=1)
    return fmap, vec


def extract(img: ImageBuffer, params: ExtractorParams) -> tuple[nx.Tensor, nx.Tensor]:
    """Single image -> (D x H' x W' map, length-D vector)."""
    cfg = params.config
    if img.height != cfg.input_size or img.width != cfg.input_size:
        raise nx.ShapeError("extract", (img.height, img.width), (cfg.input_size, cfg.input_size))
    dtype = params.kernels[0].dtype
    fmap, vec = forward(images_to_array([img], dtype=dtype), params)
    return nx.reshape(fmap, fmap.shape[1:]), nx.reshape(vec, vec.shape[1:])


def center_crop(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} smaller than crop {size}")
    y, x = (h - size) // 2, (w - size) // 2
    return pixels[y : y + size, x : x + size]


def crop_at(pixels: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    return pixels[y : y + size, x : x + size]

"""Run configuration: one flat TOML file with fixed sections, strictly validated.

Every key has a documented default; unknown keys, wrong types and out-of-range
values are rejected with the offending key and its line number.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .imaging import DISTORTION_TYPES, CorpusConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = ""
        if key:
            where = f"{key}: "
        if line:
            where = f"line {line}: {where}"
        super().__init__(where + message)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_interval(v):
    return 0.0 <= v <= 1.0


@dataclass
class CorpusSection:
    n_references: int = 8  # procedurally generated references
    image_size: int = 128  # square reference size in px; crops are taken from it
    distortion_types: list = field(default_factory=lambda: list(DISTORTION_TYPES))
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass
class ExtractorSection:
    input_size: int = 64  # crop size fed to the network
    blocks: int = 3  # conv3x3 -> ReLU -> avgpool2 blocks
    dim: int = 64  # feature dimension D
    normalize_before_pool: bool = True  # per-location L2 normalization, then pooling


@dataclass
class MemorySection:
    K: int = 32  # number of memory units
    enabled: bool = True  # False disables the memory branch (FR score = s_ref)
    init_scale: float = 0.05  # std of the initial unit entries
    lam: float = 0.1  # weight of the decorrelation loss
    eps: float = 1e-8
    covariance_axis: str = "units"  # "units" (K x K) or "dims" (D x D)


@dataclass
class FusionSection:
    awn_hidden: int = 64
    alpha_target_inverted: bool = False
    detach_alpha_in_q: bool = False


@dataclass
class TrainingSection:
    lr: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 40
    mode_mix: float = 1.0  # fraction of FR batches
    val_fraction: float = 0.1


@dataclass
class EvaluationSection:
    mode: str = "FR"
    test_fraction: float = 0.25  # references held out from training by the eval/pipeline commands
    gmad_tolerance: float = 0.02
    gmad_top: int = 5


@dataclass
class PathsSection:
    corpus_dir: str = "corpus"
    out_dir: str = "runs"


SECTIONS: dict[str, type] = {
    "corpus": CorpusSection,
    "extractor": ExtractorSection,
    "memory": MemorySection,
    "fusion": FusionSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
    "paths": PathsSection,
}

CHECKS: dict[str, tuple[Callable[[Any], bool], str]] = {
    "corpus.n_references": (lambda v: v >= 1, ">= 1"),
    "corpus.image_size": (lambda v: v >= 8, ">= 8"),
    "corpus.distortion_types": (lambda v: len(v) > 0 and all(t in DISTORTION_TYPES for t in v),
                                f"a nonempty subset of {list(DISTORTION_TYPES)}"),
    "corpus.severities": (lambda v: len(v) > 0 and all(isinstance(s, int) and 1 <= s <= 5 for s in v),
                          "a nonempty list of integers in 1..5"),
    "extractor.input_size": (_positive, "> 0"),
    "extractor.blocks": (_positive, "> 0"),
    "extractor.dim": (lambda v: v >= 2, ">= 2"),
    "memory.K": (lambda v: v >= 1, ">= 1"),
    "memory.init_scale": (_positive, "> 0"),
    "memory.lam": (_nonneg, ">= 0"),
    "memory.eps": (_positive, "> 0"),
    "memory.covariance_axis": (lambda v: v in ("units", "dims"), "'units' or 'dims'"),
    "fusion.awn_hidden": (_positive, "> 0"),
    "training.lr": (_positive, "> 0"),
    "training.weight_decay": (_nonneg, ">= 0"),
    "training.batch_size": (_positive, "> 0"),
    "training.epochs": (_positive, "> 0"),
    "training.mode_mix": (_unit_interval, "in [0, 1]"),
    "training.val_fraction": (lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "evaluation.mode": (lambda v: v in ("FR", "NR"), "'FR' or 'NR'"),
    "evaluation.test_fraction": (lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "evaluation.gmad_tolerance": (_nonneg, ">= 0"),
    "evaluation.gmad_top": (_positive, "> 0"),
}


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    memory: MemorySection = field(default_factory=MemorySection)
    fusion: FusionSection = field(default_factory=FusionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- conversions

    def corpus_config(self) -> CorpusConfig:
        c = self.corpus
        return CorpusConfig(c.n_references, c.image_size, tuple(c.distortion_types), tuple(c.severities))

    def model_config(self) -> ModelConfig:
        e, m = self.extractor, self.memory
        return ModelConfig(
            input_size=e.input_size,
            blocks=e.blocks,
            dim=e.dim,
            memory_size=m.K,
            awn_hidden=self.fusion.awn_hidden,
            normalize_before_pool=e.normalize_before_pool,
            use_memory=m.enabled,
            memory_init_scale=m.init_scale,
        )

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            lr=t.lr,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            epochs=t.epochs,
            lam=self.memory.lam,
            eps=self.memory.eps,
            seed=self.seed,
            mode_mix=t.mode_mix,
            val_fraction=t.val_fraction,
            covariance_axis=self.memory.covariance_axis,
            alpha_target_inverted=self.fusion.alpha_target_inverted,
            detach_alpha_in_q=self.fusion.detach_alpha_in_q,
        )

    # -- text form

    def to_toml(self) -> str:
        lines = [f"seed = {_toml_value(self.seed)}"]
        for name in SECTIONS:
            lines.append("")
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]

    def set(self, dotted: str, raw: str):
        """Override one key from a ``section.key=value`` flag; the value is parsed as TOML."""
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings
        _assign(self, dotted, value, None)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _type_ok(expected, value) -> bool:
    if isinstance(expected, bool):
        return isinstance(value, bool)
    if isinstance(expected, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(expected, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(expected, str):
        return isinstance(value, str)
    if isinstance(expected, list):
        return isinstance(value, list)
    return False


def _assign(cfg: RunConfig, dotted: str, value, line):
    if dotted == "seed":
        if not _type_ok(0, value) or value < 0:
            raise ConfigError(f"expected a nonnegative integer, got {value!r}", "seed", line)
        cfg.seed = value
        return
    section_name, _, key = dotted.partition(".")
    if section_name not in SECTIONS or not key:
        raise ConfigError("unknown key", dotted, line)
    section = getattr(cfg, section_name)
    names = {f.name for f in fields(section)}
    if key not in names:
        raise ConfigError("unknown key", dotted, line)
    default = getattr(SECTIONS[section_name](), key)
    if not _type_ok(default, value):
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__} {value!r}", dotted, line)
    if isinstance(default, float):
        value = float(value)
    check = CHECKS.get(dotted)
    if check is not None and not check[0](value):
        raise ConfigError(f"value {value!r} out of range, must be {check[1]}", dotted, line)
    setattr(section, key, value)


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted keys to the 1-based line they are defined on."""
    out: dict[str, int] = {}
    section = ""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if m:
            section = m.group(1)
            out.setdefault(section, i)
            continue
        m = re.match(r"^([A-Za-z0-9_-]+)\s*=", line)
        if m:
            out.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), i)
    return out


def parse_config_text(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    lines = _key_lines(text)
    cfg = RunConfig()
    for name, value in doc.items():
        if isinstance(value, dict):
            if name not in SECTIONS:
                raise ConfigError("unknown section", name, lines.get(name))
            for key, v in value.items():
                dotted = f"{name}.{key}"
                _assign(cfg, dotted, v, lines.get(dotted))
        else:
            _assign(cfg, name, value, lines.get(name))
    post_validate(cfg)
    return cfg


def post_validate(cfg: RunConfig):
    e = cfg.extractor
    if e.input_size % 2**e.blocks:
        raise ConfigError(f"input_size {e.input_size} must be divisible by 2**blocks = {2**e.blocks}",
                          "extractor.input_size")
    if cfg.corpus.image_size < e.input_size:
        raise ConfigError(f"image_size {cfg.corpus.image_size} is smaller than extractor input_size {e.input_size}",
                          "corpus.image_size")
    if cfg.memory.enabled and cfg.memory.lam > 0 and cfg.memory.K < 2:
        raise ConfigError("decorrelation loss needs K >= 2 (or lam = 0)", "memory.K")


def parse_config(path=None) -> RunConfig:
    """Load a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text())

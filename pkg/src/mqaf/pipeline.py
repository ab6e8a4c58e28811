"""End-to-end experiment: generate the corpus, train on some references, evaluate on the rest."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .imaging import CorpusManifest, generate_corpus
from .model import ModelState, NoReferenceModeUnavailable
from .training import TrainResult, checkpoint_hash, train


def held_out_split(manifest: CorpusManifest, fraction: float) -> tuple[CorpusManifest, CorpusManifest]:
    """(train, test) by reference id; the last ``round(fraction * R)`` references are held out."""
    refs = manifest.ref_ids()
    n_test = int(round(fraction * len(refs)))
    if fraction > 0 and len(refs) >= 2:
        n_test = min(max(n_test, 1), len(refs) - 1)
    test = set(refs[len(refs) - n_test :]) if n_test else set()
    return manifest.subset(lambda s: s.ref_id not in test), manifest.subset(lambda s: s.ref_id in test)


@dataclass
class ExperimentResult:
    state: ModelState
    train_result: TrainResult
    reports: dict[str, EvalReport] = field(default_factory=dict)
    checkpoint_hash: str = ""
    train_seconds: float = 0.0
    test_refs: list[str] = field(default_factory=list)

    @property
    def nr_available(self) -> bool:
        return "NR" in self.reports


def run_experiment(cfg: RunConfig, workdir, manifest: Optional[CorpusManifest] = None) -> ExperimentResult:
    """Train with ``cfg`` and report FR and (when defined) NR correlations on held-out references."""
    if manifest is None:
        manifest = generate_corpus(cfg.corpus_config(), cfg.seed, Path(workdir) / "corpus")
    train_m, test_m = held_out_split(manifest, cfg.evaluation.test_fraction)
    if not test_m.samples:
        raise ValueError("no held-out references; set evaluation.test_fraction > 0")
    t0 = time.perf_counter()
    result = train(train_m, cfg.train_config(), cfg.model_config())
    seconds = time.perf_counter() - t0
    reports = {"FR": evaluate(result.state, test_m, "FR")}
    try:
        reports["NR"] = evaluate(result.state, test_m, "NR")
    except NoReferenceModeUnavailable:
        pass
    return ExperimentResult(result.state, result, reports, checkpoint_hash(result.state), seconds, test_m.ref_ids())

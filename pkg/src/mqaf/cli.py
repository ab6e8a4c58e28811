"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 config error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .evaluation import evaluate, gmad_csv, gmad_search, lodo_eval, model_scores, psnr_scores
from .extractor import center_crop, images_to_array
from .fusion import FR, NR, quality_score
from .imaging import CorpusError, CorpusManifest, PPMError, generate_corpus, load_image
from .model import NoReferenceModeUnavailable, score_batch
from .pipeline import held_out_split
from .training import CheckpointError, NumericalAbort, load_checkpoint, metrics_csv, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("mqaf")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML run config (defaults apply to missing keys)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key; flags win over the file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mqaf", description="Memory-driven FR/NR image quality assessment.")
    parser.add_argument("--version", action="version", version=f"mqaf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate the synthetic distortion corpus")
    _common(p)
    p.add_argument("--out", help="output directory (default: paths.corpus_dir)")

    p = sub.add_parser("train", help="train a model on a corpus")
    _common(p)
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--out", help="run directory (default: paths.out_dir)")

    p = sub.add_parser("score", help="score one distorted image (FR with --ref, NR otherwise)")
    p.add_argument("image")
    p.add_argument("--ref", help="reference image")
    p.add_argument("--checkpoint", help="model checkpoint; an untrained model with --seed otherwise")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=[FR, NR])
    p.add_argument("--out", help="directory for report.json, report.csv and scores.csv")

    p = sub.add_parser("lodo", help="leave-one-distortion-out cross-validation")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=[FR, NR])
    p.add_argument("--out")

    p = sub.add_parser("gmad", help="gMAD pair search (model vs PSNR)")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=[FR, NR])
    p.add_argument("--tolerance", type=float)
    p.add_argument("--top", type=int)
    p.add_argument("--role", choices=["defender", "attacker"], default="defender",
                   help="role of the model; PSNR takes the other role")
    p.add_argument("--out")

    p = sub.add_parser("inspect-memory", help="export the memory bank's row-cosine matrix as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")

    sub.add_parser("selftest", help="run the oracle checks")
    return parser


def load_run_config(args) -> RunConfig:
    cfg = parse_config(getattr(args, "config", None))
    for item in getattr(args, "set", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected SECTION.KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    from .config import post_validate

    post_validate(cfg)
    return cfg


def provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_manifest(path) -> CorpusManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise DataError(f"no corpus manifest at {p}")
    return CorpusManifest.load(p)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.paths.corpus_dir)
    manifest = generate_corpus(cfg.corpus_config(), cfg.seed, out)
    _write(out / "provenance.json", json.dumps(provenance(cfg), indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(manifest.samples)} distorted samples and {len(manifest.references)} references to {out}")
    print(f"manifest hash {manifest.content_hash()}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.corpus or cfg.paths.corpus_dir)
    train_m, test_m = held_out_split(manifest, cfg.evaluation.test_fraction)
    result = train(train_m, cfg.train_config(), cfg.model_config())
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.state.meta.update(provenance=provenance(cfg), run_config=cfg.to_toml())
    save_checkpoint(result.state, out / "model.ckpt")
    _write(out / "metrics.csv", metrics_csv(result.logs))
    prov = provenance(cfg) | {
        "train_refs": result.train_refs,
        "val_refs": result.val_refs,
        "test_refs": test_m.ref_ids(),
        "best_epoch": result.best_epoch,
    }
    _write(out / "provenance.json", json.dumps(prov, indent=1, sort_keys=True) + "\n")
    _write(out / "config.toml", cfg.to_toml())
    digest = hashlib.sha256((out / "model.ckpt").read_bytes()).hexdigest()
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'model.ckpt'} sha256 {digest}")
    return EXIT_OK


def _crop_for(state, img):
    size = state.config.input_size
    try:
        return center_crop(img.pixels, size)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_score(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        from .model import init_model

        state = init_model(cfg.model_config(), seed=cfg.seed)
    dist = _crop_for(state, load_image(args.image))
    ref = _crop_for(state, load_image(args.ref)) if args.ref else None
    dtype = state.extractor.kernels[0].dtype
    res = score_batch(state, images_to_array([dist], dtype), None if ref is None else images_to_array([ref], dtype))
    if ref is None:
        result = quality_score(res.s_dist.values[0])
    elif res.alpha is None:
        # memory branch disabled: the score is s_ref alone
        s_ref = float(res.s_ref.values[0])
        print(f"mode=FR q={min(max(s_ref, 0.0), 1.0):.6f} s_ref={s_ref:.6f} memory=off")
        return EXIT_OK
    else:
        result = quality_score(res.s_dist.values[0], res.s_ref.values[0], res.alpha.values[0])
    print(result.line())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.corpus or cfg.paths.corpus_dir)
    _, test_m = held_out_split(manifest, cfg.evaluation.test_fraction)
    subset = test_m if test_m.samples else manifest
    mode = args.mode or cfg.evaluation.mode
    report = evaluate(state, subset, mode=mode, split="test" if test_m.samples else "all")
    print(report.summary())
    for t, st in sorted(report.per_type.items()):
        print(f"  {t:18s} PLCC={st.plcc if st.plcc is None else round(st.plcc, 4)} "
              f"SRCC={st.srcc if st.srcc is None else round(st.srcc, 4)} n={st.n}")
    if report.skipped:
        print(f"skipped {report.skipped} samples (missing or unreadable files)")
    if args.out:
        out = Path(args.out)
        _write(out / "report.json", report.to_json())
        _write(out / "report.csv", report.to_csv())
        _write(out / "scores.csv", report.scores_csv())
        _write(out / "provenance.json", json.dumps(provenance(cfg), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_lodo(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.corpus or cfg.paths.corpus_dir)
    mode = args.mode or cfg.evaluation.mode

    def factory(train_manifest):
        return train(train_manifest, cfg.train_config(), cfg.model_config()).state

    folds = lodo_eval(factory, manifest, mode=mode)
    for f in folds:
        print(f.report.summary())
    if args.out:
        out = Path(args.out)
        _write(out / "lodo.json", json.dumps([f.report.to_dict() for f in folds], indent=1, sort_keys=True) + "\n")
        _write(out / "lodo.csv", "".join(f.report.to_csv() if i == 0 else f.report.to_csv().split("\n", 1)[1]
                                         for i, f in enumerate(folds)))
        _write(out / "provenance.json", json.dumps(provenance(cfg), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gmad(args, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.corpus or cfg.paths.corpus_dir)
    mode = args.mode or cfg.evaluation.mode
    model = model_scores(state, manifest, mode=mode)
    baseline = psnr_scores(manifest)
    tol = cfg.evaluation.gmad_tolerance if args.tolerance is None else args.tolerance
    top = cfg.evaluation.gmad_top if args.top is None else args.top
    if args.role == "defender":
        pairs = gmad_search(model, baseline, tol, top)
    else:
        pairs = gmad_search(baseline, model, tol, top)
    text = gmad_csv(pairs)
    if args.out:
        _write(Path(args.out) / "gmad.csv", text)
        _write(Path(args.out) / "provenance.json", json.dumps(provenance(cfg), indent=1, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect_memory(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if state.bank is None:
        raise DataError("checkpoint has no memory bank")
    cos = state.bank.cosine_matrix()
    lines = [",".join(f"unit{i}" for i in range(cos.shape[0]))]
    lines += [",".join(repr(float(v)) for v in row) for row in cos]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest() -> int:
    from .selftest import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "lodo": cmd_lodo,
    "gmad": cmd_gmad,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest()
        if args.command == "inspect-memory":
            return cmd_inspect_memory(args)
        cfg = load_run_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_toml())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoReferenceModeUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, PPMError, CorpusError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

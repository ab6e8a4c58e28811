import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqaf.evaluation import (
    DegenerateInputError,
    build_report,
    evaluate,
    gmad_csv,
    gmad_search,
    lodo_eval,
    lodo_splits,
    model_scores,
    plcc,
    psnr_scores,
    SampleScore,
    srcc,
)
from mqaf.model import init_model
from mqaf.selftest import gmad_bruteforce, plcc_transcription, srcc_rank_pearson


def test_plcc_affine():
    x = np.arange(10.0)
    assert plcc(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_plcc_vs_transcription():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert abs(plcc(x, y) - plcc_transcription(list(x), list(y))) <= 1e-12


def test_plcc_degenerate():
    with pytest.raises(DegenerateInputError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        plcc([1], [2])


def test_srcc_monotone():
    x = np.random.default_rng(1).normal(size=30)
    assert srcc(x, np.exp(x)) == 1.0
    assert srcc(x, x**3) == 1.0


def test_srcc_hand_case():
    assert srcc([1, 2, 3], [3, 1, 2]) == pytest.approx(-0.5, abs=1e-15)


def test_srcc_ties_vs_rank_pearson():
    assert abs(srcc([1, 1, 2], [1, 2, 3]) - srcc_rank_pearson([1, 1, 2], [1, 2, 3])) <= 1e-12


def test_srcc_degenerate_ranks():
    with pytest.raises(DegenerateInputError):
        srcc([2, 2, 2], [1, 2, 3])


def test_closed_form_equals_rank_pearson_tie_free():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert abs(srcc(x, y) - srcc_rank_pearson(x, y)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True), st.integers(0, 2**31))
def test_srcc_invariant_under_increasing_maps(xs, seed):
    x = np.array(xs, dtype=np.float64) / 10
    y = np.random.default_rng(seed).normal(size=x.size)
    base = srcc(x, y)
    assert srcc(x**3 * 3 + 1, y) == pytest.approx(base, abs=1e-12)
    assert srcc(x, np.exp(np.clip(y, -50, 50))) == pytest.approx(base, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(-10, 10), st.integers(0, 2**31))
def test_plcc_invariant_under_positive_affine(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=12), rng.normal(size=12)
    assert plcc(a * x + b, y) == pytest.approx(plcc(x, y), abs=1e-12)


def test_report_perfect_scores():
    samples = [SampleScore(f"s{i}", "t", q, q) for i, q in enumerate([0.1, 0.3, 0.5, 0.9])]
    r = build_report("test", "FR", samples)
    assert r.plcc == pytest.approx(1.0) and r.srcc == 1.0
    assert r.per_type["t"].n == 4


def test_report_single_sample_type_has_no_correlation():
    samples = [SampleScore("a", "x", 0.1, 0.2), SampleScore("b", "y", 0.5, 0.3), SampleScore("c", "y", 0.7, 0.9)]
    r = build_report("t", "NR", samples)
    assert r.per_type["x"].srcc is None and r.per_type["x"].n == 1


def test_evaluate_deterministic_and_s_dist_shared(tiny_corpus, tiny_model_config):
    st = init_model(tiny_model_config, seed=0)
    a = evaluate(st, tiny_corpus, "FR")
    b = evaluate(st, tiny_corpus, "FR")
    assert a.to_json() == b.to_json() and a.scores_csv() == b.scores_csv()
    nr = evaluate(st, tiny_corpus, "NR")
    assert [s.s_dist for s in a.samples] == [s.s_dist for s in nr.samples]
    assert all(s.q == s.s_dist or s.s_dist < 0 or s.s_dist > 1 for s in nr.samples)
    assert a.n == len(tiny_corpus.samples)
    header = a.scores_csv().splitlines()[0]
    assert header == "sample_id,distortion_type,s_ref,s_dist,alpha,q,q_true"


def test_evaluate_missing_reference_is_skipped(tiny_corpus, tiny_model_config, tmp_path):
    import shutil

    from mqaf.imaging import CorpusManifest

    root = tmp_path / "c"
    shutil.copytree(tiny_corpus.root, root)
    (root / "ref" / "ref000.ppm").unlink()
    m = CorpusManifest.load(root / "manifest.json")
    st = init_model(tiny_model_config, seed=0)
    r = evaluate(st, m, "FR")
    n_ref0 = sum(s.ref_id == "ref000" for s in m.samples)
    assert r.skipped == n_ref0 and r.n == len(m.samples) - n_ref0
    assert evaluate(st, m, "NR").skipped == 0


def test_lodo_structure(tiny_corpus, tiny_model_config):
    seen = []

    def factory(train_manifest):
        seen.append(train_manifest.distortion_types())
        return init_model(tiny_model_config, seed=0)

    folds = lodo_eval(factory, tiny_corpus, "FR")
    assert [f.held_out for f in folds] == tiny_corpus.distortion_types()
    assert len(folds) == 5
    for f, train_types in zip(folds, seen):
        assert f.held_out not in train_types
        train_ids = {s.sample_id for s in f.train_manifest.samples}
        assert not train_ids & {s.sample_id for s in f.test_manifest.samples}
        assert f.report.split == f"lodo:{f.held_out}"


def test_lodo_needs_two_types(tiny_corpus):
    one = tiny_corpus.subset(lambda s: s.distortion_type == "gaussian-noise")
    with pytest.raises(ValueError):
        list(lodo_splits(one))


def test_lodo_duplicated_type_sanity():
    """Held-out type duplicated under another name: a model that scores by label recovers it."""
    from mqaf.imaging import CorpusManifest, CorpusSample

    samples = []
    for t in ("a", "a-copy", "b"):
        for sev in range(1, 6):
            samples.append(CorpusSample(f"{t}{sev}", "", "r", "", t, sev, 1 - (sev - 0.5) / 5))
    m = CorpusManifest(samples, 0, "h")
    splits = {t: (tr, te) for t, tr, te in lodo_splits(m)}
    tr, te = splits["a"]
    lookup = {s.severity: s.q_true for s in tr.samples if s.distortion_type == "a-copy"}
    pred = [lookup[s.severity] for s in te.samples]
    assert srcc(pred, [s.q_true for s in te.samples]) == 1.0


def test_gmad_self_competition_bound():
    rng = np.random.default_rng(3)
    d = {f"s{i}": float(v) for i, v in enumerate(rng.uniform(size=15))}
    pairs = gmad_search(d, d, tolerance=0.05, top=5)
    assert pairs and all(p.attacker_gap <= 0.05 for p in pairs)


def test_gmad_single_pair():
    pairs = gmad_search({"a": 0.5, "b": 0.51, "c": 0.9}, {"a": 10.0, "b": 30.0, "c": 0.0}, tolerance=0.02)
    assert [(p.id_a, p.id_b) for p in pairs] == [("a", "b")]
    assert pairs[0].attacker_gap == 20.0


def test_gmad_vs_bruteforce():
    rng = np.random.default_rng(4)
    ids = [f"x{i:02d}" for i in range(20)]
    d = dict(zip(ids, rng.uniform(size=20)))
    a = dict(zip(ids, rng.uniform(size=20)))
    got = [(p.id_a, p.id_b) for p in gmad_search(d, a, 0.1, 5)]
    assert got == gmad_bruteforce(d, a, 0.1, 5)


def test_gmad_ties_broken_by_ids():
    d = {k: 0.5 for k in "dcba"}
    a = {"a": 0.0, "b": 1.0, "c": 0.0, "d": 1.0}
    got = [(p.id_a, p.id_b) for p in gmad_search(d, a, 0.0, top=10)]
    assert got[:4] == [("a", "b"), ("a", "d"), ("b", "c"), ("c", "d")]


def test_gmad_nothing_within_tolerance():
    assert gmad_search({"a": 0.0, "b": 1.0}, {"a": 0.0, "b": 1.0}, tolerance=0.1) == []


def test_gmad_on_corpus(tiny_corpus, tiny_model_config):
    st = init_model(tiny_model_config, seed=0)
    model = model_scores(st, tiny_corpus)
    base = psnr_scores(tiny_corpus)
    assert set(model) == set(base)
    text = gmad_csv(gmad_search(model, base, 0.01, 3))
    assert text.startswith("id_a,id_b,defender_gap,attacker_gap")

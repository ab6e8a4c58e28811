import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mqaf import numerics as nx
from mqaf.fusion import FR, NR, FusionError, adaptive_weight, alpha_target, init_awn, quality_score, total_loss
from mqaf.matching import MemoryBank


def test_awn_starts_at_half():
    awn = init_awn(feature_dim=4, hidden=8, seed=0)
    rng = np.random.default_rng(0)
    a = adaptive_weight(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), awn)
    np.testing.assert_array_equal(a.values, 0.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-50, 50)), arrays(np.float64, (2, 4), elements=st.floats(-50, 50)))
def test_awn_output_in_open_interval(f_ref, f_dist):
    awn = init_awn(feature_dim=4, hidden=8, seed=1, dtype=np.float64)
    awn.w2.values[:] = np.random.default_rng(0).normal(size=awn.w2.shape) * 0.1
    a = adaptive_weight(f_ref, f_dist, awn).values
    assert np.all((a > 0) & (a < 1))


def test_alpha_gradient_does_not_reach_features():
    awn = init_awn(feature_dim=3, hidden=4, seed=0, dtype=np.float64)
    awn.w2.values[:] = 1.0
    f_ref = nx.Tensor(np.ones((1, 3)), requires_grad=True)
    f_dist = nx.Tensor(np.full((1, 3), 2.0), requires_grad=True)
    nx.sum(adaptive_weight(f_ref, f_dist, awn)).backward()
    assert f_ref.grad is None and f_dist.grad is None
    assert np.any(awn.w1.grad != 0)


def test_alpha_target_symmetric():
    assert alpha_target(0.7, 0.3, 0.5) == pytest.approx(0.5)


def test_alpha_target_as_printed():
    assert alpha_target(s_ref=0.1, s_dist=0.5, q_true=0.5) < 0.5
    assert alpha_target(s_ref=0.1, s_dist=0.5, q_true=0.5, inverted=True) > 0.5


def test_alpha_target_value():
    want = 1.0 / (1.0 + math.exp(0.4))
    assert alpha_target(s_ref=0.9, s_dist=0.5, q_true=0.5) == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(0.4013, abs=1e-4)


def test_fusion_cases():
    assert quality_score(0.3, s_ref=0.9, alpha=0.0).q == 0.3
    assert quality_score(0.3, s_ref=0.9, alpha=1.0).q == 0.9
    assert quality_score(0.4, s_ref=0.8, alpha=0.25).q == pytest.approx(0.5)


def test_nr_score_is_s_dist_bitwise():
    s = np.float32(0.123456789)
    r = quality_score(s)
    assert r.mode == NR and r.q == float(s)
    assert "mode=NR" in r.line()


def test_nr_forbids_alpha_fr_needs_it():
    with pytest.raises(FusionError):
        quality_score(0.2, alpha=0.5, mode=NR)
    with pytest.raises(FusionError):
        quality_score(0.2, s_ref=0.5, mode=FR)


def test_reported_q_is_clamped():
    r = quality_score(1.3)
    assert r.q == 1.0 and r.q_raw == 1.3


def test_loss_perfect_predictions():
    units = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]])
    bank = MemoryBank(nx.Tensor(units))
    q = np.array([0.3, 0.7])
    out = total_loss(nx.Tensor(q), q, nx.Tensor([0.4, 0.6]), np.array([0.4, 0.6]), bank, lam=0.1).as_floats()
    assert out["l_pre"] == 0.0 and out["l_alpha"] == 0.0
    assert out["l_total"] == pytest.approx(0.1 * out["l_memory"], abs=1e-15)


def test_loss_nr_batch_has_no_alpha_term():
    out = total_loss(nx.Tensor([0.2]), [0.5], None, None, None, lam=0.0)
    assert out.l_alpha.item() == 0.0


def test_loss_arithmetic():
    out = total_loss(nx.Tensor([0.6]), [0.5], nx.Tensor([0.4]), [0.6], None, lam=0.0)
    assert out.l_total.item() == pytest.approx(0.05)


def test_loss_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        total_loss(nx.Tensor([0.6, 0.2]), [0.5], None, None, None)

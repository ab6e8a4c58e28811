import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mqaf import numerics as nx
from mqaf.fusion import AwnParams, adaptive_weight, alpha_target, total_loss
from mqaf.matching import MemoryBank, decorrelation_loss, memory_match, reference_match
from mqaf.selftest import gradcheck, gradient_suite


def t(x, grad=False):
    return nx.Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


def test_matmul_identity():
    a = t([[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(a, t(np.eye(2))).values, [[1, 2], [3, 4]])


def test_global_avg_pool_mean():
    m = t([[[1, 2], [3, 4]]])  # 1 x 2 x 2
    np.testing.assert_array_equal(nx.global_avg_pool(m).values, [2.5])


def test_l2_normalize_345():
    np.testing.assert_allclose(nx.l2_normalize(t([3, 4])).values, [0.6, 0.8])


def test_l2_normalize_zero_vector_stays_zero():
    x = t([0.0, 0.0], grad=True)
    y = nx.l2_normalize(x)
    np.testing.assert_array_equal(y.values, [0, 0])
    nx.sum(y).backward()
    assert np.all(np.isfinite(x.grad))


def test_polynomial_derivative():
    x = t(3.0, grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_norm_gradient():
    x = t([3.0, 4.0], grad=True)
    nx.norm(x).backward()
    np.testing.assert_allclose(x.grad, [0.6, 0.8])


def test_norm_gradient_at_zero_is_zero():
    x = t([0.0, 0.0], grad=True)
    nx.norm(x).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_decorrelation_gradient_vs_finite_differences(rng):
    err = gradcheck(lambda a: decorrelation_loss(a[0]), [rng.normal(size=(4, 6))], h=1e-5)
    assert err < 1e-4


def test_detach_blocks_gradient():
    x, w = t([1.5, -2.0], grad=True), t([0.3, 0.7], grad=True)
    nx.sum(nx.detach(x) * w).backward()
    assert x.grad is None or np.all(x.grad == 0)
    np.testing.assert_array_equal(w.grad, [1.5, -2.0])


def test_alpha_loss_only_reaches_awn(rng):
    """Build l_alpha on detached scores and features: only AWN params get gradient."""
    f_ref, f_dist = t(rng.normal(size=(2, 4)), grad=True), t(rng.normal(size=(2, 4)), grad=True)
    bank = t(rng.normal(size=(3, 4)), grad=True)
    awn = AwnParams(t(rng.normal(size=(8, 5)), True), t(np.zeros(5), True), t(rng.normal(size=(5, 1)), True),
                    t(np.zeros(1), True))
    s_ref = reference_match(nx.detach(f_ref), nx.detach(f_dist)).s_ref
    fmap = nx.l2_normalize(t(rng.normal(size=(2, 4, 3, 3))), axis=1)
    s_dist, _ = memory_match(fmap, MemoryBank(nx.detach(bank)))
    alpha = adaptive_weight(f_ref, f_dist, awn)
    tgt = alpha_target(s_ref.values, s_dist.values, np.array([0.3, 0.8]))
    losses = total_loss(nx.detach(s_ref), np.array([0.3, 0.8]), alpha, tgt, None, lam=0.0)
    losses.l_alpha.backward()
    for leaf in (f_ref, f_dist, bank):
        assert leaf.grad is None or np.all(leaf.grad == 0)
    assert np.any(awn.w2.grad != 0)


def test_backward_rejects_non_scalar():
    x = t([1.0, 2.0], grad=True)
    with pytest.raises(nx.ShapeError):
        (x * 2).backward()


def test_shape_error_names_op_and_shapes():
    with pytest.raises(nx.ShapeError) as exc:
        nx.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    assert exc.value.op == "matmul"
    assert (2, 3) in exc.value.shapes


def test_gradient_accumulates_over_reuse():
    x = t(2.0, grad=True)
    (x * x + x).backward()
    assert x.grad == pytest.approx(5.0)


def test_conv2d_1x1_matches_loop(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(6, 3, 1, 1))
    b = rng.normal(size=6)
    got = nx.conv2d(t(x), t(w), t(b)).values
    want = np.zeros((2, 6, 4, 5))
    for n in range(2):
        for o in range(6):
            for i in range(4):
                for j in range(5):
                    want[n, o, i, j] = sum(x[n, c, i, j] * w[o, c, 0, 0] for c in range(3)) + b[o]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_3x3_matches_loop(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    got = nx.conv2d(t(x), t(w), padding=1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 2, 4, 4))
    for o in range(2):
        for i in range(4):
            for j in range(4):
                want[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((2, 2, 3, 3))))


def test_float32_stays_float32():
    a = nx.Tensor(np.ones(3, dtype=np.float32))
    assert (a * 2.0).dtype == np.float32
    assert nx.sigmoid(a).dtype == np.float32


def test_sigmoid_does_not_overflow():
    with np.errstate(over="raise"):
        v = nx.sigmoid(t([-1000.0, 0.0, 1000.0])).values
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0])


def test_primitive_catalog_is_covered_by_gradient_suite():
    from mqaf.selftest import _gradient_cases

    cases = set(_gradient_cases())
    missing = [p for p in nx.primitive_forward_set() if p not in cases]
    assert missing == []


def test_gradient_suite_small():
    errs = gradient_suite(trials=3, seed=7)
    assert max(errs.values()) < 1e-4


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_mul_commute(a, b):
    np.testing.assert_array_equal((t(a) + t(b)).values, (t(b) + t(a)).values)
    np.testing.assert_array_equal((t(a) * t(b)).values, (t(b) * t(a)).values)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_l2_normalize_unit_or_zero(a):
    n = np.linalg.norm(nx.l2_normalize(t(a), axis=0).values, axis=0)
    assert np.all((np.abs(n - 1) < 1e-9) | (n == 0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-3, 3)))
def test_sum_gradient_is_ones(a):
    x = t(a, grad=True)
    nx.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(a))

"""Executable oracle checks, run by ``mqaf selftest``.

Each check compares an implementation against an independent route: finite
differences, brute-force loops, or a hand transcription of the formula.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .evaluation import gmad_search, plcc, srcc
from .matching import MemoryBank, decorrelation_loss, memory_match, reference_match
from .training import AdamState, adam_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def gradcheck(build: Callable[[list[nx.Tensor]], nx.Tensor], inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    tensors = [nx.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    build(tensors).backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = [nx.Tensor(np.array(a, dtype=np.float64)) for a in inputs]
            args[k] = nx.Tensor(v)
            return build(args).item()

        num = nx.numerical_grad(f, np.array(x, dtype=np.float64), h=h)
        got = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(got, num))
    return worst


# ---------------------------------------------------------------------------
# brute-force / transcription oracles


def memory_match_bruteforce(fmap: np.ndarray, units: np.ndarray) -> float:
    d, h, w = fmap.shape
    k = units.shape[0]
    m = [0.0] * k
    for kk in range(k):
        un = math.sqrt(sum(float(units[kk, c]) ** 2 for c in range(d)))
        for y in range(h):
            for x in range(w):
                dot = sum(float(fmap[c, y, x]) * float(units[kk, c]) for c in range(d))
                m[kk] += dot / un
        m[kk] /= h * w
    return math.sqrt(sum(v * v for v in m)) / math.sqrt(k)


def decorrelation_transcription(units: np.ndarray, eps: float) -> float:
    k, d = units.shape
    rows = [[float(v) for v in r] for r in units]
    means = [sum(r) / d for r in rows]
    c = [[sum((rows[i][t] - means[i]) * (rows[j][t] - means[j]) for t in range(d)) / (d - 1) for j in range(k)]
         for i in range(k)]
    fro = math.sqrt(sum(c[i][j] ** 2 for i in range(k) for j in range(k)))
    return fro - sum(math.sqrt(c[i][i] ** 2 + eps) for i in range(k))


def plcc_transcription(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return num / (math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y)))


def average_ranks(v) -> list[float]:
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def srcc_rank_pearson(x, y) -> float:
    return plcc_transcription(average_ranks(list(x)), average_ranks(list(y)))


def adam_hand(x0: float, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8) -> float:
    """Adam on f(x) = x^2, written out scalar by scalar."""
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x


def gmad_bruteforce(defender: dict, attacker: dict, tolerance: float, top: int) -> list[tuple]:
    ids = sorted(defender)
    cand = []
    for a, b in itertools.combinations(ids, 2):
        dg = abs(defender[a] - defender[b])
        if dg <= tolerance:
            cand.append((-abs(attacker[a] - attacker[b]), a, b))
    cand.sort()
    return [(a, b) for _, a, b in cand[:top]]


# ---------------------------------------------------------------------------
# checks


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _gradient_cases():
    """name -> (build(tensors) -> scalar, draw(rng) -> list of input arrays).

    Inputs are drawn away from kinks (relu at 0, ties in max/min) so central
    differences are meaningful.
    """
    from .fusion import AwnParams, adaptive_weight, total_loss

    w = lambda shape: np.random.default_rng(abs(hash(shape)) % 2**32).normal(size=shape)  # fixed readout weights

    def readout(t):
        return nx.sum(t * w(t.shape))

    return {
        "add": (lambda t: readout(t[0] + t[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "sub": (lambda t: readout(t[0] - t[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
        "mul": (lambda t: readout(t[0] * t[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
        "div": (lambda t: readout(t[0] / t[1]), lambda r: [r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.5)]),
        "matmul": (lambda t: readout(nx.matmul(t[0], t[1])), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
        "conv2d": (lambda t: readout(nx.conv2d(t[0], t[1], t[2], padding=1)),
                   lambda r: [r.normal(size=(2, 2, 5, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
        "relu": (lambda t: readout(nx.relu(t[0])), lambda r: [_away_from_zero(r, (3, 4), 0.05)]),
        "avg_pool2d": (lambda t: readout(nx.avg_pool2d(t[0], 2)), lambda r: [r.normal(size=(2, 3, 4, 6))]),
        "global_avg_pool": (lambda t: readout(nx.global_avg_pool(t[0])), lambda r: [r.normal(size=(2, 3, 4, 5))]),
        "norm": (lambda t: readout(nx.norm(t[0], axis=1)), lambda r: [r.normal(size=(3, 5))]),
        "sum": (lambda t: readout(nx.sum(t[0], axis=0, keepdims=True)), lambda r: [r.normal(size=(3, 4))]),
        "mean": (lambda t: readout(nx.mean(t[0], axis=1)), lambda r: [r.normal(size=(3, 4))]),
        "sqrt": (lambda t: readout(nx.sqrt(t[0], eps=1e-8)), lambda r: [r.uniform(0.2, 3.0, (3, 4))]),
        "abs_smooth": (lambda t: readout(nx.abs_smooth(t[0])), lambda r: [_away_from_zero(r, (3, 4), 0.05)]),
        "exp": (lambda t: readout(nx.exp(t[0])), lambda r: [r.normal(size=(3, 4))]),
        "sigmoid": (lambda t: readout(nx.sigmoid(t[0])), lambda r: [3 * r.normal(size=(3, 4))]),
        "concat": (lambda t: readout(nx.concat([t[0], t[1]], axis=1)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "l2_normalize": (lambda t: readout(nx.l2_normalize(t[0], axis=0)), lambda r: [r.normal(size=(4, 3, 2))]),
        "covariance": (lambda t: readout(nx.covariance(t[0])), lambda r: [r.normal(size=(3, 5))]),
        "frobenius_norm": (lambda t: nx.frobenius_norm(t[0]), lambda r: [r.normal(size=(3, 4))]),
        "maximum": (lambda t: readout(nx.maximum(t[0], t[0] + t[1])), lambda r: [r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.05)]),
        "minimum": (lambda t: readout(nx.minimum(t[0], t[0] + t[1])), lambda r: [r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.05)]),
        "diagonal": (lambda t: readout(nx.diagonal(t[0])), lambda r: [r.normal(size=(4, 4))]),
        "transpose+reshape+getitem": (lambda t: readout(nx.reshape(nx.transpose(t[0])[1:, ::2], (-1,))),
                                      lambda r: [r.normal(size=(4, 3))]),
        # composites
        "reference_match": (lambda t: reference_match(t[0], t[1]).s_ref,
                            lambda r: [r.uniform(0.1, 1.0, 6), r.uniform(0.1, 1.0, 6)]),
        "memory_match": (lambda t: memory_match(nx.l2_normalize(t[0], axis=0), MemoryBank(t[1]))[0],
                         lambda r: [r.normal(size=(4, 3, 3)), r.normal(size=(3, 4))]),
        "decorrelation_loss": (lambda t: decorrelation_loss(t[0]), lambda r: [r.normal(size=(4, 6))]),
        # feature inputs are detached by design, so only the AWN parameters are checked
        "adaptive_weight": (lambda t: readout(adaptive_weight(w((3, 4)), w((3, 4)) + 0.5, AwnParams(*t))),
                            lambda r: [r.normal(size=(8, 5)), r.normal(size=(5,)), r.normal(size=(5, 1)),
                                       r.normal(size=(1,))]),
        "total_loss": (lambda t: total_loss(nx.sigmoid(t[0]), np.array([0.2, 0.7, 0.5]), nx.sigmoid(t[1]),
                                            np.array([0.4, 0.5, 0.6]), MemoryBank(t[2]), lam=0.5).l_total,
                       lambda r: [r.normal(size=3), r.normal(size=3), r.normal(size=(3, 5))]),
    }


def gradient_suite(trials: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation over ``trials`` random draws (f64)."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (build, draw) in _gradient_cases().items():
        out[name] = max(gradcheck(build, draw(rng)) for _ in range(trials))
    return out


def check_gradients(trials: int = 100, seed: int = 0) -> CheckResult:
    errs = gradient_suite(trials, seed)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return CheckResult(f"gradients vs central differences ({len(errs)} ops x {trials})", worst < 1e-4,
                       f"max rel err {worst:.2e} ({name})")


def check_memory_match(trials: int = 5, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d, h, w, k = rng.integers(2, 9), rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 5)
        raw = rng.normal(size=(d, h, w))
        fmap = raw / np.linalg.norm(raw, axis=0, keepdims=True)
        units = rng.normal(size=(k, d))
        got = memory_match(nx.Tensor(fmap), MemoryBank(nx.Tensor(units)))[0].item()
        worst = max(worst, abs(got - memory_match_bruteforce(fmap, units)))
    return CheckResult("memory_match vs brute force", worst <= 1e-10, f"max abs err {worst:.2e}")


def check_decorrelation(trials: int = 5, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        units = rng.normal(size=(4, 6))
        got = decorrelation_loss(nx.Tensor(units), eps=1e-8).item()
        worst = max(worst, abs(got - decorrelation_transcription(units, 1e-8)))
    return CheckResult("decorrelation_loss vs transcription", worst <= 1e-12, f"max abs err {worst:.2e}")


def check_correlations(trials: int = 5, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x, y = rng.normal(size=50), rng.normal(size=50)
        worst = max(worst, abs(plcc(x, y) - plcc_transcription(list(x), list(y))))
        worst = max(worst, abs(srcc(x, y) - srcc_rank_pearson(x, y)))
        xt, yt = rng.integers(0, 5, 30).astype(float), rng.integers(0, 5, 30).astype(float)
        worst = max(worst, abs(srcc(xt, yt) - srcc_rank_pearson(xt, yt)))
    return CheckResult("plcc/srcc vs direct formulas", worst <= 1e-12, f"max abs err {worst:.2e}")


def check_adam() -> CheckResult:
    x = np.array([1.0])
    st = AdamState()
    for _ in range(3):
        adam_step([x], [2.0 * x.copy()], st, lr=0.1)
    err = abs(float(x[0]) - adam_hand(1.0, 0.1, 3))
    return CheckResult("adam vs hand transcription", err <= 1e-12, f"abs err {err:.2e}")


def check_gmad(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    ids = [f"s{i:02d}" for i in range(20)]
    d = dict(zip(ids, rng.uniform(size=20)))
    a = dict(zip(ids, rng.uniform(size=20)))
    got = [(p.id_a, p.id_b) for p in gmad_search(d, a, tolerance=0.1, top=5)]
    want = gmad_bruteforce(d, a, 0.1, 5)
    return CheckResult("gmad_search vs brute force", got == want, f"{len(got)} pairs")


def run_all() -> list[CheckResult]:
    return [
        check_gradients(),
        check_memory_match(),
        check_decorrelation(),
        check_correlations(),
        check_adam(),
        check_gmad(),
    ]

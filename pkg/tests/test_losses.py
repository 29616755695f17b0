import itertools
import math
from decimal import Decimal, getcontext
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parco import numerics as nx
from parco.errors import DataError, NumericalError
from parco.losses import (CEDConfig, apply_ced_over_utterance, asr_nll, ced_loss, ctc_loss,
                          ctc_min_frames, entity_loss, total_loss)
from parco.numerics import DiffArray, Tape, grad_check


@lru_cache(maxsize=None)
def _collapsed_paths(M, C, blank=0):
    """All C**M frame paths and their collapsed label sequences."""
    paths = np.array(list(itertools.product(range(C), repeat=M)), dtype=np.int64)
    labels = []
    for p in paths:
        out, prev = [], None
        for x in p:
            if x != prev and x != blank:
                out.append(int(x))
            prev = x
        labels.append(tuple(out))
    return paths, labels


def ctc_by_enumeration(logits, ref):
    M, C = logits.shape
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    paths, labels = _collapsed_paths(M, C)
    keep = np.array([lab == tuple(ref) for lab in labels])
    scores = lp[np.arange(M)[None, :], paths[keep]].sum(axis=1)
    m = scores.max()
    return -(m + np.log(np.exp(scores - m).sum()))


def random_ctc_instances(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        M = int(rng.integers(1, 7))
        Vp = int(rng.integers(1, 5))
        ref = [int(x) for x in rng.integers(1, Vp + 1, size=int(rng.integers(0, 4)))]
        if ctc_min_frames(ref) > M:
            continue
        out.append((rng.normal(scale=2.0, size=(M, Vp + 1)), ref))
    return out


def test_ctc_matches_enumeration_200_instances():
    worst = 0.0
    for logits, ref in random_ctc_instances(200, seed=0):
        got = ctc_loss(logits[None], [ref]).value[0]
        worst = max(worst, abs(got - ctc_by_enumeration(logits, ref)))
    assert worst < 1e-8


def test_ctc_batched_equals_single():
    inst = random_ctc_instances(6, seed=1)
    M = max(x.shape[0] for x, _ in inst)
    C = max(x.shape[1] for x, _ in inst)
    batch = np.zeros((len(inst), M, C))
    for r, (x, _) in enumerate(inst):
        # classes beyond an instance's own are given -inf-like mass so probabilities match
        batch[r, :x.shape[0], :x.shape[1]] = x
        batch[r, :, x.shape[1]:] = -1e3
    got = ctc_loss(batch, [ref for _, ref in inst], [x.shape[0] for x, _ in inst]).value
    for r, (x, ref) in enumerate(inst):
        assert got[r] == pytest.approx(ctc_by_enumeration(x, ref), abs=1e-8)


def test_ctc_single_frame():
    logits = np.array([[0.3, -1.0, 2.0]])
    lp = logits - np.log(np.exp(logits).sum())
    assert ctc_loss(logits[None], [[2]]).value[0] == pytest.approx(-lp[0, 2], abs=1e-14)


def test_ctc_gradient_and_infeasible():
    rng = np.random.default_rng(2)
    x = DiffArray(rng.standard_normal((2, 5, 4)), requires_grad=True)
    assert grad_check(lambda: nx.sum(ctc_loss(x, [[1, 2, 2], [3]], [5, 4])), [x]) < 1e-6
    with pytest.raises(DataError):
        ctc_loss(np.zeros((1, 2, 3)), [[1, 1]])


def test_asr_nll_cases():
    V, N = 5, 3
    onehot = np.full((N, V), -np.inf)
    onehot[np.arange(N), [1, 2, 4]] = 0.0
    assert asr_nll(onehot, [1, 2, 4]).item() == 0.0
    uniform = np.full((N, V), -np.log(V))
    assert asr_nll(uniform, [0, 1, 2]).item() == pytest.approx(N * np.log(V), abs=1e-12)
    with pytest.raises(Exception):
        asr_nll(uniform, [0, 1])
    rng = np.random.default_rng(3)
    z = DiffArray(rng.standard_normal((N, V)), requires_grad=True)
    assert grad_check(lambda: asr_nll(nx.log_softmax(z), [0, 3, 3]), [z]) < 1e-6


def test_entity_loss_cases():
    beta = [1, 0, 0, 2, 0, 0, 5, 0, 0, 0]
    L1 = 6
    s = np.full((len(beta), L1), 1.0 / L1)
    assert entity_loss(s, beta).item() == pytest.approx(len(beta) * math.log(L1), abs=1e-12)
    onehot = np.zeros((len(beta), L1))
    onehot[np.arange(len(beta)), beta] = 1.0
    assert entity_loss(onehot, beta).item() == 0.0
    with pytest.raises(DataError):
        entity_loss(s, [7] + beta[1:])
    rng = np.random.default_rng(4)
    z = DiffArray(rng.standard_normal((len(beta), L1)), requires_grad=True)
    assert grad_check(lambda: entity_loss(nx.softmax(z), beta), [z]) < 1e-6


def test_entity_loss_depends_only_on_target_mass():
    rng = np.random.default_rng(5)
    s = rng.dirichlet(np.ones(4), size=3)
    beta = [2, 0, 1]
    base = entity_loss(s, beta).item()
    t = s.copy()
    for n, b in enumerate(beta):
        others = [j for j in range(4) if j != b]
        t[n, others] = rng.dirichlet(np.ones(3)) * (1 - s[n, b])
    assert entity_loss(t, beta).item() == pytest.approx(base, abs=1e-12)


def ced_by_decimal(D, pos, negs, tau):
    getcontext().prec = 50

    def cos(a, b):
        a = [Decimal(float(x)) for x in a]
        b = [Decimal(float(x)) for x in b]
        return sum(x * y for x, y in zip(a, b)) / (sum(x * x for x in a).sqrt() * sum(y * y for y in b).sqrt())

    t = Decimal(tau)
    num = (cos(D, pos) / t).exp()
    den = num + sum(((cos(D, n) / t).exp() for n in negs), Decimal(0))
    return float(-(num / den).ln())


@pytest.mark.parametrize("tau", [0.1, 1.0])
def test_ced_closed_forms(tau):
    cfg = CEDConfig(tau)
    rng = np.random.default_rng(6)
    D, P = rng.standard_normal(8), rng.standard_normal(8)
    assert abs(ced_loss(D, P, [], cfg).item()) < 1e-12
    # reflect P through the axis of D: same cosine with D, different vector
    u = D / np.linalg.norm(D)
    Q = 2 * (P @ u) * u - P
    assert ced_loss(D, P, [Q], cfg).item() == pytest.approx(math.log(2), abs=1e-10)


def test_ced_vs_high_precision_and_gradient():
    rng = np.random.default_rng(7)
    for tau in (0.1, 0.5, 1.0):
        D, P = rng.standard_normal(6), rng.standard_normal(6)
        negs = [rng.standard_normal(6) for _ in range(3)]
        got = ced_loss(D, P, negs, CEDConfig(tau)).item()
        assert abs(got - ced_by_decimal(D, P, negs, tau)) < 1e-10
    d = DiffArray(rng.standard_normal(6), requires_grad=True, name="D")
    p = DiffArray(rng.standard_normal(6), requires_grad=True, name="P")
    n = DiffArray(rng.standard_normal(6), requires_grad=True, name="N")
    assert grad_check(lambda: ced_loss(d, p, [n], CEDConfig(0.1)), [d, p, n]) < 1e-4


def test_ced_tends_to_zero_with_opposite_negatives():
    D = np.array([1.0, 0.0])
    assert ced_loss(D, D, [-D, -D], CEDConfig(0.1)).item() < 1e-8


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.floats(0.05, 2.0))
def test_ced_nonnegative(dv, nv, tau):
    D, Nv = np.array(dv), np.array(nv)
    if np.linalg.norm(D) < 1e-3 or np.linalg.norm(Nv) < 1e-3:
        return
    P = D + 0.1
    if np.linalg.norm(P) < 1e-3:
        return
    assert ced_loss(D, P, [Nv], CEDConfig(tau)).item() >= 0.0


def test_ced_decreasing_in_positive_similarity():
    # loss as a function of the positive cosine c: log(1 + sum exp((s_i - c)/tau))
    rng = np.random.default_rng(8)
    D = np.array([1.0, 0.0])
    negs = [rng.standard_normal(2) for _ in range(2)]
    angles = np.linspace(0.0, 3.0, 30)
    vals = [ced_loss(D, np.array([np.cos(a), np.sin(a)]), negs, CEDConfig(0.1)).item() for a in angles]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_ced_zero_norm_is_an_error():
    with pytest.raises(NumericalError):
        ced_loss(np.zeros(3), np.ones(3), [np.ones(3)])


def test_apply_ced_over_utterance():
    rng = np.random.default_rng(9)
    D = rng.standard_normal((5, 4))
    N = rng.standard_normal((6, 4))
    negs = {2: [3, 4], 5: [1]}
    cfg = CEDConfig(0.1)
    assert apply_ced_over_utterance(D, N, [0, 0, 0, 0, 0], negs, cfg).item() == 0.0
    one = apply_ced_over_utterance(D, N, [0, 2, 0, 0, 0], negs, cfg).item()
    assert one == pytest.approx(ced_loss(D[1], N[2], [N[3], N[4]], cfg).item(), abs=1e-14)
    two = apply_ced_over_utterance(D, N, [0, 2, 0, 5, 0], negs, cfg).item()
    assert two == pytest.approx(one + ced_loss(D[3], N[5], [N[1]], cfg).item(), abs=1e-13)
    with pytest.raises(DataError):
        apply_ced_over_utterance(D, N, [1, 0, 0, 0, 0], negs, cfg)


def test_total_loss_arithmetic_and_errors():
    t, br = total_loss(1.0, 1.0, 1.0, 1.0, lam=0.7)
    assert br.total == pytest.approx(3.0, abs=1e-15)
    _, br = total_loss(2.0, 5.0, 0.0, 0.0, lam=1.0)
    assert br.total == 2.0
    with pytest.raises(NumericalError, match="ctc"):
        total_loss(1.0, float("nan"), 1.0, 1.0)
    assert '"step": 3' in br.to_json(step=3)


def test_total_backward_is_weighted_sum():
    rng = np.random.default_rng(10)
    x = DiffArray(rng.standard_normal(4), requires_grad=True)
    parts = [lambda: nx.sum(nx.mul(x, x)), lambda: nx.sum(nx.tanh(x)),
             lambda: nx.logsumexp(x), lambda: nx.sum(nx.exp(x))]
    weights = [0.7, 0.3, 1.0, 1.0]
    grads = []
    for f in parts:
        x.grad = None
        with Tape() as tape:
            out = f()
        tape.backward(out)
        grads.append(x.grad.copy())
    x.grad = None
    with Tape() as tape:
        tot, _ = total_loss(*(f() for f in parts), lam=0.7)
    tape.backward(tot)
    np.testing.assert_allclose(x.grad, sum(w * g for w, g in zip(weights, grads)), rtol=0, atol=1e-12)

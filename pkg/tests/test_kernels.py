import numpy as np
import pytest

from hmmgrad import _pykernels, kernels

from oracles import random_model

ck = pytest.importorskip("hmmgrad._ckernels")


@pytest.fixture(params=[(1, 5), (2, 40), (3, 17), (4, 64)])
def problem(request):
    n, T = request.param
    rng = np.random.default_rng(n * 100 + T)
    m = random_model(rng, n, 2)
    A = np.array(m.trans)
    if n > 1:
        A[0, -1] = 0.0  # exercise -inf transitions
        A[0] /= A[0].sum()
    log_b = m.log_emissions(rng.normal(size=(T, 2)))
    with np.errstate(divide="ignore"):
        return np.log(m.pi), np.log(A), log_b


def test_forward_agrees(problem):
    log_pi, log_A, log_b = problem
    a1, l1 = kernels.forward(log_pi, log_A, log_b, impl=_pykernels)
    a2, l2 = kernels.forward(log_pi, log_A, log_b, impl=ck)
    assert np.allclose(a1, a2, atol=1e-12, rtol=1e-14)
    assert np.allclose(l1, l2, atol=1e-12, rtol=1e-14)


def test_forward_step_agrees(problem):
    log_pi, log_A, log_b = problem
    prev = log_pi + log_b[0]
    a1, l1 = kernels.forward_step(prev, log_A, log_b[1 % len(log_b)], impl=_pykernels)
    a2, l2 = kernels.forward_step(prev, log_A, log_b[1 % len(log_b)], impl=ck)
    assert np.allclose(a1, a2, atol=1e-12) and abs(l1 - l2) < 1e-12


def test_backward_and_xi_agree(problem):
    log_pi, log_A, log_b = problem
    a, ll = kernels.forward(log_pi, log_A, log_b, impl=_pykernels)
    b1 = kernels.backward(log_A, log_b, impl=_pykernels)
    b2 = kernels.backward(log_A, log_b, impl=ck)
    assert np.allclose(b1, b2, atol=1e-12)
    x1 = kernels.xi_sum(a, b1, log_A, log_b, ll[-1], impl=_pykernels)
    x2 = kernels.xi_sum(a, b1, log_A, log_b, ll[-1], impl=ck)
    assert np.allclose(x1, x2, atol=1e-12)
    # expected transition counts sum to T - 1
    assert x1.sum() == pytest.approx(len(log_b) - 1, abs=1e-9)


def test_viterbi_and_paths_agree(problem):
    log_pi, log_A, log_b = problem
    d1, p1 = kernels.viterbi(log_pi, log_A, log_b, impl=_pykernels)
    d2, p2 = kernels.viterbi(log_pi, log_A, log_b, impl=ck)
    assert np.allclose(d1, d2, atol=1e-12)
    assert np.array_equal(p1, p2)
    t1 = kernels.incremental_paths(d1, p1, impl=_pykernels)
    t2 = kernels.incremental_paths(d1, p1, impl=ck)
    assert np.array_equal(t1, t2)
    assert np.array_equal(kernels.backtrack(d1, p1, 3 % len(d1), impl=ck), t1[3 % len(d1), : 3 % len(d1) + 1])


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")

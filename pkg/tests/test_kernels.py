"""Compiled and fallback kernels agree; the fallback is selected when the extension is absent."""

import os
import subprocess
import sys

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from stensemble import _pykernels, kernels

needs_ext = pytest.mark.skipif("cython" not in kernels.available_backends(),
                               reason="compiled kernels not built")


def _sym(rng, n):
    a = rng.normal(size=(n, n))
    return (a + a.T) / 2


def _csr(rng, n, p=0.4):
    mask = rng.random((n, n)) < p
    mask = mask | mask.T
    np.fill_diagonal(mask, True)
    indptr = np.concatenate([[0], np.cumsum(mask.sum(1))]).astype(np.int64)
    return indptr, np.nonzero(mask)[1].astype(np.int64)


def test_jacobi_matches_characteristic_polynomial(backend):
    A = np.array([[4, 1, -2, 0, 1], [1, 3, 0, 2, 0], [-2, 0, 5, 1, -1],
                  [0, 2, 1, 2, 3], [1, 0, -1, 3, 1]], dtype=float)
    w, V, _ = kernels.jacobi_eigh(A)
    lam = sympy.symbols("lam")
    roots = sympy.Poly(sympy.Matrix(A.astype(int)).charpoly(lam)).nroots(n=30)
    ref = np.sort([float(sympy.re(r)) for r in roots])
    assert np.max(np.abs(np.sort(w) - ref)) < 1e-10
    assert np.linalg.norm(V @ np.diag(w) @ V.T - A) < 1e-8


@given(st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_jacobi_reconstructs(n, seed):
    A = _sym(np.random.default_rng(seed), n)
    for name in kernels.available_backends():
        w, V, _ = kernels.get_backend(name).jacobi_eigh(A, 1e-15, 100)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - A) < 1e-8
        assert np.linalg.norm(V.T @ V - np.eye(n)) < 1e-10


@needs_ext
@given(st.integers(2, 25), st.integers(1, 6), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_linkage_backends_agree(n, k, ward, seed):
    k = min(k, n)
    X = np.random.default_rng(seed).normal(size=(n, 3))
    D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    if ward:
        D = D ** 2
    c = kernels.get_backend("cython").linkage_cut(D, k, int(ward))
    p = _pykernels.linkage_cut(D, k, int(ward))
    assert np.array_equal(np.asarray(c), p)


@needs_ext
@given(st.integers(1, 15), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_gat_backends_agree(n, d, seed):
    rng = np.random.default_rng(seed)
    indptr, indices = _csr(rng, n)
    L, R, G = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    a = rng.normal(size=d)
    ck = kernels.get_backend("cython")
    oc, ac = ck.gat_forward(L, R, a, indptr, indices, 0.2)
    op, ap = _pykernels.gat_forward(L, R, a, indptr, indices, 0.2)
    assert np.allclose(oc, op, atol=1e-13) and np.allclose(ac, ap, atol=1e-14)
    bc = ck.gat_backward(L, R, a, indptr, indices, 0.2, ap, G)
    bp = _pykernels.gat_backward(L, R, a, indptr, indices, 0.2, ap, G)
    for x, y in zip(bc, bp):
        assert np.allclose(x, y, atol=1e-12)


@needs_ext
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_lstm_backends_agree(T, h, seed):
    rng = np.random.default_rng(seed)
    XW, U, dH = rng.normal(size=(T, 4 * h)), rng.normal(size=(4 * h, h)), rng.normal(size=(T, h))
    ck = kernels.get_backend("cython")
    fc, fp = ck.lstm_forward(XW, U), _pykernels.lstm_forward(XW, U)
    for x, y in zip(fc, fp):
        assert np.allclose(x, y, atol=1e-14)
    bc = ck.lstm_backward(U, *fp, dH)
    bp = _pykernels.lstm_backward(U, *fp, dH)
    for x, y in zip(bc, bp):
        assert np.allclose(x, y, atol=1e-12)


def test_attention_rows_sum_to_one(backend):
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, d = int(rng.integers(1, 30)), int(rng.integers(1, 6))
        indptr, indices = _csr(rng, n, p=rng.random())
        _, alpha = kernels.gat_forward(rng.normal(size=(n, d)), rng.normal(size=(n, d)),
                                       rng.normal(size=d) * 5, indptr, indices, 0.2)
        sums = np.add.reduceat(alpha, indptr[:-1])
        assert np.max(np.abs(sums - 1.0)) <= 1e-12


def test_env_flag_forces_fallback():
    code = "from stensemble import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, STENSEMBLE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


def test_set_backend_round_trip():
    prev = kernels.set_backend("python")
    try:
        assert kernels.BACKEND == "python"
        assert kernels.get_backend() is _pykernels
    finally:
        kernels.set_backend(prev)
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")

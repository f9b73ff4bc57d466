"""Shared test oracles: finite differences and brute-force references."""

import numpy as np


def finite_difference_grad(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. each float64 array.

    f receives the arrays (same order) and returns a python float. Arrays
    are perturbed in place and restored, so callers keep ownership.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, tol=1e-4):
    """Elementwise |a - b| <= tol * max(1, |a|, |b|)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    assert err.max() <= tol, f"gradient mismatch: max rel err {err.max():.3e} > {tol}"


def naive_selective_scan(x, delta, a, b_seq, c_seq, d_skip, exact=True):
    """Double-loop recurrence oracle, independent of the library scan."""
    bsz, length, d_inner = x.shape
    n_state = a.shape[1]
    y = np.zeros_like(x)
    for bi in range(bsz):
        for d in range(d_inner):
            h = np.zeros(n_state, dtype=x.dtype)
            for t in range(length):
                da = delta[bi, t, d] * a[d]
                a_bar = np.exp(da)
                if exact:
                    b_bar = np.expm1(da) / a[d] * b_seq[bi, t]
                else:
                    b_bar = delta[bi, t, d] * b_seq[bi, t]
                h = a_bar * h + b_bar * x[bi, t, d]
                y[bi, t, d] = c_seq[bi, t] @ h + d_skip[d] * x[bi, t, d]
    return y

"""Shared oracles and the finite-difference gradient checker."""

import numpy as np

from mcblock.tensor import Tensor, mul, tsum, use_dtype


def conv2d_oracle(x, k, stride=1, padding=0):
    """Direct 6-nested-loop convolution in float64."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(
        x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding))
    )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ui in range(kh):
                            for vi in range(kw):
                                acc += (
                                    xp[ni, ci, oi * stride + ui, oj * stride + vi]
                                    * float(k[fi, ci, ui, vi])
                                )
                    out[ni, fi, oi, oj] = acc
    return out


def dense_oracle(x, w, b):
    """Triple-loop affine map in float64."""
    n, d = x.shape
    _, kk = w.shape
    out = np.zeros((n, kk))
    for i in range(n):
        for j in range(kk):
            acc = float(b[j])
            for l in range(d):
                acc += float(x[i, l]) * float(w[l, j])
            out[i, j] = acc
    return out


def numeric_grad(fn, arrays, wrt, eps=1e-3):
    """Central finite differences of the scalar fn(arrays) w.r.t. arrays[wrt]."""
    work = [a.copy() for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target, dtype=np.float64)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        fp = fn(work)
        target[idx] = orig - eps
        fm = fn(work)
        target[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def check_gradients(build, arrays, wrt=None, eps=1e-3, rtol=1e-3, atol=1e-6, seed=0):
    """Analytic backward vs central finite differences (epsilon 1e-3).

    ``build(*tensors)`` returns an output Tensor; the output is projected to
    a scalar with a fixed random vector.  Runs in float64 so the stencil sits
    far above rounding noise.
    """
    wrt = list(range(len(arrays))) if wrt is None else wrt
    with use_dtype(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        v = np.random.default_rng(seed).standard_normal(out.data.shape)

        def scalar(work):
            o = build(*[Tensor(a) for a in work])
            return float((o.data * v).sum())

        tsum(mul(out, Tensor(v))).backward()
        for i in wrt:
            analytic = (
                tensors[i].grad
                if tensors[i].grad is not None
                else np.zeros_like(arrays[i])
            )
            numeric = numeric_grad(scalar, arrays, i, eps)
            err = np.abs(analytic - numeric)
            tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
            assert (err <= tol).all(), (
                f"gradient mismatch wrt arg {i}: max err {err.max():.3e}, "
                f"worst rel {(err / (np.abs(numeric) + 1e-12)).max():.3e}"
            )


def away_from_zero(arr, margin=0.1):
    """Shift values away from 0 so kinked ops see no boundary within eps."""
    return arr + np.sign(arr) * margin + (arr == 0) * margin

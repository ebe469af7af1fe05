"""Shared test oracles: finite differences and naive-loop references."""
from __future__ import annotations

import math

import numpy as np

from beamckm import tensor as T


def gradcheck(build_loss, params, n_probes=100, h=1e-5, rtol=1e-5, atol=1e-7,
              seed=0) -> float:
    """Central-difference check of d(build_loss())/d(params).

    build_loss must rebuild the forward pass from the params' current values.
    Fails unless |fd - autodiff| <= rtol*max(|fd|,|autodiff|) + atol on every
    probed entry; returns the worst scaled error seen.
    """
    rng = np.random.default_rng(seed)
    loss = build_loss()
    T.backward(loss)
    grads = [p.grad_or_zero().copy() for p in params]
    for p in params:
        p.reset_grad()

    sizes = np.array([p.values.size for p in params])
    bounds = np.cumsum(sizes)
    worst = 0.0
    for _ in range(n_probes):
        flat = int(rng.integers(bounds[-1]))
        pi = int(np.searchsorted(bounds, flat, side="right"))
        off = flat - (bounds[pi - 1] if pi else 0)
        idx = np.unravel_index(off, params[pi].shape)
        orig = params[pi].values[idx]
        params[pi].values[idx] = orig + h
        up = float(np.asarray(build_loss().values))
        params[pi].values[idx] = orig - h
        dn = float(np.asarray(build_loss().values))
        params[pi].values[idx] = orig
        fd = (up - dn) / (2.0 * h)
        ana = float(grads[pi][idx])
        denom = rtol * max(abs(fd), abs(ana)) + atol
        err = abs(fd - ana)
        worst = max(worst, err / denom)
        assert err <= denom, (
            f"grad mismatch on param {pi} at {idx}: fd={fd:.10g} autodiff={ana:.10g}")
    return worst


def conv2d_reference(x, w, b, stride=1, padding=0):
    """Direct six-nested-loop cross-correlation."""
    n, c_in, hh, ww = x.shape
    c_out, _, k, _ = w.shape
    ho = (hh + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                yy = i * stride + ki - padding
                                xx = j * stride + kj - padding
                                if 0 <= yy < hh and 0 <= xx < ww:
                                    acc += x[ni, ci, yy, xx] * w[co, ci, ki, kj]
                    out[ni, co, i, j] = acc
    return out


def mha_reference(x, wq, wk, wv, wo, heads):
    """Explicit per-head softmax attention on [L, D] tokens."""
    length, d = x.shape
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    ctx = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        for i in range(length):
            row = scores[i] - scores[i].max()
            e = np.exp(row)
            attn = e / e.sum()
            ctx[i, sl] = attn @ v[:, sl]
    return ctx @ wo


def group_norm_reference(x, gamma, beta, groups, eps=1e-5):
    """Naive per-group normalization of [N,C,H,W]."""
    n, c, hh, ww = x.shape
    cg = c // groups
    out = np.zeros_like(x)
    for ni in range(n):
        for g in range(groups):
            chans = slice(g * cg, (g + 1) * cg)
            block = x[ni, chans]
            mu = block.mean()
            var = ((block - mu) ** 2).mean()
            out[ni, chans] = (block - mu) / math.sqrt(var + eps)
    return out * gamma[None, :, None, None] + beta[None, :, None, None]


def adaln_reference(f_in, gamma, beta, eps=1e-5):
    """Eq-style modulation: (1+gamma) * rowwise-LN(f_in) + beta."""
    mu = f_in.mean(axis=-1, keepdims=True)
    var = ((f_in - mu) ** 2).mean(axis=-1, keepdims=True)
    xh = (f_in - mu) / np.sqrt(var + eps)
    return (1.0 + gamma) * xh + beta


def nmse_db_reference(pred, truth, mask):
    """Pixel-loop NMSE over masked entries, in dB."""
    num = 0.0
    den = 0.0
    for idx in np.ndindex(pred.shape):
        if mask[idx]:
            num += abs(pred[idx] - truth[idx]) ** 2
            den += abs(truth[idx]) ** 2
    if den == 0.0:
        raise ZeroDivisionError("all-floor truth")
    if num == 0.0:
        return -300.0
    return 10.0 * math.log10(num / den)

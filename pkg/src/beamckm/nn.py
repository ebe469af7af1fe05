"""Differentiable layers: convolution, normalization, attention, activations.

Shapes follow the channels-first convention ([N,C,H,W] for images, [N,L,D]
for token sequences); single-sample inputs without the batch axis are
accepted and returned without it.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (Array, TensorNode, _record, concat, matmul, reshape,
                     slice_axis, transpose, unbroadcast)


# ---------------------------------------------------------------------------
# activations


def _logistic(x: Array) -> Array:
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct 0
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: TensorNode) -> TensorNode:
    out = _logistic(x.values)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: TensorNode) -> TensorNode:
    xv = x.values
    s = _logistic(xv)
    return _record("silu", xv * s, (x,),
                   lambda g: (g * (s + xv * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: TensorNode) -> TensorNode:
    """tanh-approximated GELU, 0.5*x*(1+tanh(c*(x+0.044715*x^3)))."""
    xv = x.values
    u = _GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(u)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g: Array):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * du),)

    return _record("gelu", out, (x,), vjp)


def softmax(x: TensorNode, axis: int = -1) -> TensorNode:
    xv = x.values
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", s, (x,), vjp)


# ---------------------------------------------------------------------------
# linear / convolution


def linear(x: TensorNode, weight: TensorNode, bias: TensorNode | None = None) -> TensorNode:
    """x[..., D_in] @ weight[D_in, D_out] + bias[D_out]."""
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    return reshape(y, (-1,)) if squeeze else y


def conv2d(x: TensorNode, kernel: TensorNode, bias: TensorNode | None = None,
           stride: int = 1, padding: int = 0) -> TensorNode:
    """Cross-correlation with zero padding; input [C,H,W] or [N,C,H,W]."""
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    kv = kernel.values
    if xv.ndim != 4 or kv.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {xv.shape}/{kv.shape}")
    n, c_in, h, w = xv.shape
    c_out, kc, kh, kw = kv.shape
    if kc != c_in:
        raise ValueError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else xv
    cols = np.empty((n, c_in, k, k, ho * wo), dtype=xv.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            cols[:, :, ki, kj, :] = patch.reshape(n, c_in, -1)
    cols2 = cols.reshape(n, c_in * k * k, ho * wo)
    wflat = kv.reshape(c_out, -1)
    out = (wflat @ cols2).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def vjp(g: Array):
        if g.ndim == 3:
            g = g[None]
        gflat = g.reshape(n, c_out, -1)
        # batched GEMM on transpose views, then reduce over batch
        gw = (gflat @ cols2.swapaxes(1, 2)).sum(axis=0).reshape(kv.shape)
        gcols = (wflat.T @ gflat).reshape(n, c_in, k, k, ho, wo)
        hp, wp = xp.shape[2], xp.shape[3]
        gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    gcols[:, :, ki, kj]
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out[0] if squeeze else out, inputs, vjp)


def upsample_nearest2(x: TensorNode) -> TensorNode:
    """Nearest-neighbor 2x spatial upsampling of [N,C,H,W] (or [C,H,W])."""
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    n, c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=2), 2, axis=3)

    def vjp(g: Array):
        if g.ndim == 3:
            g = g[None]
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)

    return _record("upsample2", out[0] if squeeze else out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: TensorNode, gamma: TensorNode | None = None,
               beta: TensorNode | None = None, eps: float = 1e-5) -> TensorNode:
    """Normalize over the last axis, then optional per-feature affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gv = gamma.values if gamma is not None else None
    out = xh if gv is None else xh * gv
    if beta is not None:
        out = out + beta.values

    def vjp(g: Array):
        gxh = g if gv is None else g * gv
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        grads: list[Array | None] = [gx]
        if gamma is not None:
            grads.append((g * xh).reshape(-1, xh.shape[-1]).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    inputs: tuple[TensorNode, ...] = (x,)
    if gamma is not None:
        inputs += (gamma,)
    if beta is not None:
        inputs += (beta,)
    return _record("layer_norm", out, inputs, vjp)


def group_norm(x: TensorNode, gamma: TensorNode, beta: TensorNode,
               num_groups: int, eps: float = 1e-5) -> TensorNode:
    """GroupNorm over [N,C,H,W] (or [C,H,W]); per-channel affine."""
    squeeze = x.ndim == 3
    xv = x.values[None] if squeeze else x.values
    n, c, h, w = xv.shape
    if c % num_groups != 0:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    xg = xv.reshape(n, num_groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xc * inv).reshape(n, c, h, w)
    gv, bv = gamma.values, beta.values
    out = xh * gv[None, :, None, None] + bv[None, :, None, None]

    def vjp(g: Array):
        if g.ndim == 3:
            g = g[None]
        gxh = (g * gv[None, :, None, None]).reshape(n, num_groups, -1)
        xhg = xh.reshape(n, num_groups, -1)
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhg * (gxh * xhg).mean(axis=-1, keepdims=True))
        gx = gx.reshape(n, c, h, w)
        ggamma = (g * xh).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return (gx[0] if squeeze else gx, ggamma, gbeta)

    return _record("group_norm", out[0] if squeeze else out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# attention


def multihead_attention(x: TensorNode, w_q: TensorNode, w_k: TensorNode,
                        w_v: TensorNode, w_o: TensorNode, heads: int) -> TensorNode:
    """Scaled dot-product self-attention over [L,D] or [N,L,D] tokens."""
    d = x.shape[-1]
    if d % heads != 0:
        raise ValueError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, length, _ = x.shape

    def split_heads(t: TensorNode) -> TensorNode:
        t = reshape(t, (n, length, heads, dh))
        return transpose(t, (0, 2, 1, 3))  # [N, heads, L, dh]

    q = split_heads(matmul(x, w_q))
    k = split_heads(matmul(x, w_k))
    v = split_heads(matmul(x, w_v))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [N, heads, L, dh]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, length, d))
    out = matmul(ctx, w_o)
    return reshape(out, (length, d)) if squeeze else out


# ---------------------------------------------------------------------------
# parameter construction

ParamDict = dict[str, TensorNode]


class Module:
    """Flat named-parameter registry with checkpoint round-tripping."""

    def __init__(self):
        self.params: ParamDict = {}

    def add_param(self, name: str, node: TensorNode) -> TensorNode:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = node
        return node

    def param_list(self) -> list[TensorNode]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, Array]:
        return {name: p.values for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, Array]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=p.dtype)
            if arr.shape != p.values.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.values.shape}")
            p.values = arr.copy()


def uniform_param(rng: np.random.Generator, shape, fan_in: int,
                  dtype=np.float64) -> TensorNode:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(fan_in)
    return TensorNode(rng.uniform(-bound, bound, size=shape).astype(dtype),
                      requires_grad=True)


def zeros_param(shape, dtype=np.float64) -> TensorNode:
    return TensorNode(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float64) -> TensorNode:
    return TensorNode(np.ones(shape, dtype=dtype), requires_grad=True)


def timestep_encoding(t, dim: int, max_period: float = 1.0e4,
                      dtype=np.float64) -> Array:
    """Interleaved sin/cos encoding; frequencies geometric on [1, 1/max_period].

    t may be an int or an int array [N]; returns [dim] or [N, dim].
    """
    if dim % 2 != 0:
        raise ValueError("encoding dim must be even")
    scalar = np.isscalar(t)
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half - 1, 1))
    ang = tv[:, None] * freqs[None, :]
    enc = np.empty((tv.shape[0], dim), dtype=dtype)
    enc[:, 0::2] = np.sin(ang)
    enc[:, 1::2] = np.cos(ang)
    return enc[0] if scalar else enc

"""Forward and backward passes for the sparse network's layer types.

Every ``*_fwd`` returns ``(output, ctx)``; the matching ``*_bwd`` takes the
upstream gradient (a ``SparseTensor`` or a bare ``(N, C)`` array aligned with
the forward output) plus ``ctx`` and returns ``(input_grad, param_grads)``.
Convolution weights are laid out ``[offset, c_in, c_out]`` with offsets in the
canonical rulebook order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .sgc import PartitionSpec, gather, partition
from .sparse_tensor import (DECONV, STRIDED, SUBMANIFOLD, Rulebook, SparseTensor,
                            build_rulebook, kernel_offsets, lookup, zero_fill_sum)


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 3 or self.bias.shape != (self.weight.shape[2],):
            raise DataError(
                f"conv weight {self.weight.shape} / bias {self.bias.shape} inconsistent")

    @classmethod
    def zeros(cls, offsets: int, c_in: int, c_out: int) -> "ConvParams":
        return cls(np.zeros((offsets, c_in, c_out)), np.zeros(c_out))

    @classmethod
    def he(cls, rng: np.random.Generator, offsets: int, c_in: int, c_out: int) -> "ConvParams":
        std = np.sqrt(2.0 / (offsets * c_in))
        return cls(rng.normal(0.0, std, (offsets, c_in, c_out)), np.zeros(c_out))


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``momentum`` is the weight kept by the running averages on each update:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.99
    eps: float = 1e-4

    def __post_init__(self):
        c = len(self.gamma)
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == c):
            raise DataError("batch norm vectors must share one channel count")

    @classmethod
    def identity(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), **kw)


def _grad_array(grad, n: int, c: int) -> np.ndarray:
    g = grad.features if isinstance(grad, SparseTensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != (n, c):
        raise DataError(f"upstream gradient shape {g.shape} != forward output {(n, c)}")
    return g


# convolution --------------------------------------------------------------

def conv_fwd(t: SparseTensor, p: ConvParams, rb: Rulebook):
    x = t.features
    if rb.in_count != t.active_count or rb.batch_size != t.batch_size:
        raise DataError(f"rulebook built for {rb.in_count} sites, tensor has {t.active_count}")
    k, c_in, c_out = p.weight.shape
    if k != len(rb.pairs) or c_in != t.channels:
        raise DataError(
            f"weight {p.weight.shape} does not fit {len(rb.pairs)} offsets x {t.channels} channels")
    out = np.empty((rb.out_count, c_out))
    out[:] = p.bias
    for o, (i_in, i_out) in enumerate(rb.pairs):
        if len(i_in):
            out[i_out] += x[i_in] @ p.weight[o]
    coords = t.coords if rb.mode == SUBMANIFOLD else rb.output_coords
    y = SparseTensor(coords, out, rb.batch_size, rb.out_extents)
    return y, (x, p.weight, rb)


def conv_bwd(grad, ctx):
    x, w, rb = ctx
    g = _grad_array(grad, rb.out_count, w.shape[2])
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for o, (i_in, i_out) in enumerate(rb.pairs):
        if len(i_in):
            go = g[i_out]
            dx[i_in] += go @ w[o].T
            dw[o] = x[i_in].T @ go
    return dx, {"weight": dw, "bias": g.sum(axis=0)}


def _require_mode(rb: Rulebook, mode: str):
    if rb.mode != mode:
        raise DataError(f"expected a {mode} rulebook, got {rb.mode}")


def submanifold_conv_fwd(t, p, rb):
    _require_mode(rb, SUBMANIFOLD)
    return conv_fwd(t, p, rb)


def strided_conv_fwd(t, p, rb):
    _require_mode(rb, STRIDED)
    return conv_fwd(t, p, rb)


def dense_deconv_fwd(t, p, rb):
    _require_mode(rb, DECONV)
    return conv_fwd(t, p, rb)


submanifold_conv_bwd = strided_conv_bwd = dense_deconv_bwd = conv_bwd


def linear_fwd(t: SparseTensor, p: ConvParams):
    """1x1x1 convolution (per-site affine map)."""
    if p.weight.shape[:2] != (1, t.channels):
        raise DataError(f"1x1x1 weight {p.weight.shape} does not fit {t.channels} channels")
    out = t.features @ p.weight[0] + p.bias
    return t.with_features(out), (t.features, p.weight)


def linear_bwd(grad, ctx):
    x, w = ctx
    g = _grad_array(grad, x.shape[0], w.shape[2])
    return g @ w[0].T, {"weight": (x.T @ g)[None], "bias": g.sum(axis=0)}


# pointwise / normalisation ------------------------------------------------

def relu_fwd(t: SparseTensor):
    mask = t.features > 0
    return t.with_features(np.where(mask, t.features, 0.0)), mask


def relu_bwd(grad, ctx):
    mask = ctx
    g = _grad_array(grad, *mask.shape)
    return np.where(mask, g, 0.0), {}


def batch_norm_fwd(t: SparseTensor, s: BatchNormState, training: bool):
    """Normalise over every active site of the (possibly group-stacked) batch."""
    x = t.features
    if x.shape[1] != len(s.gamma):
        raise DataError(f"batch norm has {len(s.gamma)} channels, tensor has {x.shape[1]}")
    if training:
        if x.shape[0] == 0:
            raise DataError("batch norm statistics undefined on an empty tensor")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mean
        s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var
    else:
        mean, var = s.running_mean, s.running_var
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (x - mean) * inv_std
    out = s.gamma * xhat + s.beta
    return t.with_features(out), (xhat, inv_std, s.gamma.copy(), training)


def batch_norm_bwd(grad, ctx):
    xhat, inv_std, gamma, training = ctx
    g = _grad_array(grad, *xhat.shape)
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma
    if training:
        n = xhat.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv_std
    return dx, {"gamma": dgamma, "beta": dbeta}


# pooling ------------------------------------------------------------------

def max_pool_fwd(t: SparseTensor, rb: Rulebook = None):
    """2x2x2 max over active children only; ties go to the first child in canonical order."""
    if rb is None:
        rb = build_rulebook(t, 2, STRIDED)
    _require_mode(rb, STRIDED)
    x = t.features
    c = x.shape[1]
    out = np.full((rb.out_count, c), -np.inf)
    arg = np.zeros((rb.out_count, c), dtype=np.int64)
    for i_in, i_out in rb.pairs:
        if not len(i_in):
            continue
        cand = x[i_in]
        cur = out[i_out]
        better = cand > cur
        out[i_out] = np.where(better, cand, cur)
        arg[i_out] = np.where(better, i_in[:, None], arg[i_out])
    y = SparseTensor(rb.output_coords, out, rb.batch_size, rb.out_extents)
    return y, (arg, x.shape)


def max_pool_bwd(grad, ctx):
    arg, xshape = ctx
    g = _grad_array(grad, *arg.shape)
    dx = np.zeros(xshape)
    cols = np.broadcast_to(np.arange(xshape[1]), arg.shape)
    dx[arg, cols] = g
    return dx, {}


# structure ----------------------------------------------------------------

def zero_fill_sum_fwd(a: SparseTensor, b: SparseTensor):
    out, ia, ib = zero_fill_sum(a, b)
    return out, (ia, ib, out.active_count, out.channels)


def zero_fill_sum_bwd(grad, ctx):
    ia, ib, n, c = ctx
    g = _grad_array(grad, n, c)
    return (g[ia], g[ib]), {}


def partition_fwd(t: SparseTensor, spec: PartitionSpec):
    out, perm = partition(t, spec, return_perm=True)
    return out, perm


def gather_fwd(t: SparseTensor, groups: int):
    out, perm = gather(t, groups, return_perm=True)
    return out, perm


def permute_bwd(grad, ctx):
    perm = ctx
    g = grad.features if isinstance(grad, SparseTensor) else np.asarray(grad, dtype=np.float64)
    if g.shape[0] != len(perm):
        raise DataError(f"upstream gradient has {g.shape[0]} rows, expected {len(perm)}")
    dx = np.empty_like(g)
    dx[perm] = g
    return dx, {}


partition_bwd = gather_bwd = permute_bwd


def abstract_keep(t: SparseTensor, logits: SparseTensor, k: int = 1) -> np.ndarray:
    """Indices of sites predicted non-empty or within Chebyshev distance k of one."""
    if not t.same_sites(logits):
        raise DataError("abstract: logits and features have different active sets")
    if t.active_count == 0:
        return np.zeros(0, dtype=np.int64)
    nonempty = np.argmax(logits.features, axis=1) != 0
    seeds = SparseTensor(t.coords[nonempty], np.zeros((int(nonempty.sum()), 0)),
                         t.batch_size, t.extents)
    keep = nonempty.copy()
    if k > 0 and seeds.active_count:
        for o in kernel_offsets(2 * k + 1):
            if not o.any():
                continue
            q = t.coords.copy()
            q[:, 1:] += o
            keep |= lookup(seeds, q) >= 0
    return np.flatnonzero(keep)


def abstract_fwd(t: SparseTensor, logits: SparseTensor, k: int = 1):
    keep = abstract_keep(t, logits, k)
    out = SparseTensor(t.coords[keep], t.features[keep], t.batch_size, t.extents)
    return out, (keep, t.features.shape)


def abstract_bwd(grad, ctx):
    keep, xshape = ctx
    g = _grad_array(grad, len(keep), xshape[1])
    dx = np.zeros(xshape)
    dx[keep] = g
    return dx, {}


def abstract(t: SparseTensor, logits: SparseTensor, k: int = 1) -> SparseTensor:
    return abstract_fwd(t, logits, k)[0]


# residual block -----------------------------------------------------------

@dataclass
class ResBlockParams:
    bn1: BatchNormState
    conv1: ConvParams
    bn2: BatchNormState
    conv2: ConvParams

    @classmethod
    def init(cls, rng, channels: int, k: int = 3, **bn_kw) -> "ResBlockParams":
        return cls(BatchNormState.identity(channels, **bn_kw),
                   ConvParams.he(rng, k ** 3, channels, channels),
                   BatchNormState.identity(channels, **bn_kw),
                   ConvParams.he(rng, k ** 3, channels, channels))


def resnet_block_fwd(t: SparseTensor, p: ResBlockParams, training: bool = True,
                     rb: Rulebook = None):
    """Pre-activation block ``t + conv(relu(bn(conv(relu(bn(t))))))``."""
    if p.conv1.weight.shape[1] != p.conv2.weight.shape[2]:
        raise DataError("residual block needs c_in == c_out")
    if rb is None:
        k = round(p.conv1.weight.shape[0] ** (1 / 3))
        rb = build_rulebook(t, k, SUBMANIFOLD)
    h, c_bn1 = batch_norm_fwd(t, p.bn1, training)
    h, c_r1 = relu_fwd(h)
    h, c_c1 = submanifold_conv_fwd(h, p.conv1, rb)
    h, c_bn2 = batch_norm_fwd(h, p.bn2, training)
    h, c_r2 = relu_fwd(h)
    h, c_c2 = submanifold_conv_fwd(h, p.conv2, rb)
    out = t.with_features(t.features + h.features)
    return out, (c_bn1, c_r1, c_c1, c_bn2, c_r2, c_c2)


def resnet_block_bwd(grad, ctx):
    c_bn1, c_r1, c_c1, c_bn2, c_r2, c_c2 = ctx
    g = _grad_array(grad, *c_bn1[0].shape)
    h, g_c2 = conv_bwd(g, c_c2)
    h, _ = relu_bwd(h, c_r2)
    h, g_bn2 = batch_norm_bwd(h, c_bn2)
    h, g_c1 = conv_bwd(h, c_c1)
    h, _ = relu_bwd(h, c_r1)
    h, g_bn1 = batch_norm_bwd(h, c_bn1)
    grads = {"bn1": g_bn1, "conv1": g_c1, "bn2": g_bn2, "conv2": g_c2}
    return g + h, grads

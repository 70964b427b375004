"""Minimal reverse-mode differentiation engine.

The operator set is exactly what the 3D U-Net needs: conv3d, transposed
conv, max pooling, instance norm, relu, sigmoid, channel concat, Dice loss.
No broadcasting rules, no graph optimization.

Every Tensor created by an op records its inputs and a backward closure.
Tensors carry a global creation sequence number; ``backward()`` replays the
recorded closures in exact reverse creation order (the tape), accumulating
gradients additively into each input's ``grad``.

float32 is the training dtype; float64 is the verification dtype used by
the finite-difference and oracle checks (see ``kernels`` for how the
convolution forward is routed by dtype).
"""

import itertools
import json
import os
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import DegenerateInputError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "conv3d",
    "transposed_conv3d",
    "maxpool3d",
    "instance_norm3d",
    "relu",
    "sigmoid",
    "concat_channels",
    "dice_loss",
    "batch_dice_loss",
    "init_adam_state",
    "adam_step",
    "finite_diff_grad",
    "save_checkpoint",
    "load_checkpoint",
]

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (used for validation/test inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-d float array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_seq")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        # Collect every recorded node reachable from here, then replay the
        # closures in reverse creation order. Creation order is a valid
        # topological order, so each node's grad is complete before use.
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._prev)
        self.grad = np.ones_like(self.data)
        for t in sorted(nodes, key=lambda n: n._seq, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _make_node(data, inputs, backward):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0, method="auto") -> Tensor:
    """Cross-correlation of x [B,Cin,D,H,W] with w [Cout,Cin,kd,kh,kw] plus bias."""
    y = kernels.conv3d(x.data, w.data, b.data if b is not None else None, stride, pad, method)

    def backward(g):
        gx, gw, gb = kernels.conv3d_backward(g, x.data, w.data, stride, pad,
                                             with_bias=b is not None)
        if x.requires_grad:
            x.accumulate_grad(gx)
        if w.requires_grad:
            w.accumulate_grad(gw)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make_node(y, inputs, backward)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor = None, stride=2, k=2) -> Tensor:
    """Fractionally-strided convolution; doubles each spatial extent by default.

    Weight layout is [Cin, Cout, kd, kh, kw].
    """
    y = kernels.transposed_conv3d_forward(x.data, w.data, b.data if b is not None else None,
                                          stride, k)

    def backward(g):
        gx, gw, gb = kernels.transposed_conv3d_backward(g, x.data, w.data, stride, k,
                                                        with_bias=b is not None)
        if x.requires_grad:
            x.accumulate_grad(gx)
        if w.requires_grad:
            w.accumulate_grad(gw)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make_node(y, inputs, backward)


def maxpool3d(x: Tensor, window=2, stride=2) -> Tensor:
    """Blockwise max; backward routes to each block's first argmax voxel."""
    y, argmax = kernels.maxpool3d_forward(x.data, window, stride)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(kernels.maxpool3d_backward(g, x.data.shape, argmax, window, stride))

    return _make_node(y, (x,), backward)


def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) spatial normalization with affine parameters.

    Uses population variance over the spatial voxels; eps sits inside the
    square root.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm3d expects [B,C,D,H,W], got {x.data.shape}")
    B, C, D, H, W = x.data.shape
    n = D * H * W
    if n < 2:
        raise DegenerateInputError("instance norm needs at least 2 spatial voxels")
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError("gamma and beta must have shape (C,)")
    mu = x.data.mean(axis=(2, 3, 4), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data[None, :, None, None, None] + beta.data[None, :, None, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3, 4)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None, None]
            s1 = gxhat.sum(axis=(2, 3, 4), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(2, 3, 4), keepdims=True)
            gx = (inv / n) * (n * gxhat - s1 - xhat * s2)
            x.accumulate_grad(gx)

    return _make_node(y, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make_node(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Stable logistic: never exponentiates a large positive argument.
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return _make_node(y, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1)."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"cannot concat {a.data.shape} with {b.data.shape}")
    y = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    return _make_node(y, (a, b), backward)


def _dice_terms(p, t, smooth):
    num = 2.0 * float((p * t).sum()) + smooth
    den = float(p.sum()) + float(t.sum()) + smooth
    return num, den


def dice_loss(p: Tensor, t: Tensor, smooth: float = 1e-5) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), differentiable wrt p."""
    if p.data.shape != t.data.shape:
        raise ShapeError(f"probability shape {p.data.shape} != target shape {t.data.shape}")
    num, den = _dice_terms(p.data.astype(np.float64), t.data.astype(np.float64), smooth)
    loss = np.array(1.0 - num / den, dtype=p.data.dtype)

    def backward(g):
        if p.requires_grad:
            gp = (num - 2.0 * t.data.astype(p.data.dtype) * p.data.dtype.type(den)) / p.data.dtype.type(den * den)
            p.accumulate_grad(g.reshape(()) * gp)

    return _make_node(loss, (p, t), backward)


def batch_dice_loss(p: Tensor, t: Tensor, smooth: float = 1e-5) -> Tensor:
    """Mean over the batch axis of per-sample Dice losses."""
    if p.data.shape != t.data.shape:
        raise ShapeError(f"probability shape {p.data.shape} != target shape {t.data.shape}")
    B = p.data.shape[0]
    pf = p.data.reshape(B, -1).astype(np.float64)
    tf = t.data.reshape(B, -1).astype(np.float64)
    num = 2.0 * (pf * tf).sum(axis=1) + smooth
    den = pf.sum(axis=1) + tf.sum(axis=1) + smooth
    loss = np.array(np.mean(1.0 - num / den), dtype=p.data.dtype)

    def backward(g):
        if p.requires_grad:
            shape = (B,) + (1,) * (p.data.ndim - 1)
            gp = (num.reshape(shape) - 2.0 * tf.reshape(p.data.shape) * den.reshape(shape)) \
                / (den * den).reshape(shape) / B
            p.accumulate_grad(g.reshape(()) * gp.astype(p.data.dtype))

    return _make_node(loss, (p, t), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def init_adam_state(params):
    """Zero first/second moment buffers matching each parameter array."""
    return {
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` moments are updated in place; ``t`` is the 1-based step count.
    """
    if t < 1:
        raise ValueError("Adam step count t must be >= 1")
    out = []
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, element by element, in float64."""
    x = np.array(x, dtype=np.float64)  # private contiguous copy; probed in place
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# Checkpoints: <base>.bin holds float64 little-endian values, parameter
# tensors concatenated in declaration order; <base>.json lists names,
# shapes, and byte offsets.
# ---------------------------------------------------------------------------

def save_checkpoint(base_path: str, named_params) -> None:
    """Write an ordered list of (name, array) pairs as .bin + .json."""
    entries = []
    offset = 0
    with open(base_path + ".bin", "wb") as f:
        for name, arr in named_params:
            a64 = np.ascontiguousarray(arr, dtype="<f8")
            f.write(a64.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset_bytes": offset})
            offset += a64.nbytes
    with open(base_path + ".json", "w") as f:
        json.dump({"params": entries, "total_bytes": offset}, f, indent=1)
        f.write("\n")


def load_checkpoint(base_path: str):
    """Read a checkpoint back as an ordered list of (name, float64 array)."""
    if not os.path.exists(base_path + ".bin") or not os.path.exists(base_path + ".json"):
        raise IOError(f"missing checkpoint file(s) at {base_path!r}")
    with open(base_path + ".json") as f:
        header = json.load(f)
    raw = np.fromfile(base_path + ".bin", dtype="<f8")
    out = []
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset_bytes"] // 8
        out.append((e["name"], raw[start:start + size].reshape(e["shape"]).copy()))
    return out

"""Raw-array 3D convolution and pooling kernels.

Three forward implementations of the same cross-correlation (no kernel
flip) are kept on purpose:

``conv3d_naive``
    Triple loop over output voxels with a scalar accumulator. Slow and
    obviously correct; this is the oracle everything else is checked
    against.

``conv3d_taps``
    Blocked kernel: one vectorized multiply-add pass over the whole output
    per (input channel, kernel tap), accumulating in the same fixed
    (ci, kd, kh, kw) order as the naive loop. Elementwise numpy ops round
    identically to scalar IEEE ops, so this kernel matches the oracle
    bitwise in both float32 and float64.

``conv3d_gemm``
    im2col plus a BLAS matmul. Fastest by a wide margin, but BLAS blocks
    the reduction, so it matches the oracle only to rounding error, not
    bitwise.

``conv3d`` routes by dtype: float64 (the verification mode) uses the
order-deterministic taps kernel, float32 (the training mode) uses gemm.

Backward passes reduce with BLAS (tensordot): gradients are validated
against central finite differences, a tolerance check, so reduction order
is free to vary there.
"""

import numpy as np

from .errors import ShapeError

__all__ = [
    "conv3d",
    "conv3d_naive",
    "conv3d_taps",
    "conv3d_gemm",
    "conv3d_backward",
    "transposed_conv3d_forward",
    "transposed_conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
]


def _as3(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected scalar or length-3, got {v!r}")
    return t


def _conv_geometry(x_shape, w_shape, stride, pad):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"conv3d expects 5D input and weight, got {x_shape} and {w_shape}")
    B, Cin, D, H, W = x_shape
    Cout, Cin_w, kd, kh, kw = w_shape
    if Cin != Cin_w:
        raise ShapeError(f"input has {Cin} channels but weight expects {Cin_w}")
    sd, sh, sw = _as3(stride)
    pd, ph, pw = _as3(pad)
    if min(sd, sh, sw) < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    out = []
    for n, k, s, p in ((D, kd, sd, pd), (H, kh, sh, ph), (W, kw, sw, pw)):
        span = n + 2 * p - k
        if span < 0:
            raise ShapeError(f"kernel size {k} exceeds padded extent {n + 2 * p}")
        if span % s != 0:
            raise ShapeError(f"output extent ({n} + 2*{p} - {k}) / {s} is not exact")
        out.append(span // s + 1)
    return (sd, sh, sw), (pd, ph, pw), tuple(out)


def _pad_input(x, pad):
    pd, ph, pw = pad
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d_naive(x, w, b=None, stride=1, pad=0):
    """Reference cross-correlation: scalar accumulation in (ci, kd, kh, kw) order.

    Reads from a zero-padded copy so out-of-range taps contribute exact
    zero products, the same operation sequence as the blocked kernel.
    """
    (sd, sh, sw), padding, (Do, Ho, Wo) = _conv_geometry(x.shape, w.shape, stride, pad)
    B, Cin = x.shape[0], x.shape[1]
    Cout, _, kd, kh, kw = w.shape
    xp = _pad_input(x, padding)
    out = np.zeros((B, Cout, Do, Ho, Wo), dtype=x.dtype)
    zero = x.dtype.type(0)
    for bi in range(B):
        for co in range(Cout):
            for d in range(Do):
                for h in range(Ho):
                    for wo in range(Wo):
                        acc = zero
                        for ci in range(Cin):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        acc = acc + w[co, ci, a, bb, c] * xp[
                                            bi, ci, d * sd + a, h * sh + bb, wo * sw + c]
                        if b is not None:
                            acc = acc + b[co]
                        out[bi, co, d, h, wo] = acc
    return out


def conv3d_taps(x, w, b=None, stride=1, pad=0):
    """Blocked forward: one fused multiply-add pass per (ci, tap), fixed order."""
    (sd, sh, sw), padding, (Do, Ho, Wo) = _conv_geometry(x.shape, w.shape, stride, pad)
    B, Cin = x.shape[0], x.shape[1]
    Cout, _, kd, kh, kw = w.shape
    xp = _pad_input(x, padding)
    out = np.zeros((B, Cout, Do, Ho, Wo), dtype=x.dtype)
    for ci in range(Cin):
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    xs = xp[:, ci, a:a + Do * sd:sd, bb:bb + Ho * sh:sh, c:c + Wo * sw:sw]
                    out += w[None, :, ci, a, bb, c, None, None, None] * xs[:, None]
    if b is not None:
        out += b[None, :, None, None, None]
    return out


def _window_view(xp, kshape, stride):
    """Strided sliding-window view (B, Cin, Do, Ho, Wo, kd, kh, kw); no copy."""
    v = np.lib.stride_tricks.sliding_window_view(xp, kshape, axis=(2, 3, 4))
    sd, sh, sw = stride
    return v[:, :, ::sd, ::sh, ::sw]


def _conv_im2col(xp, w, strides):
    """Contraction of the sliding windows with the kernel (classic im2col)."""
    windows = _window_view(xp, w.shape[2:], strides)
    out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_tap_gemm(xp, w, out_spatial):
    """Stride-1 alternative: one GEMM of all taps against the contiguous
    padded volume, then 27 shifted accumulations. Avoids the K-fold gather
    of im2col, which pays off once Cin is large."""
    B, Cin = xp.shape[0], xp.shape[1]
    Cout, _, kd, kh, kw = w.shape
    Dp, Hp, Wp = xp.shape[2:]
    Do, Ho, Wo = out_spatial
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1).reshape(kd * kh * kw * Cout, Cin))
    tmp = np.matmul(wt, xp.reshape(B, Cin, -1)).reshape(B, kd, kh, kw, Cout, Dp, Hp, Wp)
    out = np.zeros((B, Cout, Do, Ho, Wo), dtype=xp.dtype)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                out += tmp[:, a, bb, c, :, a:a + Do, bb:bb + Ho, c:c + Wo]
    return out


def conv3d_gemm(x, w, b=None, stride=1, pad=0):
    """BLAS-backed forward; reduction order is BLAS-defined.

    Dispatches between im2col and the tap-GEMM decomposition: gather cost
    of im2col grows with Cin * taps, tap-GEMM's fixed cost is taps passes
    over the output volume.
    """
    strides, padding, out_spatial = _conv_geometry(x.shape, w.shape, stride, pad)
    xp = _pad_input(x, padding)
    if strides == (1, 1, 1) and x.shape[1] >= 8:
        out = _conv_tap_gemm(xp, w, out_spatial)
    else:
        out = _conv_im2col(xp, w, strides)
    if b is not None:
        out += b[None, :, None, None, None]
    return out


def conv3d(x, w, b=None, stride=1, pad=0, method="auto"):
    """Forward cross-correlation with dtype-based routing.

    method: "auto" (taps for float64, gemm otherwise), or one of
    "naive" / "taps" / "gemm" to pin a path.
    """
    if method == "auto":
        method = "taps" if x.dtype == np.float64 else "gemm"
    if method == "naive":
        return conv3d_naive(x, w, b, stride, pad)
    if method == "taps":
        return conv3d_taps(x, w, b, stride, pad)
    if method == "gemm":
        return conv3d_gemm(x, w, b, stride, pad)
    raise ValueError(f"unknown conv3d method {method!r}")


def conv3d_backward(gout, x, w, stride=1, pad=0, with_bias=True):
    """Gradients of conv3d wrt (x, w, b) given the upstream gradient."""
    strides, padding, out_spatial = _conv_geometry(x.shape, w.shape, stride, pad)
    sd, sh, sw = strides
    pd, ph, pw = padding
    Do, Ho, Wo = out_spatial
    B, Cin, D, H, W = x.shape
    Cout, _, kd, kh, kw = w.shape

    gb = gout.sum(axis=(0, 2, 3, 4)) if with_bias else None

    xp = _pad_input(x, padding)
    if (sd, sh, sw) == (1, 1, 1):
        # gw per tap: (Cout, B*N) @ (B*N, Cin) with contiguous-run copies only
        gflat = np.ascontiguousarray(gout.transpose(1, 0, 2, 3, 4)).reshape(Cout, -1)
        gw = np.empty_like(w)
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    xs = xp[:, :, a:a + Do, bb:bb + Ho, c:c + Wo]
                    xmat = np.ascontiguousarray(xs.transpose(1, 0, 2, 3, 4)).reshape(Cin, -1)
                    gw[:, :, a, bb, c] = gflat @ xmat.T
    else:
        windows = _window_view(xp, (kd, kh, kw), strides)
        gw = np.tensordot(gout, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    if (sd, sh, sw) == (1, 1, 1) and pd < kd and ph < kh and pw < kw:
        # gx is the full correlation of gout with the flipped, channel-swapped
        # kernel: one more BLAS contraction instead of a per-tap scatter.
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx = conv3d_gemm(gout, wf, None, stride=1, pad=(kd - 1 - pd, kh - 1 - ph, kw - 1 - pw))
    else:
        # general stride: scatter each tap's contribution back (col2im)
        gcols = np.matmul(w.reshape(Cout, -1).T, gout.reshape(B, Cout, -1))  # (B, K, N)
        gcols = gcols.reshape(B, Cin, kd, kh, kw, Do, Ho, Wo)
        gxp = np.zeros_like(xp)
        for ci in range(Cin):
            for a in range(kd):
                for bb in range(kh):
                    for c in range(kw):
                        gxp[:, ci, a:a + Do * sd:sd, bb:bb + Ho * sh:sh,
                            c:c + Wo * sw:sw] += gcols[:, ci, a, bb, c]
        gx = np.ascontiguousarray(gxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W])
    return gx, gw, gb


def _tconv_geometry(x_shape, w_shape, stride, k):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"transposed conv expects 5D input and weight, got {x_shape} and {w_shape}")
    B, Cin, D, H, W = x_shape
    Cin_w, Cout, kd, kh, kw = w_shape
    if Cin != Cin_w:
        raise ShapeError(f"input has {Cin} channels but weight expects {Cin_w}")
    if (kd, kh, kw) != _as3(k):
        raise ShapeError(f"weight taps {(kd, kh, kw)} disagree with k={k}")
    s = _as3(stride)
    if s != _as3(k):
        raise ShapeError("only stride == kernel size is supported (non-overlapping upsampling)")
    return (B, Cin, D, H, W), (Cout, kd, kh, kw)


def transposed_conv3d_forward(x, w, b=None, stride=2, k=2):
    """Fractionally-strided convolution with stride == k (each output voxel
    receives exactly one tap, so there is no accumulation-order ambiguity).

    Weight layout is [Cin, Cout, kd, kh, kw]; output spatial extents are
    stride times the input extents.
    """
    (B, Cin, D, H, W), (Cout, kd, kh, kw) = _tconv_geometry(x.shape, w.shape, stride, k)
    out = np.empty((B, Cout, D * kd, H * kh, W * kw), dtype=x.dtype)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                # (B, D, H, W, Cout) <- sum over Cin
                block = np.tensordot(x, w[:, :, a, bb, c], axes=([1], [0]))
                out[:, :, a::kd, bb::kh, c::kw] = np.moveaxis(block, -1, 1)
    if b is not None:
        out += b[None, :, None, None, None]
    return out


def transposed_conv3d_backward(gout, x, w, stride=2, k=2, with_bias=True):
    """Gradients of transposed_conv3d_forward wrt (x, w, b)."""
    (B, Cin, D, H, W), (Cout, kd, kh, kw) = _tconv_geometry(x.shape, w.shape, stride, k)
    gb = gout.sum(axis=(0, 2, 3, 4)) if with_bias else None
    gx = np.zeros_like(x)
    gw = np.empty_like(w)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                gslice = gout[:, :, a::kd, bb::kh, c::kw]  # (B, Cout, D, H, W)
                gx += np.moveaxis(np.tensordot(gslice, w[:, :, a, bb, c], axes=([1], [1])), -1, 1)
                gw[:, :, a, bb, c] = np.tensordot(x, gslice, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gx, gw, gb


def maxpool3d_forward(x, window=2, stride=2):
    """Blockwise max with window == stride; returns (out, argmax) where
    argmax holds the flat within-window index (d-major, w fastest) of the
    first maximum, for gradient routing."""
    if _as3(window) != _as3(stride):
        raise ShapeError("only window == stride pooling is supported")
    wd, wh, ww = _as3(window)
    B, C, D, H, W = x.shape
    if D % wd or H % wh or W % ww:
        raise ShapeError(f"spatial extents {(D, H, W)} not divisible by window {(wd, wh, ww)}")
    Do, Ho, Wo = D // wd, H // wh, W // ww
    xr = x.reshape(B, C, Do, wd, Ho, wh, Wo, ww)
    xw = np.moveaxis(xr, (3, 5, 7), (5, 6, 7)).reshape(B, C, Do, Ho, Wo, wd * wh * ww)
    argmax = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool3d_backward(gout, x_shape, argmax, window=2, stride=2):
    """Route the upstream gradient to each block's argmax voxel."""
    wd, wh, ww = _as3(window)
    B, C, D, H, W = x_shape
    Do, Ho, Wo = D // wd, H // wh, W // ww
    gwin = np.zeros((B, C, Do, Ho, Wo, wd * wh * ww), dtype=gout.dtype)
    np.put_along_axis(gwin, argmax[..., None], gout[..., None], axis=-1)
    gwin = gwin.reshape(B, C, Do, Ho, Wo, wd, wh, ww)
    gx = np.moveaxis(gwin, (5, 6, 7), (3, 5, 7)).reshape(B, C, D, H, W)
    return np.ascontiguousarray(gx)

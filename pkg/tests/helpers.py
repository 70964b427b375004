"""Shared oracle machinery for the unit and acceptance suites."""

import numpy as np

from lrrseg import autodiff as ad

GRAD_RTOL = 1e-4
GRAD_ATOL_AT_ZERO = 1e-7


def op_gradcheck(op_fn, arrays, wrt, rng, h=1e-5):
    """Compare reverse-mode and central finite-difference gradients.

    ``op_fn`` maps Tensors to one output Tensor; ``arrays`` are float64
    inputs; ``wrt`` indexes the differentiated input. The output is probed
    through a fixed random linear functional so every element contributes.
    Returns (max relative error, max absolute error at analytic zeros).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op_fn(*tensors)
    probe = rng.normal(size=out.data.shape)
    out._backward(probe)
    analytic = tensors[wrt].grad
    assert analytic is not None, "no gradient reached the probed input"

    def f(x):
        args = [x if i == wrt else arrays[i] for i in range(len(arrays))]
        with ad.no_grad():
            return float((op_fn(*[ad.Tensor(a) for a in args]).data * probe).sum())

    numeric = ad.finite_diff_grad(f, arrays[wrt], h)
    zero = analytic == 0.0
    rel = np.zeros_like(analytic)
    nz = ~zero
    denom = np.maximum(np.abs(analytic[nz]), np.abs(numeric[nz]))
    rel[nz] = np.abs(analytic[nz] - numeric[nz]) / denom
    abs_at_zero = np.abs(numeric[zero]).max() if zero.any() else 0.0
    return float(rel.max(initial=0.0)), float(abs_at_zero)


def assert_gradients_match(op_fn, arrays, wrt, rng, h=1e-5):
    rel, abs0 = op_gradcheck(op_fn, arrays, wrt, rng, h)
    assert rel < GRAD_RTOL, f"max relative gradient error {rel:.3e}"
    assert abs0 < GRAD_ATOL_AT_ZERO, f"gradient {abs0:.3e} where analytic gradient is zero"


def random_pool_input(rng, shape, window=2, min_gap=1e-3):
    """Input whose pooling windows have no near-ties (keeps FD well-defined)."""
    while True:
        x = rng.normal(size=shape)
        B, C, D, H, W = shape
        xr = x.reshape(B, C, D // window, window, H // window, window, W // window, window)
        xw = np.moveaxis(xr, (3, 5, 7), (5, 6, 7)).reshape(B, C, -1, window ** 3)
        s = np.sort(xw, axis=-1)
        if np.min(s[..., 1:] - s[..., :-1]) > min_gap:
            return x

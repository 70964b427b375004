"""
Verifying the tensor engine against independent oracles
=======================================================

The convolution ships in three forms: a naive triple loop (the oracle), a
blocked kernel with the same deterministic accumulation order (bitwise
equal to the oracle), and a BLAS-backed kernel for training speed. The
backward passes are checked against central finite differences.
"""

import numpy as np

from lrrseg import autodiff as ad
from lrrseg import kernels

rng = np.random.default_rng(0)

# --- forward: three implementations of one cross-correlation ---------------
x = rng.normal(size=(1, 2, 5, 5, 5))
w = rng.normal(size=(3, 2, 3, 3, 3))
b = rng.normal(size=3)

naive = kernels.conv3d_naive(x, w, b, stride=1, pad=1)
taps = kernels.conv3d_taps(x, w, b, stride=1, pad=1)
gemm = kernels.conv3d_gemm(x, w, b, stride=1, pad=1)

print("taps kernel bitwise equal to naive oracle:", np.array_equal(taps, naive))
print("gemm kernel max rel err vs oracle:        ",
      np.abs(gemm - naive).max() / np.abs(naive).max())

# --- adjointness of convolution and transposed convolution -----------------
y = rng.normal(size=(1, 3, 4, 4, 4))
x2 = rng.normal(size=(1, 2, 8, 8, 8))
w2 = rng.normal(size=(3, 2, 2, 2, 2))
lhs = (kernels.conv3d(x2, w2, None, stride=2, pad=0) * y).sum()
rhs = (x2 * kernels.transposed_conv3d_forward(y, w2, None)).sum()
print(f"adjoint identity <conv(x), y> = <x, convT(y)>: {lhs:.6f} vs {rhs:.6f}")

# --- reverse mode vs finite differences -------------------------------------
p0 = rng.uniform(0.1, 0.9, size=(1, 1, 3, 3, 3))
target = ad.Tensor((rng.random((1, 1, 3, 3, 3)) > 0.5).astype(np.float64))

p = ad.Tensor(p0.copy(), requires_grad=True)
loss = ad.dice_loss(p, target)
loss.backward()

numeric = ad.finite_diff_grad(lambda v: float(ad.dice_loss(ad.Tensor(v), target).data), p0)
err = np.abs(p.grad - numeric).max() / np.abs(numeric).max()
print(f"dice loss: reverse-mode vs finite differences, max rel err {err:.2e}")

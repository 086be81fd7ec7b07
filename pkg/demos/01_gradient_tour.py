"""Checking hand-written backward passes against finite differences.

Every layer in fgin has an explicit adjoint.  This script walks through the
gradient checker on a single convolution, shows what a broken adjoint looks
like, then runs the full suite that the `fgin gradcheck` command uses.

    python3 demos/01_gradient_tour.py
"""
import numpy as np

from fgin import ops
from fgin.gradcheck import format_report, gradcheck, run_suite

rng = np.random.default_rng(0)

# A 3x3 convolution in float64: forward returns the output, backward returns
# one gradient per input (x, w, b) given the upstream gradient.
x = rng.standard_normal((1, 6, 6, 3))
w = rng.standard_normal((3, 3, 3, 4)) * 0.3
b = rng.standard_normal(4)


def forward(x, w, b):
    return ops.conv2d(x, ops.ConvKernel(w, b))


def backward(dout, x, w, b):
    return list(ops.conv2d_backward(dout, x, ops.ConvKernel(w, b)))


res = gradcheck(forward, backward, [x, w, b])
print(f"conv2d 3x3: {res.probes} probes, max relative error {res.max_rel_error:.2e}")

# Scaling the weight gradient by 1% is enough for the checker to notice.
def broken(dout, x, w, b):
    dx, dw, db = ops.conv2d_backward(dout, x, ops.ConvKernel(w, b))
    return [dx, 1.01 * dw, db]


res = gradcheck(forward, broken, [x, w, b])
print(f"conv2d with a 1% error in dW: max relative error {res.max_rel_error:.2e}")

# The whole suite covers every primitive, every block and the full network.
print()
print(format_report(run_suite()))

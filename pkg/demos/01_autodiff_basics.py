"""
Reverse-mode autodiff on the tape
=================================

Every differentiable op records (inputs, output, adjoint rule) on the active
tape; backward replays the records in reverse and accumulates gradients on
the leaves.  This script walks one tiny expression through the machinery.
"""
import numpy as np

from gatereid.tensor import (
    Tape, Tensor, grad_check, mean_all, mul, stop_gradient, sub, tanh_act,
)

# two leaves; requires_grad marks them as differentiation targets
x = Tensor(np.array([0.3, -0.8, 1.2]), requires_grad=True)
w = Tensor(np.array([1.0, 0.5, -0.25]), requires_grad=True)

# y = mean(tanh(x * w)); the tape context records each op as it runs
with Tape() as tape:
    y = mean_all(tanh_act(mul(x, w)))
tape.backward(y)

print("y       =", float(y.data))
print("dy/dx   =", x.grad)
print("dy/dw   =", w.grad)

# the adjoint of mul routes each factor's gradient through the other factor,
# and tanh contributes 1 - tanh^2; check one coordinate by hand
manual = (1.0 - np.tanh(x.data * w.data) ** 2) * w.data / x.data.size
print("manual  =", manual, "(matches dy/dx)")
assert np.allclose(x.grad, manual)

# stop_gradient: forward identity, backward zero.  mean(x - stop(x)) is
# identically zero in value, but its tape gradient is 1/N because only the
# left branch participates in backward.
x.grad = None
with Tape() as tape:
    z = mean_all(sub(x, stop_gradient(x)))
tape.backward(z)
print("\nmean(x - stop(x)) =", float(z.data), " gradient =", x.grad)

# grad_check compares tape adjoints against central differences; with
# freeze_stops the stopped branch is pinned during probing, which is the
# correct reference for an objective that deliberately drops a gradient path
err = grad_check(lambda x, w: mean_all(tanh_act(mul(x, w))), [x, w])
print("\nfinite-difference worst error:", err)
assert err < 1e-9

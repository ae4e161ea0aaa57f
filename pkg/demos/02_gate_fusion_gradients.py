"""
Fusing the color and flow gates
===============================

The two raw gates are sigmoid maps in (0, 1).  Four combiners are available:

  f1: gc + gof                      (range [0, 2])
  f2: max(gc, gof)
  f3: gc + gof - gc*gof             (probabilistic OR)
  f4: gc + gof - [gc*gof]_const     (same value, product term carries no gradient)

f3 and f4 are the same forward function; they differ only in what backward
sees.  Under f4 the adjoint passes through to both gates unchanged.
"""
import numpy as np

from gatereid.network import GateMap, fuse_gates
from gatereid.tensor import Tape, Tensor, mean_all

rng = np.random.default_rng(0)
gc = Tensor(rng.uniform(0.05, 0.95, (4, 4, 1)), requires_grad=True)
gof = Tensor(rng.uniform(0.05, 0.95, (4, 4, 1)), requires_grad=True)

for mode in ("f1", "f2", "f3", "f4"):
    fused = fuse_gates(GateMap(gc, "color"), GateMap(gof, "flow"), mode)
    v = fused.values.data
    print(f"{mode}: min {v.min():.4f}  max {v.max():.4f}")

# forward equality of f3 and f4 is exact, not approximate
v3 = fuse_gates(GateMap(gc, "color"), GateMap(gof, "flow"), "f3").values.data
v4 = fuse_gates(GateMap(gc, "color"), GateMap(gof, "flow"), "f4").values.data
print("\nf3 == f4 everywhere:", bool((v3 == v4).all()))

# gradients tell the two apart.  Take mean(fused) so the incoming adjoint at
# the fusion node is 1/N, then look at what reaches the color gate.
n = gc.data.size
for mode in ("f3", "f4"):
    gc.grad = None
    gof.grad = None
    with Tape() as tape:
        fused = fuse_gates(GateMap(gc, "color"), GateMap(gof, "flow"), mode)
        loss = mean_all(fused.values)
    tape.backward(loss)
    print(f"\n{mode} adjoint at gc, first row: {gc.grad[0, :, 0]}")
    if mode == "f3":
        # (1 - gof) * incoming: the product term damps whatever the other
        # gate already covers
        assert np.allclose(gc.grad, (1.0 - gof.data) / n)
    else:
        # exact pass-through: the stopped product contributes value, no slope
        assert (gc.grad == np.full_like(gc.grad, 1.0 / n)).all()

print("\nunder f4 both gates receive the full training signal,")
print("which is the point of stopping the product's gradient.")

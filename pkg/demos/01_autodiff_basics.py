"""Tensors, the recording tape, and reverse-mode gradients.

A tiny two-layer network is differentiated analytically and the result
is checked against a central finite difference, the same check the test
suite applies to every primitive.
"""
import numpy as np

from langlift import numcore as nc

# %% forward math is plain numpy under the hood
x = nc.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32), requires_grad=True)
w = nc.Tensor(np.array([[0.5, -1.0], [0.25, 1.5]], dtype=np.float32), requires_grad=True)

with nc.tape():
    h = nc.relu(nc.matmul(x, w))
    loss = nc.sum_all(h)
    nc.backward(loss)

print("loss:", loss.item())
print("dloss/dx:\n", x.grad)
print("dloss/dw:\n", w.grad)

# %% the same gradient, measured by nudging one entry of w
eps = 1e-3
i, j = 0, 1


def run() -> float:
    h = nc.relu(nc.matmul(x, w))
    return nc.sum_all(h).item()


w.data[i, j] += eps
up = run()
w.data[i, j] -= 2 * eps
down = run()
w.data[i, j] += eps
numeric = (up - down) / (2 * eps)
print(f"\nanalytic dloss/dw[{i},{j}] = {w.grad[i, j]:.6f}")
print(f"numeric  dloss/dw[{i},{j}] = {numeric:.6f}")

# %% frozen tensors never receive gradients
frozen = nc.Tensor(np.eye(2, dtype=np.float32), requires_grad=False)
with nc.tape():
    out = nc.sum_all(nc.matmul(x, frozen))
    nc.backward(out)
print("\nfrozen tensor grad stays:", frozen.grad)

"""
A small reverse-mode autodiff in numpy
======================================

Tensors record the op that made them; ``backward`` walks the graph in
reverse. ``grad_check`` compares every gradient against central
differences and, when something is off, names the op responsible.
"""
import numpy as np

from shapetok import diff as D

rng = np.random.default_rng(0)
X, y = rng.normal(size=(64, 3)), rng.normal(size=(64, 1))
params = D.ModelParams.from_arrays({"w": np.zeros((3, 1)), "b": np.zeros(1)})


def loss(p):
    return D.l2(D.Tensor(X) @ p["w"] + p["b"], y)


report = D.grad_check(params, loss, tol=1e-5)
print("gradient check:", "passed" if report.passed else "FAILED", report.errors)

# plain gradient descent using the recorded gradients
for step in range(200):
    params.zero_grad()
    out = loss(params)
    D.backward(out, params)
    for t in params.values():
        t.data -= 0.1 * t.grad
print("least squares via GD :", params["w"].data.ravel().round(4))
print("least squares via lstsq:", np.linalg.lstsq(np.c_[X, np.ones(64)], y, rcond=None)[0][:3].ravel().round(4))

# a NaN anywhere stops the forward pass immediately, naming the op
try:
    with np.errstate(invalid="ignore"):
        D.log(D.Tensor([-1.0]))
except D.NonFiniteError as e:
    print("caught:", e)

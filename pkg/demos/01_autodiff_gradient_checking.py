"""A tour of the tensor core: forward ops, backward, and gradient checking.

Run: python3 demos/01_autodiff_gradient_checking.py
"""

import numpy as np

from mfsan.autodiff import Tensor, check_gradients, softmax

rng = np.random.default_rng(0)

# Tensors wrap float64 arrays; ops record how to push gradients back.
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))

logits = x @ w
probs = softmax(logits)
loss = (probs * probs).sum()
loss.backward()

print("loss:", loss.item())
print("grad shape matches parameter:", w.grad.shape == w.values.shape)

# A leaf feeding two consumers accumulates both path gradients.
v = Tensor([2.0], requires_grad=True)
((v * v) + v.mul_scalar(3.0)).sum().backward()
print("d/dv of v^2 + 3v at v=2:", v.grad[0], "(expected 7)")

# check_gradients compares every analytic gradient against central
# finite differences and reports the worst relative error per parameter.
a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)


def objective():
    return softmax(a @ b).log().mean().mul_scalar(-1.0)


report = check_gradients(objective, [("a", a), ("b", b)], step=1e-5)
print("\ngradient check on a softmax cross-entropy-style objective")
for name, err in report.per_parameter.items():
    print(f"  {name}: max rel err {err:.2e}")
print("passed:", report.passed)

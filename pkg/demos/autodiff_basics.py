"""The tape-based autodiff in a few lines: record, backward, check against finite differences."""
import numpy as np

from posefree import autodiff as ad
from posefree.autodiff import Tensor

rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(4, 3)) * 0.5, requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))

with ad.Tape():
    h = ad.gelu(ad.matmul(x, W))
    loss = ad.sum(ad.softmax(h, axis=-1) * Tensor(np.arange(3.0)))
    grads = ad.backward(loss)

print("loss", float(loss.data))
print("dloss/dW\n", np.round(grads[W], 4))

# grad_check re-runs the function with central differences
f = lambda t: ad.sum(ad.softmax(ad.gelu(ad.matmul(x, t)), axis=-1) * Tensor(np.arange(3.0)))  # noqa: E731
print("max relative error vs finite differences: %.1e" % ad.grad_check(f, W.data))

# shape errors name the operation and both shapes
try:
    ad.matmul(x, x)
except ValueError as e:
    print("error:", e)

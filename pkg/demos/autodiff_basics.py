"""
A first look at the tensor core
===============================

Build a few tensors, run ops forward, call backward on a scalar loss, and
check one gradient against a finite difference by hand.
"""

import numpy as np

import cropstress.tensor as T
from cropstress.tensor import Tensor

# tensors wrap numpy arrays; requires_grad marks leaves we differentiate
x = Tensor(np.array([[0.5, -1.2], [2.0, 0.1]]), requires_grad=True)
w = Tensor(np.array([[1.5, 0.3], [-0.7, 2.2]]), requires_grad=True)

# forward: elementwise multiply, relu, then reduce to a scalar
y = T.relu(T.mul(x, w))
loss = y.sum()
print("loss =", float(loss.data))

# backward fills .grad on every leaf that requires it
loss.backward()
print("x.grad =\n", x.grad)
print("w.grad =\n", w.grad)

# sanity: nudge one entry of x and compare the loss change to the gradient
h = 1e-6
x.data[0, 0] += h
up = float(T.relu(T.mul(x, w)).sum().data)
x.data[0, 0] -= 2 * h
down = float(T.relu(T.mul(x, w)).sum().data)
x.data[0, 0] += h
fd = (up - down) / (2 * h)
print(f"finite difference {fd:.6f} vs analytic {x.grad[0, 0]:.6f}")

# gradients accumulate across backward calls until cleared
x.zero_grad()
w.zero_grad()

# a small convolution: NHWC input, HWIO kernel, same padding
img = Tensor(np.random.default_rng(0).normal(size=(1, 6, 6, 3)), requires_grad=True)
kernel = Tensor(np.random.default_rng(1).normal(size=(3, 3, 3, 4)) * 0.2, requires_grad=True)
fmap = T.conv2d(img, kernel, stride=2)
print("conv output shape:", fmap.shape)  # ceil(6/2) = 3 -> (1, 3, 3, 4)

T.global_avg_pool(fmap).sum().backward()
print("kernel grad shape:", kernel.grad.shape)

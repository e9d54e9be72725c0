"""
A tiny autodiff engine
======================

Every layer of the network is a numpy function paired with its backward
pass. Here we build a small graph by hand and compare the engine's
gradients with central differences.
"""

import numpy as np

from simpleconv.core import Tensor, conv1d, global_avg_pool_time, linear, maxpool1d, relu, softmax_cross_entropy

rng = np.random.default_rng(0)

# %%
# A batch of 2 signals, 3 channels, 16 samples, through conv -> relu -> pool -> GAP -> linear
x = Tensor(rng.normal(size=(2, 3, 16)))
w = Tensor(rng.normal(size=(4, 3, 5)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
head_w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
head_b = Tensor(np.zeros(2), requires_grad=True)


def loss_of(w_arr):
    h = relu(conv1d(x, Tensor(w_arr), b))
    z = linear(global_avg_pool_time(maxpool1d(h)), head_w, head_b)
    return softmax_cross_entropy(z, np.eye(2)[[0, 1]])


h = relu(conv1d(x, w, b))
logits = linear(global_avg_pool_time(maxpool1d(h)), head_w, head_b)
loss = softmax_cross_entropy(logits, np.eye(2)[[0, 1]])
loss.backward()
print("loss", loss.item())

# %%
# Finite differences on one kernel tap
eps = 1e-6
probe = w.data.copy()
probe[1, 2, 3] += eps
up = loss_of(probe).item()
probe[1, 2, 3] -= 2 * eps
down = loss_of(probe).item()
print("engine  ", w.grad[1, 2, 3])
print("numeric ", (up - down) / (2 * eps))

# %%
# "Same" padding keeps the length, whatever the kernel size
for S in (1, 2, 5, 8):
    y = conv1d(Tensor(np.ones((1, 1, 10))), Tensor(np.ones((1, 1, S))), Tensor([0.0]))
    print(S, y.data[0, 0].astype(int))

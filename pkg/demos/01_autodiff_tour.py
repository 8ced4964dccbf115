"""
A quick tour of the autodiff layer
==================================

Tensors record the operations applied to them; ``backward`` walks that
record in reverse. Everything in the model is built from these pieces.
"""

import numpy as np

from capmod import autodiff as ad
from capmod import gradcheck
from capmod.autodiff import Tensor

# a parameter is a Tensor that asks for gradients
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True)
x = Tensor(np.array([[1.0, 3.0]]))

# loss = sum(tanh(x W)^2)
y = ad.tanh(x @ w)
loss = ad.tsum(y * y)
loss.backward()
print("loss", loss.item())
print("dloss/dW\n", w.grad)

# compare against central differences
num = ad.numeric_grad(lambda: ad.tsum(ad.tanh(x @ w) * ad.tanh(x @ w)), w)
print("max |analytic - numeric|", np.abs(num - w.grad).max())

# softmax stays finite for huge logits
print(ad.softmax(Tensor([1000.0, 0.0, -1000.0])).data)

# Adam on a toy quadratic
theta = Tensor(np.array([3.0, -2.0]), requires_grad=True)
state = ad.AdamState(lr=0.1)
for step in range(200):
    ad.tsum(theta * theta).backward()
    ad.adam_step({"theta": theta}, state)
print("theta after 200 Adam steps", theta.data)

# the same check, run over every parameter group of a full random model
report = gradcheck.run(max_entries=16)
print(gradcheck.format_report(report))
print("all groups pass:", gradcheck.passed(report))

"""
The autodiff engine on a small convolutional graph.

Gradients come from one reverse sweep; `finite_diff_check` compares them
with central differences in float64.
"""
import numpy as np

from segkit import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(1, 2, 6, 6, 6)))
w = ad.Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.2, requires_grad=True)
labels = rng.integers(0, 3, size=(1, 6, 6, 6))
target = np.moveaxis(np.eye(3)[labels], -1, 1)

probs = ad.softmax_channels(ad.conv3d(x, w, padding=1))
loss = ad.dice_loss(probs, target)
loss.backward()
print("loss", loss.item(), "grad norm", np.linalg.norm(w.grad))


def f(weights):
    return ad.dice_loss(ad.softmax_channels(ad.conv3d(x, weights, padding=1)), target)


print("worst relative error:", ad.finite_diff_check(f, w.data))

# A few Adam steps push the loss down.
state = ad.AdamState.for_params([w])
for step in range(5):
    w.zero_grad()
    loss = f(w)
    loss.backward()
    ad.adam_step([w], [w.grad], state, lr=1e-2)
    print(step, round(loss.item(), 5))

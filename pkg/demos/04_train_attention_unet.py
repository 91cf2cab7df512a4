"""
Training a small attention U-Net on phantoms.

Two rounds, the second with half the batch size. Each epoch appends loss,
dice and the voxel metrics of the whole-tumour region to the history.
"""
import numpy as np

from segkit.phantom import generate_phantom
from segkit.unet import Checkpoint, ModelConfig, TrainPlan, mean_soft_dice, predict, train
from segkit.volume import minmax_normalize

samples = []
for seed in range(4):
    m, l = generate_phantom(seed, (32, 32, 32), 7, 4)
    samples.append((m.map(minmax_normalize).stack(), l.labels))

cfg = ModelConfig(depth=3, base_channels=8, seed=7)
plan = TrainPlan(rounds=[(10, 2), (10, 1)], lr=1e-4, seed=7)
ckpt = Checkpoint.initial(cfg)
print("parameters:", ckpt.model.num_parameters())


def show(c):
    r = c.history[-1]
    print(f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  sens {r['sensitivity']:.3f}  "
          f"spec {r['specificity']:.3f}")


train(ckpt, samples, plan, on_epoch=show)
print("mean soft dice:", round(mean_soft_dice(ckpt.model, samples), 4))

# Hard labels for the first phantom.
probs = predict(ckpt.model, [samples[0][0]])[0]
print("predicted class counts:", np.bincount(probs.argmax(0).ravel(), minlength=4))

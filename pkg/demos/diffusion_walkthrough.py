"""
Forward noising and exact inversion
===================================

Diffuse a toy image for T steps while recording every noise draw, then
run the deterministic reverse step with a "perfect" predictor that hands
back the recorded noise.  The round trip is exact up to float64 rounding.
A real denoiser only approximates that noise; a few hundred training
steps on toy scenes are shown at the end.
"""

import numpy as np
import torch

from railsynth import forward_step, generate_toy_dataset, make_schedule, reverse_step
from railsynth.diffusion import Trainer, images_to_tensor
from railsynth.nets import IdentityCodec, make_denoiser

schedule = make_schedule("linear", T=50)
pairs = generate_toy_dataset(16, (32, 32), seed=0)
x0 = images_to_tensor([pairs[0].image]).double()

gen = torch.Generator().manual_seed(0)
x, noises = x0, []
for t in range(1, schedule.T + 1):
    noises.append(torch.randn(x0.shape, generator=gen, dtype=torch.float64))
    x = forward_step(x, schedule.beta(t), noises[-1])
    if t in (1, 10, 25, 50):
        corr = np.corrcoef(x.ravel(), x0.ravel())[0, 1]
        print(f"t={t:2d}  std={float(x.std()):.3f}  corr(x_t, x_0)={corr:.3f}")

for t in range(schedule.T, 0, -1):
    x = reverse_step(x, noises[t - 1], schedule.beta(t))
print("max reconstruction error:", float((x - x0).abs().max()))

model = make_denoiser(0, base=8)
trainer = Trainer(model, IdentityCodec(), schedule, seed=0, lr=2e-3)
batch = images_to_tensor([p.image for p in pairs])
for step in range(200):
    trainer.step(batch[(step % 2) * 8 : (step % 2) * 8 + 8], ["a railway scene"] * 8)
print("loss, first 50 steps: %.4f  last 50: %.4f" % (np.mean(trainer.losses[:50]), np.mean(trainer.losses[-50:])))

"""
Attaching a control branch
==========================

The base denoiser is frozen, its encoder blocks are cloned, and each clone
feeds the base through a 1x1 convolution that starts at zero.  Right after
attaching, the controlled model reproduces the base exactly; training moves
only the clone, the links and the condition encoder.
"""

import torch

from railsynth import attach_control, build_condition, generate_toy_dataset, make_schedule
from railsynth.diffusion import Trainer, conditions_to_tensor, images_to_tensor
from railsynth.nets import IdentityCodec, make_denoiser, state_hash

size = 32
pairs = generate_toy_dataset(16, (size, size), seed=1)
images = images_to_tensor([p.image for p in pairs])
conds = conditions_to_tensor([build_condition(p, "cmb111") for p in pairs])

base = make_denoiser(0, base=8)
cd = attach_control(base, image_size=size)
base_hash = state_hash(cd.base)

t = torch.full((4,), 10)
with torch.no_grad():
    gap = (cd.predict(images[:4], t, [""] * 4, conds[:4]) - cd.base.predict(images[:4], t, [""] * 4)).abs().max()
print("fresh branch, max |controlled - base|:", float(gap))

trainer = Trainer(cd, IdentityCodec(), make_schedule("linear", 20), seed=0, lr=2e-3)
for step in range(60):
    i = (step % 4) * 4
    trainer.step(images[i : i + 4], ["a railway track"] * 4, conds[i : i + 4])

for name, link in cd.zero_links.items():
    print(f"link {name:>5}: |w| = {float(link.weight.detach().abs().sum()):.4f}")
print("base unchanged:", state_hash(cd.base) == base_hash)

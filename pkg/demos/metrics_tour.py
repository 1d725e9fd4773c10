"""
FID and IoU on toy data
=======================

Two independent draws of toy scenes sit close in the desk feature space;
random noise images sit far away.  IoU is shown on a pair of small masks.
"""

import numpy as np

from railsynth import fid, generate_toy_dataset, iou, make_desk_extractor

ext = make_desk_extractor(0)
a = [p.image for p in generate_toy_dataset(32, (32, 32), seed=1)]
b = [p.image for p in generate_toy_dataset(32, (32, 32), seed=2)]
noise = [np.random.default_rng(i).integers(0, 256, (32, 32, 3), dtype=np.uint8) for i in range(32)]

print("FID(toy, toy)   = %.3f" % fid(a, b, ext))
print("FID(toy, noise) = %.3f" % fid(a, noise, ext))

y = np.array([[1, 1, 0, 0]])
y_pred = np.array([[0, 1, 1, 0]])
print("IoU of", y.tolist(), "and", y_pred.tolist(), "=", iou(y, y_pred))

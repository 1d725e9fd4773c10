"""
Condition images for a toy scene
================================

One procedural rail scene, its Canny edges, and the five 3-channel
conditions built from mask and edges.  The strip is written to
``conditions_gallery.png``.
"""

import numpy as np
from PIL import Image

from railsynth import ScenePair, Scheme, build_condition, canny_edges, generate_toy_dataset

pair = generate_toy_dataset(1, (96, 96), seed=4)[0]
edges = canny_edges(pair.image, sigma=1.4, low=50, high=150)
print("rail pixels:", int((pair.mask == 1).sum()), "edge pixels:", int((edges.pixels > 0).sum()))

# class ids are 0..2, far too dark to see; stretch them for the picture only
visible = ScenePair(pair.image, pair.mask * 100, pair.index)

tiles = [pair.image]
for scheme in Scheme:
    cond = build_condition(visible, scheme)
    tiles.append(cond.channels)
    print(f"{scheme.label:>10}: channel means", cond.channels.reshape(-1, 3).mean(0).round(1))

Image.fromarray(np.concatenate(tiles, axis=1)).save("conditions_gallery.png")

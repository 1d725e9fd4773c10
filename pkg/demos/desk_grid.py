"""
A complete desk-scale run
=========================

Both experiment grids at a very small scale: 30 generation cells scored by
FID, then segmenters trained on the six real/synthetic mixes.  Everything
lands in ``runs/demo``; running the script again reuses the cached cells.
"""

from railsynth.experiments import render_report, resolve_config, run_generation_grid, run_segmentation_grid

cfg = resolve_config({
    "data.toy_n": 32,
    "data.size": 16,
    "diffusion.T": 10,
    "diffusion.width": 8,
    "train.base_steps": 40,
    "train.control_steps": 20,
    "fid.n": 6,
    "seg.n": 12,
    "seg.val_n": 6,
    "seg.size": 16,
    "seg.epochs": 4,
    "seg.seeds": [0, 1],
}, {"run.out": "runs/demo"})

run_generation_grid(cfg)
run_segmentation_grid(cfg)
print(render_report(cfg["run.out"]))

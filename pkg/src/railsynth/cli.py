"""Command line entry point: ``railsynth <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import Scheme, save_condition
from .dataset import (
    TOY_CLASSES,
    center_crop,
    generate_toy_dataset,
    load_scene_pairs,
    read_class_table,
    resize_pair,
    save_scene_pairs,
    split_dataset,
)
from .errors import ConfigError, RailSynthError
from .experiments import (
    RunManifest,
    Workspace,
    cell_id,
    derive_seed,
    fid,
    make_extractor,
    read_config,
    render_report,
    resize_samples,
    resolve_config,
    run_generation_grid,
    run_segmentation_grid,
    save_images,
    synthetic_samples,
    validation_indices,
)
from .prompting import PromptKind, Regime
from .segmentation import SegConfig, build_setup, composition, samples_from_pairs, train_segmenter

log = logging.getLogger("railsynth")

SCHEME_CHOICES = [s.value for s in Scheme]


def _size(text):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or N, got {text!r}") from None
    return dims * 2 if len(dims) == 1 else dims


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--scale", choices=["desk", "paper"])
    common.add_argument("--seed", type=int)
    common.add_argument("--scheme", choices=SCHEME_CHOICES)
    common.add_argument("--prompts", choices=[k.value for k in PromptKind])
    common.add_argument("--neg", dest="neg", action="store_true", default=None)
    common.add_argument("--no-neg", dest="neg", action="store_false")
    common.add_argument("--out", type=Path)
    common.add_argument("--captioner-url")
    common.add_argument("--force", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="railsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", parents=[common], help="crop/resize/split a RailSem19-style directory")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--crop", type=_size, default=None, help="centre crop, e.g. 1080x1080")
    p.add_argument("--size", type=_size, default=None, help="resize target, e.g. 512")

    p = sub.add_parser("make-toy-data", parents=[common], help="write a procedural toy dataset")
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--size", type=_size, default=(64, 64))

    sub.add_parser("build-conditions", parents=[common], help="write condition PNGs for the training split")
    sub.add_parser("train-control", parents=[common], help="train the control branch for one cell")

    p = sub.add_parser("generate", parents=[common], help="sample synthetic images")
    p.add_argument("--n", type=int, default=None)

    sub.add_parser("eval-fid", parents=[common], help="FID of generated images against validation")

    p = sub.add_parser("train-seg", parents=[common], help="train the rail segmenter for one setup")
    p.add_argument("--setup", choices=list("ABCDEF"), default="A")

    p = sub.add_parser("run-grid", parents=[common], help="run the generation and/or segmentation grid")
    p.add_argument("--grid", choices=["generation", "segmentation", "both"], default="both")

    p = sub.add_parser("report", parents=[common], help="render Markdown reports of a finished run")
    p.add_argument("--run", type=Path, required=True)
    return parser


def config_from_args(args):
    file_values = read_config(args.config) if args.config else {}
    overrides = {
        "run.seed": args.seed,
        "condition.scheme": args.scheme,
        "prompts.kind": args.prompts,
        "prompts.neg": args.neg,
        "run.out": str(args.out) if args.out else None,
        "prompts.captioner_url": args.captioner_url,
    }
    return resolve_config(file_values, overrides, args.scale)


def _current_cell(cfg):
    return Scheme.parse(cfg["condition.scheme"]), Regime(PromptKind(cfg["prompts.kind"]), cfg["prompts.neg"])


def cmd_prepare_data(args, cfg):
    out = Path(cfg["run.out"])
    table_path = args.root / "classes.txt"
    table = read_class_table(table_path) if table_path.exists() else None
    pairs = load_scene_pairs(args.root, table)
    if args.crop:
        pairs = [center_crop(p, args.crop) for p in pairs]
    if args.size:
        pairs = [resize_pair(p, args.size) for p in pairs]
    save_scene_pairs(pairs, out / "data", table)
    split = split_dataset(pairs, cfg["data.ratio"], cfg["data.split_seed"])
    manifest = RunManifest(out, cfg)
    manifest.append("prepare-data", root=str(args.root), n=len(pairs), split=split.indices,
                    crop=args.crop, size=args.size)
    print(f"{len(pairs)} pairs -> {out / 'data'} (train {len(split.train)}, val {len(split.val)})")


def cmd_make_toy_data(args, cfg):
    out = Path(cfg["run.out"])
    pairs = generate_toy_dataset(args.n, args.size, cfg["run.seed"])
    save_scene_pairs(pairs, out / "data", TOY_CLASSES)
    RunManifest(out, cfg).append("make-toy-data", n=args.n, size=args.size, seed=cfg["run.seed"])
    print(f"{len(pairs)} toy pairs -> {out / 'data'}")


def cmd_build_conditions(args, cfg):
    ws = Workspace(cfg)
    ws.start("build-conditions")
    scheme = Scheme.parse(cfg["condition.scheme"])
    params = (cfg["condition.canny_sigma"], cfg["condition.canny_low"], cfg["condition.canny_high"])
    records = []
    for pair, cond in zip(ws.train_pairs, ws.conditions(ws.train_pairs, scheme)):
        path = ws.out / "conditions" / scheme.value / f"{pair.source_id}.png"
        records.append(save_condition(cond, path, params))
    ws.manifest.append("conditions", scheme=scheme.value, records=records)
    print(f"{len(records)} {scheme.value} conditions -> {ws.out / 'conditions' / scheme.value}")


def cmd_train_control(args, cfg):
    ws = Workspace(cfg)
    ws.start("train-control")
    scheme, regime = _current_cell(cfg)
    ws.train_control(scheme, regime, force=args.force)
    print(f"control branch {cell_id(scheme, regime)} -> {ws.out / 'control'}")


def cmd_generate(args, cfg):
    ws = Workspace(cfg)
    ws.start("generate")
    scheme, regime = _current_cell(cfg)
    cd = ws.train_control(scheme, regime)
    n = args.n or cfg["generate.n"]
    pairs = ws.val_pairs[:n]
    seed = derive_seed(cfg["run.seed"], f"sample:{cell_id(scheme, regime)}")
    images, records, used = ws.generate(cd, pairs, scheme, regime, seed)
    paths = save_images(images, ws.out / "generated" / cell_id(scheme, regime), [p.source_id for p in used])
    ws.manifest.append("generate", cell=cell_id(scheme, regime), images=[str(p) for p in paths], prompts=records)
    print(f"{len(paths)} images -> {paths[0].parent if paths else ws.out}")


def cmd_eval_fid(args, cfg):
    ws = Workspace(cfg)
    ws.start("eval-fid")
    scheme, regime = _current_cell(cfg)
    cell = cell_id(scheme, regime)
    gen_dir = ws.out / "generated" / cell
    files = sorted(gen_dir.glob("*.png")) if gen_dir.exists() else []
    if not files:
        raise RailSynthError(f"no generated images for cell {cell} in {gen_dir}; run `generate` first")
    synth = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    real = [p.image for p in ws.val_pairs[: cfg["fid.n"]]]
    extractor = make_extractor(cfg)
    score = fid(real, synth, extractor)
    ws.manifest.append("eval-fid", cell=cell, fid=score, n_real=len(real), n_synth=len(synth),
                       extractor=extractor.extractor_id)
    print(f"FID[{cell}] = {score:.4f} (n_real={len(real)}, n_synth={len(synth)}, {extractor.extractor_id})")


def cmd_train_seg(args, cfg):
    ws = Workspace(cfg)
    ws.start("train-seg")
    rail_ids = set(cfg["data.rail_ids"])
    val_idx = validation_indices(cfg, ws)
    pool = [p for p in ws.pairs if p.index not in set(val_idx)][: cfg["seg.n"]]
    synth = samples_from_pairs(pool, rail_ids)
    if args.setup != "A":
        synth, _, pool = synthetic_samples(cfg, ws, pool)
    real = samples_from_pairs(pool, rail_ids)
    by_index = {p.index: p for p in ws.pairs}
    val = samples_from_pairs([by_index[i] for i in val_idx], rail_ids)
    size = cfg["seg.size"]
    real, synth, val = resize_samples(real, size), resize_samples(synth, size), resize_samples(val, size)
    corpus = build_setup(args.setup, real, synth, min(cfg["seg.n"], len(pool)))
    seg_cfg = SegConfig(epochs=cfg["seg.epochs"], batch_size=cfg["seg.batch"], lr=cfg["seg.lr"],
                        base=cfg["seg.width"], depth=cfg["seg.depth"])
    res = train_segmenter(corpus, val, seg_cfg, cfg["run.seed"])
    ws.manifest.append("train-seg", setup=args.setup, composition=composition(corpus), validation=val_idx,
                       best=res.best_miou, last=res.last_miou, best_epoch=res.best_epoch)
    print(f"setup {args.setup}: best mIoU {100 * res.best_miou:.3f} (epoch {res.best_epoch}), "
          f"last {100 * res.last_miou:.3f}")


def cmd_run_grid(args, cfg):
    if args.grid in ("generation", "both"):
        run_generation_grid(cfg, force=args.force)
    if args.grid in ("segmentation", "both"):
        run_segmentation_grid(cfg, force=args.force)
    print(render_report(cfg["run.out"]))


def cmd_report(args, cfg):
    print(render_report(args.run), end="")


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "make-toy-data": cmd_make_toy_data,
    "build-conditions": cmd_build_conditions,
    "train-control": cmd_train_control,
    "generate": cmd_generate,
    "eval-fid": cmd_eval_fid,
    "train-seg": cmd_train_seg,
    "run-grid": cmd_run_grid,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "field": exc.field, "message": str(exc)}), file=sys.stderr)
        return 1
    except RailSynthError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, default=str), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

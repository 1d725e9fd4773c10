"""Run configuration, manifests and the two experiment grids.

A run lives in one output directory::

    <out>/manifest.jsonl       append-only event log
    <out>/config.txt           resolved configuration
    <out>/base.pt              shared frozen denoiser
    <out>/control/<cell>.pt    control branch per (scheme, prompt regime)
    <out>/cells/<cell>.json    cached FID cell results (resumable)
    <out>/seg/<setup>_<seed>.json
    <out>/fid_report.csv, fid_grid.md, seg_table.csv, seg_table.md
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import threading
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .conditioning import Scheme, build_condition
from .control import ControlledDenoiser, attach_control, load_denoiser, save_denoiser
from .dataset import (
    TOY_CLASSES,
    center_crop,
    generate_toy_dataset,
    load_scene_pairs,
    read_class_table,
    resize_image,
    resize_mask,
    resize_pair,
    split_dataset,
)
from .diffusion import Trainer, conditions_to_tensor, images_to_tensor, make_schedule, sample, tensor_to_images
from .errors import CaptionerUnavailable, ConfigError, MissingArtifact, UnknownScheme
from .metrics import FID_FOOTNOTE, IdentityFeatures, fid, make_desk_extractor
from .nets import IdentityCodec, make_denoiser
from .prompting import (
    DECORATOR_PRESETS,
    GRID_REGIMES,
    HTTPCaptioner,
    PromptKind,
    Regime,
    StubCaptioner,
    build_prompt_bundles,
)
from .segmentation import (
    SETUP_IDS,
    SYNTHETIC,
    SegConfig,
    SegSample,
    binarize_mask,
    build_setup,
    composition,
    read_seg_csv,
    run_setup_grid,
    samples_from_pairs,
    seg_table_markdown,
    write_seg_csv,
)

log = logging.getLogger(__name__)

SCHEMES = tuple(Scheme)

DEFAULTS = {
    "run.seed": 0,
    "run.out": "runs/desk",
    "run.scale": "desk",
    "data.root": "",
    "data.class_table": "",
    "data.toy_n": 96,
    "data.crop": 0,
    "data.size": 32,
    "data.ratio": 0.8,
    "data.split_seed": 0,
    "data.rail_ids": [1],
    "condition.scheme": "mask",
    "condition.canny_sigma": 1.4,
    "condition.canny_low": 50.0,
    "condition.canny_high": 150.0,
    "prompts.kind": "none",
    "prompts.neg": False,
    "prompts.fixed": "a railway scene",
    "prompts.negatives": ["low quality-image", "bad anatomy", "unrealistic rails"],
    "prompts.decorator": "default",
    "prompts.captioner_url": "",
    "prompts.captioner_timeout": 30.0,
    "prompts.captioner_workers": 4,
    "prompts.neg_in_training": False,
    "prompts.neg_at_inference": True,
    "diffusion.kind": "linear",
    "diffusion.T": 50,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "diffusion.width": 16,
    "diffusion.stochastic": False,
    "diffusion.guidance": 2.0,
    "train.base_steps": 300,
    "train.control_steps": 150,
    "train.batch": 8,
    "train.lr": 1e-3,
    "train.prompt_dropout": 0.1,
    "train.clone_prompt": True,
    "train.auto": True,
    "generate.n": 8,
    "generate.batch": 8,
    "fid.extractor": "desk",
    "fid.seed": 0,
    "fid.n": 16,
    "grid.schemes": [s.value for s in SCHEMES],
    "grid.regimes": [r.slug for r in GRID_REGIMES],
    "grid.synth_source": "model",
    "seg.n": 48,
    "seg.val_n": 24,
    "seg.val_indices": [],
    "seg.size": 32,
    "seg.epochs": 10,
    "seg.batch": 4,
    "seg.lr": 1e-3,
    "seg.width": 8,
    "seg.depth": 3,
    "seg.seeds": [0, 1, 2],
    "seg.setups": list(SETUP_IDS),
    "seg.scheme": "mask",
    "seg.prompts": "caption",
}

PAPER_OVERRIDES = {
    "run.scale": "paper",
    "data.crop": 1080,
    "data.size": 512,
    "diffusion.T": 1000,
    "diffusion.width": 64,
    "train.control_steps": 22100,  # 13 epochs x 6800 images / batch 4
    "train.batch": 4,
    "generate.n": 1700,
    "fid.n": 1700,
    "seg.n": 3000,
    "seg.val_n": 500,
    "seg.size": 512,
    "seg.epochs": 40,
    "seg.lr": 1e-4,
    "seg.width": 32,
    "seg.depth": 4,
}

NON_IDENTITY_KEYS = ("run.out",)


# --- configuration ------------------------------------------------------------


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        return text


def read_config(path):
    """Flat ``dotted.key = value`` lines; values are JSON when they parse as JSON."""
    cfg = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}", f"expected 'key = value', got {raw!r}")
        cfg[key.strip()] = parse_value(value)
    return cfg


def write_config(cfg, path):
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(cfg.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_config(file_values=None, overrides=None, scale=None):
    """Defaults, then the scale preset, then the config file, then CLI overrides."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    scale = scale or overrides.get("run.scale") or file_values.get("run.scale") or "desk"
    if scale not in ("desk", "paper"):
        raise ConfigError("run.scale", f"must be 'desk' or 'paper', got {scale!r}")
    cfg = dict(DEFAULTS)
    if scale == "paper":
        cfg.update(PAPER_OVERRIDES)
    unknown = sorted(set(file_values) - set(cfg))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    cfg.update(file_values)
    cfg.update(overrides)
    cfg["run.scale"] = scale
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not cfg["condition.canny_low"] < cfg["condition.canny_high"]:
        raise ConfigError("condition.canny_low", "must be below condition.canny_high")
    if cfg["condition.canny_sigma"] <= 0:
        raise ConfigError("condition.canny_sigma", "must be positive")
    for key in ("condition.scheme", "seg.scheme"):
        try:
            Scheme.parse(cfg[key])
        except UnknownScheme:
            raise ConfigError(key, f"unknown scheme {cfg[key]!r}") from None
    for s in cfg["grid.schemes"]:
        try:
            Scheme.parse(s)
        except UnknownScheme:
            raise ConfigError("grid.schemes", f"unknown scheme {s!r}") from None
    for key in ("prompts.kind", "seg.prompts"):
        if cfg[key] not in {k.value for k in PromptKind}:
            raise ConfigError(key, f"must be one of none/fixed/caption, got {cfg[key]!r}")
    for slug in cfg["grid.regimes"]:
        parse_regime(slug)
    if cfg["prompts.decorator"] not in DECORATOR_PRESETS:
        raise ConfigError("prompts.decorator", f"choose from {sorted(DECORATOR_PRESETS)}")
    if cfg["data.size"] % 8 or cfg["data.size"] <= 0:
        raise ConfigError("data.size", "must be a positive multiple of 8")
    if cfg["seg.size"] % 8 or cfg["seg.size"] <= 0:
        raise ConfigError("seg.size", "must be a positive multiple of 8")
    if not 0.0 < cfg["data.ratio"] < 1.0:
        raise ConfigError("data.ratio", "must lie in (0, 1)")
    if cfg["diffusion.T"] < 1:
        raise ConfigError("diffusion.T", "must be >= 1")
    if not 0.0 < cfg["diffusion.beta_start"] <= cfg["diffusion.beta_end"] < 1.0:
        raise ConfigError("diffusion.beta_end", "need 0 < beta_start <= beta_end < 1")
    if cfg["grid.synth_source"] not in ("model", "real"):
        raise ConfigError("grid.synth_source", "must be 'model' or 'real'")
    bad = [s for s in cfg["seg.setups"] if s not in SETUP_IDS]
    if bad:
        raise ConfigError("seg.setups", f"unknown setups {bad}")
    if cfg["fid.extractor"] not in ("desk", "identity"):
        raise ConfigError("fid.extractor", "must be 'desk' or 'identity'")


def config_hash(cfg):
    """Stable across key order; the output directory is not part of a run's identity."""
    identity = {k: v for k, v in cfg.items() if k not in NON_IDENTITY_KEYS}
    return hashlib.sha256(json.dumps(identity, sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(root, purpose):
    digest = hashlib.sha256(f"{root}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def parse_regime(slug):
    kind, _, neg = slug.partition("+")
    if neg not in ("", "neg") or kind not in {k.value for k in PromptKind}:
        raise ConfigError("grid.regimes", f"bad regime {slug!r}")
    return Regime(PromptKind(kind), neg == "neg")


# --- manifest -------------------------------------------------------------------


class RunManifest:
    """Append-only JSON-lines event log; writes are serialised by a lock."""

    def __init__(self, out_dir, cfg):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.path = self.out / "manifest.jsonl"
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self._lock = threading.Lock()

    def append(self, event, **payload):
        record = {"event": event, "config_hash": self.hash,
                  "time": _dt.datetime.now(_dt.timezone.utc).isoformat(), **payload}
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
        return record

    def events(self, event=None):
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return [r for r in records if event is None or r["event"] == event]

    def completed(self, key):
        return any(r.get("key") == key and r["config_hash"] == self.hash for r in self.events("done"))

    def mark_done(self, key, **payload):
        return self.append("done", key=key, **payload)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray,)):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- data ------------------------------------------------------------------------


def load_data(cfg):
    """Return ``(pairs, class_table)`` at the configured working resolution."""
    size = (cfg["data.size"], cfg["data.size"])
    if cfg["data.root"]:
        root = Path(cfg["data.root"])
        table_path = cfg["data.class_table"] or root / "classes.txt"
        table = read_class_table(table_path) if Path(table_path).exists() else None
        pairs = load_scene_pairs(root, table)
        if cfg["data.crop"]:
            side = cfg["data.crop"]
            pairs = [center_crop(p, (min(side, p.shape[0]), min(side, p.shape[1]))) for p in pairs]
        pairs = [resize_pair(p, size) for p in pairs]
        return pairs, table or {i: str(i) for i in range(256)}
    pairs = generate_toy_dataset(cfg["data.toy_n"], size, derive_seed(cfg["run.seed"], "toy-data"))
    return pairs, dict(TOY_CLASSES)


def canny_params(cfg):
    return (cfg["condition.canny_sigma"], cfg["condition.canny_low"], cfg["condition.canny_high"])


def make_captioner(cfg, class_table):
    if cfg["prompts.captioner_url"]:
        return HTTPCaptioner(cfg["prompts.captioner_url"], timeout=cfg["prompts.captioner_timeout"])
    return StubCaptioner(class_table, set(cfg["data.rail_ids"]))


def make_bundles(cfg, pairs, regime, captioner):
    kwargs = {
        "negatives": tuple(cfg["prompts.negatives"]),
        "fixed_prompt": cfg["prompts.fixed"],
        "decorator": DECORATOR_PRESETS[cfg["prompts.decorator"]],
    }
    return build_prompt_bundles(pairs, regime, captioner, max_workers=cfg["prompts.captioner_workers"], **kwargs)


def _captioned(pairs, bundles):
    """Drop pairs whose caption failed (already logged)."""
    keep = [i for i, b in enumerate(bundles) if b is not None]
    if not keep:
        raise CaptionerUnavailable("captioner failed for every image")
    return keep, [pairs[i] for i in keep], [bundles[i] for i in keep]


def make_extractor(cfg):
    if cfg["fid.extractor"] == "identity":
        return IdentityFeatures()
    return make_desk_extractor(cfg["fid.seed"])


def schedule_from(cfg):
    return make_schedule(cfg["diffusion.kind"], cfg["diffusion.T"], cfg["diffusion.beta_start"],
                         cfg["diffusion.beta_end"])


# --- training / generation -----------------------------------------------------------


def _batches(n, batch, generator):
    while True:
        order = torch.randperm(n, generator=generator).tolist()
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield order[i : i + batch]


class Workspace:
    """Data, split and shared base model for one run directory."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.out = Path(out or cfg["run.out"])
        self.manifest = RunManifest(self.out, cfg)
        self.schedule = schedule_from(cfg)
        self.codec = IdentityCodec()
        self._pairs = None
        self._base = None

    @property
    def pairs(self):
        if self._pairs is None:
            self._pairs, self.class_table = load_data(self.cfg)
            self.split = split_dataset(self._pairs, self.cfg["data.ratio"], self.cfg["data.split_seed"])
        return self._pairs

    @property
    def train_pairs(self):
        self.pairs
        return self.split.train

    @property
    def val_pairs(self):
        self.pairs
        return self.split.val

    def start(self, command):
        write_config(self.cfg, self.out / "config.txt")
        self.manifest.append("start", command=command, config=self.cfg)

    # shared base denoiser, trained once and frozen afterwards
    def base(self):
        if self._base is not None:
            return copy.deepcopy(self._base)
        path = self.out / "base.pt"
        if path.exists() and self.manifest.completed("base"):
            self._base, _, _ = load_denoiser(path)
            return copy.deepcopy(self._base)
        cfg = self.cfg
        model = make_denoiser(derive_seed(cfg["run.seed"], "init:base"), base=cfg["diffusion.width"])
        trainer = Trainer(model, self.codec, self.schedule, seed=derive_seed(cfg["run.seed"], "noise:base"),
                          lr=cfg["train.lr"], prompt_dropout=cfg["train.prompt_dropout"])
        images = images_to_tensor([p.image for p in self.train_pairs])
        prompts = make_bundles(cfg, self.train_pairs, Regime(PromptKind.FIXED), None)
        gen = torch.Generator().manual_seed(derive_seed(cfg["run.seed"], "shuffle:base"))
        batches = _batches(len(images), min(cfg["train.batch"], len(images)), gen)
        for _ in range(cfg["train.base_steps"]):
            idx = next(batches)
            trainer.step(images[idx], [prompts[i].positive for i in idx])
        model.freeze()
        save_denoiser(model, path, self.schedule, self.manifest.hash)
        trainer.write_loss_csv(self.out / "base_loss.csv")
        self.manifest.mark_done("base", artifact=str(path), sha256=file_hash(path),
                                final_loss=trainer.losses[-1] if trainer.losses else None)
        self._base, _, _ = load_denoiser(path)
        return copy.deepcopy(self._base)

    def conditions(self, pairs, scheme):
        return [build_condition(p, scheme, canny_params(self.cfg)) for p in pairs]

    def train_control(self, scheme, regime, force=False):
        cfg = self.cfg
        cell = cell_id(scheme, regime)
        path = self.out / "control" / f"{cell}.pt"
        key = f"control:{cell}"
        if path.exists() and self.manifest.completed(key) and not force:
            cd, _ = ControlledDenoiser.load(path, self.base())
            return cd
        if not cfg["train.auto"]:
            raise MissingArtifact(f"no control checkpoint for cell {cell}", cell=cell, path=str(path))
        path.parent.mkdir(parents=True, exist_ok=True)
        cd = attach_control(self.base(), image_size=cfg["data.size"], clone_prompt=cfg["train.clone_prompt"],
                            seed=derive_seed(cfg["run.seed"], f"init:{cell}"))
        trainer = Trainer(cd, self.codec, self.schedule, seed=derive_seed(cfg["run.seed"], f"noise:{cell}"),
                          lr=cfg["train.lr"], prompt_dropout=cfg["train.prompt_dropout"])
        bundles = make_bundles(cfg, self.train_pairs, regime, make_captioner(cfg, self.class_table))
        _, pairs, bundles = _captioned(self.train_pairs, bundles)
        images = images_to_tensor([p.image for p in pairs])
        conds = conditions_to_tensor(self.conditions(pairs, scheme))
        uncond = None
        if regime.negative and cfg["prompts.neg_in_training"]:
            uncond = [b.negative for b in bundles]
        gen = torch.Generator().manual_seed(derive_seed(cfg["run.seed"], f"shuffle:{cell}"))
        batches = _batches(len(images), min(cfg["train.batch"], len(images)), gen)
        for _ in range(cfg["train.control_steps"]):
            idx = next(batches)
            trainer.step(images[idx], [bundles[i].positive for i in idx], conds[idx],
                         uncond_prompts=[uncond[i] for i in idx] if uncond else None)
        cd.save(path, extra={"schedule": self.schedule.to_dict(), "config_hash": self.manifest.hash,
                             "scheme": Scheme.parse(scheme).value, "regime": regime.slug})
        trainer.write_loss_csv(self.out / "control" / f"{cell}_loss.csv")
        self.manifest.mark_done(key, artifact=str(path), sha256=file_hash(path), losses=trainer.losses)
        return cd

    def generate(self, cd, pairs, scheme, regime, seed):
        """One synthetic image per pair, conditioned on that pair's mask/edges.

        Pairs whose caption failed are skipped, so the pairs actually used
        are returned alongside the images and their prompt records.
        """
        cfg = self.cfg
        bundles = make_bundles(cfg, pairs, regime, make_captioner(cfg, self.class_table))
        _, pairs, bundles = _captioned(pairs, bundles)
        conds = conditions_to_tensor(self.conditions(pairs, scheme))
        if not cfg["prompts.neg_at_inference"]:
            bundles = [type(b)(b.positive, "", b.regime, b.model_id) for b in bundles]
        gen = torch.Generator().manual_seed(seed)
        size = cfg["data.size"]
        images = []
        step = cfg["generate.batch"]
        for i in range(0, len(pairs), step):
            chunk = bundles[i : i + step]
            shape = self.codec.latent_shape((len(chunk), 3, size, size))
            x = sample(cd, self.codec, self.schedule, shape, chunk, conds[i : i + step], gen,
                       guidance_scale=cfg["diffusion.guidance"], stochastic=cfg["diffusion.stochastic"])
            images.extend(tensor_to_images(x))
        records = [
            {"source_index": p.index, "seed": seed, **b.record()} for p, b in zip(pairs, bundles)
        ]
        return images, records, pairs


def cell_id(scheme, regime):
    return f"{Scheme.parse(scheme).value}__{regime.slug.replace('+', '-')}"


def save_images(images, directory, stems):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for img, stem in zip(images, stems):
        path = directory / f"{stem}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths


# --- generation grid ------------------------------------------------------------------

FID_COLUMNS = ("config_id", "prompt_regime", "condition_scheme", "fid", "n_real", "n_synth", "extractor_id")


def run_generation_grid(cfg, out=None, force=False, stop_after=None):
    """Evaluate every (prompt regime, condition scheme) cell; returns the grid rows.

    Cell results are cached as JSON so an interrupted run resumes where it
    stopped.  ``stop_after`` ends the run after that many newly computed
    cells (used to exercise resumption).
    """
    ws = Workspace(cfg, out)
    ws.start("run-grid:generation")
    extractor = make_extractor(cfg)
    regimes = [parse_regime(s) for s in cfg["grid.regimes"]]
    schemes = [Scheme.parse(s) for s in cfg["grid.schemes"]]
    n = min(cfg["fid.n"], len(ws.val_pairs))
    val = ws.val_pairs[:n]
    real_images = [p.image for p in val]
    cells_dir = ws.out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    fresh = 0
    for regime in regimes:
        for scheme in schemes:
            cell = cell_id(scheme, regime)
            cache = cells_dir / f"{cell}.json"
            if cache.exists() and not force:
                cached = json.loads(cache.read_text())
                # a cache written under another configuration is stale
                if cached.get("config_id") == ws.manifest.hash:
                    results[cell] = cached
                    continue
            if stop_after is not None and fresh >= stop_after:
                return None
            if cfg["grid.synth_source"] == "real":
                synth, records = list(real_images), []
            else:
                cd = ws.train_control(scheme, regime, force=force)
                seed = derive_seed(cfg["run.seed"], f"sample:{cell}")
                synth, records, used = ws.generate(cd, val, scheme, regime, seed)
                save_images(synth, ws.out / "generated" / cell, [p.source_id for p in used])
            score = fid(real_images, synth, extractor)
            result = {
                "config_id": ws.manifest.hash,
                "prompt_regime": regime.slug,
                "condition_scheme": scheme.value,
                "fid": score,
                "n_real": len(real_images),
                "n_synth": len(synth),
                "extractor_id": extractor.extractor_id,
            }
            cache.write_text(json.dumps(result, sort_keys=True))
            ws.manifest.append("fid_cell", cell=cell, result=result, prompts=records)
            results[cell] = result
            fresh += 1
    rows = [[results[cell_id(s, r)] for s in schemes] for r in regimes]
    write_fid_report(rows, ws.out)
    ws.manifest.mark_done("generation-grid", report=str(ws.out / "fid_report.csv"))
    return rows


def grid_markers(values):
    """Bold marks each row's minimum, italic each column's minimum."""
    arr = np.asarray(values, dtype=float)
    bold = arr == arr.min(axis=1, keepdims=True)
    italic = arr == arr.min(axis=0, keepdims=True)
    return bold, italic


def fid_grid_markdown(rows):
    regimes = [parse_regime(r[0]["prompt_regime"]) for r in rows]
    schemes = [Scheme.parse(c["condition_scheme"]) for c in rows[0]]
    values = [[c["fid"] for c in r] for r in rows]
    bold, italic = grid_markers(values)
    lines = ["| Prompts \\ Cond. | " + " | ".join(s.label for s in schemes) + " |",
             "|---|" + "---|" * len(schemes)]
    for i, regime in enumerate(regimes):
        cells = []
        for j, v in enumerate(values[i]):
            text = f"{v:.2f}"
            if italic[i, j]:
                text = f"*{text}*"
            if bold[i, j]:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {regime.label} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Bold: best score in the row (prompt regime). Italic: best score in the column (condition).")
    lines.append("")
    lines.append(FID_FOOTNOTE)
    return "\n".join(lines) + "\n"


def write_fid_report(rows, out):
    out = Path(out)
    with open(out / "fid_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FID_COLUMNS)
        for row in rows:
            for c in row:
                writer.writerow([c["config_id"], c["prompt_regime"], c["condition_scheme"], f"{c['fid']:.6f}",
                                 c["n_real"], c["n_synth"], c["extractor_id"]])
        fh.write(f"# {FID_FOOTNOTE}\n")
    (out / "fid_grid.md").write_text(fid_grid_markdown(rows))


def read_fid_report(path):
    with open(path, newline="") as fh:
        records = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    regimes, schemes = [], []
    for r in records:
        if r["prompt_regime"] not in regimes:
            regimes.append(r["prompt_regime"])
        if r["condition_scheme"] not in schemes:
            schemes.append(r["condition_scheme"])
    lookup = {(r["prompt_regime"], r["condition_scheme"]): r for r in records}
    rows = []
    for reg in regimes:
        row = []
        for sch in schemes:
            r = dict(lookup[(reg, sch)])
            r["fid"] = float(r["fid"])
            row.append(r)
        rows.append(row)
    return rows


# --- segmentation grid ---------------------------------------------------------------------


def _seg_resize(images, masks, size):
    return [resize_image(i, (size, size)) for i in images], [resize_mask(m, (size, size)) for m in masks]


def validation_indices(cfg, ws):
    if cfg["seg.val_indices"]:
        return list(cfg["seg.val_indices"])
    return [p.index for p in ws.val_pairs[: cfg["seg.val_n"]]]


def synthetic_samples(cfg, ws, pairs):
    """Synthetic counterparts of ``pairs``, generated with the segmentation
    study's condition scheme and prompt regime; mask ids are preserved.

    Returns ``(samples, prompt_records, used_pairs)``; ``used_pairs`` omits
    images whose caption failed.
    """
    scheme = Scheme.parse(cfg["seg.scheme"])
    regime = Regime(PromptKind(cfg["seg.prompts"]))
    cd = ws.train_control(scheme, regime)
    seed = derive_seed(cfg["run.seed"], "sample:seg")
    images, records, used = ws.generate(cd, pairs, scheme, regime, seed)
    rail_ids = set(cfg["data.rail_ids"])
    synth = [SegSample(img, binarize_mask(p.mask, rail_ids), SYNTHETIC, p.index) for img, p in zip(images, used)]
    return synth, records, used


def resize_samples(samples, size):
    out = []
    for s in samples:
        imgs, masks = _seg_resize([s.image], [s.binary_mask], size)
        out.append(SegSample(imgs[0], masks[0], s.origin, s.mask_id))
    return out


def run_segmentation_grid(cfg, out=None, force=False):
    ws = Workspace(cfg, out)
    ws.start("run-grid:segmentation")
    n = cfg["seg.n"]
    rail_ids = set(cfg["data.rail_ids"])
    val_idx = validation_indices(cfg, ws)
    by_index = {p.index: p for p in ws.pairs}
    val_pairs = [by_index[i] for i in val_idx]
    val_set = set(val_idx)
    # training images in native dataset order, never touching validation masks
    train_pool = [p for p in ws.pairs if p.index not in val_set][:n]
    if len(train_pool) < n:
        raise ConfigError("seg.n", f"only {len(train_pool)} non-validation pairs available, need {n}")
    synth, records, used = synthetic_samples(cfg, ws, train_pool)
    if len(used) < n:
        log.warning("%d of %d training images lost their caption; corpora use %d pairs", n - len(used), n, len(used))
        n = len(used)
    real = samples_from_pairs(used, rail_ids)
    val = samples_from_pairs(val_pairs, rail_ids)
    size = cfg["seg.size"]
    real, synth, val = resize_samples(real, size), resize_samples(synth, size), resize_samples(val, size)
    seg_cfg = SegConfig(epochs=cfg["seg.epochs"], batch_size=cfg["seg.batch"], lr=cfg["seg.lr"],
                        base=cfg["seg.width"], depth=cfg["seg.depth"])
    seg_dir = ws.out / "seg"
    seg_dir.mkdir(parents=True, exist_ok=True)
    done = {}
    for path in seg_dir.glob("*.json"):
        if force:
            break
        rec = json.loads(path.read_text())
        if rec.get("config_hash") == ws.manifest.hash:
            done[(rec["setup"], rec["seed"])] = rec["result"]
    for sid in cfg["seg.setups"]:
        ws.manifest.append("corpus", setup=sid, validation=val_idx,
                           composition=composition(build_setup(sid, real, synth, n)))

    def on_result(sid, seed, result):
        rec = {"setup": sid, "seed": seed, "result": result, "config_hash": ws.manifest.hash}
        (seg_dir / f"{sid}_{seed}.json").write_text(json.dumps(rec))
        ws.manifest.append("seg_run", setup=sid, seed=seed, result=result)

    rows = run_setup_grid(cfg["seg.setups"], cfg["seg.seeds"], real, synth, val, seg_cfg, n, on_result, done)
    write_seg_csv(rows, ws.out / "seg_table.csv")
    (ws.out / "seg_table.md").write_text(seg_table_markdown(rows))
    ws.manifest.mark_done("segmentation-grid", report=str(ws.out / "seg_table.csv"), prompts=records)
    return rows


def render_report(run_dir):
    """Markdown for whichever grid reports exist in ``run_dir``."""
    run_dir = Path(run_dir)
    parts = []
    if (run_dir / "fid_report.csv").exists():
        parts.append("## Generation grid (FID)\n\n" + fid_grid_markdown(read_fid_report(run_dir / "fid_report.csv")))
    if (run_dir / "seg_table.csv").exists():
        parts.append("## Rail segmentation\n\n" + seg_table_markdown(read_seg_csv(run_dir / "seg_table.csv")))
    if not parts:
        raise MissingArtifact(f"no grid reports found in {run_dir}", run=str(run_dir))
    return "\n".join(parts)


"""Binary rail segmentation: corpus composition (setups A-F), training and the seed grid."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AlignmentError, EmptyDataset, LeakageError, UnknownClass
from .metrics import iou
from .nets import SegUNet, seeded

log = logging.getLogger(__name__)

REAL = "real"
SYNTHETIC = "synthetic"
SETUP_IDS = ("A", "B", "C", "D", "E", "F")
TABLE_COLUMNS = ("Setup", "#Real", "#Synthetic", "mIoU", "Std")


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray
    binary_mask: np.ndarray
    origin: str
    mask_id: int


def binarize_mask(class_mask, rail_ids, class_table=None):
    rail_ids = set(rail_ids)
    if class_table is not None:
        unknown = rail_ids - set(class_table)
        if unknown:
            raise UnknownClass(f"rail ids {sorted(unknown)} not in class table", ids=sorted(unknown))
    class_mask = np.asarray(class_mask)
    if not rail_ids:
        return np.zeros(class_mask.shape, dtype=np.uint8)
    return np.isin(class_mask, sorted(rail_ids)).astype(np.uint8)


def samples_from_pairs(pairs, rail_ids, origin=REAL):
    return [SegSample(p.image, binarize_mask(p.mask, rail_ids), origin, p.index) for p in pairs]


def setup_counts(setup_id, n=3000):
    """``(#real, #synthetic)`` for a setup given ``n`` real/synthetic pairs."""
    half = n // 2
    return {"A": (n, 0), "B": (0, n), "C": (n, n), "D": (half, half), "E": (half, half), "F": (half, half)}[setup_id]


def build_setup(setup_id, real, synth, n=None):
    """Compose a training corpus from mask-aligned real and synthetic samples.

    With ``n`` pairs (3000 in the reference protocol) and ``h = n // 2``:
    A real[:n]; B synth[:n]; C real[:n] + synth[:n]; D real[:h] + synth[:h];
    E real[:h] + synth[h:n]; F synth[:h] + real[h:n].
    """
    n = len(real) if n is None else n
    if len(real) < n or len(synth) < n:
        raise EmptyDataset(f"setup needs {n} real and synthetic samples, got {len(real)} and {len(synth)}")
    for i in range(n):
        if real[i].mask_id != synth[i].mask_id:
            raise AlignmentError(
                f"position {i}: real mask {real[i].mask_id} vs synthetic mask {synth[i].mask_id}", position=i
            )
    h = n // 2
    parts = {
        "A": (real[:n],),
        "B": (synth[:n],),
        "C": (real[:n], synth[:n]),
        "D": (real[:h], synth[:h]),
        "E": (real[:h], synth[h:n]),
        "F": (synth[:h], real[h:n]),
    }
    if setup_id not in parts:
        raise KeyError(f"unknown setup {setup_id!r}")
    return [s for part in parts[setup_id] for s in part]


def composition(corpus):
    return [{"mask_id": s.mask_id, "origin": s.origin} for s in corpus]


@dataclass
class SegConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    base: int = 8
    depth: int = 3

    @classmethod
    def paper(cls):
        return cls(epochs=40, batch_size=4, lr=1e-4, base=32, depth=4)


@dataclass
class SegResult:
    model: SegUNet
    best_miou: float
    last_miou: float
    best_epoch: int
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    @property
    def miou(self):
        return self.best_miou


def _to_batch(samples):
    # permute alone leaves channels-last strides; conv backward needs contiguous NCHW
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32) / 255.0)
    x = x.permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack([s.binary_mask for s in samples]).astype(np.float32))[:, None]
    return x, y


@torch.no_grad()
def evaluate(model, val, batch_size=16):
    """Mean per-image IoU of the thresholded predictions."""
    model.eval()
    scores = []
    for i in range(0, len(val), batch_size):
        chunk = val[i : i + batch_size]
        x, _ = _to_batch(chunk)
        pred = (model(x) > 0).squeeze(1).numpy()
        scores.extend(iou(s.binary_mask, p.astype(np.uint8)) for s, p in zip(chunk, pred))
    model.train()
    return float(np.mean(scores))


def check_leakage(corpus, val):
    overlap = {s.mask_id for s in corpus} & {s.mask_id for s in val}
    if overlap:
        raise LeakageError(f"{len(overlap)} validation masks appear in training", mask_ids=sorted(overlap))


def make_segmenter(config, seed):
    with seeded(seed):
        return SegUNet(base=config.base, depth=config.depth)


def train_segmenter(corpus, val, config=None, seed=0):
    """Train with per-pixel BCE and Adam; report the best-epoch validation mIoU."""
    config = config or SegConfig()
    if not corpus:
        raise EmptyDataset("empty training corpus")
    check_leakage(corpus, val)
    model = make_segmenter(config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed)
    history, losses = [], []
    for epoch in range(config.epochs):
        order = torch.randperm(len(corpus), generator=gen).tolist()
        for i in range(0, len(order), config.batch_size):
            x, y = _to_batch([corpus[j] for j in order[i : i + config.batch_size]])
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(evaluate(model, val))
        log.debug("epoch %d val mIoU %.4f", epoch, history[-1])
    if history:
        best_epoch = int(np.argmax(history))
        best, last = history[best_epoch], history[-1]
    else:
        best_epoch, best = -1, evaluate(model, val)
        last = best
    return SegResult(model, best, last, best_epoch, history, losses)


def run_setup_grid(setups, seeds, real, synth, val, config=None, n=None, on_result=None, done=None):
    """Train every setup under every seed; mIoU mean and population std in 0-100.

    ``done`` maps ``(setup, seed)`` to an already known result (for resuming);
    ``on_result(setup, seed, result_dict)`` is called after each new run.
    """
    n = len(real) if n is None else n
    done = dict(done or {})
    rows = []
    for sid in setups:
        corpus = build_setup(sid, real, synth, n)
        scores = []
        for seed in seeds:
            key = (sid, seed)
            if key not in done:
                res = train_segmenter(corpus, val, config, seed)
                done[key] = {"best": res.best_miou, "last": res.last_miou, "best_epoch": res.best_epoch}
                if on_result is not None:
                    on_result(sid, seed, done[key])
            scores.append(done[key]["best"] * 100.0)
        n_real, n_synth = setup_counts(sid, n)
        rows.append(
            {
                "Setup": sid,
                "#Real": n_real,
                "#Synthetic": n_synth,
                "mIoU": float(np.mean(scores)),
                "Std": float(np.std(scores)),
                "seeds": list(seeds),
                "per_seed": scores,
            }
        )
    return rows


def seg_table_markdown(rows):
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for r in rows:
        lines.append(f"| {r['Setup']} | {r['#Real']} | {r['#Synthetic']} | {r['mIoU']:.3f} | {r['Std']:.3f} |")
    return "\n".join(lines) + "\n"


def write_seg_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in rows:
            writer.writerow([r["Setup"], r["#Real"], r["#Synthetic"], f"{r['mIoU']:.3f}", f"{r['Std']:.3f}"])


def read_seg_csv(path):
    with open(path, newline="") as fh:
        return [
            {"Setup": r["Setup"], "#Real": int(r["#Real"]), "#Synthetic": int(r["#Synthetic"]),
             "mIoU": float(r["mIoU"]), "Std": float(r["Std"])}
            for r in csv.DictReader(fh)
        ]

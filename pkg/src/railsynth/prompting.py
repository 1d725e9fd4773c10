"""Prompt regimes, quality decorator and captioner clients."""

from __future__ import annotations

import base64
import enum
import io
import json
import logging
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import CaptionerUnavailable

log = logging.getLogger(__name__)

DECORATOR = "high quality, extremely detailed, 4K, HQ"
DECORATOR_SHORT = "high quality, extremely detailed, 4K"
DECORATOR_PRESETS = {"default": DECORATOR, "short": DECORATOR_SHORT}
DEFAULT_FIXED_PROMPT = "a railway scene"
DEFAULT_NEGATIVES = ("low quality-image", "bad anatomy", "unrealistic rails")


class PromptKind(str, enum.Enum):
    NONE = "none"
    FIXED = "fixed"
    CAPTION = "caption"


@dataclass(frozen=True)
class Regime:
    kind: PromptKind
    negative: bool = False

    @classmethod
    def parse(cls, kind, negative=False):
        return cls(PromptKind(str(kind).lower()), bool(negative))

    @property
    def label(self):
        base = {PromptKind.NONE: "", PromptKind.FIXED: "Fixed pr.", PromptKind.CAPTION: "BLIP-2 pr."}[self.kind]
        if not self.negative:
            return base or "No pr."
        return f"{base} + Neg. pr." if base else "Neg. pr."

    @property
    def slug(self):
        return self.kind.value + ("+neg" if self.negative else "")


# row order of the generation grid
GRID_REGIMES = (
    Regime(PromptKind.NONE),
    Regime(PromptKind.FIXED),
    Regime(PromptKind.CAPTION),
    Regime(PromptKind.NONE, True),
    Regime(PromptKind.FIXED, True),
    Regime(PromptKind.CAPTION, True),
)


@dataclass(frozen=True)
class PromptBundle:
    positive: str
    negative: str
    regime: Regime
    model_id: str = ""

    def record(self):
        return {
            "positive": self.positive,
            "negative": self.negative,
            "regime": self.regime.slug,
            "captioner": self.model_id,
        }


def decorate(prompt, decorator=DECORATOR):
    """Append the quality decorator.  Not idempotent: never apply twice."""
    if not decorator:
        raise ValueError("decorator must be non-empty")
    return f"{prompt}, {decorator}" if prompt else decorator


def _plural(name):
    return name if name.endswith("s") else name + "s"


def stub_caption(mask, class_table, rail_ids=None):
    """Deterministic offline captioner driven by class pixel counts.

    ``"a railway track with <up to two most frequent other classes>"`` or
    ``"a scene"`` when there are no rail pixels.  Background is never named.
    """
    mask = np.asarray(mask).astype(np.int64)
    if rail_ids is None:
        rail_ids = {k for k, v in class_table.items() if "rail" in v.lower()}
    counts = np.bincount(mask.ravel(), minlength=256)
    if not rail_ids or counts[sorted(rail_ids)].sum() == 0:
        return "a scene"
    others = [
        (int(counts[cid]), cid)
        for cid, name in class_table.items()
        if cid not in rail_ids and name.lower() != "background" and counts[cid] > 0
    ]
    # ties broken by class id for determinism
    others.sort(key=lambda item: (-item[0], item[1]))
    names = [_plural(class_table[cid]) for _, cid in others[:2]]
    if not names:
        return "a railway track"
    return "a railway track with " + " and ".join(names)


class StubCaptioner:
    model_id = "stub-caption-v1"

    def __init__(self, class_table, rail_ids=None):
        self.class_table = dict(class_table)
        self.rail_ids = rail_ids

    def caption(self, pair):
        return stub_caption(pair.mask, self.class_table, self.rail_ids)


class HTTPCaptioner:
    """Client for ``POST <url>/caption`` taking ``{"image": <base64 PNG>, "max_length": n}``
    and answering ``{"caption": str, "model": str}``."""

    def __init__(self, url, timeout=30.0, max_length=40):
        self.url = url.rstrip("/") + "/caption"
        self.timeout = timeout
        self.max_length = max_length
        self.model_id = ""

    def request_payload(self, image):
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        return {"image": base64.b64encode(buf.getvalue()).decode("ascii"), "max_length": self.max_length}

    def caption(self, pair):
        body = json.dumps(self.request_payload(pair.image)).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise CaptionerUnavailable(f"captioner at {self.url} failed: {exc}", url=self.url) from exc
        caption = str(reply.get("caption", "")).strip()
        if not caption:
            raise CaptionerUnavailable(f"captioner at {self.url} returned an empty caption", url=self.url)
        self.model_id = str(reply.get("model", ""))
        return caption


def build_prompt_bundle(
    pair,
    regime,
    captioner=None,
    negatives=DEFAULT_NEGATIVES,
    fixed_prompt=DEFAULT_FIXED_PROMPT,
    decorator=DECORATOR,
):
    if regime.kind == PromptKind.NONE:
        text, model_id = "", ""
    elif regime.kind == PromptKind.FIXED:
        text, model_id = fixed_prompt, ""
    else:
        if captioner is None:
            raise CaptionerUnavailable("captioned regime requires a captioner")
        text = captioner.caption(pair)
        model_id = getattr(captioner, "model_id", "")
    negative = ", ".join(negatives) if regime.negative else ""
    return PromptBundle(decorate(text, decorator), negative, regime, model_id)


def build_prompt_bundles(pairs, regime, captioner=None, max_workers=4, **kwargs):
    """Bundles for many pairs; failed captions are logged and yield ``None``."""

    def one(pair):
        try:
            return build_prompt_bundle(pair, regime, captioner, **kwargs)
        except CaptionerUnavailable as exc:
            log.warning("skipping image %s: %s", pair.index, exc)
            return None

    if regime.kind == PromptKind.CAPTION and max_workers > 1 and not isinstance(captioner, StubCaptioner):
        with ThreadPoolExecutor(max_workers) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]

"""Condition images: Canny edges, channel replication and mask/edge mixing."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInput, InvalidThresholds, SizeMismatch, UnknownScheme

DEFAULT_CANNY = (1.4, 50.0, 150.0)
LUMA = np.array([0.299, 0.587, 0.114])
TIE_RTOL = 1e-9


class Scheme(str, enum.Enum):
    MASK = "mask"
    CANNY = "canny"
    CMB12 = "cmb12"
    CMB21 = "cmb21"
    CMB111 = "cmb111"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UnknownScheme(f"unknown condition scheme {value!r}", scheme=value) from None

    @property
    def label(self):
        return SCHEME_LABELS[self]


SCHEME_LABELS = {
    Scheme.MASK: "Seg. masks",
    Scheme.CANNY: "Canny",
    Scheme.CMB12: "Cmb12",
    Scheme.CMB21: "Cmb21",
    Scheme.CMB111: "Cmb111",
}

# channel layout per scheme, "M" = mask, "E" = edges
CHANNEL_LAYOUT = {
    Scheme.MASK: ("M", "M", "M"),
    Scheme.CANNY: ("E", "E", "E"),
    Scheme.CMB12: ("E", "M", "M"),
    Scheme.CMB111: ("M", "E", "M"),
    Scheme.CMB21: ("M", "E", "E"),
}


@dataclass(frozen=True)
class EdgeMap:
    pixels: np.ndarray
    params: tuple = DEFAULT_CANNY

    def __post_init__(self):
        sigma, low, high = self.params
        if not low < high:
            raise InvalidThresholds(f"low threshold {low} must be below high {high}", low=low, high=high)
        if sigma <= 0:
            raise InvalidThresholds(f"sigma must be positive, got {sigma}", sigma=sigma)


@dataclass(frozen=True)
class ConditionImage:
    channels: np.ndarray
    scheme: Scheme
    provenance: int | None = None

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[2] != 3:
            raise InvalidInput(f"condition must be HxWx3, got {self.channels.shape}")
        if self.channels.dtype != np.uint8:
            raise InvalidInput(f"condition must be uint8, got {self.channels.dtype}")

    def split(self):
        """Recover ``(mask, edges)`` from the declared channel layout."""
        layout = CHANNEL_LAYOUT[self.scheme]
        mask = edges = None
        for i, kind in enumerate(layout):
            if kind == "M" and mask is None:
                mask = self.channels[..., i]
            elif kind == "E" and edges is None:
                edges = self.channels[..., i]
        return mask, edges


def to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ LUMA


def _non_max_suppression(mag, gx, gy):
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # neighbour offsets (dy, dx) along the gradient for each quantised direction
    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1)
    h, w = mag.shape
    # magnitudes this close are ties; rounding must not decide which side wins
    tol = TIE_RTOL * float(mag.max(initial=0.0))
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # strict on the forward side, lenient behind: a two-pixel plateau keeps its far pixel
        keep |= (sector == s) & (mag > fwd + tol) & (mag >= bwd - tol)
    return np.where(keep & (mag > 0), mag, 0.0)


def _hysteresis(nms, low, high):
    weak = nms > low
    strong = nms > high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(weak)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_edges(image, sigma=DEFAULT_CANNY[0], low=DEFAULT_CANNY[1], high=DEFAULT_CANNY[2]):
    """Classic Canny detector on the 0-255 luma scale.

    Gaussian smoothing (``sigma``), 3x3 Sobel gradients, non-maximum
    suppression over four quantised directions, then hysteresis with
    8-connectivity: pixels with magnitude ``> high`` seed edges that grow
    through pixels ``> low``.
    """
    if not low < high:
        raise InvalidThresholds(f"low threshold {low} must be below high {high}", low=low, high=high)
    if sigma <= 0:
        raise InvalidThresholds(f"sigma must be positive, got {sigma}", sigma=sigma)
    gray = to_gray(image)
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    nms = _non_max_suppression(mag, gx, gy)
    edges = _hysteresis(nms, low, high)
    return EdgeMap(np.where(edges, 255, 0).astype(np.uint8), (float(sigma), float(low), float(high)))


def _single_channel(raster):
    if isinstance(raster, EdgeMap):
        return raster.pixels
    raster = np.asarray(raster)
    if raster.ndim == 3 and raster.shape[2] == 1:
        raster = raster[..., 0]
    if raster.ndim != 2:
        raise InvalidInput(f"expected a single-channel HxW raster, got shape {raster.shape}")
    return raster.astype(np.uint8)


def replicate_channels(single, provenance=None):
    """Stack one raster three times; an :class:`EdgeMap` gives ``CANNY``, anything else ``MASK``."""
    scheme = Scheme.CANNY if isinstance(single, EdgeMap) else Scheme.MASK
    s = _single_channel(single)
    return ConditionImage(np.stack([s, s, s], axis=-1), scheme, provenance)


def combine_condition(mask, edges, scheme, provenance=None):
    """Mix mask (M) and edges (E) channels: cmb12=(E,M,M), cmb111=(M,E,M), cmb21=(M,E,E)."""
    scheme = Scheme.parse(scheme)
    if scheme not in (Scheme.CMB12, Scheme.CMB21, Scheme.CMB111):
        raise UnknownScheme(f"{scheme.value} is not a combined scheme", scheme=scheme)
    m = _single_channel(mask)
    e = _single_channel(edges)
    if m.shape != e.shape:
        raise SizeMismatch(f"mask {m.shape} vs edges {e.shape}", mask_shape=m.shape, edge_shape=e.shape)
    source = {"M": m, "E": e}
    return ConditionImage(np.stack([source[k] for k in CHANNEL_LAYOUT[scheme]], axis=-1), scheme, provenance)


def build_condition(pair, scheme, canny_params=DEFAULT_CANNY):
    scheme = Scheme.parse(scheme)
    if scheme == Scheme.MASK:
        return replicate_channels(pair.mask, provenance=pair.index)
    edges = canny_edges(pair.image, *canny_params)
    if scheme == Scheme.CANNY:
        return replicate_channels(edges, provenance=pair.index)
    return combine_condition(pair.mask, edges, scheme, provenance=pair.index)


def normalize_condition(cond):
    channels = cond.channels if isinstance(cond, ConditionImage) else np.asarray(cond)
    return channels.astype(np.float64) / 255.0


def save_condition(cond, path, canny_params=None):
    """Write the condition as a 3-channel PNG; returns its manifest record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(cond.channels).save(path)
    record = {"path": str(path), "scheme": cond.scheme.value, "source_index": cond.provenance}
    if cond.scheme != Scheme.MASK:
        record["canny"] = list(canny_params or DEFAULT_CANNY)
    return record

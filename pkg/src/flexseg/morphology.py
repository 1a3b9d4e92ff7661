"""Boundary bands from semantic masks.

All operators use a square k x k structuring element with replicate (edge)
padding, so image borders never create spurious boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

IGNORE_LABEL = 255


def _check_kernel(k: int, name: str = "k") -> int:
    k = int(k)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"{name} must be an odd integer >= 1, got {k}")
    return k


def _windows(a: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(a, r, mode="edge")
    return sliding_window_view(padded, (k, k))


def dilate(mask, k: int) -> np.ndarray:
    """Binary dilation: 1 where any pixel of the k x k neighbourhood is 1."""
    k = _check_kernel(k)
    m = np.asarray(mask).astype(bool)
    if k == 1:
        return m.astype(np.uint8)
    return _windows(m, k).any(axis=(-2, -1)).astype(np.uint8)


def erode(mask, k: int) -> np.ndarray:
    """Binary erosion: 1 where every pixel of the k x k neighbourhood is 1."""
    k = _check_kernel(k)
    m = np.asarray(mask).astype(bool)
    if k == 1:
        return m.astype(np.uint8)
    return _windows(m, k).all(axis=(-2, -1)).astype(np.uint8)


def check_mask(mask, num_classes: int | None = None) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"semantic mask must be 2-D, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.integer):
        raise ValueError(f"semantic mask must be integer, got {m.dtype}")
    if num_classes is not None:
        bad = (m != IGNORE_LABEL) & ((m < 0) | (m >= num_classes))
        if bad.any():
            raise ValueError(f"mask labels must lie in [0, {num_classes}) or be {IGNORE_LABEL}")
    return m


def extract_boundary(mask, k_d: int = 3, k_e: int = 3) -> np.ndarray:
    """Union over classes of ``dilate(M_c, k_d) & ~erode(M_c, k_e)``.

    Pixels whose max(k_d, k_e) neighbourhood touches the ignore label are
    removed from the result.
    """
    k_d = _check_kernel(k_d, "k_d")
    k_e = _check_kernel(k_e, "k_e")
    m = check_mask(mask)
    out = np.zeros(m.shape, dtype=bool)
    for c in np.unique(m):
        if c == IGNORE_LABEL:
            continue
        mc = m == c
        out |= dilate(mc, k_d).astype(bool) & ~erode(mc, k_e).astype(bool)
    ignored = m == IGNORE_LABEL
    if ignored.any():
        out &= ~dilate(ignored, max(k_d, k_e)).astype(bool)
    return out.astype(np.uint8)


def downsample_mask(mask, stride: int) -> np.ndarray:
    """Majority-vote downsampling over s x s blocks.

    Ignore pixels do not vote; ties go to the smallest class ID and an
    all-ignore block stays ignored.
    """
    m = check_mask(mask)
    s = int(stride)
    if s < 1:
        raise ValueError("stride must be >= 1")
    h, w = m.shape
    if h % s or w % s:
        raise ValueError(f"mask shape {m.shape} not divisible by stride {s}")
    if s == 1:
        return m.copy()
    blocks = m.reshape(h // s, s, w // s, s).transpose(0, 2, 1, 3).reshape(h // s, w // s, s * s)
    labels = np.unique(m[m != IGNORE_LABEL])
    out = np.full((h // s, w // s), IGNORE_LABEL, dtype=m.dtype)
    if labels.size == 0:
        return out
    counts = np.stack([(blocks == c).sum(axis=-1) for c in labels], axis=-1)
    best = labels[np.argmax(counts, axis=-1)]  # argmax picks the first, i.e. smallest, label
    has_votes = counts.max(axis=-1) > 0
    out[has_votes] = best[has_votes]
    return out


@dataclass
class BoundaryBands:
    """Disjoint granularity rings: 0 interior, 1 thin, 2 medium, 3 thick."""

    bands: np.ndarray
    kernels: Tuple[int, int, int]
    labels: np.ndarray

    def band_mask(self, g: int) -> np.ndarray:
        return self.bands == g


def granularity_bands(mask_d, kernels: Sequence[int] = (3, 5, 7)) -> BoundaryBands:
    ks = tuple(_check_kernel(k, "kernel") for k in kernels)
    if len(ks) != 3 or not (ks[0] < ks[1] < ks[2]):
        raise ValueError(f"kernels must be three strictly increasing odd ints, got {tuple(kernels)}")
    m = check_mask(mask_d)
    bands = np.zeros(m.shape, dtype=np.uint8)
    # fill from thickest to thinnest so the smallest kernel wins
    for g in (3, 2, 1):
        b = extract_boundary(m, ks[g - 1], ks[g - 1]).astype(bool)
        bands[b] = g
    return BoundaryBands(bands=bands, kernels=ks, labels=m.copy())


class BoundaryExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping a stack of masks [N, H, W] to boundaries.

    With ``granularities`` set, masks are first majority-downsampled by
    ``stride`` and the output holds ring indices instead of a binary band.
    """

    def __init__(self, kd=3, ke=3, granularities=None, stride=1):
        self.kd = kd
        self.ke = ke
        self.granularities = granularities
        self.stride = stride

    def fit(self, X, y=None):
        _check_kernel(self.kd, "kd")
        _check_kernel(self.ke, "ke")
        return self

    def transform(self, X):
        masks = np.asarray(X)
        squeeze = masks.ndim == 2
        if squeeze:
            masks = masks[None]
        if self.granularities is None:
            out = np.stack([extract_boundary(m, self.kd, self.ke) for m in masks])
        else:
            out = np.stack([
                granularity_bands(downsample_mask(m, self.stride), self.granularities).bands
                for m in masks
            ])
        return out[0] if squeeze else out

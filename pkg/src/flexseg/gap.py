"""Class x granularity prototype bank and the weighted prototype InfoNCE loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .morphology import IGNORE_LABEL, BoundaryBands
from .tensor_io import read_tensor, seeded_rng, write_tensor

logger = logging.getLogger(__name__)

N_GRANULARITIES = 3
NORM_TOL = 1e-9


class PrototypeInvariantError(RuntimeError):
    """A prototype row is not unit-norm."""


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # [C, G, D], unit rows
    frequencies: np.ndarray  # [C, G] int64
    momentum: float = 0.99
    skipped: int = 0

    @classmethod
    def initialize(cls, num_classes: int, dim: int, momentum: float = 0.99, seed: int = 0):
        """Random unit prototypes drawn from the run seed; zero counts."""
        rng = seeded_rng(seed)
        protos = _normalize(rng.standard_normal((num_classes, N_GRANULARITIES, dim)))
        return cls(protos, np.zeros((num_classes, N_GRANULARITIES), dtype=np.int64), float(momentum))

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.frequencies.copy(), self.momentum, self.skipped)

    def check_unit(self) -> None:
        norms = np.linalg.norm(self.prototypes, axis=-1)
        if np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise PrototypeInvariantError(
                f"prototype norms deviate from 1 by {np.max(np.abs(norms - 1.0)):.3e}")

    def save(self, prefix) -> None:
        """Persist as ``<prefix>.prototypes.npy``, ``<prefix>.frequencies.npy`` and ``<prefix>.json``."""
        prefix = Path(prefix)
        write_tensor(self.prototypes, f"{prefix}.prototypes.npy")
        write_tensor(self.frequencies.astype(np.int64), f"{prefix}.frequencies.npy")
        meta = {"momentum": self.momentum, "num_classes": self.num_classes,
                "granularities": N_GRANULARITIES, "dim": self.dim}
        Path(f"{prefix}.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, prefix) -> "PrototypeBank":
        meta = json.loads(Path(f"{prefix}.json").read_text())
        protos = read_tensor(f"{prefix}.prototypes.npy").astype(np.float64)
        freqs = read_tensor(f"{prefix}.frequencies.npy").astype(np.int64)
        expected = (meta["num_classes"], meta["granularities"], meta["dim"])
        if protos.shape != expected or freqs.shape != expected[:2]:
            raise ValueError(f"bank files do not match sidecar dims {expected}")
        return cls(protos, freqs, float(meta["momentum"]))


@dataclass
class BoundaryFeatureSet:
    features: np.ndarray  # [N, D]
    coords: np.ndarray  # [N, 2] of (class, granularity in 1..3)
    positions: np.ndarray  # [N] flat row-major indices into the feature grid

    def __len__(self):
        return self.features.shape[0]


def gather_boundary_features(feat, bands, mask_d) -> BoundaryFeatureSet:
    """Collect (feature, class, granularity) for every band > 0, non-ignore pixel."""
    f = np.asarray(feat, dtype=np.float64)
    b = bands.bands if isinstance(bands, BoundaryBands) else np.asarray(bands)
    m = np.asarray(mask_d)
    if f.shape[:2] != b.shape or b.shape != m.shape:
        raise ValueError(f"shapes disagree: features {f.shape}, bands {b.shape}, mask {m.shape}")
    sel = ((b > 0) & (m != IGNORE_LABEL)).ravel()
    pos = np.flatnonzero(sel)
    coords = np.stack([m.ravel()[pos], b.ravel()[pos]], axis=1).astype(np.int64)
    return BoundaryFeatureSet(f.reshape(-1, f.shape[-1])[pos], coords, pos)


def update_prototypes(bank: PrototypeBank, fs: BoundaryFeatureSet) -> PrototypeBank:
    """Sequential per-pixel momentum updates; returns a new bank."""
    out = bank.copy()
    if len(fs) == 0:
        return out
    if fs.features.shape[1] != bank.dim:
        raise ValueError(f"feature dim {fs.features.shape[1]} != bank dim {bank.dim}")
    m = bank.momentum
    norms = np.linalg.norm(fs.features, axis=1)
    for i in np.flatnonzero(norms == 0.0):
        c, g = fs.coords[i]
        out.skipped += 1
        logger.warning("skipping zero-norm boundary feature (class %d, granularity %d)", c, g)
    keep = norms > 0.0
    units = fs.features[keep] / norms[keep, None]
    coords = fs.coords[keep]
    # prototypes only interact with their own coordinate, so each one can be
    # run through its features in order independently of the others
    flat = coords[:, 0] * N_GRANULARITIES + (coords[:, 1] - 1)
    for key in np.unique(flat):
        c, g = divmod(int(key), N_GRANULARITIES)
        p = out.prototypes[c, g].copy()
        for u in units[flat == key]:
            p = m * p + (1.0 - m) * u
            p /= math.sqrt(p @ p)
        out.prototypes[c, g] = p
        out.frequencies[c, g] += int(np.count_nonzero(flat == key))
    return out


def imbalance_weights(bank_or_freqs) -> np.ndarray:
    u = np.asarray(getattr(bank_or_freqs, "frequencies", bank_or_freqs), dtype=np.float64)
    raw = (u.max() + 1.0) / (u + 1.0)
    return raw / raw.max()


def gap_loss(bank: PrototypeBank, fs: BoundaryFeatureSet, tau: float) -> Tuple[float, np.ndarray]:
    """Weighted InfoNCE of each feature against all C*G prototypes.

    Prototypes are constants. Returns the loss and its gradient with respect
    to the raw (unnormalized) features.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = len(fs)
    if n == 0:
        return 0.0, np.zeros((0, bank.dim))
    bank.check_unit()
    c, g = fs.coords[:, 0], fs.coords[:, 1] - 1
    ng = bank.prototypes.shape[1]
    P = bank.prototypes.reshape(-1, bank.dim)
    target = c * ng + g
    w = imbalance_weights(bank)[c, g]

    f = np.asarray(fs.features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    u = f / norms
    s = u @ P.T / tau
    s_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - s_max)
    z = e.sum(axis=1, keepdims=True)
    logp_target = (s - s_max - np.log(z))[np.arange(n), target]
    loss = float(np.sum(-w * logp_target) / n)

    ds = e / z
    ds[np.arange(n), target] -= 1.0
    ds *= (w / n)[:, None]
    du = ds @ P / tau
    # d normalize(f) / df = (I - u u^T) / |f|
    df = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms
    return loss, df


def gap_step(bank: PrototypeBank, feat, bands, mask_d, tau: float):
    """Loss and gradient against the current bank, then momentum-update it.

    Returns ``(loss, grad_feat_map, updated_bank)``; the gradient has the
    layout of ``feat`` and is zero off the boundary.
    """
    f = np.asarray(feat, dtype=np.float64)
    fs = gather_boundary_features(f, bands, mask_d)
    loss, grad = gap_loss(bank, fs, tau)
    grad_map = np.zeros_like(f)
    grad_map.reshape(-1, f.shape[-1])[fs.positions] = grad
    return loss, grad_map, update_prototypes(bank, fs)

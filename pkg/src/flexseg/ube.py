"""Uncertainty-adaptive boundary weighting and boundary-handling CE losses.

Arrays follow a channels-last layout: logits ``[..., C]`` and labels / weight
maps ``[...]``. A leading batch axis is allowed everywhere; the entropy
statistics are then pooled over the whole batch unless ``per_image`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .morphology import IGNORE_LABEL

EPS = 1e-6
STRATEGIES = ("enhance", "ignore", "threshold", "reduce", "ube")


class EmptySupervisionError(ValueError):
    """Every pixel carries the ignore label."""


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_map(probs) -> np.ndarray:
    """Per-pixel natural-log entropy, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


@dataclass
class WeightMap:
    values: np.ndarray
    alpha: float
    mu_H: float | np.ndarray
    sigma_H: float | np.ndarray


def ube_weights(entropy, boundary, alpha: float, valid=None, per_image: bool = False) -> WeightMap:
    """``1 + alpha * sigmoid((H - mu) / (sigma + eps))`` on boundary pixels, 1 elsewhere.

    ``mu``/``sigma`` are the mean and population std of the entropy over the
    boundary pixels. ``valid`` (optional) drops ignore-label pixels from the
    boundary before anything is computed.
    """
    ent = np.asarray(entropy, dtype=np.float64)
    b = np.asarray(boundary).astype(bool)
    if b.shape != ent.shape:
        raise ValueError(f"boundary shape {b.shape} != entropy shape {ent.shape}")
    if valid is not None:
        b = b & np.asarray(valid, dtype=bool)
    w = np.ones_like(ent)

    def _fill(e, bb, out):
        if not bb.any():
            return 0.0, 0.0
        vals = e[bb]
        if vals.min() == vals.max():
            # exact statistics; the float mean of equal values can be off by an ulp
            mu, sigma = float(vals[0]), 0.0
        else:
            mu = float(vals.mean())
            sigma = float(vals.std())
        out[bb] = 1.0 + alpha * expit((vals - mu) / (sigma + EPS))
        return mu, sigma

    if per_image and ent.ndim >= 3:
        stats = [_fill(ent[i], b[i], w[i]) for i in range(ent.shape[0])]
        mu_h = np.array([s[0] for s in stats])
        sigma_h = np.array([s[1] for s in stats])
    else:
        mu_h, sigma_h = _fill(ent, b, w)
    return WeightMap(values=w, alpha=float(alpha), mu_H=mu_h, sigma_H=sigma_h)


def _prepare(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} disagree")
    valid = y != IGNORE_LABEL
    if not valid.any():
        raise EmptySupervisionError("all pixels carry the ignore label")
    c = z.shape[-1]
    if ((y[valid] < 0) | (y[valid] >= c)).any():
        raise ValueError(f"labels must lie in [0, {c}) or be {IGNORE_LABEL}")
    return z, y, valid


def pixel_ce(logits, labels) -> np.ndarray:
    """-log p_label per pixel; 0 at ignored pixels."""
    z, y, valid = _prepare(logits, labels)
    logp = log_softmax(z)
    safe = np.where(valid, y, 0).astype(np.intp)
    ce = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    return np.where(valid, ce, 0.0)


def weighted_ce(logits, labels, weights):
    """Weighted mean CE over non-ignored pixels. Returns ``(loss, per_pixel_ce)``."""
    _, y, valid = _prepare(logits, labels)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError(f"weights {w.shape} and labels {y.shape} disagree")
    ce = pixel_ce(logits, labels)
    n = int(valid.sum())
    return float(np.sum(np.where(valid, w * ce, 0.0)) / n), ce


def _onehot_grad(z, y, valid, scale):
    g = softmax_probs(z)
    safe = np.where(valid, y, 0).astype(np.intp)
    np.put_along_axis(g, safe[..., None], np.take_along_axis(g, safe[..., None], -1) - 1.0, axis=-1)
    return g * np.where(valid, scale, 0.0)[..., None]


def ube_grad_logits(logits, labels, weights) -> np.ndarray:
    """Gradient of :func:`weighted_ce` w.r.t. logits with the weights held fixed."""
    z, y, valid = _prepare(logits, labels)
    w = np.asarray(weights, dtype=np.float64)
    n = int(valid.sum())
    return _onehot_grad(z, y, valid, w / n)


@dataclass
class StrategySpec:
    kind: str = "ube"
    alpha: float = 5.0
    tau: float = 0.5
    a: float = 0.1
    gamma: float = 0.5
    ube_alpha: float = 3.0
    per_image: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.a >= 1:
            raise ValueError("threshold scaling a must be < 1")
        if self.gamma >= 1:
            raise ValueError("reduce factor gamma must be < 1")
        if self.kind == "enhance" and self.alpha < 1:
            raise ValueError("enhance weight alpha must be >= 1")


def strategy_terms(logits, labels, boundary, spec: StrategySpec):
    """Loss, d(loss)/d(logits) and per-pixel weight map for one strategy.

    The weight map is the effective per-pixel multiplier used in the loss
    (for ``threshold`` it is the local slope of the clipped CE).
    """
    z, y, valid = _prepare(logits, labels)
    b = np.asarray(boundary).astype(bool)
    if b.shape != y.shape:
        raise ValueError(f"boundary {b.shape} and labels {y.shape} disagree")
    b = b & valid
    ce = pixel_ce(z, y)
    n_mask = valid
    if spec.kind == "enhance":
        w = np.where(b, spec.alpha, 1.0)
        contrib = w * ce
    elif spec.kind == "reduce":
        w = np.where(b, spec.gamma, 1.0)
        contrib = w * ce
    elif spec.kind == "ignore":
        n_mask = valid & ~b
        if not n_mask.any():
            raise EmptySupervisionError("every supervised pixel lies on the boundary")
        w = np.where(b, 0.0, 1.0)
        contrib = ce
    elif spec.kind == "threshold":
        clipped = np.minimum(spec.tau, ce) + spec.a * np.maximum(0.0, ce - spec.tau)
        contrib = np.where(b, clipped, ce)
        w = np.where(b, np.where(ce > spec.tau, spec.a, 1.0), 1.0)
    else:
        ent = entropy_map(softmax_probs(z))
        w = ube_weights(ent, b, spec.ube_alpha, valid=valid, per_image=spec.per_image).values
        contrib = w * ce
    n = int(n_mask.sum())
    loss = float(np.sum(np.where(n_mask, contrib, 0.0)) / n)
    grad = _onehot_grad(z, y, n_mask, w / n)
    return loss, grad, w


def strategy_loss(logits, labels, boundary, spec: StrategySpec) -> float:
    return strategy_terms(logits, labels, boundary, spec)[0]

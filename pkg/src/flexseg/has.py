"""Hardness-aware image sampling.

Per-image losses are buffered and folded into an EMA hardness score every
``ema_period`` iterations. Each draw is random with probability
``threshold(t)`` and otherwise follows a temperature softmax over hardness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy.special import expit

from .tensor_io import seeded_rng

SCHEDULES = ("sigmoid", "linear", "none")
TRACE_COLUMNS = ("iter", "threshold", "mode", "image_id")


class HardnessTable:
    def __init__(self, n_images: int, beta: float = 0.9, ema_period: int = 50):
        if n_images < 1:
            raise ValueError("need at least one image")
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        self.scores = np.zeros(n_images)
        self.initialized = np.zeros(n_images, dtype=bool)
        self.pending_sum = np.zeros(n_images)
        self.pending_count = np.zeros(n_images, dtype=np.int64)
        self.beta = float(beta)
        self.ema_period = int(ema_period)
        self.last_flush_iter = 0

    def __len__(self):
        return self.scores.shape[0]

    def record_loss(self, image_id: int, loss: float, iteration: int) -> bool:
        """Buffer ``loss`` for ``image_id``; flush when the period has elapsed.

        Returns True if a flush happened.
        """
        if not 0 <= image_id < len(self):
            raise IndexError(f"image id {image_id} out of range [0, {len(self)})")
        if not math.isfinite(loss):
            raise ValueError(f"non-finite loss {loss} for image {image_id}")
        self.pending_sum[image_id] += loss
        self.pending_count[image_id] += 1
        if iteration - self.last_flush_iter >= self.ema_period:
            self.flush(iteration)
            return True
        return False

    def flush(self, iteration: int) -> None:
        seen = self.pending_count > 0
        mean = np.zeros_like(self.scores)
        mean[seen] = self.pending_sum[seen] / self.pending_count[seen]
        first = seen & ~self.initialized
        again = seen & self.initialized
        self.scores[first] = mean[first]
        self.scores[again] = self.beta * self.scores[again] + (1.0 - self.beta) * mean[again]
        self.initialized |= seen
        self.pending_sum[:] = 0.0
        self.pending_count[:] = 0
        self.last_flush_iter = iteration


@dataclass
class ScheduleState:
    kind: str = "sigmoid"
    k: float = 0.05
    midpoint: int = 1000
    total_iters: int = 2000

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")


def threshold(sched: ScheduleState, t: int) -> float:
    """Probability of a uniformly random draw at iteration ``t``."""
    if sched.kind == "sigmoid":
        return float(expit(-sched.k * (t - sched.midpoint)))
    if sched.kind == "linear":
        return max(0.0, 1.0 - t / sched.total_iters)
    return 1.0


def sampling_probs(table_or_scores, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    h = np.asarray(getattr(table_or_scores, "scores", table_or_scores), dtype=np.float64)
    z = h / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def draw(table, sched, t: int, rng: np.random.Generator, tau: float = 1.0, thr: float | None = None):
    """Return ``(image_id, mode)`` with mode ``"random"`` or ``"hardness"``.

    ``thr`` overrides the schedule's threshold when given.
    """
    thr = threshold(sched, t) if thr is None else thr
    r = rng.random()
    n = len(table)
    if r > thr:
        cdf = np.cumsum(sampling_probs(table, tau))
        u = rng.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, n - 1), "hardness"
    return int(rng.integers(n)), "random"


def simulate(sched: ScheduleState, n_images: int, n_iters: int,
             loss_model: Callable[[int, int], float], seed: int = 0,
             beta: float = 0.9, ema_period: int = 50, tau: float = 1.0) -> List[dict]:
    """Run the record/flush/draw loop against a synthetic per-image loss."""
    rng = seeded_rng(seed)
    table = HardnessTable(n_images, beta, ema_period)
    rows = []
    for t in range(n_iters):
        thr = threshold(sched, t)
        idx, mode = draw(table, sched, t, rng, tau, thr=thr)
        table.record_loss(idx, float(loss_model(idx, t)), t)
        rows.append({"iter": t, "threshold": thr, "mode": mode, "image_id": idx,
                     "h_mean": float(table.scores.mean()), "h_max": float(table.scores.max())})
    return rows


def write_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([r["iter"], repr(r["threshold"]), r["mode"], r["image_id"]])

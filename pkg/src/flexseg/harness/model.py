"""Per-pixel patch MLP with a logits head and a strided feature head.

Every pixel sees its (2r+1)^2 RGB patch (edge padded). A shared tanh hidden
layer feeds a per-pixel logits head and, at stride-cell centres, a feature
head used by the prototype loss. Gradients are hand-derived.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor_io import read_tensor, write_tensor

PARAM_NAMES = ("W1", "b1", "Wf", "bf", "Wl", "bl")


def extract_patches(image: np.ndarray, radius: int) -> np.ndarray:
    """[H, W, 3] -> [H, W, 3 * (2r+1)^2]."""
    img = np.asarray(image, dtype=np.float64)
    if radius == 0:
        return img.copy()
    k = 2 * radius + 1
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # [H, W, 3, k, k]
    h, w = img.shape[:2]
    return win.reshape(h, w, -1).copy()


@dataclass
class ForwardCache:
    patches: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    features: np.ndarray


class ToyModel:
    def __init__(self, params: Dict[str, np.ndarray], patch_radius: int = 1, stride: int = 4):
        self.params = params
        self.patch_radius = patch_radius
        self.stride = stride

    @classmethod
    def initialize(cls, num_classes: int, feature_dim: int, hidden_dim: int = 32,
                   patch_radius: int = 1, stride: int = 4, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        d_in = 3 * (2 * patch_radius + 1) ** 2
        params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden_dim)),
            "b1": np.zeros(hidden_dim),
            "Wf": rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, feature_dim)),
            "bf": np.zeros(feature_dim),
            "Wl": rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, num_classes)),
            "bl": np.zeros(num_classes),
        }
        return cls(params, patch_radius, stride)

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.patch_radius, self.stride)

    def _centres(self, h: int, w: int):
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"image {h}x{w} not divisible by feature stride {s}")
        return slice(s // 2, h, s), slice(s // 2, w, s)

    def forward_cache(self, image) -> ForwardCache:
        p = self.params
        x = extract_patches(image, self.patch_radius)
        hid = np.tanh(x @ p["W1"] + p["b1"])
        logits = hid @ p["Wl"] + p["bl"]
        ys, xs = self._centres(*hid.shape[:2])
        feats = hid[ys, xs] @ p["Wf"] + p["bf"]
        return ForwardCache(x, hid, logits, feats)

    def forward(self, image):
        """Return ``(logits [H, W, C], features [H/s, W/s, D])``."""
        c = self.forward_cache(image)
        return c.logits, c.features

    def backward(self, cache: ForwardCache, grad_logits, grad_features) -> Dict[str, np.ndarray]:
        p = self.params
        gl = np.asarray(grad_logits, dtype=np.float64)
        gf = np.asarray(grad_features, dtype=np.float64)
        if gl.shape != cache.logits.shape:
            raise ValueError(f"grad_logits shape {gl.shape} != logits shape {cache.logits.shape}")
        if gf.shape != cache.features.shape:
            raise ValueError(f"grad_features shape {gf.shape} != features shape {cache.features.shape}")
        hid = cache.hidden
        dh = hid.shape[-1]
        ys, xs = self._centres(*hid.shape[:2])
        hid_c = hid[ys, xs]

        grads = {
            "Wl": hid.reshape(-1, dh).T @ gl.reshape(-1, gl.shape[-1]),
            "bl": gl.reshape(-1, gl.shape[-1]).sum(axis=0),
            "Wf": hid_c.reshape(-1, dh).T @ gf.reshape(-1, gf.shape[-1]),
            "bf": gf.reshape(-1, gf.shape[-1]).sum(axis=0),
        }
        d_hid = gl @ p["Wl"].T
        d_hid[ys, xs] += gf @ p["Wf"].T
        d_pre = d_hid * (1.0 - hid ** 2)
        x = cache.patches
        grads["W1"] = x.reshape(-1, x.shape[-1]).T @ d_pre.reshape(-1, dh)
        grads["b1"] = d_pre.reshape(-1, dh).sum(axis=0)
        return grads

    def sgd_step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for k in PARAM_NAMES:
            self.params[k] -= lr * grads[k]

    def predict(self, image) -> np.ndarray:
        return np.argmax(self.forward_cache(image).logits, axis=-1)

    def save(self, directory) -> None:
        """One NPY file per parameter plus ``model.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k in PARAM_NAMES:
            write_tensor(self.params[k], d / f"{k}.npy")
        meta = {"patch_radius": self.patch_radius, "stride": self.stride}
        (d / "model.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, directory) -> "ToyModel":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        params = {k: read_tensor(d / f"{k}.npy").astype(np.float64) for k in PARAM_NAMES}
        return cls(params, int(meta["patch_radius"]), int(meta["stride"]))

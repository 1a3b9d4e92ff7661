"""Array interchange, run configuration and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects. The NPY reader/writer below is a
small self-contained implementation of the v1.0/v2.0 container so files can be
cross-checked against ``numpy.load`` instead of being produced by it.
"""

from __future__ import annotations

import ast
import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64

# descr -> dtype; only little-endian (or byte-order free) layouts are written,
# big-endian variants are accepted on read and converted to native order.
SUPPORTED_DTYPES = {
    np.dtype(np.float64),
    np.dtype(np.float32),
    np.dtype(np.int32),
    np.dtype(np.int64),
    np.dtype(np.uint8),
}


class NpyFormatError(ValueError):
    """Raised when an NPY container is malformed."""


class UnsupportedDtypeError(TypeError):
    """Raised for element types outside the supported set."""


class ConfigError(ValueError):
    """Raised when a run configuration is invalid.

    ``field`` names the offending key.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _check_dtype(dtype: np.dtype) -> np.dtype:
    if dtype.newbyteorder("=") not in SUPPORTED_DTYPES and dtype not in SUPPORTED_DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype.str!r}")
    return dtype


def write_tensor(t, path) -> None:
    """Write ``t`` as an NPY v1.0 file (C order, little-endian)."""
    arr = np.asarray(t)
    _check_dtype(arr.dtype)
    arr = np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C")
    shape = tuple(int(s) for s in arr.shape)
    shape_repr = repr(shape)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (arr.dtype.str, shape_repr)
    # magic(6) + version(2) + length(2) + header + '\n' must be a multiple of 64
    preamble = len(NPY_MAGIC) + 2 + 2
    pad = (-(preamble + len(header) + 1)) % _HEADER_ALIGN
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    if len(header_bytes) > 0xFFFF:
        raise NpyFormatError("header too long for NPY v1.0")
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an NPY v1.0/v2.0/v3.0 file into a C-contiguous native-order array."""
    raw = Path(path).read_bytes()
    if raw[:6] != NPY_MAGIC:
        raise NpyFormatError("missing NPY magic string")
    if len(raw) < 10:
        raise NpyFormatError("truncated preamble")
    major = raw[6]
    if major == 1:
        (hlen,) = struct.unpack("<H", raw[8:10])
        start = 10
    elif major in (2, 3):
        if len(raw) < 12:
            raise NpyFormatError("truncated preamble")
        (hlen,) = struct.unpack("<I", raw[8:12])
        start = 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{raw[7]}")
    encoding = "utf8" if major == 3 else "latin1"
    try:
        header = ast.literal_eval(raw[start:start + hlen].decode(encoding))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise NpyFormatError(f"unparseable header: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError("header must be a dict with descr, fortran_order and shape")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise NpyFormatError(f"bad shape {shape!r}")
    if not isinstance(header["descr"], str):
        raise UnsupportedDtypeError(f"unsupported dtype {header['descr']!r}")
    try:
        dtype = np.dtype(header["descr"])
    except TypeError:
        raise UnsupportedDtypeError(f"unsupported dtype {header['descr']!r}") from None
    _check_dtype(dtype)
    count = int(np.prod(shape, dtype=np.int64))
    body = raw[start + hlen:]
    if len(body) != count * dtype.itemsize:
        raise NpyFormatError(
            f"data length {len(body)} does not match shape {shape} of {dtype.str}")
    order = "F" if header["fortran_order"] else "C"
    arr = np.frombuffer(body, dtype=dtype, count=count).reshape(shape, order=order)
    return np.array(arr, dtype=dtype.newbyteorder("="), order="C")


def seeded_rng(seed: int) -> np.random.Generator:
    """Return the run's random stream: numpy's Philox-4x64 seeded with ``seed``.

    Philox (Salmon et al., counter-based, 10 rounds) is bit-reproducible
    across platforms for a given seed.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class RunConfig:
    """Hyperparameters for every stage of a training run."""

    alpha_ube: float = 3.0
    lambda_gap: float = 0.5
    tau_gap: float = 0.07
    momentum: float = 0.99
    beta_has: float = 0.9
    k_has: float = 0.05
    midpoint_has: Optional[int] = None  # None -> n_iters // 2
    tau_has: float = 1.0
    ema_period: int = 50
    granularity_kernels: Tuple[int, int, int] = (3, 5, 7)
    num_classes: int = 4
    feature_dim: int = 16
    seed: int = 0
    schedule: str = "sigmoid"
    # harness settings
    kd: int = 3
    ke: int = 3
    n_iters: int = 2000
    lr: float = 0.05
    hidden_dim: int = 32
    patch_radius: int = 1
    feature_stride: int = 4
    ube_per_image: bool = False
    has_loss: str = "total"
    strategy: str = "ube"
    strategy_alpha: float = 5.0
    strategy_tau: float = 0.5
    strategy_a: float = 0.1
    strategy_gamma: float = 0.5

    def __post_init__(self):
        self.granularity_kernels = tuple(int(k) for k in self.granularity_kernels)
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        need(0.0 < self.beta_has < 1.0, "beta_has", "must lie in (0, 1)")
        need(self.tau_gap > 0, "tau_gap", "must be positive")
        need(self.tau_has > 0, "tau_has", "must be positive")
        need(self.alpha_ube >= 0, "alpha_ube", "must be non-negative")
        need(self.lambda_gap >= 0, "lambda_gap", "must be non-negative")
        need(self.ema_period >= 1, "ema_period", "must be >= 1")
        ks = self.granularity_kernels
        need(len(ks) == 3 and all(k % 2 == 1 and k >= 1 for k in ks),
             "granularity_kernels", "need three odd positive integers")
        need(ks[0] < ks[1] < ks[2], "granularity_kernels", "must be strictly increasing")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.feature_dim >= 1, "feature_dim", "must be >= 1")
        need(0 <= int(self.seed) < 2**64, "seed", "must be a 64-bit unsigned integer")
        need(self.schedule in ("sigmoid", "linear", "none"), "schedule",
             "must be one of sigmoid, linear, none")
        need(self.midpoint_has is None or self.midpoint_has >= 0, "midpoint_has", "must be >= 0")
        need(self.kd % 2 == 1 and self.kd >= 1, "kd", "must be odd")
        need(self.ke % 2 == 1 and self.ke >= 1, "ke", "must be odd")
        need(self.n_iters >= 1, "n_iters", "must be >= 1")
        need(self.lr > 0, "lr", "must be positive")
        need(self.hidden_dim >= 1, "hidden_dim", "must be >= 1")
        need(self.patch_radius >= 0, "patch_radius", "must be >= 0")
        need(self.feature_stride >= 1, "feature_stride", "must be >= 1")
        need(self.has_loss in ("total", "ce"), "has_loss", "must be total or ce")
        need(self.strategy in ("ube", "baseline", "enhance", "ignore", "threshold", "reduce"),
             "strategy", "unknown strategy")
        need(self.strategy_a < 1, "strategy_a", "must be < 1")
        need(self.strategy_gamma < 1, "strategy_gamma", "must be < 1")

    @property
    def midpoint(self) -> int:
        return self.n_iters // 2 if self.midpoint_has is None else int(self.midpoint_has)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["granularity_kernels"] = list(self.granularity_kernels)
        return d


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError("<config>", str(exc)) from None


def load_config(path) -> RunConfig:
    """Load a JSON run configuration; absent keys keep their defaults."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return config_from_dict(data)


def spawn_rngs(seed: int, n: int) -> list:
    """``n`` independent Philox streams derived from one run seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]

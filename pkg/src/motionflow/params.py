"""Trainable parameter registry, linear layers, and the on-disk weight format.

Weight files are self-describing and integrity-checked:

    line 1: ``motionflow-params v1`` (ASCII magic + format version)
    line 2: JSON header with dtype, entry table (name, shape, offset in
            elements), payload SHA-256, and free-form metadata
    rest:   the raw little-endian float64 payload, entries concatenated in
            header order

Loading recomputes the payload digest and refuses silently corrupted files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, gelu
from .rng import SeededRng

__all__ = ["ParamStore", "Linear", "MLP", "save_params", "load_params", "ParamsFormatError"]

MAGIC = "motionflow-params v1"


class ParamsFormatError(ValueError):
    """Weight file is malformed, truncated, or fails its checksum."""


class ParamStore:
    """Ordered name -> leaf Tensor registry shared by model, optimizer, and IO."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, arrays) -> None:
        missing = [k for k in self._params if k not in arrays]
        extra = [k for k in arrays if k not in self._params]
        if missing or extra:
            raise ParamsFormatError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in self._params.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ParamsFormatError(
                    f"shape mismatch for {name!r}: file {arr.shape}, model {t.shape}"
                )
            arr.flags.writeable = False
            t.data = arr


class Linear:
    """Affine map ``x @ W.T + b`` over the last axis.

    Weights draw from N(0, 1/fan_in); biases start at zero. ``zero_init``
    zeroes the weight too, for readout heads that must start as the zero map.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: SeededRng | None = None, zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_dim, in_dim))
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init=True")
            w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros(out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight.T + self.bias


class MLP:
    """Stack of Linear layers with a pointwise nonlinearity between (none after the last)."""

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 rng: SeededRng, activation: str = "gelu", zero_init_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        if activation not in ("gelu", "tanh"):
            raise ValueError(f"unknown activation: {activation!r}")
        self.activation = activation
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(store, f"{name}.{i}", a, b,
                       rng=rng.spawn(f"{name}.{i}"),
                       zero_init=zero_init_last and last)
            )

    def __call__(self, x: Tensor) -> Tensor:
        act = gelu if self.activation == "gelu" else Tensor.tanh
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


# -- weight file IO -------------------------------------------------------------


def save_params(path: str, store: ParamStore, meta: dict | None = None) -> str:
    """Write the store to ``path`` atomically; returns the payload SHA-256."""
    entries = []
    chunks = []
    offset = 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "dtype": "<f8",
        "total_elements": offset,
        "entries": entries,
        "payload_sha256": digest,
        "meta": meta or {},
    }
    blob = (MAGIC + "\n").encode("ascii")
    blob += (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    blob += payload

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest


def load_params(path: str) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Read a weight file; returns (name -> array, metadata). Verifies checksum."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != MAGIC:
            raise ParamsFormatError(f"bad magic line: {magic!r} (expected {MAGIC!r})")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except json.JSONDecodeError as e:
            raise ParamsFormatError(f"unreadable header: {e}") from e
        payload = fh.read()

    expected = header["total_elements"] * 8
    if len(payload) != expected:
        raise ParamsFormatError(f"payload is {len(payload)} bytes, header says {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ParamsFormatError("payload checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f8")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = flat[start:start + n].reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})

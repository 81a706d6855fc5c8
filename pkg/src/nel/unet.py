"""Declarative U-Net builder, forward pass, and checkpoint IO.

The network is a fixed 39-row table: a 3-stage encoder (two 3x3 convs + relu
per stage, 2x2 maxpool between stages), a bottleneck, and a 3-stage decoder
(bilinear 2x upsample, channel concat with the matching encoder activation,
two 3x3 convs + relu), finished by a 1x1 conv and a sigmoid.  Channel counts
are base_width * {1, 2, 4, 8}; base_width 64 is the full-scale configuration,
small widths (2..8) run in test time.  Three pools mean input height and
width must divide by 8.

Checkpoint container (also reused by the trainer for optimizer state):
magic b"NEL1", then a little-endian u32 byte length, then that many bytes of
UTF-8 JSON metadata {version, in_channels, base_width, dtype,
registry: [{name, shape}]}, then the raw little-endian scalars of every
registry entry in order, then a little-endian u32 CRC-32 (zlib) of the data
section.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import (
    CompatibilityError,
    ContractError,
    DataFormatError,
    DimensionError,
    GeometryError,
)

MAGIC = b"NEL1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class LayerSpec:
    index: int  # 1-based row number
    kind: str  # conv | relu | maxpool | upsample | concat | sigmoid
    out_channels: int
    kernel: Optional[int] = None
    stride: int = 1
    pad: int = 0
    concat_with: Optional[int] = None  # encoder row whose output joins this concat


def _make_layers(in_channels: int, w: int) -> tuple:
    """The 39-row table at width multiplier w (w=64 is full scale)."""
    rows: list[LayerSpec] = []
    idx = 0

    def emit(kind, out_c, kernel=None, pad=0, concat_with=None):
        nonlocal idx
        idx += 1
        stride = 2 if kind == "maxpool" else 1
        rows.append(LayerSpec(idx, kind, out_c, kernel, stride, pad, concat_with))

    def conv_block(out_c):
        emit("conv", out_c, kernel=3, pad=1)
        emit("relu", out_c)
        emit("conv", out_c, kernel=3, pad=1)
        emit("relu", out_c)

    conv_block(w)  # rows 1-4
    emit("maxpool", w)  # 5
    conv_block(2 * w)  # 6-9
    emit("maxpool", 2 * w)  # 10
    conv_block(4 * w)  # 11-14
    emit("maxpool", 4 * w)  # 15
    conv_block(8 * w)  # 16-19
    for up_c, skip_row, out_c in ((8 * w, 14, 4 * w), (4 * w, 9, 2 * w), (2 * w, 4, w)):
        emit("upsample", up_c)  # 20 / 26 / 32
        skip_c = next(r.out_channels for r in rows if r.index == skip_row)
        emit("concat", up_c + skip_c, concat_with=skip_row)  # 21 / 27 / 33
        emit("conv", out_c, kernel=3, pad=1)
        emit("relu", out_c)
        emit("conv", out_c, kernel=3, pad=1)
        emit("relu", out_c)
    emit("conv", 1, kernel=1, pad=0)  # 38
    emit("sigmoid", 1)  # 39
    assert len(rows) == 39
    return tuple(rows)


@dataclass(frozen=True)
class UNetSpec:
    """Architecture description: layer table plus the ordered parameter registry."""

    in_channels: int
    base_width: int
    layers: tuple
    registry: tuple  # ordered (name, shape) pairs, layer order, weight before bias

    @staticmethod
    def create(in_channels: int = 1, base_width: int = 64) -> "UNetSpec":
        if in_channels < 1:
            raise ContractError(f"in_channels must be >= 1, got {in_channels}")
        if base_width < 1:
            raise ContractError(f"base_width must be >= 1, got {base_width}")
        layers = _make_layers(in_channels, base_width)
        registry = []
        cur = {0: in_channels}  # row index -> output channel count
        prev_c = in_channels
        for layer in layers:
            if layer.kind == "conv":
                k = layer.kernel
                registry.append((f"conv{layer.index:02d}.weight", (layer.out_channels, prev_c, k, k)))
                registry.append((f"conv{layer.index:02d}.bias", (1, layer.out_channels, 1, 1)))
            if layer.kind == "concat":
                prev_c = prev_c + cur[layer.concat_with]
                if prev_c != layer.out_channels:
                    raise ContractError("concat channel bookkeeping error")
            else:
                prev_c = layer.out_channels
            cur[layer.index] = prev_c
        return UNetSpec(in_channels, base_width, layers, tuple(registry))


class Model:
    """A built network: spec plus parameter tensors in registry order."""

    def __init__(self, spec: UNetSpec, params: dict, dtype: str):
        self.spec = spec
        self.params = params  # name -> Tensor, ordered per registry
        self.dtype = dtype

    def parameters(self) -> list:
        return [self.params[name] for name, _ in self.spec.registry]

    def named_parameters(self) -> list:
        return [(name, self.params[name]) for name, _ in self.spec.registry]


def build(spec: UNetSpec, seed: int, dtype: str = "f32") -> Model:
    """Allocate and initialize parameters.

    Conv weights are Kaiming-uniform over fan-in: U(-b, b) with
    b = sqrt(6 / (in_channels * k * k)); biases start at zero.  Draws happen
    in registry order from one seeded generator, so a seed pins every byte.
    """
    if dtype not in _DTYPES:
        raise ContractError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    np_dtype = np.float32 if dtype == "f32" else np.float64
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.registry:
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(np_dtype)
        else:
            data = np.zeros(shape, dtype=np_dtype)
        params[name] = ad.Tensor(data, requires_grad=True)
    return Model(spec, params, dtype)


def forward(model: Model, x: ad.Tensor) -> ad.Tensor:
    """Run the table top to bottom.  Output is batch x 1 x H x W in (0, 1)."""
    spec = model.spec
    B, C, H, W = x.shape
    if C != spec.in_channels:
        raise DimensionError(f"input has {C} channels, network expects {spec.in_channels}")
    if H % 8 or W % 8:
        raise GeometryError(
            f"input height and width must be divisible by 8 (three 2x2 poolings); got {H}x{W}"
        )
    outputs = {}  # row index -> activation, kept for the concat rows
    cur = x
    for layer in spec.layers:
        if layer.kind == "conv":
            w = model.params[f"conv{layer.index:02d}.weight"]
            b = model.params[f"conv{layer.index:02d}.bias"]
            cur = ad.conv2d(cur, w, b, stride=1, pad=layer.pad)
        elif layer.kind == "relu":
            cur = ad.relu(cur)
        elif layer.kind == "maxpool":
            cur = ad.maxpool2(cur)
        elif layer.kind == "upsample":
            cur = ad.upsample2(cur)
        elif layer.kind == "concat":
            cur = ad.concat_channels([cur, outputs[layer.concat_with]])
        elif layer.kind == "sigmoid":
            cur = ad.sigmoid(cur)
        else:  # pragma: no cover - table is fixed
            raise ContractError(f"unknown layer kind {layer.kind!r}")
        outputs[layer.index] = cur
    return cur


# ---------------------------------------------------------------------------
# checkpoint container


def write_container(path, meta: dict, arrays: list) -> None:
    """Write the NEL1 container: meta JSON + named arrays listed in meta['registry']."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    data = b"".join(a.tobytes() for a in arrays)
    crc = zlib.crc32(data) & 0xFFFFFFFF
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(data)
        fh.write(struct.pack("<I", crc))


def read_container(path) -> tuple:
    """Read and validate a NEL1 container; returns (meta, name -> array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a NEL1 checkpoint (bad magic)")
    (meta_len,) = struct.unpack_from("<I", raw, 4)
    if 8 + meta_len > len(raw):
        raise DataFormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[8 : 8 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: metadata is not valid JSON ({exc})") from exc
    dtype = meta.get("dtype")
    if dtype not in _DTYPES:
        raise DataFormatError(f"{path}: unknown dtype {dtype!r} in metadata")
    np_dtype = _DTYPES[dtype]
    registry = meta.get("registry")
    if not isinstance(registry, list):
        raise DataFormatError(f"{path}: metadata registry missing")
    offset = 8 + meta_len
    total = sum(int(np.prod(e["shape"])) for e in registry) * np_dtype.itemsize
    if offset + total + 4 > len(raw):
        raise DataFormatError(f"{path}: truncated data section")
    data = raw[offset : offset + total]
    (crc_stored,) = struct.unpack_from("<I", raw, offset + total)
    if zlib.crc32(data) & 0xFFFFFFFF != crc_stored:
        raise DataFormatError(f"{path}: CRC mismatch, file corrupt")
    arrays = {}
    pos = 0
    for entry in registry:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape)) * np_dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(data[pos : pos + n], dtype=np_dtype).reshape(shape).copy()
        pos += n
    return meta, arrays


def save_checkpoint(model: Model, path) -> None:
    meta = {
        "version": 1,
        "kind": "model",
        "in_channels": model.spec.in_channels,
        "base_width": model.spec.base_width,
        "dtype": model.dtype,
        "registry": [{"name": n, "shape": list(s)} for n, s in model.spec.registry],
    }
    np_dtype = _DTYPES[model.dtype]
    arrays = [model.params[n].data.astype(np_dtype, copy=False) for n, _ in model.spec.registry]
    write_container(path, meta, arrays)


def read_checkpoint_meta(path) -> dict:
    meta, _ = read_container(path)
    return meta


def load_checkpoint(path, spec: UNetSpec) -> Model:
    """Load parameters into a model matching spec; registry must agree exactly."""
    meta, arrays = read_container(path)
    file_reg = [(e["name"], tuple(int(s) for s in e["shape"])) for e in meta["registry"]]
    want = [(n, tuple(s)) for n, s in spec.registry]
    if meta.get("in_channels") != spec.in_channels or meta.get("base_width") != spec.base_width:
        raise CompatibilityError(
            f"{path}: checkpoint is in_channels={meta.get('in_channels')} "
            f"base_width={meta.get('base_width')}, spec wants "
            f"in_channels={spec.in_channels} base_width={spec.base_width}"
        )
    for i, (have, need) in enumerate(zip(file_reg, want)):
        if have != need:
            raise CompatibilityError(f"{path}: registry entry {i} is {have}, spec expects {need}")
    if len(file_reg) != len(want):
        raise CompatibilityError(
            f"{path}: registry has {len(file_reg)} entries, spec expects {len(want)}"
        )
    dtype = meta["dtype"]
    np_dtype = np.float32 if dtype == "f32" else np.float64
    params = {n: ad.Tensor(arrays[n].astype(np_dtype, copy=False), requires_grad=True) for n, _ in want}
    return Model(spec, params, dtype)

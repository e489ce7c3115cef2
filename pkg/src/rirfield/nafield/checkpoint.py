"""
``NAFC`` checkpoint files.

Layout (little-endian)::

    b"NAFC" | version u32 | config length u32 | config JSON (UTF-8)
    layer count u32 | per layer: name, d_out u32, d_in u32, W f32[d_out*d_in], b f32[d_out]
    lora flag u32 | if 1: rank u32, count u32, per layer: name, d_in u32, d_out u32,
                    A f32[d_in*r], B f32[d_out*r]

Strings are u32-length-prefixed UTF-8; matrices are row-major. An adapter-only
export is the same container with zero layers.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import IoError
from .model import Dense, FieldConfig, LoraAdapter, LoraPair, ModelParams

MAGIC = b"NAFC"
VERSION = 1


def _w_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _w_arr(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _encode(config: FieldConfig, params: ModelParams | None, adapter: LoraAdapter | None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    layers = params.layers if params is not None else []
    buf.write(struct.pack("<I", len(layers)))
    for l in layers:
        _w_str(buf, l.name)
        buf.write(struct.pack("<II", *l.weight.shape))
        _w_arr(buf, l.weight)
        _w_arr(buf, l.bias)
    if adapter is None:
        buf.write(struct.pack("<I", 0))
    else:
        buf.write(struct.pack("<III", 1, adapter.rank, len(adapter.pairs)))
        for name in sorted(adapter.pairs):
            p = adapter.pairs[name]
            _w_str(buf, name)
            buf.write(struct.pack("<II", p.A.shape[0], p.B.shape[0]))
            _w_arr(buf, p.A)
            _w_arr(buf, p.B)
    return buf.getvalue()


def save_checkpoint(path: str | Path, params: ModelParams, adapter: LoraAdapter | None = None) -> None:
    _write(path, _encode(params.config, params, adapter))


def save_adapter(path: str | Path, config: FieldConfig, adapter: LoraAdapter) -> None:
    _write(path, _encode(config, None, adapter))


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.off, self.path = data, 0, path

    def unpack(self, fmt):
        try:
            vals = struct.unpack_from(fmt, self.data, self.off)
        except struct.error as e:
            raise IoError(f"{self.path}: truncated checkpoint") from e
        self.off += struct.calcsize(fmt)
        return vals

    def string(self) -> str:
        (n,) = self.unpack("<I")
        s = self.data[self.off : self.off + n].decode("utf-8")
        self.off += n
        return s

    def array(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        if self.off + 4 * n > len(self.data):
            raise IoError(f"{self.path}: truncated checkpoint")
        a = np.frombuffer(self.data, dtype="<f4", count=n, offset=self.off).astype(np.float64)
        self.off += 4 * n
        return a.reshape(shape)


def load_checkpoint(path: str | Path) -> tuple[FieldConfig, ModelParams | None, LoraAdapter | None]:
    """Returns ``(config, params or None for adapter-only files, adapter or None)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if data[:4] != MAGIC:
        raise IoError(f"{path} is not a NAFC checkpoint")
    r = _Reader(data, path)
    r.off = 4
    version, n_cfg = r.unpack("<II")
    if version != VERSION:
        raise IoError(f"{path}: unsupported checkpoint version {version}")
    config = FieldConfig.from_dict(json.loads(data[r.off : r.off + n_cfg].decode("utf-8")))
    r.off += n_cfg
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        name = r.string()
        d_out, d_in = r.unpack("<II")
        layers.append(Dense(name, r.array(d_out, d_in), r.array(d_out)))
    params = ModelParams(config, layers) if layers else None
    (has_lora,) = r.unpack("<I")
    adapter = None
    if has_lora:
        rank, count = r.unpack("<II")
        adapter = LoraAdapter(rank)
        for _ in range(count):
            name = r.string()
            d_in, d_out = r.unpack("<II")
            adapter.pairs[name] = LoraPair(r.array(d_in, rank), r.array(d_out, rank))
    return config, params, adapter

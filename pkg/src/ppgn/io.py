"""File formats: IDX datasets, model checkpoints, PGM grids, key=value text.

Checkpoint layout (all integers little-endian)::

    b"PPGN"  u16 version  u16 len + UTF-8 model name  u32 tensor count
    per tensor: u16 len + UTF-8 name, u8 rank, rank x u32 dims,
                float64 payload (row-major)
    u32 CRC32 of every preceding byte

A :class:`~ppgn.nets.ModelBundle` is flattened into named tensors:
``layer{i}.{activation}.W`` / ``.b`` for parameters, ``tap.{name}`` holding
the layer index, and ``meta.{key}`` for scalar metadata.
"""

from __future__ import annotations

import dataclasses
import gzip
import math
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Dataset
from .nets import LayerSpec, ModelBundle
from .tensor import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"PPGN"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(FormatError):
    """A settings file or override names an unknown key or holds a bad value."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


def atomic_write(path, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


# --------------------------------------------------------------------------
# IDX


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{what} file truncated: {len(raw)} bytes")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{what} file: expected magic 0x{expected_magic:08X}, found 0x{magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} file truncated inside header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise FormatError(f"{what} file truncated: need {need} data bytes, have {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed); pixels scaled to ``[0, 1]``."""
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "labels")
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {imgs.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = imgs.shape
    return Dataset(imgs.reshape(n, rows * cols).astype(np.float64) / 255.0, labels.astype(np.int64), rows, cols)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write ``uint8`` pixels ``(n, rows, cols)`` and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.ndim != 3 or len(pixels) != len(labels):
        raise ValueError("pixels must be (n, rows, cols) with one label per image")
    atomic_write(images_path, struct.pack(">4I", IMAGE_MAGIC, *pixels.shape) + pixels.tobytes())
    atomic_write(labels_path, struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes())


# --------------------------------------------------------------------------
# checkpoints


def encode_tensors(name: str, tensors: Mapping[str, np.ndarray]) -> bytes:
    name_b = name.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<H", len(name_b)), name_b,
             struct.pack("<I", len(tensors))]
    for key, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        key_b = key.encode("utf-8")
        parts += [struct.pack("<H", len(key_b)), key_b, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(raw: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(raw) < 4 + 2 + 2 + 4 + 4:
        raise FormatError("checkpoint truncated")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint: magic {raw[:4]!r}")
    version = struct.unpack_from("<H", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, this reader handles {CHECKPOINT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    try:
        pos = 6
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            key = body[pos:pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(dims))
            if pos + nbytes > len(body):
                raise FormatError("checkpoint truncated inside tensor payload")
            tensors[key] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the last tensor")
    return name, tensors


def bundle_to_tensors(model: ModelBundle) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(model.layers):
        out[f"layer{i}.{layer.activation}.W"] = model.params[f"W{i}"].data
        out[f"layer{i}.{layer.activation}.b"] = model.params[f"b{i}"].data
    for k, v in model.taps.items():
        out[f"tap.{k}"] = np.array(float(v))
    for k, v in model.meta.items():
        out[f"meta.{k}"] = np.array(float(v))
    return out


def tensors_to_bundle(name: str, tensors: Mapping[str, np.ndarray]) -> ModelBundle:
    layers, params, taps, meta = {}, {}, {}, {}
    for key, arr in tensors.items():
        kind, _, rest = key.partition(".")
        if kind == "tap":
            taps[rest] = int(np.asarray(arr).item())
        elif kind == "meta":
            meta[rest] = float(np.asarray(arr).item())
        elif kind.startswith("layer"):
            i = int(kind[5:])
            act, _, which = rest.partition(".")
            params[f"{which}{i}"] = Tensor(arr)
            if which == "W":
                layers[i] = LayerSpec(arr.shape[0], arr.shape[1], act)
        else:
            raise FormatError(f"unrecognised tensor name {key!r}")
    ordered = [layers[i] for i in sorted(layers)]
    return ModelBundle(name, ordered, params, taps, meta)


def save_checkpoint(model: ModelBundle, path) -> None:
    atomic_write(path, encode_tensors(model.name, bundle_to_tensors(model)))


def load_checkpoint(path) -> ModelBundle:
    name, tensors = decode_tensors(Path(path).read_bytes())
    return tensors_to_bundle(name, tensors)


def save_arrays(path, name: str, arrays: Mapping[str, np.ndarray]) -> None:
    """Store raw named arrays (e.g. samples) in the checkpoint container."""
    atomic_write(path, encode_tensors(name, arrays))


def load_arrays(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_tensors(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PGM grids


def quantize(x) -> np.ndarray:
    """``round(clamp(x, 0, 1) * 255)`` with halves rounded away from zero."""
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def grid_image(samples, cols: int, side: int | tuple[int, int] = 28) -> np.ndarray:
    """Tile samples row by row with one black pixel between tiles."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("no samples to tile")
    h, w = (side, side) if isinstance(side, int) else side
    samples = samples.reshape(len(samples), h, w)
    cols = max(1, min(cols, len(samples)))
    rows = math.ceil(len(samples) / cols)
    out = np.zeros((rows * h + rows - 1, cols * w + cols - 1), dtype=np.uint8)
    for k, s in enumerate(samples):
        r, c = divmod(k, cols)
        out[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = quantize(s)
    return out


def write_grid(samples, cols: int, path, side: int | tuple[int, int] = 28) -> None:
    """Binary PGM (P5) of the tiled samples."""
    img = grid_image(samples, cols, side)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write(path, header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# --------------------------------------------------------------------------
# key=value text


@dataclasses.dataclass
class RunConfig:
    """Settings shared by the command-line subcommands."""

    variant: str = "noiseless_joint"
    eps1: float | None = None
    eps2: float | None = None
    eps3: float | None = None
    steps: int = 200
    chains: int = 10
    seed: int = 0
    target_class: int | None = None
    hidden_layer: str | None = None
    hidden_unit: int | None = None
    mask_x: int = 9
    mask_y: int = 9
    mask_w: int = 10
    mask_h: int = 10
    context_weight: float = 0.0
    classifier: str | None = None
    heldout: str | None = None
    generator: str | None = None
    dae_x: str | None = None
    dae_h: str | None = None
    images: str | None = None
    labels: str | None = None
    out_dir: str = "."

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def update(self, values: Mapping[str, object]) -> "RunConfig":
        """Apply ``values`` (strings are parsed by field type); unknown keys raise."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            if v is None:
                continue
            setattr(self, k, _coerce(k, types[k], v))
        return self


def _coerce(key, typ, value):
    if not isinstance(value, str):
        return value
    t = str(typ)
    try:
        if "float" in t:
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
            return v
        if "int" in t:
            return int(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {t}") from None
    return value


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def load_run_config(path) -> RunConfig:
    return RunConfig().update(parse_key_values(Path(path).read_text(encoding="utf-8")))


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if math.isnan(f):
        return "nan"
    return f"{f:#.6g}"


def format_report(values: Mapping[str, object]) -> str:
    return "".join(f"{k}={format_value(values[k])}\n" for k in sorted(values))


def write_report(report, path) -> None:
    """Sorted ``key=value`` lines; reals carry 6 significant digits."""
    values = report.as_dict() if hasattr(report, "as_dict") else dict(report)
    atomic_write(path, format_report(values).encode("utf-8"))

"""Bit-exact file formats: tensors, checkpoints, manifests, heatmaps.

Tensor files ("TRT1") hold one little-endian float32 array. Checkpoint
files ("TRTC") hold a u32 entry count followed by (u16 name length,
UTF-8 name, payload) entries; the entry named "config" carries the model
configuration as eight u32 fields (image_size, patch_size, embed_dim,
num_blocks, num_heads, mlp_ratio, num_classes, selection_mass * 1e6) and
every other payload is an embedded tensor file. Entries are written with
"config" first, then parameters sorted by name, so identical inputs
always produce identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, parameter_shapes
from .errors import (
    BadMagicError,
    CheckpointError,
    DimensionError,
    ManifestError,
    TruncationError,
    UnsupportedDtypeError,
)
from .localization import BoundingBox

TENSOR_MAGIC = b"TRT1"
CHECKPOINT_MAGIC = b"TRTC"
DTYPE_F32 = 0
CONFIG_ENTRY = "config"
_CONFIG_STRUCT = struct.Struct("<8I")
MASS_FIXED_POINT = 10 ** 6


def tensor_to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim < 1:
        raise DimensionError("tensor files need at least one dimension (use shape (1,))")
    if arr.ndim > 255:
        raise DimensionError(f"too many dimensions: {arr.ndim}")
    header = TENSOR_MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def _take(buffer: bytes, offset: int, count: int, what: str):
    if offset + count > len(buffer):
        raise TruncationError(f"file ended inside {what} ({offset + count} > {len(buffer)} bytes)")
    return buffer[offset:offset + count], offset + count


def tensor_from_bytes(buffer: bytes, offset: int = 0):
    """Decode one tensor record, returning (array, next offset)."""
    magic, offset = _take(buffer, offset, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"expected magic {TENSOR_MAGIC!r}, found {magic!r}")
    head, offset = _take(buffer, offset, 2, "tensor header")
    dtype, ndim = struct.unpack("<BB", head)
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    if ndim < 1:
        raise DimensionError("tensor files need at least one dimension")
    raw, offset = _take(buffer, offset, 4 * ndim, "tensor extents")
    shape = struct.unpack(f"<{ndim}I", raw)
    if any(s < 1 for s in shape):
        raise DimensionError(f"non-positive extent in {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload, offset = _take(buffer, offset, 4 * count, "tensor payload")
    array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return array, offset


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    array, offset = tensor_from_bytes(data)
    if offset != len(data):
        raise TruncationError(f"{len(data) - offset} trailing bytes after tensor payload")
    return array


def read_tensor_shape(path) -> tuple:
    """Decode only the header, cheap bounds checking for manifests."""
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6:
            raise TruncationError(f"{path}: file shorter than a tensor header")
        if head[:4] != TENSOR_MAGIC:
            raise BadMagicError(f"{path}: expected magic {TENSOR_MAGIC!r}, found {head[:4]!r}")
        dtype, ndim = struct.unpack("<BB", head[4:6])
        if dtype != DTYPE_F32:
            raise UnsupportedDtypeError(f"{path}: unsupported dtype code {dtype}")
        raw = fh.read(4 * ndim)
        if len(raw) < 4 * ndim:
            raise TruncationError(f"{path}: file ended inside tensor extents")
        return struct.unpack(f"<{ndim}I", raw)


def _config_to_bytes(cfg: ModelConfig) -> bytes:
    return _CONFIG_STRUCT.pack(
        cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.num_blocks,
        cfg.num_heads, cfg.mlp_ratio, cfg.num_classes,
        round(cfg.selection_mass * MASS_FIXED_POINT),
    )


def _config_from_bytes(raw: bytes) -> ModelConfig:
    w, p, d, blocks, heads, ratio, k, mass = _CONFIG_STRUCT.unpack(raw)
    return ModelConfig(image_size=w, patch_size=p, embed_dim=d, num_blocks=blocks,
                       num_heads=heads, num_classes=k, mlp_ratio=ratio,
                       selection_mass=mass / MASS_FIXED_POINT)


def write_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    """Write config plus every parameter; validates completeness first."""
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"cannot write checkpoint, missing parameters: {', '.join(missing)}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"cannot write checkpoint, unexpected parameters: {', '.join(extra)}")
    for name, shape in expected.items():
        if tuple(np.asarray(params[name]).shape) != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {np.asarray(params[name]).shape}, "
                f"config implies {shape}")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(expected) + 1)]
    ordered = [(CONFIG_ENTRY, _config_to_bytes(cfg))]
    ordered += [(name, tensor_to_bytes(params[name])) for name in sorted(expected)]
    for name, payload in ordered:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Read and validate a checkpoint, returning (config, params dict)."""
    data = Path(path).read_bytes()
    magic, offset = _take(data, 0, 4, "checkpoint magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
    raw, offset = _take(data, offset, 4, "entry count")
    (count,) = struct.unpack("<I", raw)
    cfg = None
    params = {}
    for _ in range(count):
        raw, offset = _take(data, offset, 2, "entry name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(data, offset, name_len, "entry name")
        name = raw.decode("utf-8")
        if name == CONFIG_ENTRY:
            if cfg is not None:
                raise CheckpointError("duplicate config entry")
            raw, offset = _take(data, offset, _CONFIG_STRUCT.size, "config block")
            cfg = _config_from_bytes(raw)
        else:
            if name in params:
                raise CheckpointError(f"duplicate entry {name!r}")
            params[name], offset = tensor_from_bytes(data, offset)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last entry")
    if cfg is None:
        raise CheckpointError("checkpoint has no config entry")
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {', '.join(missing)}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters: {', '.join(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {params[name].shape}, config implies {shape}")
    return cfg, params


@dataclass
class ManifestLine:
    image_path: Path
    label: int
    boxes: list
    image_id: str


def _parse_box(text: str, width: int, height: int) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(parts)}")
    x0, y0, x1, y1 = (int(p) for p in parts)
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box ({x0},{y0},{x1},{y1}) outside {width}x{height} image")
    return BoundingBox(x0, y0, x1, y1)


def parse_manifest(path) -> list:
    """Parse the line-based dataset manifest.

    Each non-blank line holds space-separated key:value fields,
    e.g. `id:img0 image:img0.trt label:1 boxes:4,5,20,21;0,0,8,8`.
    Image paths are resolved relative to the manifest's directory and
    their headers are read to bounds-check the boxes. Errors cite the
    1-based line number.
    """
    path = Path(path)
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                fields = {}
                for token in line.split():
                    key, sep, value = token.partition(":")
                    if not sep:
                        raise ValueError(f"token {token!r} is not key:value")
                    fields[key] = value
                for key in ("id", "image", "label", "boxes"):
                    if key not in fields:
                        raise ValueError(f"missing field {key!r}")
                image_path = base / fields["image"]
                shape = read_tensor_shape(image_path)
                if len(shape) != 3 or shape[0] != 3:
                    raise ValueError(f"image tensor must be 3xHxW, got {shape}")
                height, width = shape[1], shape[2]
                boxes = [_parse_box(part, width, height)
                         for part in fields["boxes"].split(";") if part]
                if not boxes:
                    raise ValueError("line has no ground-truth boxes")
                records.append(ManifestLine(image_path=image_path,
                                            label=int(fields["label"]),
                                            boxes=boxes,
                                            image_id=fields["id"]))
            except (ValueError, DimensionError, OSError,
                    BadMagicError, TruncationError, UnsupportedDtypeError) as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from exc
    return records


def load_samples(records) -> list:
    """Materialise manifest records into (image, label, boxes) samples."""
    return [(read_tensor(r.image_path), r.label, r.boxes) for r in records]


def write_heatmap(path, heat, image, alpha: float) -> None:
    """Blend a [0,1] heat map over a 3xHxW [0,1] image into a binary PPM.

    Colormap is linear blue (0) to red (1) with zero green; blending is
    alpha*colormap + (1-alpha)*image, quantised half-up to 8 bits.
    """
    heat = np.asarray(heat, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if heat.ndim != 2 or image.shape != (3,) + heat.shape:
        raise DimensionError(f"heat {heat.shape} does not match image {image.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DimensionError(f"alpha must be in [0, 1], got {alpha}")
    h, w = heat.shape
    overlay = np.stack([heat, np.zeros_like(heat), 1.0 - heat])
    blended = alpha * overlay + (1.0 - alpha) * image
    pixels = np.clip(np.floor(blended * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())

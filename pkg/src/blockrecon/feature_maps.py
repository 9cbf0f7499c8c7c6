"""Spatial feature maps and their decomposition into block sets.

A feature map is a dense ``width x height x channels`` tensor, stored as a
numpy array of shape ``(height, width, channels)``.  Blocks are the
channel fibers of single cells, or channel-wise averages of square
windows when a scale larger than 1 is requested.  Block sets are the
unit that the sparse matcher consumes: the probe set is reconstructed
from the gallery set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sHHHHI")  # magic, version, reserved, w, h, channels

NORMALIZATIONS = ("none", "unit_l2")


@dataclass(frozen=True)
class FeatureMap:
    """A ``width x height x channels`` spatial tensor.

    ``data`` has shape ``(height, width, channels)`` so that the C-order
    byte layout matches the on-disk format (row, col, channel-fastest).
    Entries must be finite.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise ValueError("feature map dimensions must be positive")
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.size != self.width * self.height * self.channels:
            raise ValueError(
                f"data has {data.size} entries, expected "
                f"{self.width}x{self.height}x{self.channels}"
            )
        data = np.ascontiguousarray(data.reshape(self.height, self.width, self.channels))
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.width, self.height, self.channels)


@dataclass(frozen=True)
class Block:
    """A d-vector extracted from one spatial window of a feature map."""

    vector: np.ndarray
    scale: int
    position: tuple[int, int]  # (col, row) of the window's top-left cell


@dataclass(frozen=True)
class BlockSet:
    """An ordered collection of same-dimension blocks.

    ``zero_flagged`` records (diagnostically) which block indices were
    left untouched by unit_l2 normalization because their norm was zero.
    """

    channels: int
    blocks: tuple[Block, ...]
    normalization: str = "none"
    zero_flagged: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        for b in self.blocks:
            if b.vector.shape != (self.channels,):
                raise ValueError("all blocks must share the set's channel count")

    def __len__(self) -> int:
        return len(self.blocks)

    def matrix(self) -> np.ndarray:
        """Stack block vectors into a float64 ``(channels, n_blocks)`` matrix."""
        if not self.blocks:
            return np.empty((self.channels, 0), dtype=np.float64)
        return np.stack([b.vector for b in self.blocks], axis=1).astype(np.float64)


def divide_into_blocks(fm: FeatureMap) -> BlockSet:
    """Split a map into its ``width*height`` scale-1 channel fibers.

    Blocks are ordered row-major by (row, col).
    """
    blocks = []
    for row in range(fm.height):
        for col in range(fm.width):
            blocks.append(Block(vector=fm.data[row, col].copy(), scale=1, position=(col, row)))
    return BlockSet(channels=fm.channels, blocks=tuple(blocks))


def pool_block(fm: FeatureMap, col: int, row: int, scale: int) -> Block:
    """Average-pool the ``scale x scale`` window at (col, row) to one block."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if col < 0 or row < 0 or col + scale > fm.width or row + scale > fm.height:
        raise ValueError(
            f"window (col={col}, row={row}, scale={scale}) out of bounds for "
            f"{fm.width}x{fm.height} map"
        )
    if scale == 1:
        vec = fm.data[row, col].copy()
    else:
        vec = fm.data[row : row + scale, col : col + scale].mean(axis=(0, 1))
    return Block(vector=vec, scale=scale, position=(col, row))


def multiscale_blocks(fm: FeatureMap, scales: Iterable[int]) -> BlockSet:
    """Pool all stride-1 windows of every requested scale into one block set.

    Ordering is ascending scale, then row-major.  A scale that does not
    fit inside the map is a hard error so configuration mistakes surface
    instead of silently shrinking the set.
    """
    scale_list = sorted(set(int(s) for s in scales))
    if not scale_list:
        raise ValueError("at least one scale is required")
    for s in scale_list:
        if s < 1 or s > min(fm.width, fm.height):
            raise ValueError(
                f"scale {s} out of range for {fm.width}x{fm.height} map"
            )
    blocks = []
    for s in scale_list:
        for row in range(fm.height - s + 1):
            for col in range(fm.width - s + 1):
                blocks.append(pool_block(fm, col, row, s))
    return BlockSet(channels=fm.channels, blocks=tuple(blocks))


def normalize(bs: BlockSet, mode: str) -> BlockSet:
    """Rescale block vectors; ``unit_l2`` maps nonzero blocks to unit norm.

    Zero blocks pass through unchanged and their indices are flagged.
    """
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}")
    if mode == "none":
        return bs
    out = []
    flagged = []
    for i, b in enumerate(bs.blocks):
        v = b.vector.astype(np.float64)
        nrm = float(np.linalg.norm(v))
        if nrm == 0.0:
            flagged.append(i)
            out.append(Block(vector=v, scale=b.scale, position=b.position))
        else:
            out.append(Block(vector=v / nrm, scale=b.scale, position=b.position))
    return BlockSet(
        channels=bs.channels,
        blocks=tuple(out),
        normalization="unit_l2",
        zero_flagged=tuple(flagged),
    )


def block_set(fm: FeatureMap, scales: Iterable[int] = (1,), normalization: str = "none") -> BlockSet:
    """Convenience: multi-scale decomposition followed by normalization."""
    return normalize(multiscale_blocks(fm, scales), normalization)


def reconstruct_from_blocks(bs: BlockSet, width: int, height: int) -> FeatureMap:
    """Rebuild a map from a scale-1 block set (inverse of divide_into_blocks)."""
    fibers = [b for b in bs.blocks if b.scale == 1]
    if len(fibers) != width * height:
        raise ValueError("block set does not cover the requested dimensions")
    data = np.empty((height, width, bs.channels), dtype=fibers[0].vector.dtype)
    for b in fibers:
        col, row = b.position
        data[row, col] = b.vector
    return FeatureMap(width=width, height=height, channels=bs.channels, data=data)


def bilinear_resize(data: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinearly resample an ``(h, w, c)`` array to ``(target_h, target_w, c)``.

    Endpoints map to endpoints (align-corners); a singleton target axis
    samples the source center.
    """
    h, w = data.shape[:2]
    data = data.astype(np.float64)

    def _coords(n_src: int, n_dst: int) -> np.ndarray:
        if n_dst == 1:
            return np.array([(n_src - 1) / 2.0])
        return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    ys = _coords(h, target_h)
    xs = _coords(w, target_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def write_feature_map(path: str | Path, fm: FeatureMap) -> None:
    """Serialize a map to the binary .fmap format (float32 little-endian)."""
    if fm.width > 0xFFFF or fm.height > 0xFFFF:
        raise ValueError("spatial dimensions exceed the format's u16 range")
    header = _FMAP_HEADER.pack(
        FMAP_MAGIC, FMAP_VERSION, 0, fm.width, fm.height, fm.channels
    )
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_feature_map(path: str | Path) -> FeatureMap:
    """Load a .fmap file, validating the header and payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < _FMAP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, reserved, width, height, channels = _FMAP_HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved field must be zero")
    expected = width * height * channels * 4
    body = raw[_FMAP_HEADER.size :]
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes, header promises {expected}"
        )
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    try:
        return FeatureMap(
            width=width,
            height=height,
            channels=channels,
            data=data,
            source_id=str(path),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc

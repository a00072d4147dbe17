"""Synthetic RGB-D scenes, the MDTN tensor file format and dataset handling."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, derive_seed, functional as F
from .exceptions import ConfigurationError, DimensionError, FormatError, ParameterError
from .heads import BinSpec, depth_to_bin_index
from .losses import DEPTH_CAP, valid_mask

MAGIC = b"MDTN"
VERSION = 1
DTYPE_F64 = 0
MANIFEST = "manifest.txt"
TRAIN_FRACTION = 0.9

PathLike = Union[str, os.PathLike]


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int
    depth: float
    albedo: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int = 64
    d_far: float = 8.0
    d_near: float = 2.0
    background_albedo: float = 0.5
    boxes: Tuple[Box, ...] = ()

    def ramp(self) -> np.ndarray:
        """Background depth per row, d_far at the top row to d_near at the bottom."""
        rows = np.arange(self.image_size)
        return self.d_far + (self.d_near - self.d_far) * rows / (self.image_size - 1)

    def validate(self) -> "SceneSpec":
        n = self.image_size
        if n < 2:
            raise ParameterError(f"image_size must be >= 2, got {n}")
        for d in (self.d_far, self.d_near):
            if not 0 < d <= DEPTH_CAP:
                raise ParameterError(f"background depth {d} outside (0, {DEPTH_CAP}]")
        ramp = self.ramp()
        for i, b in enumerate(self.boxes):
            if b.height < 1 or b.width < 1 or b.top < 0 or b.left < 0 \
                    or b.top + b.height > n or b.left + b.width > n:
                raise ParameterError(f"box {i} lies outside the {n}x{n} image")
            if not 0 < b.depth <= DEPTH_CAP:
                raise ParameterError(f"box {i} depth {b.depth} outside (0, {DEPTH_CAP}]")
            if b.depth >= ramp[b.top:b.top + b.height].min():
                raise ParameterError(f"box {i} is not in front of the background")
        return self


@dataclass
class Sample:
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    depth: np.ndarray  # [H, W] meters
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = valid_mask(self.depth)


def random_scene_spec(seed: int, image_size: int = 64, max_boxes: int = 4, cell: int = 8) -> SceneSpec:
    """Random ramp plus 1..max_boxes boxes snapped to a ``cell``-pixel grid.

    Snapping keeps box edges on patch borders so token-level supervision loses
    less to pooling.  Box depth is 0.7-0.9 of the nearest background it covers.
    """
    if image_size % cell:
        cell = 1
    rng = np.random.default_rng(derive_seed("scene-spec", seed))
    d_far = rng.uniform(6.0, 9.5)
    d_near = rng.uniform(1.5, 3.5)
    ramp = d_far + (d_near - d_far) * np.arange(image_size) / (image_size - 1)
    cells = image_size // cell
    lo, hi = max(1, cells // 4), max(1, cells // 2)
    boxes = []
    for _ in range(rng.integers(1, max_boxes + 1)):
        h, w = (int(v) * cell for v in rng.integers(lo, hi + 1, size=2))
        top = cell * int(rng.integers(0, (image_size - h) // cell + 1))
        left = cell * int(rng.integers(0, (image_size - w) // cell + 1))
        depth = float(rng.uniform(0.7, 0.9) * ramp[top:top + h].min())
        boxes.append(Box(top, left, h, w, depth, float(rng.uniform(0.2, 1.0))))
    return SceneSpec(seed=seed, image_size=image_size, d_far=float(d_far), d_near=float(d_near),
                     background_albedo=float(rng.uniform(0.2, 1.0)), boxes=tuple(boxes))


def generate_scene(spec: SceneSpec) -> Sample:
    """Render depth (ramp overwritten by boxes, nearest wins) and albedo/shading/texture channels."""
    spec.validate()
    n = spec.image_size
    depth = np.repeat(spec.ramp()[:, None], n, axis=1)
    owner = np.full((n, n), -1)
    for i in sorted(range(len(spec.boxes)), key=lambda j: -spec.boxes[j].depth):
        b = spec.boxes[i]
        region = (slice(b.top, b.top + b.height), slice(b.left, b.left + b.width))
        depth[region] = b.depth
        owner[region] = i

    albedo = np.full((n, n), spec.background_albedo)
    texture = np.empty((n, n))
    for obj in range(-1, len(spec.boxes)):
        sel = owner == obj
        if obj >= 0:
            albedo[sel] = spec.boxes[obj].albedo
        noise = np.random.default_rng(derive_seed("texture", spec.seed, obj)).uniform(0.0, 1.0, (n, n))
        texture[sel] = noise[sel]
    rgb = np.stack([albedo, 1.0 / (1.0 + depth), texture])
    return Sample(rgb=rgb, depth=depth)


# ---------------------------------------------------------------- MDTN files


def encode_tensor(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds 255")
    header = MAGIC + bytes([VERSION, DTYPE_F64, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 7:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}, expected {VERSION}")
    if buf[5] != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {buf[5]}")
    rank = buf[6]
    end = 7 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"truncated header: rank {rank} needs {end} bytes, file has {len(buf)}")
    dims = struct.unpack(f"<{rank}I", buf[7:end])
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}")
    expected = 8 * math.prod(dims)  # exact: corrupt dims must not wrap around
    if len(buf) - end != expected:
        raise FormatError(f"payload length {len(buf) - end} bytes, expected {expected} for dims {list(dims)}")
    data = np.frombuffer(buf, dtype="<f8", offset=end).astype(np.float64).reshape(dims)
    return Tensor(data)


def write_tensor(path: PathLike, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: PathLike) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets


def make_dataset(count: int, seed: int, out_dir: PathLike, image_size: int = 64) -> List[Tuple[str, str]]:
    """Write ``count`` scenes as MDTN pairs plus ``manifest.txt``; returns the manifest entries."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        sample = generate_scene(random_scene_spec(derive_seed(seed, "scene", i), image_size))
        rgb_name, depth_name = f"{i:04d}.rgb.mdtn", f"{i:04d}.depth.mdtn"
        write_tensor(out / rgb_name, sample.rgb)
        write_tensor(out / depth_name, sample.depth)
        entries.append((rgb_name, depth_name))
    with open(out / MANIFEST, "w", newline="\n") as fh:
        fh.writelines(f"{a} {b}\n" for a, b in entries)
    return entries


def read_manifest(data_dir: PathLike) -> List[Tuple[str, str]]:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"dataset manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'rgb_path depth_path'")
        entries.append((parts[0], parts[1]))
    if not entries:
        raise ConfigurationError(f"dataset manifest is empty: {path}")
    return entries


def split_indices(count: int, train_count: Optional[int] = None) -> Tuple[List[int], List[int]]:
    """Contiguous split: the first ``train_count`` (default 90%) train, the rest eval."""
    n_train = int(count * TRAIN_FRACTION) if train_count is None else int(train_count)
    if count >= 1 and n_train == 0:
        n_train = 1
    if not 0 < n_train <= count:
        raise ConfigurationError(f"train_count {n_train} invalid for {count} samples")
    return list(range(n_train)), list(range(n_train, count))


def load_samples(data_dir: PathLike, indices: Sequence[int],
                 entries: Optional[List[Tuple[str, str]]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Stack the selected samples into rgb [n, 3, H, W] and depth [n, H, W]."""
    entries = read_manifest(data_dir) if entries is None else entries
    root = Path(data_dir)
    rgbs, depths = [], []
    for i in indices:
        rgb_name, depth_name = entries[i]
        rgbs.append(read_tensor(root / rgb_name).data)
        depths.append(read_tensor(root / depth_name).data)
    if not rgbs:
        return np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1))
    return np.stack(rgbs), np.stack(depths)


def pool_gt(depth, grid: Tuple[int, int], spec: BinSpec,
            mask=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average-pool depth to the token grid; returns pooled depth, bin targets and cell validity.

    A cell is valid only if every pixel feeding it is valid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = valid_mask(depth) if mask is None else np.asarray(mask, dtype=bool)
    h, w = grid
    big_h, big_w = depth.shape[-2:]
    if big_h % h or big_w % w:
        raise DimensionError(f"pool_gt: {big_h}x{big_w} not divisible into a {h}x{w} grid")
    kernel = (big_h // h, big_w // w)
    pooled = F.avg_pool2d(Tensor(depth), kernel).data
    cell_valid = F.avg_pool2d(Tensor(mask.astype(np.float64)), kernel).data == 1.0
    safe = np.where(cell_valid, pooled, spec.d_min)
    return pooled, depth_to_bin_index(safe, spec), cell_valid

"""
Transformational States Data
Procedural moving-sprite sequences, sprite ingestion, SEQ0 datasets and batching

Every sequence is a pure function of (seed, index, config): generation
draws from a counter-based stream keyed by both, so serial and threaded
generation produce identical bytes.
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tstates.errors import ConfigError, FormatError, ShapeError, UsageError
from tstates.run_log import compute_file_hash
from tstates.tensor_core import keyed_rng


SEQ_MAGIC = b"SEQ0"
SEQ_VERSION = 1
SEQ_HEADER = struct.Struct("<4sIIHHHB")

IDX_MAGIC = 0x00000803
IDX_HEADER = struct.Struct(">IIII")

SHAPE_SIZE = 20
BUILTIN_SHAPE_NAMES = ("disc", "square", "cross", "triangle")

RNG_SHUFFLE = 7

# Splits draw from disjoint seeds so train, validation and test never share streams
SPLIT_SEED_STRIDE = 1_000_003
SPLITS = {"test": 0, "validation": 1, "train": 2}

logger = logging.getLogger("tstates-generator")

SpriteSet = List[np.ndarray]


class SpriteSource(Enum):
    IDX_FILE = "idx_file"
    BUILTIN_SHAPES = "builtin_shapes"


@dataclass
class GeneratorConfig:
    canvas_size: int = 64
    frames: int = 20
    sprites: int = 2
    speed_min: float = 2.0
    speed_max: float = 5.0
    seed: int = 0
    source: SpriteSource = SpriteSource.BUILTIN_SHAPES
    sprite_path: Optional[str] = None
    sprite_size: Optional[int] = None   # nearest-neighbour rescale for small canvases

    def validate(self) -> "GeneratorConfig":
        if self.canvas_size < 1 or self.frames < 1 or self.sprites < 0:
            raise ConfigError(
                f"canvas_size, frames must be positive and sprites non-negative: "
                f"{self.canvas_size}, {self.frames}, {self.sprites}"
            )
        if not 0.0 <= self.speed_min <= self.speed_max:
            raise ConfigError(f"speed range must satisfy 0 <= min <= max, got [{self.speed_min}, {self.speed_max}]")
        if self.source is SpriteSource.IDX_FILE and not self.sprite_path:
            raise ConfigError("idx_file sprite source needs sprite_path")
        if self.sprite_size is not None and self.sprite_size < 1:
            raise ConfigError(f"sprite_size must be positive, got {self.sprite_size}")
        return self

    def for_split(self, split: str) -> "GeneratorConfig":
        """Same generator with the seed of a named split"""
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}, expected one of {', '.join(SPLITS)}")
        return replace(self, seed=self.seed + SPLITS[split] * SPLIT_SEED_STRIDE)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["source"] = self.source.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown data keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "source" in values:
            try:
                values["source"] = SpriteSource(values["source"])
            except ValueError as e:
                raise ConfigError(str(e))
        return cls(**values)


@dataclass
class SequenceRecord:
    """frames: F×H×W uint8; provenance is None for records read back from disk"""
    frames: np.ndarray
    seed: Optional[int] = None
    index: Optional[int] = None


# Sprites

def builtin_shapes() -> SpriteSet:
    """Disc, square, cross and triangle rasterized at 20×20"""
    n = SHAPE_SIZE
    yy, xx = np.mgrid[0:n, 0:n]
    centre = (n - 1) / 2.0

    disc = (yy - centre) ** 2 + (xx - centre) ** 2 <= (n / 2.0 - 2) ** 2

    square = np.zeros((n, n), dtype=bool)
    square[3:n - 3, 3:n - 3] = True

    cross = np.zeros((n, n), dtype=bool)
    lo, hi = n // 2 - 2, n // 2 + 2
    cross[2:n - 2, lo:hi] = True
    cross[lo:hi, 2:n - 2] = True

    rows = np.arange(n)[:, None]
    half_width = (rows - 2) * (centre - 1) / (n - 5)
    triangle = (rows >= 2) & (rows <= n - 3) & (np.abs(xx - centre) <= half_width + 0.5)

    return [mask.astype(np.uint8) * 255 for mask in (disc, square, cross, triangle)]


def load_sprites_idx(path) -> SpriteSet:
    """
    Parse a big-endian IDX image file (magic 0x00000803).

    Raises:
        FormatError: Bad magic, short header or truncated payload, with the byte offset
    """
    raw = Path(path).read_bytes()
    if len(raw) < IDX_HEADER.size:
        raise FormatError(
            f"truncated IDX header: expected {IDX_HEADER.size} bytes, found {len(raw)}",
            offset=len(raw), field="header",
        )
    magic, count, rows, cols = IDX_HEADER.unpack_from(raw, 0)
    if magic != IDX_MAGIC:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{IDX_MAGIC:08x}", offset=0, field="magic")

    expected = IDX_HEADER.size + count * rows * cols
    if len(raw) < expected:
        raise FormatError(
            f"truncated IDX payload: expected {expected} bytes, found {len(raw)}",
            offset=len(raw), field="payload",
        )
    images = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=IDX_HEADER.size)
    images = images.reshape(count, rows, cols)
    return [images[i].copy() for i in range(count)]


@lru_cache(maxsize=4)
def _cached_idx(path: str) -> Tuple[np.ndarray, ...]:
    return tuple(load_sprites_idx(path))


def resize_nearest(sprite: np.ndarray, size: int) -> np.ndarray:
    h, w = sprite.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return sprite[rows[:, None], cols[None, :]]


def load_sprites(config: GeneratorConfig) -> SpriteSet:
    if config.source is SpriteSource.IDX_FILE:
        sprites = list(_cached_idx(str(config.sprite_path)))
    else:
        sprites = builtin_shapes()
    if config.sprite_size is not None:
        sprites = [resize_nearest(s, config.sprite_size) for s in sprites]
    return sprites


# Motion and rendering

def bounce_trajectory(start: float, velocity: float, limit: float, steps: int) -> np.ndarray:
    """
    Positions of a point moving at constant speed inside [0, limit].

    The position mirrors at either wall and the velocity negates.
    """
    positions = np.empty(steps, dtype=np.float64)
    pos, vel = float(start), float(velocity)
    for step in range(steps):
        positions[step] = pos
        pos += vel
        if pos < 0.0:
            pos, vel = -pos, -vel
        elif pos > limit:
            pos, vel = 2.0 * limit - pos, -vel
        pos = min(max(pos, 0.0), limit)
    return positions


def _bilinear_patch(sprite: np.ndarray, fy: float, fx: float) -> np.ndarray:
    """Sprite shifted by a sub-pixel offset; total intensity is preserved"""
    h, w = sprite.shape
    patch = np.zeros((h + 1, w + 1), dtype=np.float64)
    patch[:h, :w] += (1 - fy) * (1 - fx) * sprite
    patch[1:, :w] += fy * (1 - fx) * sprite
    patch[:h, 1:] += (1 - fy) * fx * sprite
    patch[1:, 1:] += fy * fx * sprite
    return patch


def render_frame(canvas_size: int, placements: Sequence[Tuple[np.ndarray, float, float]]) -> np.ndarray:
    """Composite sprites at sub-pixel (y, x) by per-pixel maximum"""
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.float64)
    for sprite, y, x in placements:
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        patch = _bilinear_patch(sprite.astype(np.float64), y - y0, x - x0)
        ph, pw = patch.shape
        region = canvas[y0:y0 + ph, x0:x0 + pw]
        np.maximum(region, patch[:region.shape[0], :region.shape[1]], out=region)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def generate_sequence(config: GeneratorConfig, index: int,
                      sprites: Optional[SpriteSet] = None) -> SequenceRecord:
    """
    Generate sequence `index` of the procedural dataset.

    Each sprite gets a uniform sub-pixel start, a speed drawn from the
    configured range and a direction uniform on the circle.

    Raises:
        ConfigError: A sprite does not fit inside the canvas
    """
    config.validate()
    sprites = load_sprites(config) if sprites is None else sprites
    if config.sprites > 0 and not sprites:
        raise ConfigError("sprite set is empty")
    rng = keyed_rng(config.seed, index)
    size = config.canvas_size

    tracks = []
    for _ in range(config.sprites):
        sprite = sprites[int(rng.integers(len(sprites)))]
        h, w = sprite.shape
        limit_y, limit_x = size - h - 1, size - w - 1
        if limit_y < 0 or limit_x < 0:
            raise ConfigError(f"sprite {h}×{w} does not fit a {size}×{size} canvas")
        y0 = rng.uniform(0.0, limit_y)
        x0 = rng.uniform(0.0, limit_x)
        speed = rng.uniform(config.speed_min, config.speed_max)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        ys = bounce_trajectory(y0, speed * math.sin(angle), limit_y, config.frames)
        xs = bounce_trajectory(x0, speed * math.cos(angle), limit_x, config.frames)
        tracks.append((sprite, ys, xs))

    frames = np.stack([
        render_frame(size, [(sprite, ys[t], xs[t]) for sprite, ys, xs in tracks])
        for t in range(config.frames)
    ])
    return SequenceRecord(frames=frames, seed=config.seed, index=index)


def generate_dataset(config: GeneratorConfig, count: int, threads: int = 1,
                     start: int = 0) -> List[SequenceRecord]:
    """Sequences start..start+count-1, returned in index order for any thread count"""
    sprites = load_sprites(config.validate())
    indices = range(start, start + count)
    logger.debug(f"Generating sequences {start}..{start + count - 1} with seed {config.seed} on {threads} thread(s)")
    if threads <= 1:
        return [generate_sequence(config, i, sprites) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: generate_sequence(config, i, sprites), indices))


# SEQ0 container

def write_dataset(records: Sequence[SequenceRecord], path) -> Path:
    """Write records as a SEQ0 container; all records share one geometry"""
    path = Path(path)
    if records:
        geometry = records[0].frames.shape
        for i, record in enumerate(records):
            if record.frames.shape != geometry:
                raise ShapeError(f"record {i} has dims {record.frames.shape}, expected {geometry}")
        frames, height, width = geometry
    else:
        frames = height = width = 0

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, len(records), frames, height, width, 1))
        for record in records:
            f.write(np.ascontiguousarray(record.frames, dtype=np.uint8).tobytes())
    return path


def read_dataset(path) -> List[SequenceRecord]:
    """
    Read a SEQ0 container.

    Raises:
        FormatError: Bad magic or version, or a payload that is short or overlong
    """
    raw = Path(path).read_bytes()
    if len(raw) < SEQ_HEADER.size:
        raise FormatError(
            f"truncated SEQ0 header: expected {SEQ_HEADER.size} bytes, found {len(raw)}",
            offset=len(raw), field="header",
        )
    magic, version, count, frames, height, width, channels = SEQ_HEADER.unpack_from(raw, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}, expected {SEQ_MAGIC!r}", offset=0, field="magic")
    if version != SEQ_VERSION:
        raise FormatError(f"unsupported dataset version {version}, expected {SEQ_VERSION}", offset=4, field="version")
    if channels != 1:
        raise FormatError(f"unsupported channel count {channels}", offset=SEQ_HEADER.size - 1, field="channels")

    per_record = frames * height * width * channels
    expected = SEQ_HEADER.size + count * per_record
    if len(raw) != expected:
        raise FormatError(
            f"dataset payload length mismatch: expected {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected), field="payload",
        )
    payload = np.frombuffer(raw, dtype=np.uint8, offset=SEQ_HEADER.size).reshape(count, frames, height, width)
    return [SequenceRecord(frames=payload[i].copy(), index=i) for i in range(count)]


def write_manifest(dataset_path, config: GeneratorConfig, count: int) -> Path:
    """Record the dataset geometry, seed and file hash next to the dataset"""
    dataset_path = Path(dataset_path)
    manifest = {
        "file": dataset_path.name,
        "sequences": count,
        "frames": config.frames,
        "height": config.canvas_size,
        "width": config.canvas_size,
        "channels": 1,
        "generator": config.to_dict(),
        "sha256": compute_file_hash(dataset_path),
    }
    manifest_path = dataset_path.with_name("manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


# Batching

def to_model_range(frames: np.ndarray, value_range: Tuple[float, float], dtype=np.float32) -> np.ndarray:
    """Scale uint8 intensities to [0, 1] or [-1, 1]"""
    unit = frames.astype(np.float64) / 255.0
    low, high = value_range
    return (low + (high - low) * unit).astype(dtype)


def to_uint8(frames: np.ndarray, value_range: Tuple[float, float]) -> np.ndarray:
    """Inverse of to_model_range, clipped and rounded"""
    low, high = value_range
    unit = (np.asarray(frames, dtype=np.float64) - low) / (high - low)
    return np.clip(np.rint(unit * 255.0), 0, 255).astype(np.uint8)


def split_frames(frames: np.ndarray, input_frames: int, predict_frames: int,
                 value_range: Tuple[float, float], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cut an N×F×H×W uint8 stack into model-range inputs and targets.

    Returns:
        (N×T×1×H×W inputs, N×K×1×H×W targets)
    """
    total = input_frames + predict_frames
    if frames.shape[1] < total:
        raise UsageError(f"records hold {frames.shape[1]} frames, need T+K = {total}")
    scaled = to_model_range(frames[:, :total, None], value_range, dtype)
    return scaled[:, :input_frames], scaled[:, input_frames:total]


def shuffle_order(count: int, seed: int, epoch: int) -> np.ndarray:
    return keyed_rng(seed, RNG_SHUFFLE, epoch).permutation(count)


def make_batches(records: Sequence[SequenceRecord], batch_size: int, input_frames: int,
                 predict_frames: int, value_range: Tuple[float, float], seed: int,
                 epoch: int = 0, dtype=np.float32) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    One epoch of shuffled (inputs, targets) batches; the remainder is dropped.

    The permutation is a pure function of (seed, epoch).

    Raises:
        UsageError: Batch larger than the dataset, or records shorter than T+K
    """
    if batch_size < 1 or batch_size > len(records):
        raise UsageError(f"batch size {batch_size} does not fit a dataset of {len(records)} sequences")
    if records[0].frames.shape[0] < input_frames + predict_frames:
        raise UsageError(
            f"records hold {records[0].frames.shape[0]} frames, need T+K = {input_frames + predict_frames}"
        )
    order = shuffle_order(len(records), seed, epoch)
    for start in range(0, len(order) - batch_size + 1, batch_size):
        stack = np.stack([records[i].frames for i in order[start:start + batch_size]])
        yield split_frames(stack, input_frames, predict_frames, value_range, dtype)


class ProceduralStream:
    """
    On-the-fly training batches from the procedural generator.

    Batch `step` holds sequences step·B .. step·B+B-1 of the split, so the
    stream is reproducible and never repeats a sequence.
    """

    def __init__(self, config: GeneratorConfig, batch_size: int, input_frames: int,
                 predict_frames: int, value_range: Tuple[float, float],
                 split: str = "train", dtype=np.float32, threads: int = 1):
        self.config = config.for_split(split).validate()
        if config.frames < input_frames + predict_frames:
            raise UsageError(f"generator makes {config.frames} frames, need T+K = {input_frames + predict_frames}")
        self.batch_size = batch_size
        self.input_frames = input_frames
        self.predict_frames = predict_frames
        self.value_range = value_range
        self.dtype = dtype
        self.threads = threads
        self._sprites = load_sprites(self.config)

    def batch(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        start = step * self.batch_size
        indices = range(start, start + self.batch_size)
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                records = list(pool.map(lambda i: generate_sequence(self.config, i, self._sprites), indices))
        else:
            records = [generate_sequence(self.config, i, self._sprites) for i in indices]
        stack = np.stack([r.frames for r in records])
        return split_frames(stack, self.input_frames, self.predict_frames, self.value_range, self.dtype)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


class RecordBatches:
    """
    Endless shuffled batches over a fixed record set.

    Batch `step` is position step mod E of epoch step div E, E being the
    full batches per epoch, with the same permutation make_batches uses.
    """

    def __init__(self, records: Sequence[SequenceRecord], batch_size: int, input_frames: int,
                 predict_frames: int, value_range: Tuple[float, float], seed: int,
                 dtype=np.float32):
        if batch_size < 1 or batch_size > len(records):
            raise UsageError(f"batch size {batch_size} does not fit a dataset of {len(records)} sequences")
        self.records = list(records)
        self.batch_size = batch_size
        self.input_frames = input_frames
        self.predict_frames = predict_frames
        self.value_range = value_range
        self.seed = seed
        self.dtype = dtype
        self.per_epoch = len(self.records) // batch_size

    def batch(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        epoch, position = divmod(step, self.per_epoch)
        order = shuffle_order(len(self.records), self.seed, epoch)
        chosen = order[position * self.batch_size:(position + 1) * self.batch_size]
        stack = np.stack([self.records[i].frames for i in chosen])
        return split_frames(stack, self.input_frames, self.predict_frames, self.value_range, self.dtype)

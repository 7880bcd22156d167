"""
Transformational States Training
Losses, SGD with momentum, plateau scheduling, the training loop and TSPR checkpoints
"""

import json
import math
import queue
import struct
import threading
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tstates.errors import ConfigError, DomainError, FormatError, ShapeError, TrainingDiverged, UsageError
from tstates.model import TransformationalStatesModel
from tstates.run_log import RunLogger
from tstates.tensor_core import Tape, Tensor, backward, log, mean


BCE_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"TSPR"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

Batch = Tuple[np.ndarray, np.ndarray]


class LossKind(Enum):
    BCE = "bce"
    MSE = "mse"


@dataclass
class OptimizerConfig:
    learning_rate: float = 1.0
    momentum: float = 0.5
    weight_decay: float = 1e-4
    decay_factor: float = 10.0
    plateau_patience: int = 5
    min_relative_improvement: float = 1e-3

    def validate(self) -> "OptimizerConfig":
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must exceed 1, got {self.decay_factor}")
        if self.learning_rate < 0.0 or self.weight_decay < 0.0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be at least 1, got {self.plateau_patience}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimizerConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class TrainingConfig:
    steps: int = 50000
    batch_size: int = 16
    loss: LossKind = LossKind.BCE
    validate_every: int = 500
    validation_sequences: int = 256
    train_sequences: Optional[int] = None   # fixed record set; None streams procedural data
    log_every: int = 50
    prefetch: int = 2

    def validate(self) -> "TrainingConfig":
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"need steps >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")
        if self.validate_every < 1 or self.log_every < 1:
            raise ConfigError("validate_every and log_every must be positive")
        if self.train_sequences is not None and self.train_sequences < self.batch_size:
            raise ConfigError(
                f"train_sequences {self.train_sequences} is smaller than batch_size {self.batch_size}"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["loss"] = self.loss.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "loss" in values:
            try:
                values["loss"] = LossKind(values["loss"])
            except ValueError as e:
                raise ConfigError(str(e))
        return cls(**values)


# Losses

def _target_tensor(target: Union[Tensor, np.ndarray], pred: Tensor) -> Tensor:
    data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if data.shape != pred.dims:
        raise ShapeError(f"prediction dims {pred.dims} do not match target dims {data.shape}")
    return Tensor(data.astype(pred.dtype, copy=False))


def _frame_pixels(dims: Tuple[int, ...]) -> int:
    """Pixels of one frame: the trailing C×H×W"""
    return int(np.prod(dims[-3:])) if len(dims) >= 3 else int(np.prod(dims))


def bce_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tuple[Tensor, float]:
    """
    Binary cross-entropy in nats.

    Returns:
        (mean-per-pixel loss for gradients, nats per frame for reporting)
    """
    t = _target_tensor(target, pred)
    if t.data.size and (t.data.min() < 0.0 or t.data.max() > 1.0):
        raise DomainError(f"BCE targets must lie in [0, 1], got [{t.data.min()}, {t.data.max()}]")
    p = pred.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = -(t * log(p) + (1.0 - t) * log(1.0 - p))
    frames = per_pixel.size / _frame_pixels(per_pixel.dims)
    nats_per_frame = math.fsum(per_pixel.data.astype(np.float64).ravel()) / frames
    return mean(per_pixel), nats_per_frame


def mse_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    t = _target_tensor(target, pred)
    return mean((pred - t).square())


def sequence_loss(predictions: Sequence[Tensor], targets: np.ndarray,
                  kind: LossKind) -> Tuple[Tensor, float]:
    """
    Loss over the predicted frames only.

    Args:
        predictions: K tensors N×C×H×W
        targets: N×K×C×H×W

    Returns:
        (mean-per-pixel loss, reported value: nats/frame for BCE, mean squared error for MSE)
    """
    if len(predictions) != targets.shape[1]:
        raise ShapeError(f"{len(predictions)} predictions for {targets.shape[1]} target frames")
    losses, reports = [], []
    for k, pred in enumerate(predictions):
        if kind is LossKind.BCE:
            loss, report = bce_loss(pred, targets[:, k])
        else:
            loss = mse_loss(pred, targets[:, k])
            report = loss.item()
        losses.append(loss)
        reports.append(report)
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses)), math.fsum(reports) / len(reports)


# Optimization

def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                      velocities: Dict[str, np.ndarray], config: OptimizerConfig,
                      learning_rate: Optional[float] = None) -> Dict[str, np.ndarray]:
    """
    v <- beta*v + (g + wd*theta); theta <- theta - lr*v.

    Weight decay applies only to tensors flagged for it (encoder and decoder
    kernels). Parameters are replaced, never mutated in place.
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    for name, param in params.items():
        grad = np.asarray(grads[name])
        if grad.shape != param.dims:
            raise ShapeError(f"gradient for {name} has dims {grad.shape}, expected {param.dims}")
        velocity = velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        step = grad + config.weight_decay * param.data if param.decay else grad
        velocity = (config.momentum * velocity + step).astype(param.dtype)
        velocities[name] = velocity
        # lr 0 leaves parameters bitwise untouched, signed zeros included
        if lr != 0.0:
            param.data = (param.data - param.dtype.type(lr) * velocity).astype(param.dtype)
    return velocities


class PlateauScheduler:
    """
    Divide the learning rate when validation loss stops improving.

    An evaluation counts as an improvement when it beats the best loss by
    at least min_relative_improvement of the best. After plateau_patience
    non-improving evaluations in a row the rate is divided by decay_factor
    and the count restarts.
    """

    def __init__(self, config: OptimizerConfig, learning_rate: Optional[float] = None):
        self.config = config
        self.learning_rate = config.learning_rate if learning_rate is None else learning_rate
        self.best: Optional[float] = None
        self.bad_evaluations = 0

    def observe(self, loss: float) -> bool:
        """Record one validation loss; True when the rate was decayed"""
        if self.best is None or self.best - loss >= self.config.min_relative_improvement * abs(self.best):
            self.best = loss
            self.bad_evaluations = 0
            return False
        self.bad_evaluations += 1
        if self.bad_evaluations >= self.config.plateau_patience:
            self.learning_rate /= self.config.decay_factor
            self.bad_evaluations = 0
            return True
        return False

    def state_dict(self) -> Dict[str, Any]:
        return {"learning_rate": self.learning_rate, "best": self.best,
                "bad_evaluations": self.bad_evaluations}

    def load_state(self, state: Dict[str, Any]) -> None:
        self.learning_rate = float(state["learning_rate"])
        self.best = None if state.get("best") is None else float(state["best"])
        self.bad_evaluations = int(state.get("bad_evaluations", 0))


def plateau_scheduler_step(history: Sequence[float], learning_rate: float,
                           config: OptimizerConfig) -> float:
    """Learning rate after replaying a validation-loss history from `learning_rate`"""
    if not history:
        raise UsageError("plateau scheduling needs at least one validation loss")
    scheduler = PlateauScheduler(config, learning_rate)
    for loss in history:
        scheduler.observe(loss)
    return scheduler.learning_rate


# Checkpoints

@dataclass
class Checkpoint:
    config_text: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def metadata(self) -> Dict[str, Any]:
        return json.loads(self.config_text) if self.config_text else {}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config_bytes = checkpoint.config_text.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(checkpoint.tensors)),
    ]
    for name, array in checkpoint.tensors.items():
        array = np.asarray(array)
        if array.dtype not in DTYPE_CODES:
            raise UsageError(f"tensor {name} has unsupported dtype {array.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<B", DTYPE_CODES[array.dtype]))
        parts.append(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked little-endian reader that names the failing field"""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, count: int, field_name: str) -> bytes:
        if self.offset + count > len(self.raw):
            raise FormatError(
                f"truncated checkpoint: need {count} bytes, {len(self.raw) - self.offset} remain",
                offset=self.offset, field=field_name,
            )
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, field_name: str) -> Tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field_name))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    reader = _Reader(raw)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC.decode()!r}",
                          offset=0, field="magic")
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}",
                          offset=4, field="version")
    (config_length,) = reader.unpack("<I", "config_length")
    try:
        config_text = reader.take(config_length, "config").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"config text is not UTF-8: {e}", offset=12, field="config")
    (count,) = reader.unpack("<I", "tensor_count")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H", "name_length")
        name = reader.take(name_length, "name").decode("utf-8")
        (rank,) = reader.unpack("<B", f"{name}.rank")
        dims = reader.unpack(f"<{rank}I", f"{name}.dims")
        code_offset = reader.offset
        (code,) = reader.unpack("<B", f"{name}.dtype")
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name}", offset=code_offset,
                              field=f"{name}.dtype")
        dtype = CODE_DTYPES[code]
        payload = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, f"{name}.payload")
        tensors[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    if reader.offset != len(raw):
        raise FormatError(f"{len(raw) - reader.offset} trailing bytes after last tensor",
                          offset=reader.offset, field="trailer")
    return Checkpoint(config_text=config_text, tensors=tensors, version=version)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(checkpoint))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def capture_state(model: TransformationalStatesModel, velocities: Mapping[str, np.ndarray],
                  metadata: Dict[str, Any]) -> Checkpoint:
    """Parameters, velocities and running statistics under their checkpoint names"""
    tensors: Dict[str, np.ndarray] = {}
    for name, param in model.named_parameters().items():
        tensors[f"param/{name}"] = param.data.copy()
    for name, velocity in velocities.items():
        tensors[f"velocity/{name}"] = np.asarray(velocity).copy()
    for layer, state in model.batch_norm_states().items():
        tensors[f"bn/{layer}/running_mean"] = state.running_mean.copy()
        tensors[f"bn/{layer}/running_var"] = state.running_var.copy()
    return Checkpoint(config_text=json.dumps(metadata, sort_keys=True), tensors=tensors)


def restore_state(model: TransformationalStatesModel, checkpoint: Checkpoint) -> Dict[str, np.ndarray]:
    """
    Load parameters and running statistics into `model`.

    Returns:
        The optimizer velocities stored with the checkpoint
    """
    params = model.named_parameters()
    for name, param in params.items():
        key = f"param/{name}"
        if key not in checkpoint.tensors:
            raise FormatError(f"checkpoint lacks parameter {name}", field=key)
        array = checkpoint.tensors[key]
        if array.shape != param.dims:
            raise FormatError(f"parameter {name} has dims {array.shape}, model expects {param.dims}", field=key)
        param.data = array.astype(param.dtype).copy()

    for layer, state in model.batch_norm_states().items():
        for stat in ("running_mean", "running_var"):
            key = f"bn/{layer}/{stat}"
            if key not in checkpoint.tensors:
                raise FormatError(f"checkpoint lacks statistic {key}", field=key)
            getattr(state, stat)[...] = checkpoint.tensors[key]

    velocities = {}
    for key, array in checkpoint.tensors.items():
        if key.startswith("velocity/"):
            velocities[key[len("velocity/"):]] = array.copy()
    return velocities


# Training loop

class BatchPrefetcher:
    """
    Background batch assembly handed to the trainer through a bounded queue.

    Batches come out in step order; a failure in the producer is re-raised
    in the consumer.
    """

    _DONE = object()

    def __init__(self, source: Callable[[int], Batch], start: int, stop: int, depth: int = 2):
        self._source = source
        self._steps = range(start, stop)
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="tstates-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for step in self._steps:
                if not self._put((step, self._source(step))):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Tuple[int, Batch]]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


@dataclass
class TrainingResult:
    steps: int
    losses: List[Tuple[int, float]]
    validations: List[Tuple[int, float]]
    learning_rate: float
    best_validation: Optional[float]
    log_path: Path
    checkpoint_path: Optional[Path]


class Trainer:
    """
    SGD training of a transformational-states model.

    Every step predicts the K target frames from the T input frames and
    takes the loss on the predicted frames only. Validation runs every
    validate_every steps; the best model is checkpointed.
    """

    def __init__(self, model: TransformationalStatesModel, optimizer: OptimizerConfig,
                 training: TrainingConfig, out_dir, metadata: Optional[Dict[str, Any]] = None,
                 threads: int = 1, echo: bool = True):
        self.model = model
        self.optimizer = optimizer.validate()
        self.training = training.validate()
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metadata = dict(metadata or {})
        self.threads = threads
        self.scheduler = PlateauScheduler(self.optimizer)
        self.velocities: Dict[str, np.ndarray] = {}
        self.step = 0
        self.run_log = RunLogger("tstates-trainer", log_file=self.out_dir / "train.log", echo=echo)
        self._recent: List[float] = []

    @property
    def best_path(self) -> Path:
        return self.out_dir / "best.tspr"

    @property
    def last_path(self) -> Path:
        return self.out_dir / "last.tspr"

    def resume(self, checkpoint: Checkpoint) -> None:
        """Continue from a checkpoint's parameters, velocities, scheduler and step"""
        self.velocities = restore_state(self.model, checkpoint)
        meta = checkpoint.metadata
        if "scheduler" in meta:
            self.scheduler.load_state(meta["scheduler"])
        self.step = int(meta.get("step", 0))
        self.run_log.log_event("RESUME", f"Resumed at step {self.step}",
                               details={"step": self.step, "learning_rate": self.scheduler.learning_rate})

    def checkpoint(self) -> Checkpoint:
        metadata = dict(self.metadata)
        metadata["scheduler"] = self.scheduler.state_dict()
        metadata["step"] = self.step
        return capture_state(self.model, self.velocities, metadata)

    def train_step(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """One SGD step; returns the reported loss"""
        self.model.train()
        params = self.model.named_parameters()
        with Tape() as tape:
            predictions = self.model.predict_sequence(inputs)
            loss, report = sequence_loss(predictions, targets, self.training.loss)
        if not loss.is_finite() or not math.isfinite(report):
            self._diverge(report)
        grads = backward(tape, loss)
        sgd_momentum_step(params, {name: grads[t] for name, t in params.items()},
                          self.velocities, self.optimizer, self.scheduler.learning_rate)
        return report

    def evaluate(self, batches: Sequence[Batch]) -> float:
        """Mean reported loss over held-out batches in eval mode"""
        self.model.eval()
        reports = []
        for inputs, targets in batches:
            _, report = sequence_loss(self.model.predict_sequence(inputs), targets, self.training.loss)
            reports.append(report)
        return math.fsum(reports) / len(reports)

    def _diverge(self, report: float) -> None:
        params = self.model.named_parameters()
        dump = {
            "step": self.step,
            "learning_rate": self.scheduler.learning_rate,
            "loss": repr(report),
            "recent_losses": self._recent[-20:],
            "parameters": {
                name: {"norm": float(np.linalg.norm(p.data.astype(np.float64))), "finite": p.is_finite()}
                for name, p in params.items()
            },
        }
        dump_path = self.out_dir / "diverged.json"
        dump_path.write_text(json.dumps(dump, indent=2, sort_keys=True, default=str))
        self.run_log.log_event("DIVERGED", f"Non-finite loss at step {self.step}", "ERROR",
                               {"step": self.step, "dump": str(dump_path)})
        raise TrainingDiverged(f"loss became {report!r} at step {self.step}", dump_path=str(dump_path))

    def _validate(self, validation: Sequence[Batch], result: TrainingResult) -> None:
        value = self.evaluate(validation)
        result.validations.append((self.step, value))
        improved = result.best_validation is None or value < result.best_validation
        self.run_log.log_event("VALIDATION", f"Step {self.step}: validation {value:.6f}",
                               details={"step": self.step, "loss": value, "improved": improved})
        if improved:
            result.best_validation = value
            save_checkpoint(self.checkpoint(), self.best_path)
            result.checkpoint_path = self.best_path
            self.run_log.log_event("CHECKPOINT", f"Saved {self.best_path.name}",
                                   details={"step": self.step, "path": str(self.best_path)})
        previous = self.scheduler.learning_rate
        if self.scheduler.observe(value):
            self.run_log.log_event("LR_DECAY", f"Learning rate {previous:g} -> {self.scheduler.learning_rate:g}",
                                   details={"step": self.step, "learning_rate": self.scheduler.learning_rate})

    def fit(self, source: Callable[[int], Batch], steps: int,
            validation: Sequence[Batch] = ()) -> TrainingResult:
        """
        Train for `steps` further steps.

        Args:
            source: Batch for a given global step
            steps: Step budget; 0 writes the log and a checkpoint without touching parameters
            validation: Held-out batches
        """
        result = TrainingResult(steps=0, losses=[], validations=[], learning_rate=self.scheduler.learning_rate,
                                best_validation=self.scheduler.best, log_path=self.out_dir / "train.log",
                                checkpoint_path=None)
        self.run_log.log_event("TRAIN_START", f"Training {steps} steps from step {self.step}",
                               details={"steps": steps, "start": self.step,
                                        "learning_rate": self.scheduler.learning_rate,
                                        "parameters": self.model.census().total})
        stop = self.step + steps
        if self.threads > 1:
            prefetcher = BatchPrefetcher(source, self.step, stop, self.training.prefetch)
            batches: Iterator[Tuple[int, Batch]] = iter(prefetcher)
        else:
            prefetcher = None
            batches = ((s, source(s)) for s in range(self.step, stop))

        try:
            for step, (inputs, targets) in batches:
                report = self.train_step(inputs, targets)
                self._recent.append(report)
                result.losses.append((step, report))
                if step % self.training.log_every == 0:
                    self.run_log.log_event("TRAIN_STEP", f"Step {step}: loss {report:.6f}",
                                           details={"step": step, "loss": report,
                                                    "learning_rate": self.scheduler.learning_rate})
                self.step = step + 1
                result.steps += 1
                if validation and self.step % self.training.validate_every == 0:
                    self._validate(validation, result)
        finally:
            if prefetcher is not None:
                prefetcher.close()

        save_checkpoint(self.checkpoint(), self.last_path)
        if result.checkpoint_path is None:
            result.checkpoint_path = self.last_path
        result.learning_rate = self.scheduler.learning_rate
        self.run_log.log_event("CHECKPOINT", f"Saved {self.last_path.name}",
                               details={"step": self.step, "path": str(self.last_path)})
        return result

    def close(self) -> None:
        self.run_log.close()


def train(model: TransformationalStatesModel, source: Callable[[int], Batch],
          optimizer: OptimizerConfig, training: TrainingConfig, out_dir,
          validation: Sequence[Batch] = (), metadata: Optional[Dict[str, Any]] = None,
          threads: int = 1, echo: bool = True) -> TrainingResult:
    """Train for training.steps steps and close the run log"""
    trainer = Trainer(model, optimizer, training, out_dir, metadata, threads=threads, echo=echo)
    try:
        return trainer.fit(source, training.steps, validation)
    finally:
        trainer.close()

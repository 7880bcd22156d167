"""
Transformational States Metrics
BCE nats/frame, PSNR, SSIM and per-horizon evaluation reports
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tstates.data import SequenceRecord, split_frames
from tstates.errors import DomainError, ShapeError, UsageError


PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BCE_CLAMP = 1e-7

METRICS = ("bce", "psnr", "ssim")


def _pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction dims {p.shape} do not match target dims {t.shape}")
    return p, t


def psnr(pred, target, data_range: float = 1.0) -> float:
    """10·log10(range²/MSE) in decibels, capped at 100 dB"""
    if data_range <= 0:
        raise DomainError(f"data_range must be positive, got {data_range}")
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(data_range ** 2 / mse), PSNR_CAP)


def ssim(pred, target, data_range: float = 1.0) -> float:
    """
    Mean SSIM over every valid 7×7 uniform window.

    Images are H×W or stacks of H×W planes; planes are averaged.
    """
    p, t = _pair(pred, target)
    if p.ndim < 2 or p.shape[-1] < SSIM_WINDOW or p.shape[-2] < SSIM_WINDOW:
        raise DomainError(f"ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {p.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    wp = sliding_window_view(p, (SSIM_WINDOW, SSIM_WINDOW), axis=(-2, -1))
    wt = sliding_window_view(t, (SSIM_WINDOW, SSIM_WINDOW), axis=(-2, -1))
    mu_p = wp.mean(axis=(-2, -1))
    mu_t = wt.mean(axis=(-2, -1))
    dp = wp - mu_p[..., None, None]
    dt = wt - mu_t[..., None, None]
    var_p = (dp * dp).mean(axis=(-2, -1))
    var_t = (dt * dt).mean(axis=(-2, -1))
    cov = (dp * dt).mean(axis=(-2, -1))

    numerator = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
    denominator = (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
    return float(np.mean(numerator / denominator))


def bce_nats_per_frame(pred, target) -> float:
    """Binary cross-entropy summed over the pixels of each C×H×W frame, averaged over frames"""
    p, t = _pair(pred, target)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise DomainError(f"BCE targets must lie in [0, 1], got [{t.min()}, {t.max()}]")
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    frame_pixels = int(np.prod(p.shape[-3:])) if p.ndim >= 3 else p.size
    return math.fsum(per_pixel.ravel()) / (per_pixel.size / frame_pixels)


@dataclass
class MetricsReport:
    """Per-horizon means over the test set, in the preset's native value range"""
    horizon: int
    num_sequences: int
    value_range: Tuple[float, float]
    per_horizon: Dict[str, List[float]] = field(default_factory=dict)

    def average(self, metric: str) -> float:
        values = self.per_horizon[metric]
        return math.fsum(values) / len(values)

    def first(self, metric: str) -> float:
        return self.per_horizon[metric][0]

    def to_dict(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        names = {"bce": "bce_nats_per_frame", "psnr": "psnr", "ssim": "ssim"}
        for metric, values in self.per_horizon.items():
            name = names[metric]
            out[f"{name}_avg"] = self.average(metric)
            out[f"{name}_t1"] = self.first(metric)
            for k, value in enumerate(values, start=1):
                out[f"{name}_h{k}"] = value
        out["num_sequences"] = self.num_sequences
        out["horizon"] = self.horizon
        out["value_min"] = self.value_range[0]
        out["value_max"] = self.value_range[1]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class ModelPredictor:
    """Adapter giving a model the predictor interface, in eval mode"""

    def __init__(self, model):
        self.model = model

    def predict(self, inputs: np.ndarray, steps: int) -> np.ndarray:
        self.model.eval()
        return self.model.rollout(inputs, steps)


class CopyLastFramePredictor:
    """Baseline: every predicted frame repeats the last input frame"""

    def predict(self, inputs: np.ndarray, steps: int) -> np.ndarray:
        last = np.asarray(inputs)[:, -1:]
        return np.repeat(last, steps, axis=1)


def _sequence_metrics(prediction: np.ndarray, target: np.ndarray, value_range: Tuple[float, float],
                      metrics: Sequence[str]) -> Dict[str, List[float]]:
    """prediction/target: K×C×H×W for one sequence"""
    low, high = value_range
    span = high - low
    values: Dict[str, List[float]] = {m: [] for m in metrics}
    for k in range(target.shape[0]):
        p, t = prediction[k], target[k]
        if "bce" in values:
            values["bce"].append(bce_nats_per_frame((p - low) / span, (t - low) / span))
        if "psnr" in values:
            values["psnr"].append(psnr(p, t, span))
        if "ssim" in values:
            values["ssim"].append(ssim(p, t, span))
    return values


def evaluate_model(predictor, records: Sequence[SequenceRecord], input_frames: int,
                   predict_frames: int, value_range: Tuple[float, float],
                   metrics: Sequence[str] = METRICS, threads: int = 1,
                   dtype=np.float32) -> MetricsReport:
    """
    Predict K frames from T inputs for every test sequence and average per horizon.

    BCE is taken after mapping both images to [0, 1]; PSNR and SSIM use the
    span of the value range. Per-sequence values are summed with exact
    rounding so the result does not depend on sequence order.

    Raises:
        UsageError: The records hold fewer than T+K frames, or there are none
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(sorted(unknown))}")
    if not records:
        raise UsageError("evaluation needs at least one test sequence")
    available = records[0].frames.shape[0]
    if input_frames + predict_frames > available:
        raise UsageError(f"horizon T+K = {input_frames + predict_frames} exceeds {available} recorded frames")

    logger = logging.getLogger("tstates-evaluator")

    def _one(record: SequenceRecord) -> Dict[str, List[float]]:
        inputs, targets = split_frames(record.frames[None], input_frames, predict_frames, value_range, dtype)
        prediction = np.asarray(predictor.predict(inputs, predict_frames), dtype=np.float64)
        if prediction.shape != targets.shape:
            raise ShapeError(f"predictor returned {prediction.shape}, expected {targets.shape}")
        return _sequence_metrics(prediction[0], targets[0].astype(np.float64), value_range, metrics)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, records))
    else:
        results = [_one(r) for r in records]

    per_horizon = {
        m: [math.fsum(r[m][k] for r in results) / len(results) for k in range(predict_frames)]
        for m in metrics
    }
    report = MetricsReport(horizon=predict_frames, num_sequences=len(records),
                           value_range=tuple(value_range), per_horizon=per_horizon)
    logger.debug(f"Evaluated {len(records)} sequences over {predict_frames} frames")
    return report

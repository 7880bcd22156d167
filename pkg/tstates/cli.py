#!/usr/bin/env python3
"""
Transformational States Command Line
Dataset generation, training, prediction, evaluation, ablation and gradient checks
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from tstates.config import ABLATIONS, PRESETS, ExperimentConfig, from_checkpoint_text, resolve_config, resolve_document
from tstates.data import (
    GeneratorConfig,
    ProceduralStream,
    RecordBatches,
    SequenceRecord,
    generate_dataset,
    read_dataset,
    split_frames,
    to_uint8,
    write_dataset,
    write_manifest,
)
from tstates.errors import ConfigError, TStatesError, UsageError
from tstates.metrics import SSIM_WINDOW, CopyLastFramePredictor, ModelPredictor, evaluate_model
from tstates.model import TransformationalStatesModel, build_model
from tstates.run_log import RunLogger
from tstates.tensor_core import Tape, backward, keyed_rng, record_kinks
from tstates.training import LossKind, Trainer, load_checkpoint, restore_state, sequence_loss


STRIP_SEPARATOR = 2
SEPARATOR_VALUE = 255
GRADCHECK_STEP = 1e-5
GRADCHECK_FLOOR = 1e-6
GRADCHECK_RETRIES = 3
RNG_GRADCHECK = 11

logger = logging.getLogger("tstates-cli")


# Prediction strips

def render_strip(rows: Sequence[np.ndarray], path) -> Path:
    """
    Tile frame rows into a binary PGM.

    Args:
        rows: Each an F×H×W uint8 stack; all frames share H×W
        path: Output file

    Frames run left to right and rows top to bottom, separated by 2-pixel
    white bands. Rows shorter than the longest are padded with black.
    """
    if not rows:
        raise UsageError("render_strip needs at least one row")
    height, width = rows[0].shape[1:]
    for row in rows:
        if row.ndim != 3 or row.shape[1:] != (height, width):
            raise UsageError(f"row frames {row.shape[1:]} differ from {(height, width)}")
    columns = max(row.shape[0] for row in rows)
    sep = STRIP_SEPARATOR
    canvas_h = len(rows) * height + (len(rows) - 1) * sep
    canvas_w = columns * width + max(columns - 1, 0) * sep
    canvas = np.full((canvas_h, canvas_w), SEPARATOR_VALUE, dtype=np.uint8)
    for r, row in enumerate(rows):
        top = r * (height + sep)
        for c in range(columns):
            left = c * (width + sep)
            frame = row[c] if c < row.shape[0] else np.zeros((height, width), dtype=np.uint8)
            canvas[top:top + height, left:left + width] = frame

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{canvas_w} {canvas_h}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by render_strip"""
    raw = Path(path).read_bytes()
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while raw[offset:offset + 1].isspace():
            offset += 1
        end = offset
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[offset:end])
        offset = end
    if tokens[0] != b"P5":
        raise UsageError(f"{path} is not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise UsageError(f"unsupported PGM maxval {maxval}")
    offset += 1
    return np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=offset).reshape(height, width).copy()


# Gradient check

@dataclass
class GradcheckReport:
    tolerance: float
    worst: Dict[str, float] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.worst.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        out = []
        for name, err in self.worst.items():
            status = "ok" if err < self.tolerance else "FAIL"
            note = f" ({self.skipped[name]} skipped at kinks)" if self.skipped.get(name) else ""
            out.append(f"{name:<40} {err:.3e} {status}{note}")
        return out


def gradcheck(preset: str = "miniature", tolerance: float = 1e-4, seed: int = 0,
              step: float = GRADCHECK_STEP, overrides: Sequence[str] = ()) -> GradcheckReport:
    """
    Compare reverse-mode gradients with central finite differences for every parameter element.

    The model runs in 64-bit train mode without dropout. Relative error is
    |a - n| / max(|a|, |n|, 1e-6). When a perturbation flips the sign of a
    leaky_relu input the step shrinks tenfold; elements that still straddle
    a kink are skipped and counted.
    """
    forced = ['model.dtype="float64"', "model.encoder_dropout=0.0"]
    config = resolve_config(preset, overrides=list(overrides) + forced, seed=seed)
    model, _ = build_model(config.model)
    model.train()
    cfg = config.model
    low, high = cfg.value_range
    rng = keyed_rng(seed, RNG_GRADCHECK)
    frame_dims = (cfg.image_channels, cfg.input_size, cfg.input_size)
    inputs = rng.uniform(low, high, size=(2, cfg.input_frames) + frame_dims)
    targets = rng.uniform(low, high, size=(2, cfg.predict_frames) + frame_dims)

    def loss_value():
        loss, _ = sequence_loss(model.predict_sequence(inputs), targets, LossKind.MSE)
        return loss

    params = model.named_parameters()
    with Tape() as tape:
        loss = loss_value()
    grads = backward(tape, loss)

    report = GradcheckReport(tolerance=tolerance)
    for name, param in params.items():
        analytic = grads[param].reshape(-1)
        flat = param.data.reshape(-1)
        worst, skipped = 0.0, 0
        for i in range(flat.size):
            original = flat[i]
            h = step
            for _ in range(GRADCHECK_RETRIES):
                flat[i] = original + h
                with record_kinks() as plus:
                    f_plus = loss_value().item()
                flat[i] = original - h
                with record_kinks() as minus:
                    f_minus = loss_value().item()
                flat[i] = original
                if all(np.array_equal(a, b) for a, b in zip(plus, minus)):
                    break
                h /= 10.0
            else:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRADCHECK_FLOOR)
            worst = max(worst, err)
        report.worst[name] = worst
        report.skipped[name] = skipped
    return report


# Subcommands

def _overrides(args) -> List[str]:
    """--set values followed by the data shortcuts"""
    result = list(args.set or [])
    if getattr(args, "frames", None) is not None:
        result.append(f"data.frames={args.frames}")
    if getattr(args, "size", None) is not None:
        result.append(f"data.canvas_size={args.size}")
    if getattr(args, "digits", None) is not None:
        result.append(f"data.sprites={args.digits}")
    if getattr(args, "sprites", None) is not None:
        result.append('data.source="idx_file"')
        result.append(f"data.sprite_path={json.dumps(str(args.sprites))}")
    if getattr(args, "shapes", False):
        result.append('data.source="builtin_shapes"')
    if getattr(args, "steps", None) is not None and args.command == "train":
        result.append(f"training.steps={args.steps}")
    return result


def _experiment(args) -> ExperimentConfig:
    return resolve_config(args.preset, args.config, _overrides(args), getattr(args, "ablation", "none"), args.seed)


def _require(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    resolved = Path(path)
    if not resolved.exists():
        raise FileNotFoundError(f"{flag} {resolved} does not exist")
    return resolved


def _load_model(args) -> Tuple[TransformationalStatesModel, ExperimentConfig]:
    """Model restored from --ckpt, with its embedded configuration"""
    checkpoint = load_checkpoint(_require(args.ckpt, "--ckpt"))
    config = from_checkpoint_text(checkpoint.config_text)
    model, _ = build_model(config.model)
    restore_state(model, checkpoint)
    return model.eval(), config


def _held_out(args, config: ExperimentConfig) -> GeneratorConfig:
    """Test-split generator of a checkpoint's geometry, seeded by --seed"""
    return replace(config.data, seed=args.seed).for_split("test")


def _test_records(args, config: ExperimentConfig) -> List[SequenceRecord]:
    if args.data is not None:
        return read_dataset(_require(args.data, "--data"))
    return generate_dataset(_held_out(args, config), args.num_test, threads=args.threads)


def cmd_gen(args) -> int:
    document = resolve_document(args.preset, args.config, _overrides(args), seed=args.seed)
    config = GeneratorConfig.from_dict(document["data"]).validate()
    out = Path(args.out)
    records = generate_dataset(config.for_split("test"), args.num_test, threads=args.threads)
    dataset_path = write_dataset(records, out / "test.seq")
    manifest_path = write_manifest(dataset_path, config.for_split("test"), len(records))

    run_log = RunLogger("tstates-generator")
    run_log.log_event("DATASET_WRITTEN", f"Wrote {len(records)} sequences to {dataset_path}",
                      details={"path": str(dataset_path), "manifest": str(manifest_path),
                               "sequences": len(records), "frames": config.frames,
                               "size": config.canvas_size, "seed": config.seed})
    run_log.close()
    return 0


def _validation_batches(config: ExperimentConfig, threads: int):
    cfg = config.model
    count = config.training.validation_sequences
    if count < 1:
        return []
    records = generate_dataset(config.data.for_split("validation"), count, threads=threads)
    stack = np.stack([r.frames for r in records])
    batch = min(config.training.batch_size, count)
    return [
        split_frames(stack[i:i + batch], cfg.input_frames, cfg.predict_frames, cfg.value_range, cfg.numpy_dtype)
        for i in range(0, count - batch + 1, batch)
    ]


def _train_source(args, config: ExperimentConfig) -> Callable:
    cfg = config.model
    batch = config.training.batch_size
    if getattr(args, "data", None) is not None:
        records = read_dataset(_require(args.data, "--data"))
    elif config.training.train_sequences is not None:
        records = generate_dataset(config.data.for_split("train"), config.training.train_sequences,
                                   threads=args.threads)
    else:
        stream = ProceduralStream(config.data, batch, cfg.input_frames, cfg.predict_frames,
                                  cfg.value_range, dtype=cfg.numpy_dtype, threads=args.threads)
        return stream.batch
    return RecordBatches(records, batch, cfg.input_frames, cfg.predict_frames, cfg.value_range,
                         seed=config.data.seed, dtype=cfg.numpy_dtype).batch


def _fit(config: ExperimentConfig, args, out: Path, steps: int, validate: bool = True):
    model, census = build_model(config.model)
    out.mkdir(parents=True, exist_ok=True)
    (out / "census.json").write_text(json.dumps(census.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.debug(f"Effective configuration: {config.to_json()}")
    validation = _validation_batches(config, args.threads) if validate else []
    trainer = Trainer(model, config.optimizer, config.training, out,
                      metadata={"config": config.to_dict()}, threads=args.threads)
    try:
        if getattr(args, "resume", None) is not None:
            trainer.resume(load_checkpoint(_require(args.resume, "--resume")))
        result = trainer.fit(_train_source(args, config), steps, validation)
    finally:
        trainer.close()
    return model, census, result


def cmd_train(args) -> int:
    config = _experiment(args)
    out = Path(args.out)
    _, census, result = _fit(config, args, out, config.training.steps)
    final = result.losses[-1][1] if result.losses else float("nan")
    print(f"Trained {result.steps} steps; parameters {census.total}; last loss {final:.6f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    model, config = _load_model(args)
    cfg = config.model
    steps = cfg.predict_frames if args.steps is None else args.steps
    if args.data is not None:
        records = read_dataset(_require(args.data, "--data"))
        if not 0 <= args.index < len(records):
            raise UsageError(f"--index {args.index} outside dataset of {len(records)} sequences")
        frames = records[args.index].frames
    else:
        frames = generate_dataset(_held_out(args, config), 1, start=args.index)[0].frames

    if frames.shape[0] < cfg.input_frames:
        raise UsageError(f"sequence holds {frames.shape[0]} frames, model needs {cfg.input_frames} inputs")
    inputs = frames[:cfg.input_frames]
    truth = frames[cfg.input_frames:cfg.input_frames + steps]
    scaled, _ = split_frames(frames[None], cfg.input_frames, 0, cfg.value_range, cfg.numpy_dtype)
    predicted = to_uint8(model.rollout(scaled, steps)[0, :, 0], cfg.value_range)
    path = render_strip([inputs, truth, predicted], args.out)
    print(f"Wrote {path}")
    return 0


def cmd_eval(args) -> int:
    model, config = _load_model(args)
    cfg = config.model
    records = _test_records(args, config)
    metrics = ("bce", "psnr", "ssim") if cfg.input_size >= SSIM_WINDOW else ("bce", "psnr")

    report = evaluate_model(ModelPredictor(model), records, cfg.input_frames, cfg.predict_frames,
                            cfg.value_range, metrics=metrics, threads=args.threads, dtype=cfg.numpy_dtype)
    baseline = evaluate_model(CopyLastFramePredictor(), records, cfg.input_frames, cfg.predict_frames,
                              cfg.value_range, metrics=metrics, threads=args.threads, dtype=cfg.numpy_dtype)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "baseline.json").write_text(baseline.to_json() + "\n")

    run_log = RunLogger("tstates-evaluator")
    run_log.log_event("EVALUATION", f"Evaluated {report.num_sequences} sequences",
                      details={"model": report.to_dict(), "copy_last_frame": baseline.to_dict(),
                               "checkpoint": str(args.ckpt)})
    run_log.close()
    print(f"BCE nats/frame: model {report.average('bce'):.2f} avg / {report.first('bce'):.2f} t1, "
          f"copy-last {baseline.average('bce'):.2f} avg / {baseline.first('bce'):.2f} t1")
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_log = RunLogger("tstates-cli", log_file=out / "ablation.log")
    steps = args.steps or 0
    results = {}
    full_census = None
    try:
        for variant in ABLATIONS:
            config = resolve_config(args.preset, args.config, _overrides(args), variant, args.seed)
            if steps > 0:
                model, census, fit = _fit(config, args, out / variant, steps, validate=False)
                losses = [loss for _, loss in fit.losses]
                records = generate_dataset(config.data.for_split("test"), args.num_test, threads=args.threads)
                cfg = config.model
                report = evaluate_model(ModelPredictor(model), records, cfg.input_frames, cfg.predict_frames,
                                        cfg.value_range, metrics=("bce", "psnr"), threads=args.threads,
                                        dtype=cfg.numpy_dtype)
                entry = {"census": census.to_dict(), "final_loss": losses[-1],
                         "finite": all(math.isfinite(v) for v in losses), "report": report.to_dict()}
            else:
                _, census = build_model(config.model)
                entry = {"census": census.to_dict()}
            if full_census is None:
                full_census = census
            entry["census_delta"] = {
                name: census.components[name] - full_census.components[name] for name in census.components
            }
            entry["census_delta"]["total"] = census.total - full_census.total
            results[variant] = entry
            run_log.log_event("ABLATION", f"{variant}: {census.total} parameters",
                              details={"variant": variant, "delta": entry["census_delta"]})
    finally:
        run_log.close()
    (out / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    for variant, entry in results.items():
        print(f"{variant:<16} {entry['census']['total']:>10} parameters  delta {entry['census_delta']['total']:+d}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.preset, args.tolerance, args.seed, overrides=_overrides(args))
    for line in report.lines():
        print(line)
    run_log = RunLogger("tstates-cli", echo=False)
    run_log.log_event("GRADCHECK", "passed" if report.passed else "failed",
                      "INFO" if report.passed else "ERROR",
                      details={"worst": report.worst, "tolerance": report.tolerance})
    run_log.close()
    if not report.passed:
        print(f"gradient check failed for {', '.join(report.failures)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _common_parser(preset: str) -> argparse.ArgumentParser:
    """Options shared by the subcommands, with the given default preset"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default=preset, choices=PRESETS, help="Named configuration preset")
    common.add_argument("--config", help="JSON file merged over the preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override one setting, e.g. training.steps=100 (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="Seed for every random stream")
    common.add_argument("--threads", type=int, default=1, help="Worker threads (1 is bitwise deterministic)")
    common.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser("desk")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="SEQ0 dataset file")
    data.add_argument("--frames", type=int, help="Frames per generated sequence")
    data.add_argument("--size", type=int, help="Canvas size in pixels")
    data.add_argument("--digits", type=int, help="Sprites per sequence")
    sources = data.add_mutually_exclusive_group()
    sources.add_argument("--sprites", help="IDX image file supplying the sprites")
    sources.add_argument("--shapes", action="store_true", help="Use the built-in shapes as sprites")
    data.add_argument("--num-test", type=int, default=1000, help="Held-out sequences to generate")

    parser = argparse.ArgumentParser(
        prog="tstates",
        description="Transformational states video prediction",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    tstates gen --out data/ --num-test 100 --seed 7
    tstates train --preset desk --out runs/desk --steps 5000
    tstates train --preset desk --ablation no-residual --out runs/nores --steps 500
    tstates predict --ckpt runs/desk/best.tspr --data data/test.seq --index 3 --out strip.pgm
    tstates eval --ckpt runs/desk/best.tspr --data data/test.seq --out reports/
    tstates ablate --preset miniature --steps 500 --out runs/ablate
    tstates gradcheck
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = sub.add_parser("gen", parents=[common, data], help="Generate a held-out dataset")
    gen.add_argument("--out", required=True, help="Output directory")

    train = sub.add_parser("train", parents=[common, data], help="Train a model")
    train.add_argument("--out", required=True, help="Run directory (log and checkpoints)")
    train.add_argument("--ablation", default="none", choices=list(ABLATIONS), help="Ablation variant")
    train.add_argument("--steps", type=int, help="Training steps")
    train.add_argument("--resume", metavar="CKPT", help="Continue from a TSPR checkpoint of the same configuration")

    predict = sub.add_parser("predict", parents=[common, data], help="Render a prediction strip")
    predict.add_argument("--ckpt", required=True, help="TSPR checkpoint")
    predict.add_argument("--index", type=int, default=0, help="Sequence index")
    predict.add_argument("--steps", type=int, help="Frames to predict")
    predict.add_argument("--out", required=True, help="Output PGM file")

    evaluate = sub.add_parser("eval", parents=[common, data], help="Evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True, help="TSPR checkpoint")
    evaluate.add_argument("--out", required=True, help="Report directory")

    ablate = sub.add_parser("ablate", parents=[common, data], help="Compare the ablation variants")
    ablate.add_argument("--steps", type=int, default=0, help="Training steps per variant")
    ablate.add_argument("--out", required=True, help="Output directory")

    check = sub.add_parser("gradcheck", parents=[_common_parser("miniature")], help="Finite-difference gradient check")
    check.add_argument("--tolerance", type=float, default=1e-4, help="Largest accepted relative error")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and dispatch; returns the exit status"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"tstates {args.command}: {e}", file=sys.stderr)
        return 2
    except (TStatesError, OSError, ValueError, RuntimeError) as e:
        print(f"tstates {args.command}: {e}", file=sys.stderr)
        return 1


def main():
    """Console entry point"""
    sys.exit(run())


if __name__ == "__main__":
    main()

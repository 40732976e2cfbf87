"""Command-line entry point: ``sonarseg {synth,train,infer,eval,quantize,bench}``.

Every option may also come from a flat ``key=value`` file given with
``--config``; flags on the command line take precedence over the file,
which takes precedence over the built-in defaults.

Exit codes: 0 success, 2 usage or parameter error, 3 data error,
4 storage or I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import quant, report, synth
from .errors import DataError, DimensionError, ParameterError, SonarSegError, StorageError
from .model import SegmentationModel, encode_weights, load_weights, predict_mask
from .optim import BATCH_SIZE, LEARNING_RATE
from .sonar import from_tensor, load_dataset, quantize_image, read_image, to_tensor, write_pgm
from .train import fit, read_log, split_dataset, validate

log = logging.getLogger("sonarseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

PRESETS = {"standard": synth.SceneSpec, "clutter-only": synth.clutter_only_spec, "test": synth.wittling_spec}


@dataclasses.dataclass
class RunConfig:
    command: str = ""
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    seed: int = 0
    epochs: int = 100
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    augment: bool = True
    split: float = 0.8
    threshold: float = 0.5
    threads: Optional[str] = None  # None leaves worker pools untouched


# command-specific settings that a config file may also provide
EXTRA_DEFAULTS = {"n": 50, "preset": "standard", "spec_file": None, "weights": None, "resume": None,
                  "frames": 10, "subset": "all", "float16": False}


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {v!r}")


def _coerce(key: str, raw, default):
    if raw is None:
        return None
    if key == "threads":
        return str(raw)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config file {path}: {exc}") from exc
    try:
        values = report.parse_kv(text)
    except ValueError as exc:
        raise ParameterError(f"{path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in values.items()}


def resolve_config(args: argparse.Namespace) -> tuple:
    """Merge defaults, config file and explicit flags into ``(RunConfig, extras)``."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in dataclasses.fields(RunConfig)} | set(EXTRA_DEFAULTS)
    unknown = set(file_values) - known
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(sorted(unknown))}")
    base = RunConfig()
    merged = {}
    for key in known - {"command"}:
        default = getattr(base, key) if hasattr(base, key) else EXTRA_DEFAULTS[key]
        cli = getattr(args, key, None)
        if cli is not None:
            merged[key] = cli
        elif key in file_values:
            merged[key] = _coerce(key, file_values[key], default)
        else:
            merged[key] = default
    cfg = RunConfig(command=args.command, **{f.name: merged[f.name] for f in dataclasses.fields(RunConfig)
                                             if f.name != "command"})
    extras = {k: merged[k] for k in EXTRA_DEFAULTS}
    extras["inputs"] = list(getattr(args, "inputs", None) or [])
    _validate(cfg)
    return cfg, extras


def _validate(cfg: RunConfig) -> None:
    if cfg.epochs < 0:
        raise ParameterError("--epochs must be non-negative")
    if cfg.batch_size <= 0:
        raise ParameterError("--batch-size must be positive")
    if cfg.lr < 0:
        raise ParameterError("--lr must be non-negative")
    if not 0.0 < cfg.split <= 1.0:
        raise ParameterError("--split must lie in (0, 1]")
    if not 0.0 <= cfg.threshold <= 1.0:
        raise ParameterError("--threshold must lie in [0, 1]")
    if cfg.threads is not None and cfg.threads != "all":
        try:
            ok = int(cfg.threads) >= 1
        except ValueError:
            ok = False
        if not ok:
            raise ParameterError("--threads must be a positive integer or 'all'")


def _thread_limit(threads: Optional[str]):
    if threads is None or threads == "all":
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(threads))


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise StorageError(f"{what} {p} does not exist or is not a directory")
    return p


def _prepare_out_dir(path) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise StorageError(f"parent directory of {p} does not exist")
    try:
        p.mkdir(exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {p}: {exc}") from exc
    return p


def _require(value, flag: str):
    if value is None:
        raise ParameterError(f"{flag} is required")
    return value


def _load_any(path) -> tuple:
    """(model for inference, kind) from either weight file format."""
    p = Path(path)
    if not p.is_file():
        raise StorageError(f"weight file {p} does not exist")
    if quant.is_quantized_file(p):
        qm = quant.load_quantized(p)
        return qm.to_model(), "q8"
    m = SegmentationModel(seed=0)
    m.load_weights(load_weights(p))
    return m, "float"


def _emit(values: dict) -> None:
    sys.stdout.write(report.format_kv(values))


# ---------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, ex: dict) -> int:
    out = _prepare_out_dir(_require(cfg.out_dir, "--out"))
    values = read_config_file(ex["spec_file"]) if ex["spec_file"] else {}
    values["seed"] = str(cfg.seed)  # the flag (or run config) always owns the seed
    if ex["preset"] not in PRESETS:
        raise ParameterError(f"unknown preset {ex['preset']!r}")
    base = PRESETS[ex["preset"]](int(values["seed"]))
    merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    merged = {k: ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v) for k, v in merged.items()}
    merged.update(values)
    spec = synth.spec_from_mapping(merged)
    ids = synth.generate_corpus(spec, int(ex["n"]), out)
    _emit({"samples": len(ids), "out": str(out), "manifest": str(out / synth.MANIFEST_NAME)})
    return EXIT_OK


def cmd_train(cfg: RunConfig, ex: dict) -> int:
    data = _require_dir(_require(cfg.data_dir, "--data"), "dataset directory")
    out = _prepare_out_dir(_require(cfg.out_dir, "--out"))
    samples = load_dataset(data)
    if not samples:
        raise DataError(f"{data} contains no samples")
    train_set, val_set = split_dataset(samples, cfg.split)
    if not train_set:
        raise DataError("the split leaves no training samples")
    model = SegmentationModel(seed=cfg.seed)
    if ex["resume"]:
        model.load_weights(load_weights(ex["resume"]))
    report.write_kv(out / "config.txt", {**dataclasses.asdict(cfg), "resume": ex["resume"]})
    result = fit(model, train_set, val_set, cfg.epochs, seed=cfg.seed, lr=cfg.lr,
                 batch_size=cfg.batch_size, augment=cfg.augment, threshold=cfg.threshold, out_dir=out)
    report.plot_training_curves(read_log(out / "train.log"), out / "curves.png")
    last = result.history[-1] if result.history else None
    _emit({"epochs": cfg.epochs, "train_samples": len(train_set), "val_samples": len(val_set),
           "best_epoch": result.best_epoch,
           "best_val_loss": result.best_val_loss if result.history else None,
           "final_train_loss": last.train_loss if last else None,
           "final_val_f1": last.f1 if last else None,
           "weights": str(out / "best.sseg")})
    return EXIT_OK


def cmd_infer(cfg: RunConfig, ex: dict) -> int:
    inputs = ex["inputs"]
    if not inputs:
        raise ParameterError("no input images given")
    out = _prepare_out_dir(_require(cfg.out_dir, "--out"))
    model, kind = _load_any(_require(ex["weights"], "--weights"))
    images = [read_image(p) for p in inputs]
    for path, img in zip(inputs, images):
        x = to_tensor(img.pixels, model.dtype)
        prob = from_tensor(model.predict_proba(x)) * img.fan_mask
        mask = predict_mask(prob, cfg.threshold)
        stem = Path(path).stem
        write_pgm(out / f"{stem}_mask.pgm", mask * np.uint8(255))
        write_pgm(out / f"{stem}_prob.pgm", quantize_image(prob))
        write_pgm(out / f"{stem}_composite.pgm",
                  np.hstack([quantize_image(img.pixels), mask * np.uint8(255)]))
    _emit({"inputs": len(inputs), "files": 3 * len(inputs), "weights_kind": kind, "out": str(out)})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, ex: dict) -> int:
    data = _require_dir(_require(cfg.data_dir, "--data"), "dataset directory")
    model, kind = _load_any(_require(ex["weights"], "--weights"))
    samples = load_dataset(data)
    if ex["subset"] != "all":
        tr, va = split_dataset(samples, cfg.split)
        samples = tr if ex["subset"] == "train" else va
    if not samples:
        raise DataError("no samples to evaluate")
    res = validate(model, samples, cfg.threshold, cfg.batch_size, keep_probabilities=True)
    values = {"weights_kind": kind, "samples": len(samples), "bce": res.loss, **res.counts.as_dict()}
    _emit(values)
    if cfg.out_dir:
        out = _prepare_out_dir(cfg.out_dir)
        report.write_kv(out / "eval.txt", values)
        shown = samples[:9]
        report.plot_panels([s.image.pixels for s in shown],
                           [predict_mask(p, cfg.threshold) for p in res.probabilities[:9]],
                           out / "panels.png", truths=[s.mask.pixels for s in shown],
                           titles=[s.id for s in shown])
    return EXIT_OK


def cmd_quantize(cfg: RunConfig, ex: dict) -> int:
    src = Path(_require(ex["weights"], "--weights"))
    dst = Path(_require(cfg.out_dir, "--out"))
    if not dst.parent.is_dir():
        raise StorageError(f"parent directory of {dst} does not exist")
    weights = load_weights(src)
    SegmentationModel(seed=0).load_weights(weights)  # architecture check
    baseline = len(encode_weights(weights, np.float64))
    if ex["float16"]:
        blob = encode_weights(weights, np.float16)
        try:
            dst.write_bytes(blob)
        except OSError as exc:
            raise StorageError(f"cannot write {dst}: {exc}") from exc
        size, mode = len(blob), "float16"
    else:
        size, mode = quant.save_quantized(quant.quantize_weights(weights), dst), "uint8"
    _emit({"mode": mode, "out": str(dst), "bytes": size, "baseline_bytes": baseline,
           "size_reduction_ratio": baseline / size})
    return EXIT_OK


def cmd_bench(cfg: RunConfig, ex: dict) -> int:
    wpath = Path(_require(ex["weights"], "--weights"))
    if not wpath.is_file():
        raise StorageError(f"weight file {wpath} does not exist")
    if quant.is_quantized_file(wpath):
        target = quant.load_quantized(wpath)
    else:
        target = SegmentationModel(seed=0)
        target.load_weights(load_weights(wpath))
    threads = cfg.threads or "all"
    rep = quant.benchmark(target, n_frames=int(ex["frames"]),
                          threads="all" if threads == "all" else int(threads), seed=cfg.seed)
    values = rep.as_dict()
    _emit(values)
    if cfg.out_dir:
        out = _prepare_out_dir(cfg.out_dir)
        report.write_kv(out / "bench.txt", {**values, "wall_times": ",".join(repr(t) for t in rep.wall_times)})
        report.plot_benchmark(values, out / "bench.png")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "quantize": cmd_quantize, "bench": cmd_bench}


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", help="worker cap: a positive integer or 'all'")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sonarseg", description="Fish segmentation in sonar fan images.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--n", type=int)
    s.add_argument("--out", dest="out_dir")
    s.add_argument("--spec-file", dest="spec_file", help="key=value scene parameter overrides")
    s.add_argument("--preset", choices=sorted(PRESETS))

    t = sub.add_parser("train", parents=[common], help="train from scratch or resume")
    t.add_argument("--data", dest="data_dir")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--augment", dest="augment", action="store_const", const=True)
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--split", type=float)
    t.add_argument("--threshold", type=float)
    t.add_argument("--resume", help="initial weights (.sseg)")

    i = sub.add_parser("infer", parents=[common], help="masks and probability maps for images")
    i.add_argument("--weights")
    i.add_argument("--out", dest="out_dir")
    i.add_argument("--threshold", type=float)
    i.add_argument("inputs", nargs="*")

    e = sub.add_parser("eval", parents=[common], help="pixel metrics on a corpus")
    e.add_argument("--weights")
    e.add_argument("--data", dest="data_dir")
    e.add_argument("--out", dest="out_dir", help="also write eval.txt and panels.png here")
    e.add_argument("--threshold", type=float)
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.add_argument("--subset", choices=["all", "train", "val"])
    e.add_argument("--split", type=float)

    q = sub.add_parser("quantize", parents=[common], help="8-bit (or 16-bit float) weight file")
    q.add_argument("--weights")
    q.add_argument("--out", dest="out_dir", help="output file")
    q.add_argument("--float16", action="store_const", const=True)

    b = sub.add_parser("bench", parents=[common], help="throughput and size report")
    b.add_argument("--weights")
    b.add_argument("--frames", type=int)
    b.add_argument("--out", dest="out_dir", help="also write bench.txt and bench.png here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2 from argparse
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, extras = resolve_config(args)
        with _thread_limit(cfg.threads if args.command != "bench" else None):
            return COMMANDS[args.command](cfg, extras)
    except ParameterError as exc:
        print(f"sonarseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"sonarseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StorageError, OSError) as exc:
        print(f"sonarseg {args.command}: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SonarSegError as exc:
        print(f"sonarseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

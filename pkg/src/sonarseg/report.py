"""Key-value text reports and matplotlib figures for the command-line tools."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import StorageError
from .metrics import format_metric

# fixed PNG metadata keeps figures byte-stable across runs
_PNG_META = {"Software": None}


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def format_value(v) -> str:
    if v is None:
        return format_metric(None)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_kv(values: Mapping) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in values.items())


def parse_kv(text: str) -> dict:
    """Inverse of :func:`format_kv` (values stay strings). ``#`` starts a comment line."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        out[key.strip()] = val.strip()
    return out


def write_kv(path, values: Mapping) -> None:
    try:
        Path(path).write_text(format_kv(values))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _save(fig, path) -> None:
    plt = _pyplot()
    try:
        fig.savefig(path, dpi=100, metadata=_PNG_META)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def plot_training_curves(rows: Sequence[Sequence[float]], path) -> None:
    """Loss and fish-class metrics per epoch from parsed log rows."""
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    if rows:
        a = np.asarray(rows, dtype=float)
        ep = a[:, 0]
        ax1.plot(ep, a[:, 1], label="train")
        ax1.plot(ep, a[:, 2], label="validation")
        for col, name in ((3, "accuracy"), (4, "precision"), (5, "recall"), (6, "F1")):
            ax2.plot(ep, a[:, col], label=name)
        ax1.legend()
        ax2.legend()
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("BCE")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    _save(fig, path)


def plot_panels(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], path,
                truths: Optional[Sequence[np.ndarray]] = None, titles: Optional[Sequence[str]] = None,
                columns: int = 3) -> None:
    """Sonar image above its predicted mask (and the ground truth, when given) for each sample."""
    plt = _pyplot()
    n = len(images)
    if n == 0:
        return
    per = 3 if truths is not None else 2
    cols = min(columns, n)
    grid_rows = -(-n // cols)
    fig, axes = plt.subplots(grid_rows * per, cols, figsize=(3.2 * cols, 1.4 * per * grid_rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i in range(n):
        r, c = divmod(i, cols)
        panels = [images[i], masks[i]] + ([truths[i]] if truths is not None else [])
        for k, img in enumerate(panels):
            ax = axes[r * per + k, c]
            ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if titles is not None:
            axes[r * per, c].set_title(titles[i], fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_benchmark(report: Mapping, path) -> None:
    """Bars for throughput and serialized size, quantized target against the 64-bit baseline."""
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    labels = [str(report["kind"]), "float64"]
    ax1.bar(labels, [report["fps"], report["baseline_fps"]])
    ax1.set_ylabel("frames per second")
    ax2.bar(labels, [report["model_file_bytes"] / 1e6, report["baseline_bytes"] / 1e6])
    ax2.set_ylabel("model size (MB)")
    fig.suptitle(f"threads={report['thread_count']}  size ratio={report['size_reduction_ratio']:.2f}x")
    fig.tight_layout()
    _save(fig, path)

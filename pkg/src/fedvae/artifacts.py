"""Run outputs: metrics CSV, PGM image grids, accountant audit log, seed manifest."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import ParameterSet

# Fixed column set of metrics.csv. Evaluation columns are blank on rounds
# without an evaluation; epsilon is blank when training is non-private.
METRIC_COLUMNS = (
    "round", "mean_loss", "median_update_norm", "epsilon", "cohort_size",
    "active_clients", "local_steps", "fid", "acc_logreg", "acc_mlp", "acc_cnn",
)
_EVAL_COLUMNS = {"fid": "fid", "acc_logreg": "acc_logreg", "acc_mlp": "acc_mlp", "acc_cnn": "acc_cnn"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def report_row(report) -> dict[str, str]:
    row = {
        "round": report.round,
        "mean_loss": report.mean_loss,
        "median_update_norm": report.median_update_norm,
        "epsilon": report.epsilon,
        "cohort_size": len(report.cohort),
        "active_clients": report.active_clients,
        "local_steps": report.local_steps,
    }
    for col, key in _EVAL_COLUMNS.items():
        row[col] = report.metrics.get(key)
    return {k: _cell(v) for k, v in row.items()}


class MetricsWriter:
    """Streams one CSV row per finished round; usable directly as a training sink."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS, lineterminator="\r\n")
        self._writer.writeheader()
        self.rows = 0

    def __call__(self, report) -> None:
        self._writer.writerow(report_row(report))
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics_csv(path, reports: Iterable) -> int:
    with MetricsWriter(path) as w:
        for r in reports:
            w(r)
        return w.rows


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes; 1.0 -> 255, 0.0 -> 0."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise ValueError("image contains non-finite pixels")
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(image: np.ndarray) -> bytes:
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D grayscale")
    h, w = image.shape
    data = image if image.dtype == np.uint8 else quantize(image)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def image_grid(images: np.ndarray, labels: np.ndarray, num_classes: int,
               per_class: int) -> np.ndarray:
    """Tile images with one row per class, ``per_class`` columns wide.

    Classes with fewer images leave the remaining cells black.
    """
    h, w = images.shape[1:]
    grid = np.zeros((num_classes * h, per_class * w), dtype=np.float64)
    for c in range(num_classes):
        members = images[labels == c][:per_class]
        for j, img in enumerate(members):
            grid[c * h:(c + 1) * h, j * w:(j + 1) * w] = img
    return grid


def write_audit_log(path, reports: Sequence, accountant=None, clients: Sequence = (),
                    delta: float | None = None) -> None:
    """Plain-text log of accountant snapshots: global (CDP) and per client (LDP)."""
    lines = []
    for r in reports:
        if r.epsilon is not None:
            eps = "inf" if math.isinf(r.epsilon) else repr(float(r.epsilon))
            lines.append(f"round={r.round} epsilon={eps} active={r.active_clients}"
                         + (f" deactivated={','.join(map(str, r.deactivated))}" if r.deactivated else ""))
    if accountant is not None:
        lines.append("[global]")
        lines.append(accountant.snapshot(delta).rstrip())
    for c in clients:
        if getattr(c, "accountant", None) is not None:
            lines.append(f"[client {c.cid}] active={str(c.active).lower()}")
            lines.append(c.accountant.snapshot(delta).rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def write_seed_manifest(path, seeds: dict) -> None:
    Path(path).write_text(json.dumps(seeds, indent=2, sort_keys=True) + "\n")


def save_params(path, params: ParameterSet) -> None:
    arrays = {f"p{i}": v for i, v in enumerate(params.values())}
    names = np.array(list(params.keys()))
    with open(path, "wb") as fh:
        np.savez(fh, __names__=names, __component__=np.array(params.component), **arrays)


def load_params(path) -> ParameterSet:
    with np.load(path, allow_pickle=False) as z:
        names = [str(n) for n in z["__names__"]]
        component = str(z["__component__"])
        return ParameterSet({n: np.array(z[f"p{i}"]) for i, n in enumerate(names)}, component=component)

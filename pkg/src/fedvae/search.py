"""Hyperparameter search over FlConfig fields: full grid when small, random otherwise."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .federation import FlConfig

log = logging.getLogger(__name__)

GRID_THRESHOLD = 150

# axis name (an FlConfig field) -> candidate values
DEFAULT_SEARCH_SPACE: tuple[tuple[str, tuple], ...] = (
    ("local_optimizer", ("sgd", "adam")),
    ("lr", (1e-2, 1e-3, 1e-4, 1e-5)),
    ("local_epochs", (1, 5, 10)),
    ("server_momentum", (0.0, 0.5, 0.9, 0.99)),
    ("clip_norm", (0.1, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0)),
    ("noise_multiplier", (0.5, 0.6, 0.7, 0.8, 1.0, 1.2, 1.5, 2.0)),
    ("batch_size", (10, 20, 30, 60)),
    ("client_rate", (0.01, 0.05, 0.1, 0.2)),
)


def coerce_space(space: Sequence[tuple[str, Sequence]]) -> tuple[tuple[str, tuple], ...]:
    """Validate axis names against FlConfig and parse string values by field type."""
    hints = typing.get_type_hints(FlConfig)
    out = []
    seen = set()
    for axis, values in space:
        if axis not in hints:
            raise ValueError(f"unknown search axis {axis!r}")
        if axis in seen:
            raise ValueError(f"duplicate search axis {axis!r}")
        if not values:
            raise ValueError(f"search axis {axis!r} has no values")
        seen.add(axis)
        tp = hints[axis]
        out.append((axis, tuple(tp(v) if isinstance(v, str) and tp is not str else v for v in values)))
    return tuple(out)


def space_size(space) -> int:
    return math.prod(len(v) for _, v in space)


def decode_index(space, index: int) -> dict:
    """Mixed-radix decoding; the last axis varies fastest."""
    combo = {}
    for axis, values in reversed(space):
        index, r = divmod(index, len(values))
        combo[axis] = values[r]
    return {axis: combo[axis] for axis, _ in space}


def plan_trials(space, strategy: str = "auto", trials: int = 100, seed: int = 0,
                threshold: int = GRID_THRESHOLD) -> list[dict]:
    """Every combination when the space is below ``threshold`` (or strategy is grid),
    otherwise ``min(trials, size)`` distinct combinations drawn uniformly."""
    size = space_size(space)
    if strategy == "grid" or (strategy == "auto" and size < threshold):
        picks = np.arange(size)
    else:
        rng = np.random.default_rng([seed, 41])
        picks = np.sort(rng.choice(size, size=min(trials, size), replace=False))
    return [decode_index(space, int(i)) for i in picks]


@dataclass
class TrialResult:
    index: int
    overrides: dict
    fid: float
    cnn_accuracy: float
    output_dir: Path | None = None
    error: str | None = None

    def sort_key(self):
        # lower FID first, then higher CNN accuracy; failed or unscored trials last
        fid = self.fid if np.isfinite(self.fid) else math.inf
        acc = self.cnn_accuracy if np.isfinite(self.cnn_accuracy) else -math.inf
        return (self.error is not None, fid, -acc, self.index)


def rank_trials(results: Sequence[TrialResult]) -> list[TrialResult]:
    return sorted(results, key=TrialResult.sort_key)


TrialRunner = Callable[[FlConfig, int, Path], tuple[float, float]]


def run_search(base: FlConfig, space, runner: TrialRunner, output_dir, strategy: str = "auto",
               trials: int = 100, seed: int = 0,
               threshold: int = GRID_THRESHOLD) -> list[TrialResult]:
    """Run every planned trial through ``runner(fl_config, trial_index, trial_dir)``.

    ``runner`` returns ``(fid, cnn_accuracy)``. Each trial writes only into
    its own subdirectory and reuses ``seed``, so trials differ only in their
    hyperparameters. A trial that raises is recorded and ranked last.
    """
    space = coerce_space(space)
    plan = plan_trials(space, strategy, trials, seed, threshold)
    root = Path(output_dir)
    results = []
    for i, overrides in enumerate(plan):
        trial_dir = root / f"trial_{i:04d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
        try:
            cfg = dataclasses.replace(base, **overrides)
            fid, acc = runner(cfg, i, trial_dir)
            results.append(TrialResult(i, overrides, float(fid), float(acc), trial_dir))
        except Exception as exc:  # noqa: BLE001 - a bad combination must not stop the search
            log.warning("trial %d %s failed: %s", i, overrides, exc)
            results.append(TrialResult(i, overrides, math.nan, math.nan, trial_dir, str(exc)))
    return rank_trials(results)


def write_ranking(path, ranked: Sequence[TrialResult]) -> None:
    axes = list(ranked[0].overrides) if ranked else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["rank", "trial", *axes, "fid", "acc_cnn", "error"])
        for rank, r in enumerate(ranked, 1):
            w.writerow([rank, r.index, *(r.overrides[a] for a in axes),
                        "" if math.isnan(r.fid) else repr(r.fid),
                        "" if math.isnan(r.cnn_accuracy) else repr(r.cnn_accuracy),
                        r.error or ""])

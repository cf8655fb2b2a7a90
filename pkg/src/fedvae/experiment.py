"""End-to-end runs: build data, train, evaluate, write artifacts."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from .config import OUTPUT_DIR_ENV, ExperimentConfig, serialize
from .data import (Dataset, load_idx, make_grouped_dataset, make_synthetic_dataset, partition,
                   resize_dataset)
from .federation import TrainingResult, run_training, stream
from .metrics import FeatureEmbedder, ReplicateScores, scores_over_replicates
from .search import DEFAULT_SEARCH_SPACE, rank_trials, run_search, write_ranking
from .vae import ConditionalVAE, sample_balanced

log = logging.getLogger(__name__)

_PARTITION = 101
_EMBEDDER = 103
_EVAL = 107
_GRID = 109


@dataclass
class Prepared:
    train: Dataset
    test: Dataset
    shards: dict[int, np.ndarray]


def resolve_output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """Explicit override wins, then the environment variable, then the config."""
    return Path(override or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def prepare_data(cfg: ExperimentConfig) -> Prepared:
    d = cfg.data
    if d.source == "synthetic":
        train = make_synthetic_dataset(d.num_classes, d.per_class, d.image_size, seed=cfg.seed,
                                       pattern_seed=d.pattern_seed)
        test = make_synthetic_dataset(d.num_classes, d.test_per_class, d.image_size,
                                      seed=cfg.seed + 10_000, pattern_seed=d.pattern_seed)
    elif d.source == "idx":
        train = resize_dataset(load_idx(d.train_images, d.train_labels, d.num_classes), d.image_size)
        test = resize_dataset(load_idx(d.test_images, d.test_labels, d.num_classes), d.image_size)
    else:
        full = make_grouped_dataset(d.num_groups, num_classes=d.num_classes,
                                    image_size=d.image_size, seed=cfg.seed)
        train, test = full, None
    rng = stream(cfg.seed, _PARTITION)
    shards, held_out = partition(train, d.partition, rng, cfg.federation.num_clients)
    if d.partition == "group":
        test = train.subset(held_out)
        if d.source == "grouped" and not len(test):
            raise ValueError("group partition left no held-out test samples")
    elif test is None:
        raise ValueError("grouped data needs the group partition scheme")
    if d.partition == "group" and len(shards) != cfg.federation.num_clients:
        log.info("group partition yields %d clients (config asked for %d)",
                 len(shards), cfg.federation.num_clients)
    if len(shards) == 0:
        raise ValueError("partition produced no clients")
    return Prepared(train, test, shards)


class RunEvaluator:
    """Scores a decoder with Fréchet distance and downstream accuracy.

    The feature embedder is trained once on real training data and reused.
    """

    def __init__(self, cfg: ExperimentConfig, prepared: Prepared):
        self.cfg = cfg
        self.prepared = prepared
        m = cfg.metrics
        self.embedder = (FeatureEmbedder.train(prepared.train, seed=cfg.seed, epochs=m.embedder_epochs)
                         if m.embedder_epochs > 0 else None)
        self.last: ReplicateScores | None = None

    def scores(self, vae: ConditionalVAE, decoder, k: int | None = None) -> ReplicateScores:
        m = self.cfg.metrics
        sampler = lambda n, rng: sample_balanced(vae, decoder, n, rng)  # noqa: E731
        return scores_over_replicates(sampler, self.prepared.test, self.embedder,
                                      k=k or m.replicates, m=m.samples, classifiers=m.classifiers,
                                      seed=self.cfg.seed + _EVAL, cnn_epochs=m.cnn_epochs)

    def __call__(self, round_: int, vae: ConditionalVAE, decoder) -> dict[str, float]:
        self.last = self.scores(vae, decoder)
        out = {}
        if self.last.fid:
            out["fid"] = self.last.fid_summary[0]
        for c in self.last.accuracy:
            out[f"acc_{c}"] = self.last.accuracy_summary(c)[0]
        return out


def summary_dict(scores: ReplicateScores | None, result: TrainingResult) -> dict:
    out: dict = {"rounds": len(result.reports), "stop_reason": result.stop_reason}
    last = result.reports[-1] if result.reports else None
    if last is not None and last.epsilon is not None:
        out["epsilon"] = last.epsilon if math.isfinite(last.epsilon) else "inf"
    if scores is not None:
        if scores.fid:
            mean, std = scores.fid_summary
            out["fid"] = {"mean": mean, "std": std, "values": scores.fid}
        for c, vals in scores.accuracy.items():
            mean, std = scores.accuracy_summary(c)
            out[f"acc_{c}"] = {"mean": mean, "std": std, "values": vals}
    return out


@dataclass
class RunOutcome:
    result: TrainingResult
    output_dir: Path
    summary: dict = field(default_factory=dict)


def write_grid(path, vae: ConditionalVAE, decoder, per_class: int, seed: int) -> np.ndarray:
    c = vae.config.num_classes
    images, labels = sample_balanced(vae, decoder, c * per_class, stream(seed, _GRID))
    grid = artifacts.image_grid(images, labels, c, per_class)
    artifacts.write_pgm(path, grid)
    return grid


def run_experiment(cfg: ExperimentConfig, output_dir=None, evaluate: bool = True) -> RunOutcome:
    """Train one configuration and write every artifact into ``output_dir``.

    Files: config.ini, seeds.json, metrics.csv, audit.log, decoder.npz,
    samples.pgm, summary.json.
    """
    cfg.validate()
    out = Path(output_dir) if output_dir is not None else resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize(cfg))
    prepared = prepare_data(cfg)
    evaluator = RunEvaluator(cfg, prepared) if evaluate else None
    fl = cfg.federation
    artifacts.write_seed_manifest(out / "seeds.json", {
        "global": cfg.seed,
        "synthetic_train": cfg.seed,
        "synthetic_test": cfg.seed + 10_000,
        "pattern": cfg.data.pattern_seed,
        "streams": {"partition": [cfg.seed, _PARTITION], "embedder": cfg.seed,
                    "evaluation": cfg.seed + _EVAL, "grid": [cfg.seed, _GRID],
                    "training": "[seed, tag, client, round] per federation.stream"},
    })
    with artifacts.MetricsWriter(out / "metrics.csv") as sink:
        result = run_training(fl, cfg.vae, prepared.train, prepared.shards, seed=cfg.seed,
                              sink=sink, evaluator=evaluator, eval_every=cfg.metrics.eval_every)
    delta = fl.delta if fl.privacy != "none" else None
    artifacts.write_audit_log(out / "audit.log", result.reports, result.accountant,
                              result.clients, delta)
    artifacts.save_params(out / "decoder.npz", result.decoder)
    write_grid(out / "samples.pgm", result.vae, result.decoder, cfg.metrics.grid_per_class, cfg.seed)
    summary = summary_dict(evaluator.last if evaluator else None, result)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutcome(result, out, summary)


def evaluate_run(run_dir, k: int | None = None) -> dict:
    """Re-score a finished run from its config.ini and decoder.npz."""
    from .config import load
    run_dir = Path(run_dir)
    cfg = load(run_dir / "config.ini")
    decoder = artifacts.load_params(run_dir / "decoder.npz")
    vae = ConditionalVAE(cfg.vae)
    scores = RunEvaluator(cfg, prepare_data(cfg)).scores(vae, decoder, k)
    out = {}
    if scores.fid:
        out["fid"] = dict(zip(("mean", "std"), scores.fid_summary), values=scores.fid)
    for c in scores.accuracy:
        out[f"acc_{c}"] = dict(zip(("mean", "std"), scores.accuracy_summary(c)), values=scores.accuracy[c])
    (run_dir / "evaluation.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def synthesize(run_dir, per_class: int, output, seed: int = 0) -> np.ndarray:
    from .config import load
    run_dir = Path(run_dir)
    cfg = load(run_dir / "config.ini")
    decoder = artifacts.load_params(run_dir / "decoder.npz")
    return write_grid(output, ConditionalVAE(cfg.vae), decoder, per_class, seed)


def search_experiment(cfg: ExperimentConfig, output_dir=None, evaluate: bool = True):
    """Search over ``cfg.search.space`` (default grid when empty), one run per trial."""
    cfg.validate()
    out = Path(output_dir) if output_dir is not None else resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize(cfg))
    space = cfg.search.space or DEFAULT_SEARCH_SPACE

    def runner(fl, index, trial_dir):
        trial_cfg = dataclasses.replace(cfg, federation=fl, output_dir=str(trial_dir))
        outcome = run_experiment(trial_cfg, trial_dir, evaluate=evaluate)
        s = outcome.summary
        fid = s.get("fid", {}).get("mean", math.nan)
        acc = s.get("acc_cnn", {}).get("mean", math.nan)
        return fid, acc

    ranked = run_search(cfg.federation, space, runner, out, cfg.search.strategy,
                        cfg.search.trials, cfg.seed, cfg.search.grid_threshold)
    write_ranking(out / "ranking.csv", ranked)
    return rank_trials(ranked)

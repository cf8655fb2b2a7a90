"""Synthetic-data evaluation: Frechet distance of embedded features, classifier utility,
and update-norm telemetry.

The feature network is a small CNN trained once on the real training split
and then frozen, not Inception-v3, so scores only compare runs against each
other; they are not on the scale of published FID values.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier

from .data import Dataset
from .nn import (Conv2D, Dense, Dropout, Flatten, MaxPool2D, OptimizerState, ParameterSet, ReLU,
                 Sequential, optimizer_step, softmax_cross_entropy)

log = logging.getLogger(__name__)

CLASSIFIERS = ("logreg", "mlp", "cnn")
# eigenvalues within this many ulps of the spectral scale are roundoff
EIG_CLAMP = 64 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape does not match mean")


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least two feature rows")
    mean = features.mean(axis=0)
    centred = features - mean
    cov = centred.T @ centred / (features.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T))


def _psd_eigh(matrix: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -1e-6 * scale:
        raise ValueError(f"{what} is not positive semi-definite (eigenvalue {vals.min():.3g})")
    vals = np.where(np.abs(vals) < EIG_CLAMP * scale, 0.0, vals)
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2), which shares its spectrum
    with S_a S_b.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    vals_a, vecs_a = _psd_eigh(a.cov, "first covariance")
    _psd_eigh(b.cov, "second covariance")
    root_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inner, _ = _psd_eigh(root_a @ b.cov @ root_a, "covariance product")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(inner).sum())
    return max(value, 0.0)


def cnn_layers(num_classes: int) -> list:
    """Evaluation CNN: two conv/pool/dropout blocks, a 128-kernel conv, dense 128, softmax head."""
    return [
        Conv2D(32, 3, 1), MaxPool2D(2), Dropout(0.5), ReLU(),
        Conv2D(64, 3, 1), MaxPool2D(2), Dropout(0.5), ReLU(),
        Conv2D(128, 3, 1), ReLU(),
        Flatten(), Dense(128), ReLU(), Dropout(0.5),
        Dense(num_classes),
    ]


class CnnClassifier:
    """Trained with Adam(lr=1e-3) and weight decay 1e-4 on softmax cross-entropy."""

    def __init__(self, image_shape: tuple[int, int], num_classes: int, seed: int = 0,
                 epochs: int = 10, batch_size: int = 64, lr: float = 1e-3, weight_decay: float = 1e-4):
        self.model = Sequential(cnn_layers(num_classes), (1,) + tuple(image_shape), "cnn", "classifier")
        self.seed, self.epochs, self.batch_size = seed, epochs, batch_size
        self.lr, self.weight_decay = lr, weight_decay
        self.params: ParameterSet | None = None

    def fit(self, images: np.ndarray, labels: np.ndarray) -> "CnnClassifier":
        rng = np.random.default_rng([self.seed, 21])
        params = self.model.init(rng)
        opt = OptimizerState("adam", weight_decay=self.weight_decay)
        x = images[:, None]
        for _ in range(self.epochs):
            perm = rng.permutation(len(x))
            for start in range(0, len(x), self.batch_size):
                idx = perm[start:start + self.batch_size]
                logits, tape = self.model.forward(params, x[idx], training=True, rng=rng)
                _, grad = softmax_cross_entropy(logits, labels[idx])
                _, grads = self.model.backward(params, tape, grad)
                params = optimizer_step(opt, params, grads, self.lr)
        self.params = params
        return self

    def _forward_until(self, images: np.ndarray, stop: int, chunk: int = 512) -> np.ndarray:
        outs = []
        for start in range(0, len(images), chunk):
            x = images[start:start + chunk, None]
            for name, layer in zip(self.model.layer_names[:stop], self.model.layers[:stop]):
                x, _ = layer.forward(self.model._local(self.params, name, layer), x, training=False)
            outs.append(x)
        return np.concatenate(outs)

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self._forward_until(images, len(self.model.layers))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)


class FeatureEmbedder:
    """Penultimate activations of a CNN classifier trained on real data, then frozen."""

    def __init__(self, classifier: CnnClassifier):
        if classifier.params is None:
            raise ValueError("classifier must be trained first")
        for v in classifier.params.values():
            v.setflags(write=False)
        self.classifier = classifier
        # output of the ReLU after the 128-unit dense layer
        self.stop = len(classifier.model.layers) - 2
        self.dim = classifier.model.shapes[self.stop][0]

    @classmethod
    def train(cls, data: Dataset, seed: int = 0, epochs: int = 10) -> "FeatureEmbedder":
        clf = CnnClassifier(data.image_shape, data.num_classes, seed=seed, epochs=epochs)
        return cls(clf.fit(data.images, data.labels))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.classifier._forward_until(np.asarray(images, dtype=np.float64), self.stop)


def frechet_score(embedder: FeatureEmbedder, images: np.ndarray,
                  reference: GaussianStats | np.ndarray) -> float:
    if not isinstance(reference, GaussianStats):
        reference = fit_gaussian(embedder(reference))
    return frechet_distance(fit_gaussian(embedder(images)), reference)


def train_classifier(kind: str, images: np.ndarray, labels: np.ndarray, num_classes: int,
                     seed: int = 0, cnn_epochs: int = 10):
    flat = images.reshape(len(images), -1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        if kind == "logreg":
            return LogisticRegression(solver="lbfgs", C=1.0, max_iter=1000).fit(flat, labels)
        if kind == "mlp":
            return MLPClassifier(hidden_layer_sizes=(100,), activation="relu", solver="adam",
                                 learning_rate_init=1e-3, alpha=1e-4, max_iter=200,
                                 random_state=seed).fit(flat, labels)
    if kind == "cnn":
        return CnnClassifier(images.shape[1:], num_classes, seed=seed, epochs=cnn_epochs).fit(images, labels)
    raise ValueError(f"unknown classifier {kind!r}")


def evaluate_utility(synthetic: Dataset, test: Dataset, kind: str, seed: int = 0,
                     cnn_epochs: int = 10) -> float:
    """Accuracy (%) on the real ``test`` set of a classifier trained on ``synthetic`` only."""
    if synthetic.image_shape != test.image_shape:
        raise ValueError("synthetic and test images differ in shape")
    present = np.unique(synthetic.labels)
    missing = sorted(set(range(test.num_classes)) - set(present.tolist()))
    if missing:
        log.warning("classes %s absent from synthetic training data", missing)
    if len(present) < 2:
        # single-class training data: the classifier is a constant predictor
        return 100.0 * float(np.mean(test.labels == present[0]))
    clf = train_classifier(kind, synthetic.images, synthetic.labels, test.num_classes, seed, cnn_epochs)
    flat_ok = kind != "cnn"
    pred = clf.predict(test.images.reshape(len(test), -1) if flat_ok else test.images)
    return 100.0 * float(np.mean(pred == test.labels))


@dataclass
class ReplicateScores:
    fid: list[float]
    accuracy: dict[str, list[float]]

    @staticmethod
    def _summary(values: Sequence[float]) -> tuple[float, float | None]:
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else None
        return mean, std

    @property
    def fid_summary(self) -> tuple[float, float | None]:
        return self._summary(self.fid)

    def accuracy_summary(self, kind: str) -> tuple[float, float | None]:
        return self._summary(self.accuracy[kind])


def scores_over_replicates(sampler, test: Dataset, embedder: FeatureEmbedder | None,
                           k: int = 5, m: int = 1000, classifiers: Sequence[str] = ("logreg",),
                           seed: int = 0, same_seed: bool = False,
                           cnn_epochs: int = 10) -> ReplicateScores:
    """Score ``k`` synthetic datasets of size ``m`` drawn by ``sampler(m, rng)``.

    ``sampler`` returns ``(images, labels)``; with ``same_seed`` every
    replicate reuses one rng seed, which must give zero spread.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    reference = fit_gaussian(embedder(test.images)) if embedder is not None else None
    fids: list[float] = []
    accs: dict[str, list[float]] = {c: [] for c in classifiers}
    for r in range(k):
        rng = np.random.default_rng([seed, 31, 0 if same_seed else r])
        images, labels = sampler(m, rng)
        synth = Dataset(images, labels, test.num_classes)
        if reference is not None:
            fids.append(frechet_score(embedder, images, reference))
        for c in classifiers:
            accs[c].append(evaluate_utility(synth, test, c, seed=seed, cnn_epochs=cnn_epochs))
    return ReplicateScores(fids, accs)


def median_update_norm(reports) -> list[tuple[int, float]]:
    """(round, median pre-clip client update norm), skipping rounds without updates."""
    return [(r.round, float(np.median(r.client_norms))) for r in reports if len(r.client_norms)]

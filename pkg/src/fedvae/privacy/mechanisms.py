"""L2 clipping and Gaussian noising of parameter updates."""

from __future__ import annotations

import numpy as np

from ..nn.params import NonFiniteError, ParameterSet, global_l2_norm


def clip_l2(update: ParameterSet, clip_norm: float) -> ParameterSet:
    """Scale ``update`` by ``1 / max(1, ||update|| / clip_norm)``."""
    if not clip_norm > 0:
        raise ValueError("clip norm must be positive")
    norm = global_l2_norm(update)
    if norm <= clip_norm:
        return update.copy()
    scale = clip_norm / norm
    clipped = update * scale
    # rounding can leave the norm a few ulps above the bound; shrink until it holds
    while global_l2_norm(clipped) > clip_norm:
        scale = np.nextafter(scale, 0.0)
        clipped = update * scale
    return clipped


def per_example_norms(per_example: ParameterSet) -> np.ndarray:
    """L2 norm of every example's slice across all tensors (leading axis = example)."""
    total = None
    for name, g in per_example.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite per-example gradient {name}")
        sq = (g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
        total = sq if total is None else total + sq
    return np.sqrt(total)


def clip_and_sum(per_example: ParameterSet, clip_norm: float) -> tuple[ParameterSet, np.ndarray]:
    """Clip each example's gradient to ``clip_norm`` and sum over examples.

    Returns the summed set and the pre-clip per-example norms.
    """
    if not clip_norm > 0:
        raise ValueError("clip norm must be positive")
    norms = per_example_norms(per_example)
    scale = 1.0 / np.maximum(1.0, norms / clip_norm)
    summed = per_example.map(lambda g: np.tensordot(scale, g, axes=(0, 0)))
    return summed, norms


def add_gaussian(update: ParameterSet, sigma: float, rng: np.random.Generator) -> ParameterSet:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate, tensors in set order."""
    if sigma < 0:
        raise ValueError("noise std must be >= 0")
    if sigma == 0:
        return update.copy()
    return update.map(lambda v: v + rng.normal(0.0, sigma, size=v.shape))

"""Plain SGD, SGD with momentum, and Adam over parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet

OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass
class OptimizerState:
    kind: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    moments: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: ParameterSet, grads: ParameterSet,
                   lr: float) -> ParameterSet:
    """Apply one update and return new parameters; ``state`` is advanced in place.

    Only names present in ``grads`` are updated, so non-trainable entries
    such as batch-norm running statistics pass through untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    out = params.copy()
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.kind == "sgd":
            out[name] = p - lr * g
        elif state.kind == "momentum":
            (v,) = state.moments.setdefault(name, [np.zeros_like(p)])
            v *= state.momentum
            v += g
            out[name] = p - lr * v
        else:
            m, v = state.moments.setdefault(name, [np.zeros_like(p), np.zeros_like(p)])
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** state.step)
            v_hat = v / (1.0 - state.beta2 ** state.step)
            out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out

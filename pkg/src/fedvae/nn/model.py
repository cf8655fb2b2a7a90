"""Sequential model definition: parameter initialisation, forward with tape, backward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer
from .params import ParameterSet, check_finite


class MissingCacheError(RuntimeError):
    pass


@dataclass
class Tape:
    caches: list = field(default_factory=list)
    batch: int = 0


class Sequential:
    """A stack of layers whose parameters live under ``<prefix>.<index>.<kind>.``."""

    def __init__(self, layers: list[Layer], input_shape: tuple, prefix: str, component: str):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.prefix = prefix
        self.component = component
        self.layer_names = [f"{prefix}.{i}.{layer.kind}" for i, layer in enumerate(self.layers)]
        shape = self.input_shape
        self.shapes = [shape]
        self._param_shapes: dict[str, tuple] = {}
        probe = np.random.default_rng(0)
        for name, layer in zip(self.layer_names, self.layers):
            params, shape = layer.build(shape, probe)
            for k, v in params.items():
                self._param_shapes[f"{name}.{k}"] = v.shape
            self.shapes.append(tuple(shape))
        self.output_shape = self.shapes[-1]

    @property
    def supports_per_example(self) -> bool:
        return all(layer.supports_per_example for layer in self.layers)

    def init(self, rng: np.random.Generator) -> ParameterSet:
        params = ParameterSet(component=self.component)
        for name, layer, shape in zip(self.layer_names, self.layers, self.shapes):
            local, _ = layer.build(shape, rng)
            for k, v in local.items():
                params[f"{name}.{k}"] = v
        return params

    def trainable_names(self) -> list[str]:
        return [f"{name}.{k}" for name, layer in zip(self.layer_names, self.layers)
                for k in layer.trainable]

    def _local(self, params: ParameterSet, name: str, layer: Layer) -> dict:
        out = {}
        for key in self._param_shapes:
            if key.startswith(name + "."):
                local = key[len(name) + 1:]
                if key not in params:
                    raise KeyError(f"missing parameter {key}")
                out[local] = params[key]
        return out

    def forward(self, params: ParameterSet, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"{self.prefix}: expected input shape {self.input_shape}, got {x.shape[1:]}")
        tape = Tape(batch=x.shape[0])
        for name, layer in zip(self.layer_names, self.layers):
            x, cache = layer.forward(self._local(params, name, layer), x, training, rng)
            tape.caches.append(cache)
        check_finite(x, f"{self.prefix} output")
        return x, tape

    def apply_state_updates(self, params: ParameterSet, tape: Tape) -> None:
        """Fold running statistics gathered during a training pass into ``params``."""
        for name, layer, cache in zip(self.layer_names, self.layers, tape.caches):
            for key, (value, momentum) in layer.state_update(cache).items():
                full = f"{name}.{key}"
                params[full] = momentum * params[full] + (1.0 - momentum) * value

    def backward(self, params: ParameterSet, tape: Tape | None, gy: np.ndarray,
                 per_example: bool = False) -> tuple[np.ndarray, ParameterSet]:
        if tape is None or len(tape.caches) != len(self.layers):
            raise MissingCacheError(f"{self.prefix}: backward needs a tape from forward")
        grads: dict[str, np.ndarray] = {}
        for name, layer, cache in reversed(list(zip(self.layer_names, self.layers, tape.caches))):
            gy, local = layer.backward(self._local(params, name, layer), cache, gy, per_example)
            for k, v in local.items():
                grads[f"{name}.{k}"] = v
        ordered = ParameterSet(component=self.component)
        for key in self.trainable_names():
            ordered[key] = check_finite(grads[key], f"gradient of {key}")
        return gy, ordered

"""Named parameter collections with a flat-vector view."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

COMPONENTS = ("encoder", "decoder", "classifier", "vae")


class NonFiniteError(FloatingPointError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")
    return array


class ParameterSet:
    """Ordered mapping ``name -> float64 array`` tagged with a model component.

    Iteration order is insertion order, so two sets built by the same model
    definition flatten to vectors with identical layouts.
    """

    __slots__ = ("_tensors", "component")

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None, component: str = "decoder"):
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        self.component = component
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (tensors or {}).items():
            self._tensors[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterSet({self.component}: {shapes})"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._tensors.items()}, self.component)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self._tensors.items()}, self.component)

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def unflatten(self, vector: np.ndarray) -> "ParameterSet":
        """Build a set with this layout from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got shape {vector.shape}")
        out, offset = OrderedDict(), 0
        for name, value in self._tensors.items():
            out[name] = vector[offset:offset + value.size].reshape(value.shape).copy()
            offset += value.size
        return ParameterSet(out, self.component)

    def _check_layout(self, other: "ParameterSet") -> None:
        if list(self.keys()) != list(other.keys()):
            raise ValueError("parameter sets have different names")
        for name in self:
            if self[name].shape != other[name].shape:
                raise ValueError(f"shape mismatch for {name}: {self[name].shape} vs {other[name].shape}")

    def map(self, fn) -> "ParameterSet":
        return ParameterSet({k: fn(v) for k, v in self._tensors.items()}, self.component)

    def __add__(self, other: "ParameterSet") -> "ParameterSet":
        self._check_layout(other)
        return ParameterSet({k: v + other[k] for k, v in self.items()}, self.component)

    def __sub__(self, other: "ParameterSet") -> "ParameterSet":
        self._check_layout(other)
        return ParameterSet({k: v - other[k] for k, v in self.items()}, self.component)

    def __mul__(self, scalar: float) -> "ParameterSet":
        return ParameterSet({k: v * scalar for k, v in self.items()}, self.component)

    __rmul__ = __mul__

    def allclose(self, other: "ParameterSet", atol: float = 0.0, rtol: float = 0.0) -> bool:
        self._check_layout(other)
        return all(np.allclose(v, other[k], atol=atol, rtol=rtol) for k, v in self.items())

    def select(self, prefix: str, component: str | None = None) -> "ParameterSet":
        """Sub-set of tensors whose name starts with ``prefix``."""
        picked = {k: v for k, v in self.items() if k.startswith(prefix)}
        return ParameterSet(picked, component or self.component)

    @staticmethod
    def merge(*sets: "ParameterSet", component: str = "vae") -> "ParameterSet":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for s in sets:
            for k, v in s.items():
                if k in out:
                    raise ValueError(f"duplicate parameter {k}")
                out[k] = v
        return ParameterSet(out, component)


def global_l2_norm(params: ParameterSet) -> float:
    """L2 norm of all tensors in ``params`` taken together."""
    total = 0.0
    for name, value in params.items():
        check_finite(value, name)
        total += float(np.dot(value.ravel(), value.ravel()))
    return math.sqrt(total)

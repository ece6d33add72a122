"""Parameter containers and helpers for walking nested parameter trees."""
from __future__ import annotations

import dataclasses
import zlib

import numpy as np

from . import numeric as nm
from .numeric import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Symmetric uniform fan-in scaling, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def name_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter name) so a tensor's initial value
    does not depend on which other parameters exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclasses.dataclass
class Linear:
    w: Tensor
    b: Tensor | None = None

    def __call__(self, x):
        return nm.linear(x, self.w, self.b)

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True):
        w = nm.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        b = nm.parameter(np.zeros(d_out)) if bias else None
        return cls(w, b)


@dataclasses.dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __call__(self, x):
        return nm.layer_norm(x, self.gain, self.bias)

    @classmethod
    def init(cls, d: int):
        return cls(nm.parameter(np.ones(d)), nm.parameter(np.zeros(d)))


@dataclasses.dataclass
class TwoLayerMap:
    """Dense -> activation -> dense. ``activation=None`` makes it purely linear."""

    first: Linear
    second: Linear
    activation: str | None = "gelu"

    def __call__(self, x):
        y = self.first(x)
        if self.activation == "gelu":
            y = nm.gelu(y)
        elif self.activation == "relu":
            y = nm.relu(y)
        return self.second(y)

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, d_out: int, activation="gelu"):
        return cls(Linear.init(rng, d_in, d_hidden), Linear.init(rng, d_hidden, d_out), activation)


def named_tensors(tree, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a tree of dataclasses / dicts / lists into ``{dotted.name: Tensor}``."""
    out: dict[str, Tensor] = {}

    def walk(node, path):
        if isinstance(node, Tensor):
            out[path] = node
        elif dataclasses.is_dataclass(node) and not isinstance(node, type):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(node, dict):
            for k in node:
                walk(node[k], f"{path}.{k}" if path else str(k))
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                walk(v, f"{path}.{i}" if path else str(i))

    walk(tree, prefix)
    return out


def replace_tensors(tree, values: dict[str, Tensor], prefix: str = ""):
    """Return a copy of ``tree`` with tensors swapped for ``values[name]`` where present."""

    def walk(node, path):
        if isinstance(node, Tensor):
            return values.get(path, node)
        if dataclasses.is_dataclass(node) and not isinstance(node, type):
            changes = {}
            for f in dataclasses.fields(node):
                child = getattr(node, f.name)
                new = walk(child, f"{path}.{f.name}" if path else f.name)
                if new is not child:
                    changes[f.name] = new
            return dataclasses.replace(node, **changes) if changes else node
        if isinstance(node, dict):
            return {k: walk(v, f"{path}.{k}" if path else str(k)) for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v, f"{path}.{i}" if path else str(i)) for i, v in enumerate(node)]
        if isinstance(node, tuple):
            return tuple(walk(v, f"{path}.{i}" if path else str(i)) for i, v in enumerate(node))
        return node

    return walk(tree, prefix)

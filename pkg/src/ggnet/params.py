"""Named parameter table shared by every network component."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamTable:
    """Ordered name -> trainable Tensor map, plus non-trainable buffers.

    Buffers hold things like batch-norm running statistics; they are
    saved in checkpoints but never touched by the optimizer.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors or name in self.buffers:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors or name in self.buffers:
            raise KeyError(f"buffer {name!r} registered twice")
        self.buffers[name] = np.asarray(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.tensors.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def conv_params(table: ParamTable, prefix: str, rng, c_in: int, c_out: int, k: int, bias: bool = True):
    table.add(f"{prefix}.w", he_normal(rng, (c_out, c_in, k, k)))
    if bias:
        table.add(f"{prefix}.b", np.zeros(c_out))

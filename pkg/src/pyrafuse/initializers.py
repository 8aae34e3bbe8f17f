"""Parameter initialization helpers shared by the neck and detector."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    dtype=np.float32, name: str | None = None) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def small_uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float = 0.01,
                  dtype=np.float32, name: str | None = None) -> Tensor:
    """Near-zero init for final prediction layers, so outputs start at the
    bias prior instead of whatever magnitude the features happen to have."""
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def zeros(shape: tuple[int, ...], dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones(shape: tuple[int, ...], dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


def constant(shape: tuple[int, ...], value: float, dtype=np.float32,
             name: str | None = None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)

"""Deterministic seeded initialization."""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from ..exceptions import ParameterError
from .tensor import Tensor


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def seeded_rng_fill(shape: Sequence[int], seed: int, distribution: str = "normal",
                    a: float = 0.0, b: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Fill a tensor from ``distribution``.

    ``uniform`` draws from [a, b), ``normal`` from N(a, b**2) (``a`` the mean, ``b`` the
    standard deviation); ``zeros`` and ``ones`` ignore ``a``/``b``.
    """
    shape = tuple(int(s) for s in shape)
    if distribution == "zeros":
        data = np.zeros(shape)
    elif distribution == "ones":
        data = np.ones(shape)
    elif distribution == "uniform":
        if b < a:
            raise ParameterError(f"uniform bounds out of order: ({a}, {b})")
        data = np.random.default_rng(seed).uniform(a, b, size=shape)
    elif distribution == "normal":
        if b < 0:
            raise ParameterError(f"normal standard deviation must be >= 0, got {b}")
        data = np.random.default_rng(seed).normal(a, b, size=shape)
    else:
        raise ParameterError(f"unknown distribution {distribution!r}")
    return Tensor(data, requires_grad=requires_grad)

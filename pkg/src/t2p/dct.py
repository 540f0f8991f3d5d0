"""Orthonormal DCT-II along the temporal (last) axis, as a dense matrix transform."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """``M`` with ``coeffs = M @ x``; rows are the orthonormal DCT-II basis."""
    if n < 1:
        raise ValueError("DCT length must be >= 1")
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (t + 0.5) * k / n)
    m[0] *= np.sqrt(0.5)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class FrequencySequence:
    coefficients: np.ndarray

    @property
    def length(self) -> int:
        return self.coefficients.shape[-1]


def dct(x) -> FrequencySequence:
    x = np.asarray(x, dtype=np.float64)
    return FrequencySequence(x @ dct_matrix(x.shape[-1]).T)


def idct(f) -> np.ndarray:
    c = f.coefficients if isinstance(f, FrequencySequence) else np.asarray(f, dtype=np.float64)
    return c @ dct_matrix(c.shape[-1])


def truncate(coefficients: np.ndarray, keep: int | None) -> np.ndarray:
    """Zero all but the first ``keep`` coefficients (``None`` keeps everything)."""
    if keep is None or keep >= coefficients.shape[-1]:
        return coefficients
    out = np.array(coefficients, copy=True)
    out[..., keep:] = 0.0
    return out


def replicate_pad(past, future_steps: int) -> np.ndarray:
    """Repeat the last frame along the last axis ``future_steps`` times."""
    past = np.asarray(past, dtype=np.float64)
    if past.shape[-1] < 1:
        raise ValueError("need at least one observed frame")
    if future_steps <= 0:
        return past
    tail = np.repeat(past[..., -1:], future_steps, axis=-1)
    return np.concatenate([past, tail], axis=-1)

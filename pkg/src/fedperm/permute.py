"""Intra-model parameter shuffling over windows and superwindows.

A model of ``d`` parameters is cut into ``d / k1`` consecutive windows of
``k1`` slots. Window ``k`` (numbered from 1) is shuffled with pattern
``((k - 1) mod k2) + 1``; inside a window, slot ``j`` receives the value
from slot ``pi(j)``. Patterns are stored 1-indexed.

Reshaping the windows of one pattern group into a ``k1 x w`` matrix
(one column per window) makes each row a superwindow, and shuffling
permutes whole rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShuffleError(ValueError):
    pass


@dataclass(frozen=True)
class WindowGeometry:
    d: int
    k1: int
    k2: int

    @property
    def window_count(self) -> int:
        return self.d // self.k1

    @property
    def superwindow_width(self) -> int:
        return self.d // (self.k1 * self.k2)

    def pattern_for_window(self, k: int) -> int:
        """1-indexed pattern used by 1-indexed window ``k``."""
        if not 1 <= k <= self.window_count:
            raise ShuffleError(f"window {k} out of range 1..{self.window_count}")
        return (k - 1) % self.k2 + 1

    def window_pattern_indices(self) -> np.ndarray:
        """0-indexed pattern index for every window, in window order."""
        return np.arange(self.window_count) % self.k2


def check_geometry(d: int, k1: int, k2: int) -> WindowGeometry:
    if d <= 0 or k1 <= 0 or k2 <= 0:
        raise ShuffleError("d, k1 and k2 must be positive")
    if d % (k1 * k2):
        raise ShuffleError(f"k1*k2 = {k1 * k2} does not divide d = {d}")
    return WindowGeometry(d, k1, k2)


def _check_permutation(pi: tuple[int, ...] | np.ndarray) -> np.ndarray:
    arr = np.asarray(pi, dtype=np.int64)
    if arr.ndim != 1 or sorted(arr.tolist()) != list(range(1, arr.size + 1)):
        raise ShuffleError(f"not a permutation of 1..{arr.size}: {list(arr)}")
    return arr


@dataclass(frozen=True)
class ShuffleSpec:
    d: int
    k1: int
    k2: int
    patterns: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        check_geometry(self.d, self.k1, self.k2)
        if len(self.patterns) != self.k2:
            raise ShuffleError(f"expected {self.k2} patterns, got {len(self.patterns)}")
        for pi in self.patterns:
            if len(pi) != self.k1:
                raise ShuffleError(f"pattern length {len(pi)} != k1 = {self.k1}")
            _check_permutation(pi)

    @classmethod
    def from_patterns(cls, d: int, patterns) -> ShuffleSpec:
        pats = tuple(tuple(int(v) for v in p) for p in patterns)
        return cls(d=d, k1=len(pats[0]), k2=len(pats), patterns=pats)

    @classmethod
    def identity(cls, d: int, k1: int, k2: int = 1) -> ShuffleSpec:
        return cls(d, k1, k2, tuple(tuple(range(1, k1 + 1)) for _ in range(k2)))

    @property
    def geometry(self) -> WindowGeometry:
        return WindowGeometry(self.d, self.k1, self.k2)

    def zero_indexed(self) -> np.ndarray:
        """``(k2, k1)`` array of 0-indexed source slots."""
        return np.asarray(self.patterns, dtype=np.int64) - 1


def gen_spec(d: int, k1: int, k2: int, rng: np.random.Generator) -> ShuffleSpec:
    """Draw ``k2`` independent uniform permutations of ``1..k1``."""
    check_geometry(d, k1, k2)
    patterns = tuple(tuple(int(v) + 1 for v in rng.permutation(k1)) for _ in range(k2))
    return ShuffleSpec(d, k1, k2, patterns)


def _windows(x, spec: ShuffleSpec) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape != (spec.d,):
        raise ShuffleError(f"expected a vector of length {spec.d}, got shape {arr.shape}")
    return arr.reshape(spec.geometry.window_count, spec.k1)


def shuffle(x, spec: ShuffleSpec) -> np.ndarray:
    win = _windows(x, spec)
    src = spec.zero_indexed()[spec.geometry.window_pattern_indices()]
    return np.take_along_axis(win, src, axis=1).reshape(spec.d)


def unshuffle(y, spec: ShuffleSpec) -> np.ndarray:
    win = _windows(y, spec)
    src = spec.zero_indexed()[spec.geometry.window_pattern_indices()]
    out = np.empty_like(win)
    np.put_along_axis(out, src, win, axis=1)
    return out.reshape(spec.d)


def shuffle_superwindows(x, spec: ShuffleSpec) -> np.ndarray:
    """Row-permutation view of :func:`shuffle`, written independently.

    For each pattern group the group's windows are stacked as columns of a
    ``k1 x w`` matrix and its rows (superwindows) are reordered.
    """
    arr = np.asarray(x)
    if arr.shape != (spec.d,):
        raise ShuffleError(f"expected a vector of length {spec.d}, got shape {arr.shape}")
    out = np.empty_like(arr)
    k1, k2 = spec.k1, spec.k2
    for i, pi in enumerate(spec.patterns):
        starts = np.arange(i * k1, spec.d, k1 * k2)
        mat = np.stack([arr[s : s + k1] for s in starts], axis=1)  # k1 x w
        rows = mat[[p - 1 for p in pi], :]
        for col, s in enumerate(starts):
            out[s : s + k1] = rows[:, col]
    return out


def permutation_matrix(pi) -> np.ndarray:
    """Binary ``k1 x k1`` mask whose row ``j`` has its 1 in column ``pi(j)``.

    With gather semantics (slot ``j`` receives slot ``pi(j)``) this matrix
    shuffles a window, ``P @ x == shuffle(x)``, and its transpose restores
    it, ``P.T @ y == x``.
    """
    arr = _check_permutation(pi)
    k1 = arr.size
    mat = np.zeros((k1, k1), dtype=np.int64)
    mat[np.arange(k1), arr - 1] = 1
    return mat

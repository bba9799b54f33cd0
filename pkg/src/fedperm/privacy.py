"""Clipping, the Laplace randomizer, shuffle amplification and composition.

Amplification bounds are the closed-form shuffle-model bounds with their
O-constant pinned (``constant=1`` by default). Each bound is only proven
inside a validity region; outside it a :class:`DomainError` carrying the
bound is raised instead of extrapolating. All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

NO_NOISE = math.inf


class DomainError(ValueError):
    """An accounting formula was used outside its validity region."""

    def __init__(self, message: str, bound: float | None = None):
        super().__init__(message)
        self.bound = bound


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClipSpec:
    clip: float
    norm_bound: float = math.inf

    def __post_init__(self):
        if not self.clip > 0 or not self.norm_bound > 0:
            raise ValueError("clip threshold and norm bound must be positive")


# --------------------------------------------------------------------------
# client-side perturbation


def clip_normalize(theta, clip: float) -> np.ndarray:
    """Clamp to ``[-clip, clip]`` and map affinely onto ``[0, 1]``."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    arr = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite parameter update")
    return (np.clip(arr, -clip, clip) + clip) / (2.0 * clip)


def denormalize(z, clip: float) -> np.ndarray:
    return clip * (2.0 * np.asarray(z, dtype=np.float64) - 1.0)


def laplace_scale(eps_d: float, d: int) -> float:
    """Per-coordinate scale ``d / eps_d`` for a ``[0, 1]^d`` vector."""
    if not eps_d > 0:
        raise ValueError("eps_d must be positive")
    return 0.0 if math.isinf(eps_d) else d / eps_d


def laplace_randomize(
    theta_tilde, eps_d: float, d: int, rng: np.random.Generator, clamp: bool = True
) -> np.ndarray:
    """Add i.i.d. Laplace noise of scale ``d / eps_d``; ``eps_d = inf`` adds none.

    With ``clamp`` the output is projected back onto ``[0, 1]`` (pure
    post-processing, so the guarantee is unchanged).
    """
    x = np.asarray(theta_tilde, dtype=np.float64)
    b = laplace_scale(eps_d, d)
    if b == 0.0:
        return x.copy()
    y = x + rng.laplace(0.0, b, size=x.shape)
    return np.clip(y, 0.0, 1.0) if clamp else y


def gaussian_sigma(eps: float, delta: float, sensitivity: float) -> float:
    """Classic Gaussian-mechanism calibration ``sensitivity * sqrt(2 ln(1.25/delta)) / eps``."""
    if not (eps > 0 and 0 < delta < 1 and sensitivity >= 0):
        raise ValueError("need eps > 0, 0 < delta < 1, sensitivity >= 0")
    if math.isinf(eps):
        return 0.0
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def gaussian_epsilon(sigma: float, delta: float, sensitivity: float) -> float:
    """Inverse of :func:`gaussian_sigma` for a fixed noise level."""
    if sigma <= 0:
        return math.inf
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def norm_bound(y, bound: float) -> np.ndarray:
    """Scale ``y`` by ``min(1, bound / ||y||_2)``."""
    if not bound > 0:
        raise ValueError("norm bound must be positive")
    arr = np.asarray(y, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm <= bound:
        return arr.copy()
    return arr * (bound / norm)


# --------------------------------------------------------------------------
# amplification by shuffling


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


def _closed_form(eps: float, shuffle_size: float, log_term: float, constant: float) -> float:
    return constant * min(1.0, eps) * math.exp(eps) * log_term / math.sqrt(shuffle_size)


def full_validity_bound(delta: float, d: int) -> float:
    return math.log(d / math.log(1.0 / delta)) / 2.0


def window_validity_bound(delta: float, k1: int) -> float:
    return math.log(k1 / math.log(1.0 / delta)) / 2.0


def multi_validity_bound(delta: float, k1: int, k2: int) -> float:
    return math.log(k1 / math.log((k2 + 1) / delta)) / 2.0


def _require(eps: float, bound: float, what: str) -> None:
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    # slack absorbs the rounding of eps_d / (k1 * k2) at the boundary
    if eps > bound * (1 + 1e-12):
        raise DomainError(f"{what} = {eps:g} exceeds the validity bound {bound:g}", bound)


def amplify_full(eps_wd: float, delta: float, d: int, constant: float = 1.0) -> float:
    """Every parameter shuffled: ``(1 ^ eps) e^eps sqrt(ln(1/delta) / d)``."""
    _check_delta(delta)
    _require(eps_wd, full_validity_bound(delta, d), "per-parameter epsilon")
    return _closed_form(eps_wd, d, math.sqrt(math.log(1.0 / delta)), constant)


def amplify_window(eps_w: float, delta: float, k1: int, constant: float = 1.0) -> float:
    """Superwindows shuffled with one pattern of size ``k1``."""
    _check_delta(delta)
    _require(eps_w, window_validity_bound(delta, k1), "per-superwindow epsilon")
    return _closed_form(eps_w, k1, math.sqrt(math.log(1.0 / delta)), constant)


def amplify_multi(eps_w: float, delta: float, k1: int, k2: int, constant: float = 1.0) -> float:
    """``k2`` patterns of size ``k1``: ``(1 ^ eps) e^eps ln(k2/delta) sqrt(k2/k1)``."""
    _check_delta(delta)
    _require(eps_w, multi_validity_bound(delta, k1, k2), "per-superwindow epsilon")
    return _closed_form(eps_w, k1 / k2, math.log(k2 / delta), constant)


def superwindow_epsilon(eps_d: float, k1: int, k2: int) -> float:
    return eps_d / (k1 * k2)


def amplify(eps_d: float, delta: float, k1: int, k2: int, constant: float = 1.0) -> float:
    """Per-round amplified epsilon for an ``eps_d``-LDP update.

    A single pattern uses the window bound (tighter at ``k2 = 1``); more
    patterns use the multi-pattern bound.
    """
    eps_w = superwindow_epsilon(eps_d, k1, k2)
    if k2 == 1:
        return amplify_window(eps_w, delta, k1, constant)
    return amplify_multi(eps_w, delta, k1, k2, constant)


def amplify_validity_bound(delta: float, k1: int, k2: int) -> float:
    """Largest ``eps_d`` for which :func:`amplify` is defined."""
    if k2 == 1:
        return window_validity_bound(delta, k1) * k1
    return multi_validity_bound(delta, k1, k2) * k1 * k2


# --------------------------------------------------------------------------
# composition


def compose_naive(eps: float, t: int) -> float:
    if eps < 0 or t < 1:
        raise ValueError("need eps >= 0 and t >= 1")
    return t * eps


def compose_strong(eps: float, delta: float, t: int, delta_prime: float) -> tuple[float, float]:
    """Advanced composition of ``t`` adaptive ``(eps, delta)`` mechanisms."""
    if eps < 0 or delta < 0 or t < 1 or not delta_prime > 0:
        raise ValueError("need eps, delta >= 0, t >= 1, delta_prime > 0")
    total = math.sqrt(2.0 * t * math.log(1.0 / delta_prime)) * eps + t * eps * math.expm1(eps)
    return total, t * delta + delta_prime


def _bisect_max(f: Callable[[float], float], target: float, hi: float, rtol: float) -> float:
    """Largest x in [0, hi] with f(x) <= target for increasing f (f(0) = 0)."""
    lo = 0.0
    if f(hi) <= target:
        return hi
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if f(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


def invert_strong(eps_target: float, t: int, delta_prime: float, rtol: float = 1e-12) -> float:
    """Largest per-round epsilon whose ``t``-fold strong composition is <= ``eps_target``."""
    if not eps_target > 0:
        raise ValueError("eps_target must be positive")
    hi = eps_target
    return _bisect_max(lambda e: compose_strong(e, 0.0, t, delta_prime)[0], eps_target, hi, rtol)


@dataclass(frozen=True)
class BudgetSplit:
    """How a total ``delta`` is shared between amplification and composition."""

    delta_round: float
    delta_prime: float

    @classmethod
    def default(cls, delta_target: float, rounds: int) -> BudgetSplit:
        return cls(delta_round=delta_target / (2 * rounds), delta_prime=delta_target / 2)


def calibrate(
    eps_target: float,
    delta_target: float,
    rounds: int,
    d: int,
    k1: int,
    k2: int,
    split: BudgetSplit | None = None,
    constant: float = 1.0,
    rtol: float = 1e-9,
) -> float:
    """Largest ``eps_d`` whose amplified, ``rounds``-composed cost meets the target.

    If even the top of the validity region stays under the target, that
    boundary value is returned.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if d % (k1 * k2):
        raise ValueError("k1*k2 must divide d")
    split = split or BudgetSplit.default(delta_target, rounds)
    cap = amplify_validity_bound(split.delta_round, k1, k2)
    if cap <= 0:
        raise DomainError("validity region is empty for this (k1, k2, delta)", cap)

    def cost(eps_d: float) -> float:
        eps_round = amplify(eps_d, split.delta_round, k1, k2, constant)
        return compose_strong(eps_round, split.delta_round, rounds, split.delta_prime)[0]

    eps_d = _bisect_max(cost, eps_target, cap, rtol)
    if eps_d <= 0:
        raise DomainError("no positive eps_d meets the target")
    return eps_d


@dataclass(frozen=True)
class PrivacyBudget:
    eps_d: float
    d: int
    k1: int
    k2: int
    delta_round: float
    delta_prime: float
    rounds: int = 1
    constant: float = 1.0

    def __post_init__(self):
        if not (self.eps_d > 0 and self.delta_round > 0 and self.delta_prime > 0):
            raise ValueError("eps_d, delta_round and delta_prime must be positive")

    @property
    def eps_wd(self) -> float:
        return self.eps_d / self.d

    @property
    def eps_w(self) -> float:
        return superwindow_epsilon(self.eps_d, self.k1, self.k2)

    @property
    def eps_round(self) -> float:
        if math.isinf(self.eps_d):
            return math.inf
        return amplify(self.eps_d, self.delta_round, self.k1, self.k2, self.constant)

    def spent(self, t: int) -> tuple[float, float]:
        """(eps, delta) after ``t`` rounds.

        Falls back to naive composition of the unamplified ``eps_d`` (with
        zero delta) when the amplification bound does not apply.
        """
        if t == 0:
            return 0.0, 0.0
        if math.isinf(self.eps_d):
            return math.inf, 0.0
        try:
            eps_round = self.eps_round
        except DomainError:
            return compose_naive(self.eps_d, t), 0.0
        return compose_strong(eps_round, self.delta_round, t, self.delta_prime)

    def total(self) -> tuple[float, float]:
        return self.spent(self.rounds)

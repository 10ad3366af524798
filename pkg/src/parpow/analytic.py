"""Closed-form reference models for the withholding, Bobtail and fee attacks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from parpow.rng import ParameterError


@dataclass(frozen=True)
class WithholdParams:
    alpha: float
    L: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 0.5):
            raise ParameterError(f"alpha={self.alpha} outside [0, 0.5]")
        if self.L < 1:
            raise ParameterError("L must be positive")

    @property
    def valid(self) -> bool:
        """Whether the expectation analysis is meaningful (alpha >= 1/L)."""
        return self.alpha >= 1.0 / self.L


@dataclass(frozen=True)
class FeeSplitParams:
    alpha: float
    L: int
    r: float
    fee_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ParameterError("alpha outside [0, 1]")
        if self.L < 1:
            raise ParameterError("L must be positive")
        if not (0.0 <= self.r <= 1.0):
            raise ParameterError("r outside [0, 1]")
        if self.fee_ratio < 0:
            raise ParameterError("fee_ratio must be non-negative")


def selfish_upper_bound(alpha: float) -> float:
    if not (0.0 <= alpha < 1.0):
        raise ParameterError("alpha outside [0, 1)")
    return alpha / (1.0 - alpha)


def withhold_limit(p: WithholdParams) -> float:
    """Limiting adversarial fraction of the public chain under tree-style withholding."""
    if p.alpha == 0.0:
        return 0.0
    return selfish_upper_bound(p.alpha) * (p.L - 1) / p.L


def _b_given_a(alpha: float, L: int, a: float) -> float:
    return min(max(alpha / (1.0 - alpha) * (a - 1.0 / L), 0.0), 1.0)


def withhold_recursion(p: WithholdParams, n_blocks: int) -> np.ndarray:
    """Rows ``(E[a_n], E[b_n])`` for n = 1..n_blocks; ``b_1`` is 0 (no earlier lead)."""
    if n_blocks < 1:
        raise ParameterError("n_blocks must be >= 1")
    out = np.zeros((n_blocks, 2))
    a, b = p.alpha, 0.0
    out[0] = a, b
    for n in range(1, n_blocks):
        b = _b_given_a(p.alpha, p.L, a)
        a = min(max(p.alpha * (1.0 + a) - p.alpha / p.L, 0.0), 1.0)
        out[n] = a, b
    return out


def dag_expected_rewards(p: WithholdParams) -> tuple[float, float, float]:
    """Expected adversarial and honest DAG rewards per block at the recursion fixed point."""
    L = p.L
    a = withhold_limit(p)
    b = _b_given_a(p.alpha, L, a)
    ear = L + (L * b - 1) * L * a + L * (a - b) * L * (1 + a) / 2
    ehr = L * (1 - a) * (1 + L * (1 - (a + b) / 2))
    if a == 0.0:
        ear = 0.0
    return ear, ehr, ear / (ear + ehr)


def h_waste_truncated(L: int, N: int) -> float:
    """Expected honest proofs wasted per Bobtail block when the restart cap is ``L + N``."""
    if L < 1 or N < 0:
        raise ParameterError("need L >= 1 and N >= 0")
    series = math.fsum(k / ((L + k) * (L + k - 1)) for k in range(1, L + N))
    return L * series + L * (L + N) / (2 * L + N - 1)


def h_waste_exceeds(L: int, N: int) -> bool:
    return h_waste_truncated(L, N) > 2 * L / 3


def fee_split_threshold(alpha: float, L: int, r: float) -> float:
    """Smallest own-ledger fee ratio F_M / F_M' at which skipping the best ledger pays off."""
    FeeSplitParams(alpha, L, r)
    denom = r + (1 - r) / L * (1 + (L - 1) * alpha)
    if denom == 0.0:
        return 1.0
    return 1.0 - r / denom


def equal_split_r(L: int) -> float:
    """Leader share when the leader counts as one more proof height."""
    return 1.0 / (L + 1)


def fee_split_alpha_bound(fee_ratio: float, L: int, r: float) -> float:
    """Hashpower at which ``fee_split_threshold`` equals ``fee_ratio``, clamped to [0, 0.5]."""
    FeeSplitParams(0.0, L, r, fee_ratio)
    if fee_ratio >= 1.0 or r == 0.0:
        return 0.0
    if L == 1 or r == 1.0:
        return 0.0 if fee_ratio >= fee_split_threshold(0.0, L, r) else 0.5
    k = r * fee_ratio / ((1.0 - fee_ratio) * (1.0 - r))
    alpha = (L * k - 1.0) / (L - 1)
    return min(max(alpha, 0.0), 0.5)


@dataclass(frozen=True)
class RelativeMetrics:
    rho: float | None
    mu: float
    nu: float
    per_power_adv: float | None
    per_power_honest: float | None


def relative_metrics(adv_reward: float, honest_reward: float, progress: float, alpha: float | None = None) -> RelativeMetrics:
    """Relative reward and per-progress rates; per-power values need ``alpha``."""
    if progress <= 0:
        raise ParameterError("progress must be positive")
    total = adv_reward + honest_reward
    rho = adv_reward / total if total > 0 else None
    mu = adv_reward / progress
    nu = honest_reward / progress
    ppa = pph = None
    if alpha is not None:
        ppa = mu / alpha if alpha > 0 else None
        pph = nu / (1 - alpha) if alpha < 1 else None
    return RelativeMetrics(rho, mu, nu, ppa, pph)


def mdp_weighted_mix(rho_nakamoto: float, rho_split: float, L: int) -> float:
    """Blend of the two MDP ratios: initiator contest weighs 1/L, the rest (L-1)/L."""
    if L < 1:
        raise ParameterError("L must be positive")
    return rho_nakamoto / L + rho_split * (L - 1) / L

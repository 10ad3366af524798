"""Double-spending bound for the one-block confirmation rule.

The adversary wins if the sum of five independent terms reaches L: a
pre-mining lead and a post-confirmation deficit (both geometric), adversarial
proofs mined while honest miners find L proofs (negative binomial), and honest
work lost to proof and ledger delays (Poisson).  Each term is a truncated pmf;
truncated mass is carried along so the reported bound has an explicit error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import stats

from parpow.rng import ParameterError, RngStream

DEFAULT_EPS = 1e-12


class InsecureRegimeError(ValueError):
    """Honest rate does not dominate (p <= 1/2)."""


@dataclass(frozen=True)
class Pmf:
    probabilities: np.ndarray
    truncation_mass: float = 0.0

    @classmethod
    def point(cls, k: int = 0) -> Pmf:
        out = np.zeros(k + 1)
        out[k] = 1.0
        return cls(out, 0.0)

    @classmethod
    def from_scipy(cls, dist, eps: float) -> Pmf:
        """Truncate a frozen discrete scipy distribution where its tail drops below ``eps``."""
        k_max = int(max(dist.isf(eps), 0))
        while dist.sf(k_max) > eps:
            k_max += 1
        probs = dist.pmf(np.arange(k_max + 1))
        return cls(probs, float(dist.sf(k_max)))

    @property
    def total(self) -> float:
        return math.fsum(self.probabilities) + self.truncation_mass

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probabilities)), self.probabilities))

    def tail(self, k: int) -> float:
        """P(X >= k) over the stored support (truncated mass excluded)."""
        return math.fsum(self.probabilities[max(k, 0):])


def convolve(a: Pmf, b: Pmf) -> Pmf:
    """Distribution of the sum of independent variables; lost mass is tracked conservatively."""
    probs = np.convolve(a.probabilities, b.probabilities)
    lost = a.truncation_mass + b.truncation_mass - a.truncation_mass * b.truncation_mass
    return Pmf(probs, lost)


@dataclass(frozen=True)
class ConsistencyParams:
    lambda_B: float
    L: int
    beta: float
    delta: float
    Delta: float
    b_conf: int = 1

    def __post_init__(self) -> None:
        if self.lambda_B <= 0 or self.L < 1:
            raise ParameterError("need lambda_B > 0 and L >= 1")
        if not (0.0 < self.beta <= 1.0):
            raise ParameterError("beta outside (0, 1]")
        if self.delta < 0 or self.Delta < 0:
            raise ParameterError("delays must be non-negative")
        if self.b_conf != 1:
            raise ParameterError("only the one-block confirmation rule is modelled")

    @classmethod
    def from_alpha(cls, lambda_B: float, L: int, alpha: float, delta: float, Delta: float) -> ConsistencyParams:
        return cls(lambda_B, L, 1.0 - alpha, delta, Delta)

    def with_L(self, L: int) -> ConsistencyParams:
        return ConsistencyParams(self.lambda_B, L, self.beta, self.delta, self.Delta, self.b_conf)

    @property
    def lambda_P(self) -> float:
        # proof difficulty tracks L so the block rate stays fixed
        return self.L * self.lambda_B

    @property
    def p(self) -> float:
        return self.beta * math.exp(-self.lambda_P * self.delta)

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def regime_ok(self) -> bool:
        return self.p > 0.5


def geometric_lead_pmf(params: ConsistencyParams, eps: float = DEFAULT_EPS) -> Pmf:
    """Adversarial lead: P(M = k) = (1 - q/p)(q/p)^k."""
    if not params.regime_ok:
        raise InsecureRegimeError(f"p={params.p:.6f} <= 1/2")
    ratio = params.q / params.p
    return Pmf.from_scipy(stats.nbinom(1, 1.0 - ratio), eps)


def negbin_pmf(L: int, beta: float, eps: float = DEFAULT_EPS) -> Pmf:
    """Failures before the L-th success with success probability ``beta``."""
    if L < 1 or not (0.0 < beta <= 1.0):
        raise ParameterError("need L >= 1 and 0 < beta <= 1")
    if beta == 1.0:
        return Pmf.point(0)
    return Pmf.from_scipy(stats.nbinom(L, beta), eps)


def poisson_sum_pmf(count: int, rate_each: float, eps: float = DEFAULT_EPS) -> Pmf:
    """Sum of ``count`` independent Poisson(rate_each) variables."""
    if rate_each < 0 or count < 0:
        raise ParameterError("rate and count must be non-negative")
    mu = count * rate_each
    if mu == 0.0:
        return Pmf.point(0)
    return Pmf.from_scipy(stats.poisson(mu), eps)


@dataclass(frozen=True)
class BoundResult:
    L: int
    bound: float
    truncation_error: float
    p: float
    regime_ok: bool

    @property
    def upper(self) -> float:
        return self.bound + self.truncation_error


def violation_pmf(params: ConsistencyParams, eps: float = DEFAULT_EPS) -> Pmf:
    lead = geometric_lead_pmf(params, eps)
    parts = [
        lead,
        negbin_pmf(params.L, params.beta, eps),
        poisson_sum_pmf(params.L, params.lambda_P * params.delta, eps),
        poisson_sum_pmf(2, params.lambda_P * params.Delta, eps),
        lead,  # deficit after confirmation has the lead's law
    ]
    return reduce(convolve, parts)


def safety_violation_bound(params: ConsistencyParams, eps: float = DEFAULT_EPS) -> BoundResult:
    """P(lead + S_L + delay losses + deficit >= L), with its truncation error."""
    total = violation_pmf(params, eps)
    return BoundResult(params.L, total.tail(params.L), total.truncation_mass, params.p, True)


def consistency_curve(params: ConsistencyParams, L_values, eps: float = DEFAULT_EPS) -> list[BoundResult]:
    """Bound per L; insecure points are marked with NaN instead of raising."""
    out = []
    for L in L_values:
        pl = params.with_L(int(L))
        if pl.regime_ok:
            out.append(safety_violation_bound(pl, eps))
        else:
            out.append(BoundResult(pl.L, math.nan, math.nan, pl.p, False))
    return out


def sample_violation_sum(params: ConsistencyParams, n: int, gen: np.random.Generator) -> np.ndarray:
    """Direct samples of the five-term sum."""
    if not params.regime_ok:
        raise InsecureRegimeError(f"p={params.p:.6f} <= 1/2")
    ratio = params.q / params.p
    lead = gen.geometric(1.0 - ratio, n) - 1
    deficit = gen.geometric(1.0 - ratio, n) - 1
    s_l = gen.negative_binomial(params.L, params.beta, n) if params.beta < 1 else np.zeros(n, dtype=np.int64)
    s_delta = gen.poisson(params.L * params.lambda_P * params.delta, n)
    s_Delta = gen.poisson(2 * params.lambda_P * params.Delta, n)
    return lead + deficit + s_l + s_delta + s_Delta


def monte_carlo_bound(params: ConsistencyParams, n: int, rng: RngStream, chunk: int = 1_000_000) -> tuple[float, float]:
    """Sampled estimate of the bound and its standard error.

    Uses numpy's Philox keyed by the stream, so results replay per (seed, stream_id, counter).
    """
    gen = np.random.Generator(np.random.Philox(key=rng.key, counter=rng.counter))
    rng.counter += 1
    hits = 0
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        hits += int(np.count_nonzero(sample_violation_sum(params, m, gen) >= params.L))
    est = hits / n
    return est, math.sqrt(max(est * (1 - est), 1.0 / n) / n)

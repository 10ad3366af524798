"""Average-reward-ratio selfish-mining MDPs: Nakamoto baseline and reward-split model.

States are (a, h, fork, p).  ``a`` and ``h`` count adversarial and honest
proofs past the last settled point; ``p`` marks a contested first height whose
two proofs were combined and share the reward.  For a fixed ratio rho each
transition pays omega_rho(x, y, p) = (1 - rho) x - rho y + (rho - 0.5) p and the
optimal long-run gain is decreasing in rho; rho* is its root, found by
bisection with relative value iteration per probe.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from parpow.rng import ParameterError

NAKAMOTO = "nakamoto"
REWARD_SPLIT = "reward_split"
KINDS = (NAKAMOTO, REWARD_SPLIT)
DEFAULT_MAX_FORK = 80
DEFAULT_PRECISION = 1e-5
ALPHA_GRID = tuple(round(0.02 * k, 2) for k in range(1, 25))


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3g})")
        self.residual = residual


class Fork(IntEnum):
    IRRELEVANT = 0
    RELEVANT = 1
    ACTIVE = 2


class Action(IntEnum):
    ADOPT = 0
    OVERRIDE = 1
    MATCH = 2
    WAIT = 3


@dataclass(frozen=True, order=True)
class MdpState:
    a: int
    h: int
    fork: Fork
    p: int = 0


# (probability, next state, x, y, p_flag)
Transition = tuple[Fraction, MdpState, int, int, int]


def reward_value(x: int, y: int, p_flag: int, rho: float) -> float:
    """omega_rho = (1 - rho) x - rho y + (rho - 1/2) p."""
    if x < 0 or y < 0:
        raise ParameterError("settled counts must be non-negative")
    return (1 - rho) * x - rho * y + (rho - 0.5) * p_flag


@dataclass
class MdpModelSpec:
    kind: str
    alpha: float
    gamma: float
    max_fork_len: int
    states: list[MdpState]
    transitions: dict[tuple[MdpState, Action], list[Transition]]
    index: dict[MdpState, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.index = {s: i for i, s in enumerate(self.states)}
        self._compile()

    def legal_actions(self, state: MdpState) -> list[Action]:
        return [a for a in Action if (state, a) in self.transitions]

    def _compile(self) -> None:
        # one row per legal (state, action), grouped by state in action order
        keys = sorted(self.transitions, key=lambda k: (self.index[k[0]], k[1]))
        rows, cols, vals = [], [], []
        ex, ey, ep = np.zeros(len(keys)), np.zeros(len(keys)), np.zeros(len(keys))
        as_float: dict[int, float] = {}  # few distinct Fraction objects; key by identity
        for r, key in enumerate(keys):
            for prob, nxt, x, y, pf in self.transitions[key]:
                w = as_float.get(id(prob))
                if w is None:
                    w = as_float[id(prob)] = float(prob)
                rows.append(r)
                cols.append(self.index[nxt])
                vals.append(w)
                ex[r] += w * x
                ey[r] += w * y
                ep[r] += w * pf
        n = len(self.states)
        self.sa_state = np.array([self.index[k[0]] for k in keys], dtype=np.int64)
        self.sa_action = np.array([int(k[1]) for k in keys], dtype=np.int64)
        self.sa_start = np.flatnonzero(np.r_[True, self.sa_state[1:] != self.sa_state[:-1]])
        if len(self.sa_start) != n:
            raise ParameterError("every state needs at least one legal action")
        self.P = sparse.csr_matrix((vals, (rows, cols)), shape=(len(keys), n))
        self.ex, self.ey, self.ep = ex, ey, ep

    def rewards(self, rho: float) -> np.ndarray:
        return (1 - rho) * self.ex - rho * self.ey + (rho - 0.5) * self.ep

    def start_distribution(self) -> np.ndarray:
        d = np.zeros(len(self.states))
        for prob, nxt, *_ in self.transitions[(self.states[0], Action.ADOPT)]:
            d[self.index[nxt]] += float(prob)
        return d


def _check(alpha: float, gamma: float, max_fork: int) -> None:
    if not (0.0 <= alpha <= 0.5) or not (0.0 <= gamma <= 1.0):
        raise ParameterError("need 0 <= alpha <= 0.5 and 0 <= gamma <= 1")
    if max_fork < 2:
        raise ParameterError("max_fork must be at least 2")


def _checked(*probs: Fraction) -> tuple[Fraction, ...]:
    if sum(probs) != 1 or min(probs) < 0:
        raise ParameterError("transition row does not sum to one")
    return probs


def _row(probs: tuple[Fraction, ...], *outs: tuple[MdpState, int, int, int]) -> list[Transition]:
    return [(p, *o) for p, o in zip(probs, outs) if p]


def _build(kind: str, alpha: float, gamma: float, max_fork: int) -> MdpModelSpec:
    _check(alpha, gamma, max_fork)
    al, ga = Fraction(alpha), Fraction(gamma)
    ONE = _checked(Fraction(1))
    TWO = _checked(al, 1 - al)
    RACE = _checked(al, ga * (1 - al), (1 - ga) * (1 - al))
    S = MdpState
    IRR, REL, ACT = Fork.IRRELEVANT, Fork.RELEVANT, Fork.ACTIVE
    split = kind == REWARD_SPLIT

    states = [S(a, h, f) for a in range(max_fork + 1) for h in range(max_fork + 1) for f in Fork]
    if split:
        states += [S(a, h, ACT, 1) for a in range(1, max_fork + 1) for h in range(1, max_fork + 1)]

    adopt_to = (S(1, 0, IRR), S(0, 1, IRR))
    table: dict[tuple[MdpState, Action], list[Transition]] = {}
    for s in states:
        a, h = s.a, s.h
        room = a < max_fork and h < max_fork
        if s.p == 0:
            table[(s, Action.ADOPT)] = _row(TWO, (adopt_to[0], 0, h, 0), (adopt_to[1], 0, h, 0))
            if a > h:
                table[(s, Action.OVERRIDE)] = _row(
                    TWO, (S(a - h, 0, IRR), h + 1, 0, 0), (S(a - h - 1, 1, REL), h + 1, 0, 0))
            if not room:
                continue
            racing = a >= h >= 1
            race = _row(RACE, (S(a + 1, h, ACT), 0, 0, 0), (S(a - h, 1, REL), h, 0, 0),
                        (S(a, h + 1, REL), 0, 0, 0)) if racing else None
            if s.fork != ACT:
                table[(s, Action.WAIT)] = _row(TWO, (S(a + 1, h, IRR), 0, 0, 0), (S(a, h + 1, REL), 0, 0, 0))
            elif racing:
                table[(s, Action.WAIT)] = race
            if s.fork == REL and racing:
                if split and a == h == 1:
                    # combined pair, gamma plays no role; the adversary then adopts the pair or races it
                    table[(s, Action.MATCH)] = _row(ONE, (S(1, 1, ACT, 1), 0, 0, 0))
                else:
                    table[(s, Action.MATCH)] = race
        else:
            table[(s, Action.ADOPT)] = _row(TWO, (adopt_to[0], 1, h, 1), (adopt_to[1], 1, h, 1))
            if a > h + 1:
                table[(s, Action.OVERRIDE)] = _row(
                    TWO, (S(a - h - 1, 0, IRR), h + 2, 0, 0), (S(a - h - 2, 1, REL), h + 2, 0, 0))
            if room:
                table[(s, Action.WAIT)] = _row(TWO, (S(a + 1, h, ACT, 1), 0, 0, 0), (S(a, h + 1, ACT, 1), 0, 0, 0))
    return MdpModelSpec(kind, alpha, gamma, max_fork, states, table)


def build_nakamoto_model(alpha: float, gamma: float, max_fork: int = DEFAULT_MAX_FORK) -> MdpModelSpec:
    return _build(NAKAMOTO, alpha, gamma, max_fork)


def build_reward_split_model(alpha: float, gamma: float, max_fork: int = DEFAULT_MAX_FORK) -> MdpModelSpec:
    return _build(REWARD_SPLIT, alpha, gamma, max_fork)


def build_model(kind: str, alpha: float, gamma: float, max_fork: int = DEFAULT_MAX_FORK) -> MdpModelSpec:
    if kind not in KINDS:
        raise ParameterError(f"unknown model kind {kind!r}")
    return _build(kind, alpha, gamma, max_fork)


# --- policies


def honest_policy(model: MdpModelSpec) -> np.ndarray:
    """Publish a lone adversarial proof at once, adopt anything else. Returns one (s, a) row per state."""
    pick = []
    for i, s in enumerate(model.states):
        lo, hi = model.sa_start[i], (model.sa_start[i + 1] if i + 1 < len(model.states) else len(model.sa_state))
        want = Action.OVERRIDE if (s.a, s.h, s.p) == (1, 0, 0) else Action.ADOPT
        pick.append(lo + int(np.flatnonzero(model.sa_action[lo:hi] == want)[0]))
    return np.array(pick, dtype=np.int64)


def _stationary(P: sparse.csr_matrix, start: np.ndarray) -> np.ndarray:
    """Long-run occupation of the chain started from ``start``."""
    n = P.shape[0]
    seeds = np.flatnonzero(start > 0)
    reach = np.zeros(n, dtype=bool)
    for s in seeds:
        reach[csgraph.breadth_first_order(P, s, directed=True, return_predecessors=False)] = True
    idx = np.flatnonzero(reach)
    sub = P[idx][:, idx]
    m = len(idx)
    A = (sparse.identity(m, format="csr") - sub).T.tolil()
    A[0, :] = np.ones(m)
    b = np.zeros(m)
    b[0] = 1.0
    pi = np.zeros(n)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        sol = spla.spsolve(A.tocsc(), b)
    if np.all(np.isfinite(sol)) and np.allclose(sol @ sub, sol, atol=1e-10) and sol.min() > -1e-10:
        pi[idx] = np.clip(sol, 0, None)
        return pi / pi.sum()
    # several closed classes: Cesaro average from the start distribution
    v = start.copy()
    acc = np.zeros(n)
    PT = P.T.tocsr()
    for _ in range(50_000):
        v = PT @ v
        acc += v
    return acc / acc.sum()


def policy_ratio(model: MdpModelSpec, rows: np.ndarray) -> float:
    """Exact long-run relative payoff of a stationary deterministic policy."""
    pi = _stationary(model.P[rows], model.start_distribution())
    ex, ey, ep = model.ex[rows], model.ey[rows], model.ep[rows]
    num = pi @ (ex - 0.5 * ep)
    den = pi @ (ex + ey - ep)
    return float(num / den) if den > 0 else 0.0


def policy_rows(model: MdpModelSpec, policy: dict[MdpState, Action]) -> np.ndarray:
    """(s, a) row index of each state's chosen action."""
    return np.array([model.sa_start[i] + model.legal_actions(s).index(policy[s]) for i, s in enumerate(model.states)])


def reachable_policy(model: MdpModelSpec, policy: dict[MdpState, Action]) -> list[tuple[MdpState, Action]]:
    """The policy restricted to states visited from the start distribution, in state order."""
    P = model.P[policy_rows(model, policy)]
    seen = np.zeros(len(model.states), dtype=bool)
    for s in np.flatnonzero(model.start_distribution() > 0):
        seen[csgraph.breadth_first_order(P, s, directed=True, return_predecessors=False)] = True
    return [(model.states[i], policy[model.states[i]]) for i in np.flatnonzero(seen)]


def evaluate_honest(model: MdpModelSpec) -> float:
    return policy_ratio(model, honest_policy(model))


# --- solver


@dataclass(frozen=True)
class Probe:
    rho: float
    gain_low: float
    gain_high: float
    sweeps: int


@dataclass
class SolverResult:
    rho: float
    policy: dict[MdpState, Action]
    iterations: int
    residual: float
    probes: list[Probe] = field(default_factory=list, repr=False)


def _greedy(model: MdpModelSpec, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    best = np.maximum.reduceat(q, model.sa_start)
    cand = np.where(q >= best[model.sa_state] - 1e-12, np.arange(len(q)), len(q))
    return best, np.minimum.reduceat(cand, model.sa_start)


def _probe(model: MdpModelSpec, rho: float, v: np.ndarray, span_tol: float, max_sweeps: int):
    """Relative value iteration until the sign of the optimal gain is settled."""
    r = model.rewards(rho)
    tau = 0.9  # damped update for aperiodicity; bounds use the undamped step
    for k in range(1, max_sweeps + 1):
        tv, rows = _greedy(model, r + model.P @ v)
        d = tv - v
        lo, hi = float(d.min()), float(d.max())
        if lo > 0 or hi < 0 or hi - lo < span_tol:
            return Probe(rho, lo, hi, k), v, rows
        v = v + tau * d
        v -= v[0]
    raise ConvergenceError(f"value iteration did not settle at rho={rho:.6f}", hi - lo)


def solve(model: MdpModelSpec, precision: float = DEFAULT_PRECISION, max_sweeps: int = 200_000) -> SolverResult:
    """Bisection on rho; each probe's greedy policy also supplies an achievable lower bound."""
    if precision <= 0:
        raise ParameterError("precision must be positive")
    lo, hi = 0.0, 1.0
    v = np.zeros(len(model.states))
    probes: list[Probe] = []
    best_rows = honest_policy(model)
    lo = max(lo, policy_ratio(model, best_rows))
    rho = min(lo + precision / 2, 1.0)
    while hi - lo >= precision:
        pr, v, rows = _probe(model, rho, v, precision * 1e-3, max_sweeps)
        probes.append(pr)
        gain = pr.gain_low if pr.gain_low > 0 or pr.gain_high < 0 else 0.5 * (pr.gain_low + pr.gain_high)
        improved = False
        if gain < 0:
            hi = rho
        else:
            cand = policy_ratio(model, rows)
            if cand > hi + 1e-9:
                raise ConvergenceError("gain not monotone in rho: bracket inverted", cand - hi)
            if cand > lo:
                lo, best_rows, improved = cand, rows, True
            lo = max(lo, rho)
        rho = min(lo + precision / 2, hi) if improved else 0.5 * (lo + hi)
    policy = {s: Action(int(model.sa_action[best_rows[i]])) for i, s in enumerate(model.states)}
    # rho* lies in [lo, hi); lo is usually attained by the recorded policy
    return SolverResult(lo, policy, sum(p.sweeps for p in probes), hi - lo, probes)


def solve_point(kind: str, alpha: float, gamma: float, max_fork: int = DEFAULT_MAX_FORK,
                precision: float = DEFAULT_PRECISION) -> SolverResult:
    return solve(build_model(kind, alpha, gamma, max_fork), precision)


def threshold(kind: str, gamma: float, precision: float = DEFAULT_PRECISION, max_fork: int = DEFAULT_MAX_FORK,
              alpha_tol: float = 1e-3) -> float:
    """Smallest alpha with rho*(alpha) > alpha + precision, by bisection on [0, 0.5]."""
    def profitable(alpha: float) -> bool:
        return solve_point(kind, alpha, gamma, max_fork, precision).rho > alpha + precision

    lo, hi = 0.0, 0.5
    if not profitable(hi - alpha_tol):
        return math.nan
    while hi - lo > alpha_tol:
        mid = 0.5 * (lo + hi)
        if profitable(mid):
            hi = mid
        else:
            lo = mid
    return hi

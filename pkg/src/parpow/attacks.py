"""Monte Carlo simulators for hard-coded withholding attacks.

Each proof is adversarial with probability alpha.  Bobtail proofs also carry a
uniform hash value.  The per-block loops run inside numba kernels that draw
from the same counter-based stream as :class:`parpow.rng.RngStream`, so a run
is a pure function of (seed, stream_id, starting counter).
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numba
import numpy as np

from parpow.rng import ParameterError, RngStream, uniform_at

STYLES = ("bobtail", "tree", "dag", "honest")
N_BATCHES = 20

# totals vector layout shared by the kernels
_ADV_R, _HON_R, _ADV_P, _HON_P, _ORPHAN = range(5)


@dataclass(frozen=True)
class AttackConfig:
    alpha: float
    L: int
    blocks: int
    style: str
    seed: int = 0
    bobtail_bonus_rewards: bool = False
    # bonus per proof that supports the winning lowest hash (Bobtail bonus scheme)
    bonus_value: float = 1.0

    def __post_init__(self) -> None:
        if self.style not in STYLES:
            raise ParameterError(f"unknown style {self.style!r}; expected one of {STYLES}")
        if not (0.0 <= self.alpha <= 0.5):
            raise ParameterError(f"alpha={self.alpha} outside [0, 0.5]")
        if self.blocks < 1:
            raise ParameterError("blocks must be >= 1")
        min_L = 2 if self.style in ("tree", "dag") else 1
        if self.L < min_L:
            raise ParameterError(f"L must be >= {min_L} for style {self.style}")


@dataclass
class SimReport:
    adversarial_reward: float
    honest_reward: float
    relative_reward: float
    chain_progress: int
    orphaned_honest_proofs: int
    settled_adversarial_proofs: int = 0
    settled_honest_proofs: int = 0
    stderr_estimate: float = math.nan
    per_block_trace: np.ndarray | None = field(default=None, repr=False)


def _report(totals: np.ndarray, batch_adv: np.ndarray, batch_hon: np.ndarray, blocks: int, trace) -> SimReport:
    adv, hon = float(totals[_ADV_R]), float(totals[_HON_R])
    rho = adv / (adv + hon) if adv + hon > 0 else 0.0
    den = batch_adv + batch_hon
    ok = den > 0
    ratios = np.where(ok, batch_adv / np.where(ok, den, 1.0), 0.0)[ok]
    se = float(ratios.std(ddof=1) / math.sqrt(len(ratios))) if len(ratios) > 1 else math.nan
    return SimReport(
        adversarial_reward=adv,
        honest_reward=hon,
        relative_reward=rho,
        chain_progress=blocks,
        orphaned_honest_proofs=int(totals[_ORPHAN]),
        settled_adversarial_proofs=int(totals[_ADV_P]),
        settled_honest_proofs=int(totals[_HON_P]),
        stderr_estimate=se,
        per_block_trace=trace,
    )


def _buffers(blocks: int, trace: bool):
    nb = min(N_BATCHES, blocks)
    tr = np.zeros((blocks if trace else 0, 2))
    return nb, np.zeros(nb), np.zeros(nb), tr, np.zeros(5)


# --------------------------------------------------------------------------
# honest baseline


@numba.njit(cache=True)
def _honest_kernel(alpha, L, blocks, key, ctr, nb, batch_adv, batch_hon, trace, totals):
    bsize = (blocks + nb - 1) // nb
    for blk in range(blocks):
        a = 0
        for _ in range(L):
            if uniform_at(key, ctr) < alpha:
                a += 1
            ctr += np.uint64(1)
        bi = blk // bsize
        batch_adv[bi] += a
        batch_hon[bi] += L - a
        totals[_ADV_R] += a
        totals[_HON_R] += L - a
        totals[_ADV_P] += a
        totals[_HON_P] += L - a
        if trace.shape[0] > 0:
            trace[blk, 0] = a / L
    return ctr


# --------------------------------------------------------------------------
# tree / DAG withholding


@numba.njit(cache=True)
def _withhold_kernel(alpha, L, blocks, dag, key, ctr, nb, batch_adv, batch_hon, trace, totals):
    thresh = 1.0 / alpha if alpha > 0.0 else np.inf
    bsize = (blocks + nb - 1) // nb
    rel = 0  # released lead proof (red) opening this block
    carry = 0  # hidden lead proofs (violet)
    one = np.uint64(1)
    for blk in range(blocks):
        if trace.shape[0] > 0:
            trace[blk, 1] = (rel + carry) / L
        V = min(carry, L - rel)
        lead = carry - V  # surplus already belongs to the next height
        G = 0
        H = 0
        S = 0  # sum over green proofs of honest proofs mined before them
        while rel + V + G + H < L:
            u = uniform_at(key, ctr)
            ctr += one
            if u < alpha:
                G += 1
                S += H
            else:
                H += 1
        A = rel + V + G
        if V + G > thresh:
            extra = 0
            while rel + H + extra < L:
                u = uniform_at(key, ctr)
                ctr += one
                if u < alpha:
                    lead += 1
                else:
                    extra += 1
            if lead >= 1:
                a_set, h_set = A, H
                if dag:
                    ar = rel * L + (V + G) * A + S
                    hr = H * (rel + H) + S
                else:
                    ar, hr = A, H
                totals[_ORPHAN] += extra
                rel, carry = 1, lead - 1
            else:
                Hh = H + extra
                a_set, h_set = rel, Hh
                if dag:
                    ar = rel * L
                    hr = Hh * (rel + Hh)
                else:
                    ar, hr = rel, Hh
                rel, carry = 0, 0
        else:
            a_set, h_set = A, H
            if dag:
                ar = rel * L + (V + G) * A + S
                hr = H * (rel + H) + S
            else:
                ar, hr = A, H
            rel, carry = 0, lead
        bi = blk // bsize
        batch_adv[bi] += ar
        batch_hon[bi] += hr
        totals[_ADV_R] += ar
        totals[_HON_R] += hr
        totals[_ADV_P] += a_set
        totals[_HON_P] += h_set
        if trace.shape[0] > 0:
            trace[blk, 0] = a_set / L
    return ctr


# --------------------------------------------------------------------------
# Bobtail


@numba.njit(cache=True)
def _enqueue(q, head, tail, value):
    """Append to the FIFO ``q[head:tail]``, compacting or growing as needed."""
    if tail == q.shape[0]:
        n = tail - head
        if head >= q.shape[0] // 2:
            q[:n] = q[head:tail]
        else:
            bigger = np.empty(2 * q.shape[0])
            bigger[:n] = q[head:tail]
            q = bigger
        head, tail = 0, n
    q[tail] = value
    return q, head, tail + 1


@numba.njit(cache=True)
def _bobtail_kernel(alpha, L, blocks, bonus, bonus_value, key, ctr, nb, batch_adv, batch_hon, trace, totals):
    one = np.uint64(1)
    bsize = (blocks + nb - 1) // nb
    # FIFO of adversarial lead-proof hashes for upcoming blocks; the head is public when rel == 1
    q = np.empty(4 * L + 16)
    head = 0
    tail = 0
    rel = 0
    own = np.zeros(L, np.uint8)
    hsh = np.empty(L)
    bv = bonus_value if bonus else 0.0
    for blk in range(blocks):
        if trace.shape[0] > 0:
            trace[blk, 1] = (tail - head) / L
        n = 0
        while n < L and head < tail:
            own[n] = 1
            hsh[n] = q[head]
            head += 1
            n += 1
        while n < L:
            u = uniform_at(key, ctr)
            ctr += one
            hsh[n] = uniform_at(key, ctr)
            ctr += one
            own[n] = 1 if u < alpha else 0
            n += 1
        m = 0
        advc = 0
        for i in range(L):
            advc += own[i]
            if hsh[i] < hsh[m]:
                m = i
        honest_mined = L - advc
        if own[m] == 0:
            # honest lowest hash: everything is released, surplus lead stays hidden
            ar = float(advc)
            hr = float(L - advc)
            a_set, h_set = advc, L - advc
            for i in range(m, L):
                if own[i] == 1:
                    ar += bv
                else:
                    hr += bv
            rel = 0
        else:
            x = hsh[m]
            x_new = 0 if (rel == 1 and m == 0) else 1
            public = (L - advc) + rel + x_new
            adv_pub = rel + x_new
            hit = False
            filled = 0
            after_hit = 0
            while filled < L - public:
                u = uniform_at(key, ctr)
                ctr += one
                h = uniform_at(key, ctr)
                ctr += one
                if u < alpha:
                    q, head, tail = _enqueue(q, head, tail, h)
                else:
                    filled += 1
                    if hit:
                        after_hit += 1
                    elif h < x:
                        hit = True
            mode = 0
            k = 0
            best = 2.0
            best_pos = 0
            if not hit:
                # restart: L fresh honest proofs or one beating x, whichever first
                while True:
                    u = uniform_at(key, ctr)
                    ctr += one
                    h = uniform_at(key, ctr)
                    ctr += one
                    if u < alpha:
                        q, head, tail = _enqueue(q, head, tail, h)
                        continue
                    k += 1
                    if h < x:
                        mode = 1
                        break
                    if h < best:
                        best = h
                        best_pos = k
                    if k == L:
                        mode = 2
                        break
            honest_mined += filled + k
            if tail > head:
                # override with the withheld block plus one lead proof
                ar = float(advc)
                hr = float(L - advc)
                a_set, h_set = advc, L - advc
                for i in range(m, L):
                    if own[i] == 1:
                        ar += bv
                rel = 1
            else:
                if mode == 0:
                    a_set = adv_pub
                    h_set = L - adv_pub
                    hr = float(h_set) + bv * (1 + after_hit)
                elif mode == 1:
                    a_set = rel * x_new  # x itself is ignored after the restart
                    h_set = L - a_set
                    hr = float(h_set) + bv
                else:
                    a_set = 0
                    h_set = L
                    hr = float(L) + bv * (L - best_pos + 1)
                ar = float(a_set)
                rel = 0
        totals[_ORPHAN] += honest_mined - h_set
        if tail == head:
            rel = 0
        bi = blk // bsize
        batch_adv[bi] += ar
        batch_hon[bi] += hr
        totals[_ADV_R] += ar
        totals[_HON_R] += hr
        totals[_ADV_P] += a_set
        totals[_HON_P] += h_set
        if trace.shape[0] > 0:
            trace[blk, 0] = a_set / L
    return ctr


# --------------------------------------------------------------------------
# public entry points


def _run(kernel_call, cfg: AttackConfig, rng: RngStream, trace: bool) -> SimReport:
    nb, badv, bhon, tr, totals = _buffers(cfg.blocks, trace)
    ctr = kernel_call(np.uint64(rng.key), np.uint64(rng.counter), nb, badv, bhon, tr, totals)
    rng.counter = int(ctr)
    return _report(totals, badv, bhon, cfg.blocks, tr if trace else None)


def _stream(cfg: AttackConfig, rng: RngStream | None) -> RngStream:
    return rng if rng is not None else RngStream(cfg.seed)


def simulate_honest(cfg: AttackConfig, rng: RngStream | None = None, trace: bool = False) -> SimReport:
    if cfg.style != "honest":
        raise ParameterError("simulate_honest needs style='honest'")
    return _run(
        lambda k, c, *rest: _honest_kernel(cfg.alpha, cfg.L, cfg.blocks, k, c, *rest),
        cfg, _stream(cfg, rng), trace,
    )


def simulate_withholding(cfg: AttackConfig, rng: RngStream | None = None, trace: bool = False) -> SimReport:
    if cfg.style not in ("tree", "dag"):
        raise ParameterError("simulate_withholding needs style 'tree' or 'dag'")
    dag = cfg.style == "dag"
    return _run(
        lambda k, c, *rest: _withhold_kernel(cfg.alpha, cfg.L, cfg.blocks, dag, k, c, *rest),
        cfg, _stream(cfg, rng), trace,
    )


def simulate_bobtail(cfg: AttackConfig, rng: RngStream | None = None, trace: bool = False) -> SimReport:
    if cfg.style != "bobtail":
        raise ParameterError("simulate_bobtail needs style='bobtail'")
    return _run(
        lambda k, c, *rest: _bobtail_kernel(
            cfg.alpha, cfg.L, cfg.blocks, cfg.bobtail_bonus_rewards, cfg.bonus_value, k, c, *rest
        ),
        cfg, _stream(cfg, rng), trace,
    )


def simulate(cfg: AttackConfig, rng: RngStream | None = None, trace: bool = False) -> SimReport:
    if cfg.style == "honest":
        return simulate_honest(cfg, rng, trace)
    if cfg.style == "bobtail":
        return simulate_bobtail(cfg, rng, trace)
    return simulate_withholding(cfg, rng, trace)


# --------------------------------------------------------------------------
# DAG reward accounting for one block

ADV_ADVANTAGE = "adv-advantage"
ADV_LATE = "adv-late"
HONEST = "honest"
_TAGS = (ADV_ADVANTAGE, ADV_LATE, HONEST)


def dag_block_rewards(arrival_order: Sequence[str], released_lead_first: bool) -> tuple[int, int]:
    """Adversarial and honest DAG rewards of one settled block.

    ``arrival_order`` lists the block's proofs in mining order.  With
    ``released_lead_first`` the first entry is the released (public) lead
    proof.  Advantage proofs must precede every honest proof.
    """
    tags = list(arrival_order)
    if not tags:
        raise ParameterError("empty block")
    if any(t not in _TAGS for t in tags):
        raise ParameterError(f"tags must be in {_TAGS}")
    L = len(tags)
    rel = 0
    if released_lead_first:
        if tags[0] == HONEST:
            raise ParameterError("released lead proof must be adversarial")
        rel = 1
        tags = tags[1:]
    seen_honest = False
    for t in tags:
        if t == HONEST:
            seen_honest = True
        elif t == ADV_ADVANTAGE and seen_honest:
            raise ParameterError("advantage proofs cannot follow honest proofs")
    A = rel + sum(t != HONEST for t in tags)
    H = sum(t == HONEST for t in tags)
    adv = rel * L
    hon = 0
    honest_before = 0
    for i, t in enumerate(tags):
        if t == ADV_ADVANTAGE:
            adv += A
        elif t == ADV_LATE:
            adv += A + honest_before
        else:
            greens_after = sum(1 for u in tags[i + 1:] if u == ADV_LATE)
            hon += rel + H + greens_after
            honest_before += 1
    return adv, hon

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parpow.analytic import WithholdParams, dag_expected_rewards, withhold_limit
from parpow.attacks import (
    ADV_ADVANTAGE,
    ADV_LATE,
    HONEST,
    AttackConfig,
    dag_block_rewards,
    simulate,
    simulate_bobtail,
    simulate_honest,
    simulate_withholding,
)
from parpow.rng import ParameterError, RngStream

RED = "red"


def closure_rewards(tags):
    """Reward = 1 + |ancestors| + |descendants| on the explicit pointer DAG.

    Honest proofs point to every earlier public proof (red, honest); adversarial
    proofs point to every earlier adversarial proof and every earlier honest one,
    except advantage proofs, which predate all honest proofs of the block.
    """
    n = len(tags)
    parents = []
    for i, t in enumerate(tags):
        if t == HONEST:
            ps = {j for j in range(i) if tags[j] in (RED, HONEST)}
        else:
            ps = {j for j in range(i) if tags[j] != HONEST or t == ADV_LATE}
        parents.append(ps)
    anc = []
    for i in range(n):
        a = set()
        for p in parents[i]:
            a |= {p} | anc[p]
        anc.append(a)
    adv = hon = 0
    for i, t in enumerate(tags):
        desc = sum(1 for j in range(n) if i in anc[j])
        r = 1 + len(anc[i]) + desc
        if t == HONEST:
            hon += r
        else:
            adv += r
    return adv, hon


def as_block(tags, released):
    return ([RED] + list(tags[1:])) if released else list(tags)


# --- DAG single-block accounting


def test_dag_block_examples():
    L = 6
    assert dag_block_rewards([HONEST] * L, False) == (0, L * L)
    adv, hon = dag_block_rewards([ADV_ADVANTAGE] + [HONEST] * (L - 1), True)
    assert adv == L and hon == (L - 1) * (1 + (L - 1))
    with pytest.raises(ParameterError):
        dag_block_rewards([HONEST, "bogus"], False)
    with pytest.raises(ParameterError):
        dag_block_rewards([HONEST, ADV_ADVANTAGE], False)
    with pytest.raises(ParameterError):
        dag_block_rewards([HONEST, HONEST], True)


@st.composite
def blocks(draw):
    L = draw(st.integers(1, 8))
    released = draw(st.booleans()) and L >= 1
    n_violet = draw(st.integers(0, L - int(released)))
    rest = draw(st.lists(st.sampled_from([ADV_LATE, HONEST]), min_size=L - int(released) - n_violet,
                         max_size=L - int(released) - n_violet))
    tags = ([ADV_ADVANTAGE] if released else []) + [ADV_ADVANTAGE] * n_violet + rest
    return tags, released


@settings(max_examples=400, deadline=None)
@given(blocks())
def test_dag_block_matches_closure(block):
    tags, released = block
    assert dag_block_rewards(tags, released) == closure_rewards(as_block(tags, released))


# --- reference implementation of the withholding loop


def withholding_reference(alpha, L, n_blocks, dag, rng):
    """Direct transcription of the per-block loop, rewards from explicit DAG closure."""
    thresh = 1 / alpha if alpha > 0 else math.inf
    rel, carry = 0, 0
    adv_r = hon_r = 0
    for _ in range(n_blocks):
        V = min(carry, L - rel)
        lead = carry - V
        order = [RED] * rel + [ADV_ADVANTAGE] * V
        while len(order) < L:
            order.append(ADV_LATE if rng.next_uniform() < alpha else HONEST)
        hidden = V + order.count(ADV_LATE)
        settled = order
        next_state = (0, lead)
        if hidden > thresh:
            extra = []
            while rel + order.count(HONEST) + len(extra) < L:
                if rng.next_uniform() < alpha:
                    lead += 1
                else:
                    extra.append(HONEST)
            if lead >= 1:
                next_state = (1, lead - 1)
            else:
                settled = [t for t in order if t in (RED, HONEST)] + extra
                next_state = (0, 0)
        if dag:
            a, h = closure_rewards(settled)
        else:
            h = settled.count(HONEST)
            a = len(settled) - h
        adv_r += a
        hon_r += h
        rel, carry = next_state
    return adv_r, hon_r


@pytest.mark.parametrize("style", ["tree", "dag"])
@pytest.mark.parametrize("alpha,L", [(0.1, 8), (0.3, 6), (0.45, 8), (0.25, 4), (0.4, 2)])
def test_kernel_matches_reference(style, alpha, L):
    n = 400
    rep = simulate_withholding(AttackConfig(alpha, L, n, style), RngStream(99, 3))
    ref = withholding_reference(alpha, L, n, style == "dag", RngStream(99, 3))
    assert (rep.adversarial_reward, rep.honest_reward) == ref


# --- honest baseline


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.5])
def test_honest_fraction(alpha):
    r = simulate_honest(AttackConfig(alpha, 50, 10**5, "honest", seed=4))
    assert abs(r.relative_reward - alpha) < 0.005
    assert r.orphaned_honest_proofs == 0


# --- withholding behaviour


@pytest.mark.parametrize("style", ["tree", "dag"])
def test_alpha_zero_withholding(style):
    r = simulate(AttackConfig(0.0, 20, 1000, style, seed=1))
    assert r.relative_reward == 0.0 and r.orphaned_honest_proofs == 0


def test_tree_matches_closed_form():
    r = simulate(AttackConfig(0.25, 100, 10**5, "tree", seed=11))
    assert abs(r.relative_reward - 0.33) < 0.015


def test_tree_reward_is_proof_fraction():
    r = simulate(AttackConfig(0.3, 25, 5000, "tree", seed=2))
    assert r.adversarial_reward == r.settled_adversarial_proofs
    assert r.relative_reward == r.settled_adversarial_proofs / (25 * 5000)
    assert r.settled_adversarial_proofs + r.settled_honest_proofs == 25 * 5000


def test_tree_convergence_in_L():
    gaps = []
    for L in (10, 25, 50, 100):
        r = simulate(AttackConfig(0.3, L, 10**5, "tree", seed=L))
        gaps.append(abs(r.relative_reward - withhold_limit(WithholdParams(0.3, L))))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_dag_tree_crossover():
    for alpha in (0.35, 0.40, 0.45):
        d = simulate(AttackConfig(alpha, 50, 10**5, "dag", seed=8)).relative_reward
        t = simulate(AttackConfig(alpha, 50, 10**5, "tree", seed=8)).relative_reward
        assert d > t
    for alpha in (0.10, 0.20, 0.30):
        d = simulate(AttackConfig(alpha, 50, 10**5, "dag", seed=8)).relative_reward
        t = simulate(AttackConfig(alpha, 50, 10**5, "tree", seed=8)).relative_reward
        assert d < t


def test_trace_recursion_shape():
    r = simulate(AttackConfig(0.3, 100, 20000, "tree", seed=5), trace=True)
    tr = r.per_block_trace
    assert tr.shape == (20000, 2)
    assert ((tr >= 0) & (tr <= 1)).all()
    p = WithholdParams(0.3, 100)
    assert tr[:, 0].mean() == pytest.approx(withhold_limit(p), abs=0.01)
    assert np.isclose(tr[:, 0].sum() / 20000, r.settled_adversarial_proofs / (100 * 20000))


def test_dag_sim_near_analytic_large_L():
    for alpha in (0.3, 0.4):
        r = simulate(AttackConfig(alpha, 100, 20000, "dag", seed=6))
        assert r.relative_reward == pytest.approx(dag_expected_rewards(WithholdParams(alpha, 100))[2], abs=0.03)


# --- Bobtail


def test_bobtail_alpha_zero():
    r = simulate(AttackConfig(0.0, 10, 2000, "bobtail", seed=1))
    assert r.relative_reward == 0.0 and r.orphaned_honest_proofs == 0


@pytest.mark.parametrize("alpha", [0.05, 0.2, 0.35, 0.45])
def test_bobtail_zero_sum_per_block(alpha):
    L, n = 20, 5000
    r = simulate(AttackConfig(alpha, L, n, "bobtail", seed=3), trace=True)
    assert r.adversarial_reward + r.honest_reward == L * n
    assert r.settled_adversarial_proofs + r.settled_honest_proofs == L * n
    assert r.per_block_trace[:, 0].sum() * L == pytest.approx(r.settled_adversarial_proofs)


def test_bobtail_profitable_small_alpha():
    r = simulate(AttackConfig(0.1, 50, 2 * 10**5, "bobtail", seed=10))
    assert r.relative_reward - 0.1 > 5 * r.stderr_estimate


def test_bobtail_beats_selfish_bound():
    r = simulate(AttackConfig(0.35, 50, 2 * 10**5, "bobtail", seed=10))
    assert r.relative_reward > 0.35 / 0.65


def test_bobtail_bonus_adds_rewards():
    base = AttackConfig(0.3, 20, 5000, "bobtail", seed=7)
    plain = simulate(base)
    bonus = simulate(AttackConfig(0.3, 20, 5000, "bobtail", seed=7, bobtail_bonus_rewards=True))
    assert bonus.settled_adversarial_proofs == plain.settled_adversarial_proofs
    assert bonus.adversarial_reward > plain.adversarial_reward
    assert bonus.honest_reward > plain.honest_reward
    assert bonus.relative_reward > plain.relative_reward


# --- determinism and config


@pytest.mark.parametrize("style", ["bobtail", "tree", "dag", "honest"])
def test_replay(style):
    cfg = AttackConfig(0.3, 10, 3000, style, seed=42)
    a, b = simulate(cfg), simulate(cfg)
    assert a == b
    c = simulate(cfg, RngStream(42, 1))
    assert c.adversarial_reward != a.adversarial_reward


def test_stream_counter_advances():
    rng = RngStream(5)
    simulate(AttackConfig(0.3, 10, 100, "tree"), rng)
    first = rng.counter
    assert first >= 1000
    simulate(AttackConfig(0.3, 10, 100, "tree"), rng)
    assert rng.counter > first


def test_config_validation():
    with pytest.raises(ParameterError):
        AttackConfig(0.6, 10, 10, "tree")
    with pytest.raises(ParameterError):
        AttackConfig(0.3, 1, 10, "dag")
    with pytest.raises(ParameterError):
        AttackConfig(0.3, 10, 0, "tree")
    with pytest.raises(ParameterError):
        AttackConfig(0.3, 10, 10, "ghost")
    with pytest.raises(ParameterError):
        simulate_bobtail(AttackConfig(0.3, 10, 10, "tree"))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["bobtail", "tree", "dag", "honest"]), st.floats(0, 0.5), st.integers(2, 30), st.integers(0, 2**32))
def test_report_invariants(style, alpha, L, seed):
    r = simulate(AttackConfig(alpha, L, 200, style, seed=seed))
    assert 0.0 <= r.relative_reward <= 1.0
    tot = r.adversarial_reward + r.honest_reward
    if tot > 0:
        assert r.relative_reward == pytest.approx(r.adversarial_reward / tot)
    assert r.chain_progress == 200
    assert r.orphaned_honest_proofs >= 0

"""Rule engine for the semi-parallel voting protocol.

A block is a cluster of L (or L+1) proofs.  Inside a cluster every proof has
a *proof height* (its depth) and an *incremental height* (the intra-block work
it commits to); at most two proofs share a proof height, and such a pair must
have identical parents so the next proof can combine them.  Rewards and fees
are handled in exact rational arithmetic.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from collections.abc import Callable, Collection, Hashable, Iterable, Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from numbers import Rational

from parpow.rng import ParameterError

ADVERSARY = "adversary"

ProofId = Hashable


class IntegrityError(ValueError):
    """Structural fault: dangling parent, cycle, or malformed cluster."""


class ElectionError(ValueError):
    """No shared valid ledger is available for election."""


class UnknownProofError(KeyError):
    pass


class Kind(enum.Enum):
    INITIATOR = "initiator"
    INCREMENTAL = "incremental"


@dataclass(frozen=True)
class Proof:
    id: ProofId
    block_height: int
    kind: Kind
    incremental_height: int = 1
    # initiators: the last proof height of the previous block; incrementals: 1-2 in-cluster ids
    parents: tuple = ()
    prev_block_summary: tuple = ()
    elected_ledger_ref: ProofId | None = None
    fee_offer: Rational = 0
    ledger_commit: bytes = b""
    reward_address: bytes = b""
    owner: int | str = 0

    @property
    def adversarial(self) -> bool:
        return self.owner == ADVERSARY

    @property
    def is_initiator(self) -> bool:
        return self.kind is Kind.INITIATOR


def combinable(p: Proof, q: Proof) -> bool:
    """True when ``p`` and ``q`` are a parallel pair a later proof may merge."""
    if p.id == q.id or p.kind is not q.kind or p.block_height != q.block_height:
        return False
    if frozenset(p.parents) != frozenset(q.parents):
        return False
    if p.is_initiator:
        return (
            p.prev_block_summary == q.prev_block_summary
            and p.elected_ledger_ref == q.elected_ledger_ref
        )
    return p.incremental_height == q.incremental_height


@dataclass(frozen=True)
class BlockCluster:
    height: int
    proofs: tuple[Proof, ...]
    elected_ledger: ProofId | None
    L: int

    @cached_property
    def by_id(self) -> dict[ProofId, Proof]:
        return {p.id: p for p in self.proofs}

    @cached_property
    def heights(self) -> dict[ProofId, int]:
        """Proof height of every member; raises IntegrityError on cycles or dangling parents."""
        out: dict[ProofId, int] = {}
        for p in self.proofs:
            stack = [p.id]
            on_path: set = set()
            while stack:
                pid = stack[-1]
                if pid in out:
                    stack.pop()
                    continue
                node = self.by_id[pid]
                if node.is_initiator:
                    out[pid] = 1
                    stack.pop()
                    continue
                if not node.parents:
                    raise IntegrityError(f"incremental proof {pid!r} has no parents")
                missing = [q for q in node.parents if q not in self.by_id]
                if missing:
                    raise IntegrityError(f"proof {pid!r} has dangling parents {missing!r}")
                pending = [q for q in node.parents if q not in out]
                if pending:
                    if pid in on_path:
                        raise IntegrityError(f"cycle through proof {pid!r}")
                    on_path.add(pid)
                    stack.extend(pending)
                    continue
                out[pid] = 1 + max(out[q] for q in node.parents)
                on_path.discard(pid)
                stack.pop()
        return out

    @property
    def total_proof_height(self) -> int:
        return max(self.heights.values())

    def at_height(self) -> dict[int, list[Proof]]:
        groups: dict[int, list[Proof]] = defaultdict(list)
        for p in self.proofs:
            groups[self.heights[p.id]].append(p)
        return dict(groups)

    @cached_property
    def ancestors(self) -> dict[ProofId, frozenset]:
        """In-cluster ancestor sets (excluding self)."""
        out: dict[ProofId, frozenset] = {}
        for p in sorted(self.proofs, key=lambda q: self.heights[q.id]):
            acc: set = set()
            if not p.is_initiator:
                for q in p.parents:
                    acc.add(q)
                    acc |= out[q]
            out[p.id] = frozenset(acc)
        return out


@dataclass(frozen=True)
class RewardAllocation:
    coinbase_shares: dict[ProofId, Fraction]
    fee_shares: dict[ProofId, Fraction]
    leader_fee: Fraction
    leader: ProofId | None = None
    # coinbase withheld from provers whose top ledger was not shared in time
    burned: Fraction = Fraction(0)


def proof_height(cluster: BlockCluster, proof: Proof | ProofId) -> int:
    pid = proof.id if isinstance(proof, Proof) else proof
    if pid not in cluster.by_id:
        raise UnknownProofError(pid)
    return cluster.heights[pid]


def max_ledger_bytes(proof_height: int, M: int, B: int) -> int:
    """Ledger size cap ``ceil(C / M) * B`` for a proof at proof height ``C``."""
    if proof_height < 1 or M < 1 or B < 1:
        raise ParameterError("proof_height, M and B must be positive")
    return -(-proof_height // M) * B


# --------------------------------------------------------------------------
# chain view and fork choice


@dataclass(frozen=True)
class ChainView:
    """Immutable set of known proofs across blocks."""

    proofs: Mapping[ProofId, Proof] = field(default_factory=dict)

    @classmethod
    def of(cls, proofs: Iterable[Proof]) -> ChainView:
        return cls({p.id: p for p in proofs})

    def add(self, *proofs: Proof) -> ChainView:
        merged = dict(self.proofs)
        merged.update((p.id, p) for p in proofs)
        return ChainView(merged)

    @cached_property
    def _children(self) -> dict[ProofId, list[ProofId]]:
        ch: dict[ProofId, list[ProofId]] = defaultdict(list)
        for p in self.proofs.values():
            for q in p.parents:
                ch[q].append(p.id)
        return ch

    @property
    def tips(self) -> list[ProofId]:
        return sorted((pid for pid in self.proofs if pid not in self._children), key=repr)

    @cached_property
    def _ancestors(self) -> dict[ProofId, frozenset]:
        out: dict[ProofId, frozenset] = {}
        for pid in self.proofs:
            stack = [pid]
            while stack:
                cur = stack[-1]
                if cur in out:
                    stack.pop()
                    continue
                if cur not in self.proofs:
                    raise IntegrityError(f"dangling parent {cur!r}")
                pending = [q for q in self.proofs[cur].parents if q not in out]
                if pending:
                    if len(stack) > len(self.proofs) + 1:
                        raise IntegrityError("cycle in chain view")
                    stack.extend(pending)
                    continue
                acc: set = set()
                for q in self.proofs[cur].parents:
                    acc.add(q)
                    acc |= out[q]
                out[cur] = frozenset(acc)
                stack.pop()
        return out

    def has_parallel(self, pid: ProofId) -> bool:
        p = self.proofs[pid]
        siblings: set = set()
        for q in p.parents:
            siblings.update(self._children.get(q, ()))
        if not p.parents:
            siblings = {q for q, other in self.proofs.items() if not other.parents}
        return any(combinable(p, self.proofs[s]) for s in siblings if s != pid)

    @cached_property
    def weight(self) -> dict[ProofId, int]:
        return {pid: len(self._ancestors[pid]) + 1 + self.has_parallel(pid) for pid in self.proofs}


def aggregate_work(view: ChainView, proof: Proof | ProofId) -> int:
    """Ancestors plus self, plus one if a compatible parallel proof is known."""
    pid = proof.id if isinstance(proof, Proof) else proof
    if pid not in view.proofs:
        raise UnknownProofError(pid)
    return view.weight[pid]


def fork_choice(view: ChainView, candidates: Iterable[ProofId]) -> ProofId:
    """Heaviest candidate; ties go to the adversary, then to the lowest id."""
    cands = list(candidates)
    if not cands:
        raise ParameterError("fork_choice needs at least one candidate")
    return min(
        cands,
        key=lambda c: (-aggregate_work(view, c), not view.proofs[c].adversarial, c),
    )


# --------------------------------------------------------------------------
# ledger election


def _offer_order(proofs: Iterable[Proof]) -> list[Proof]:
    return sorted(proofs, key=lambda p: (-Fraction(p.fee_offer), p.ledger_commit))


def elect_ledger(prev_cluster: BlockCluster, shared: Collection[ProofId]) -> ProofId:
    """Proof whose shared ledger pays the most; ties go to the lower commit digest."""
    feasible = [p for p in prev_cluster.proofs if p.id in shared]
    if not feasible:
        raise ElectionError(f"no shared ledger in cluster at height {prev_cluster.height}")
    return _offer_order(feasible)[0].id


def grace_period_election(
    prev_cluster: BlockCluster, reveals: Callable[[Proof], bool]
) -> tuple[ProofId, list[ProofId]]:
    """Walk offers from the highest down until one ledger is revealed in time.

    Returns the elected proof id and the ids of provers that let their
    higher-paying ledger lapse (they forfeit their coinbase share).
    """
    lapsed: list[ProofId] = []
    for p in _offer_order(prev_cluster.proofs):
        if reveals(p):
            return p.id, lapsed
        lapsed.append(p.id)
    raise ElectionError(f"no ledger revealed for height {prev_cluster.height}")


# --------------------------------------------------------------------------
# rewards


def distribute_rewards(
    cluster: BlockCluster,
    fees: Rational | int | float,
    r: Rational | float,
    forfeited: Collection[ProofId] = (),
) -> RewardAllocation:
    """Coinbase and fee split for one cluster.

    Each proof height earns one block-reward unit, split in half between a
    parallel pair.  The elected ledger's creator takes ``r`` of the fees, and
    the remaining ``1 - r`` is spread over proof heights the same way.
    """
    r = Fraction(r)
    fees = Fraction(fees)
    if not (0 <= r <= 1):
        raise ParameterError(f"r={r} outside [0, 1]")
    if fees < 0:
        raise ParameterError("fees must be non-negative")
    problems = validate_cluster(cluster)
    if problems:
        raise IntegrityError("; ".join(v.message for v in problems))

    C = cluster.total_proof_height
    per_height_fee = (1 - r) * fees / C
    coinbase: dict[ProofId, Fraction] = {}
    fee_shares: dict[ProofId, Fraction] = {}
    for _, members in sorted(cluster.at_height().items()):
        split = Fraction(1, len(members))
        for p in members:
            coinbase[p.id] = split
            fee_shares[p.id] = per_height_fee * split
    burned = Fraction(0)
    for pid in forfeited:
        if pid in coinbase:
            burned += coinbase[pid]
            coinbase[pid] = Fraction(0)
    return RewardAllocation(coinbase, fee_shares, r * fees, cluster.elected_ledger, burned)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    proofs: tuple = ()


def validate_cluster(cluster: BlockCluster) -> list[Violation]:
    """Every broken cluster invariant; an empty list means the cluster is valid."""
    out: list[Violation] = []
    ids = [p.id for p in cluster.proofs]
    dup = [pid for pid, n in Counter(ids).items() if n > 1]
    if dup:
        return [Violation("duplicate-id", f"duplicate proof ids {dup!r}", tuple(dup))]

    for p in cluster.proofs:
        if p.block_height != cluster.height:
            out.append(Violation("wrong-height", f"proof {p.id!r} is not at block height {cluster.height}", (p.id,)))
        if p.is_initiator:
            if p.incremental_height != 1:
                out.append(Violation("initiator-height", f"initiator {p.id!r} has incremental height {p.incremental_height}", (p.id,)))
            if len(p.prev_block_summary) != cluster.L:
                out.append(Violation("summary-size", f"initiator {p.id!r} summarises {len(p.prev_block_summary)} proofs, expected {cluster.L}", (p.id,)))
            if p.parents and not set(p.parents) <= set(p.prev_block_summary):
                out.append(Violation("summary-parents", f"initiator {p.id!r} points outside its summary", (p.id,)))
            if p.elected_ledger_ref != cluster.elected_ledger:
                out.append(Violation("ledger-disagreement", f"initiator {p.id!r} elects {p.elected_ledger_ref!r}", (p.id,)))
            continue
        if not 1 <= len(p.parents) <= 2 or len(set(p.parents)) != len(p.parents):
            out.append(Violation("parent-count", f"incremental {p.id!r} has {len(p.parents)} parents", (p.id,)))
            continue
        missing = [q for q in p.parents if q not in cluster.by_id]
        if missing:
            out.append(Violation("dangling-parent", f"proof {p.id!r} has unknown parents {missing!r}", (p.id,)))
            continue
        parents = [cluster.by_id[q] for q in p.parents]
        if len(parents) == 2 and not combinable(*parents):
            out.append(Violation("non-combinable", f"proof {p.id!r} merges {p.parents!r} which do not share parents and history", (p.id, *p.parents)))
        expected_eta = parents[0].incremental_height + len(parents)
        if p.incremental_height != expected_eta:
            out.append(Violation("incremental-height", f"proof {p.id!r} has incremental height {p.incremental_height}, expected {expected_eta}", (p.id,)))

    initiators = [p for p in cluster.proofs if p.is_initiator]
    if not initiators:
        out.append(Violation("no-initiator", "cluster has no initiator"))
    elif len({(p.prev_block_summary, p.elected_ledger_ref) for p in initiators}) > 1:
        out.append(Violation("initiator-disagreement", "initiators disagree about history or elected ledger", tuple(p.id for p in initiators)))
    if any(v.code in ("parent-count", "dangling-parent", "no-initiator") for v in out):
        return out

    try:
        groups = cluster.at_height()
        anc = cluster.ancestors
    except IntegrityError as exc:
        return out + [Violation("structure", str(exc))]

    for c, members in sorted(groups.items()):
        if len(members) > 2:
            out.append(Violation("too-many-parallel", f"{len(members)} proofs at proof height {c}", tuple(p.id for p in members)))
    # 1-cluster rule: any two proofs are ordered, or else they are a combinable pair
    proofs = cluster.proofs
    for i, p in enumerate(proofs):
        for q in proofs[i + 1:]:
            if p.id in anc[q.id] or q.id in anc[p.id]:
                continue
            if not combinable(p, q):
                out.append(Violation("non-combinable", f"proofs {p.id!r} and {q.id!r} are unordered but not parallel", (p.id, q.id)))

    n = len(proofs)
    top = max(groups)
    below_top = n - len(groups[top])
    if n < cluster.L:
        out.append(Violation("too-few-votes", f"{n} proofs, need {cluster.L}"))
    elif n > cluster.L + 1 or below_top >= cluster.L:
        out.append(Violation("too-many-votes", f"{n} proofs exceed the L={cluster.L} quorum"))
    return out


def ledger_size_levels(L: int, M: int) -> tuple[int, int]:
    """Bounds on distinct throughput levels in a block: ``ceil(L/2M)`` to ``ceil(L/M)``."""
    return math.ceil(L / (2 * M)), math.ceil(L / M)


def build_cluster(
    widths: Iterable[int],
    L: int,
    height: int = 1,
    prev_summary: tuple | None = None,
    elected: ProofId | None = "prev",
    owners: Iterable[int | str] | None = None,
    fees: Iterable[Rational] | None = None,
) -> BlockCluster:
    """Cluster whose proof heights hold ``widths[c]`` proofs (1 or 2) each.

    Proof ids are ``(height, k)`` in mining order.
    """
    widths = list(widths)
    n = sum(widths)
    owners = list(owners) if owners is not None else [0] * n
    fees = list(fees) if fees is not None else [0] * n
    if prev_summary is None:
        prev_summary = tuple((height - 1, k) for k in range(L))
    proofs: list[Proof] = []
    prev_ids: tuple = ()
    eta = 0
    k = 0
    for c, w in enumerate(widths):
        ids = tuple((height, k + j) for j in range(w))
        for j, pid in enumerate(ids):
            common = dict(
                id=pid,
                block_height=height,
                fee_offer=fees[k + j],
                ledger_commit=f"{height}:{k + j}".encode(),
                owner=owners[k + j],
            )
            if c == 0:
                proofs.append(
                    Proof(
                        kind=Kind.INITIATOR,
                        incremental_height=1,
                        parents=tuple(prev_summary[-1:]),
                        prev_block_summary=tuple(prev_summary),
                        elected_ledger_ref=elected,
                        **common,
                    )
                )
            else:
                proofs.append(
                    Proof(kind=Kind.INCREMENTAL, incremental_height=eta + len(prev_ids), parents=prev_ids, **common)
                )
        eta = 1 if c == 0 else eta + len(prev_ids)
        prev_ids = ids
        k += w
    return BlockCluster(height, tuple(proofs), elected, L)

"""Address clustering: multi-input and change-address heuristics over a union-find.

One forward pass in chain order. For every transaction the inputs are merged
(multi-input), then at most one output is attached to them as change. Every
accepted union is recorded in a merge log that replays to the same partition.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import DataError
from .ingest import AddressBook, TxRecord, TxStore

log = logging.getLogger(__name__)

MULTI_INPUT = "multi_input"
CHANGE_ADDRESS = "change_address"
VALUE_BASED = "value_based"

COND4 = "cond4"
COND4_PRIME = "cond4_prime"

COLLAPSE_FRACTION = 0.5


@dataclass(frozen=True)
class HeuristicConfig:
    enable_multi_input: bool = True
    enable_change_address: bool = True
    change_condition_variant: str = COND4
    enable_no_change_guards: bool = True
    enable_value_heuristic: bool = False
    enable_growth_guard: bool = False
    growth_merge_cap: int = 100

    def __post_init__(self):
        if self.change_condition_variant not in (COND4, COND4_PRIME):
            raise ValueError(f"unknown change condition variant {self.change_condition_variant!r}")
        if self.growth_merge_cap < 1:
            raise ValueError("growth_merge_cap must be >= 1")

    @classmethod
    def from_names(cls, names: Iterable[str], **overrides) -> "HeuristicConfig":
        """Build from a heuristic list such as ``["multi_input", "change"]``."""
        names = {n.strip().lower() for n in names if n.strip()}
        known = {"multi_input", "change", "change_address", "value", "value_based",
                 "growth", "cond4_prime", "no_guards"}
        unknown = names - known
        if unknown:
            raise ValueError(f"unknown heuristics: {sorted(unknown)}")
        kw = dict(
            enable_multi_input="multi_input" in names,
            enable_change_address=bool(names & {"change", "change_address"}),
            enable_value_heuristic=bool(names & {"value", "value_based"}),
            enable_growth_guard="growth" in names,
            enable_no_change_guards="no_guards" not in names,
            change_condition_variant=COND4_PRIME if "cond4_prime" in names else COND4,
        )
        kw.update(overrides)
        return cls(**kw)


class MergeRecord(NamedTuple):
    txid: str
    heuristic: str
    members: tuple[int, ...]


class EntityClusters:
    """Union-find over address ids with path compression and union by size.

    Equal-size unions keep the smaller id as root so the partition and the
    root labels are reproducible.
    """

    def __init__(self, n: int = 0):
        self.parent: list[int] = list(range(n))
        self.size: list[int] = [1] * n
        self.merge_log: list[MergeRecord] = []
        self.rejected: list[tuple[str, int, int]] = []
        self.warnings: list[str] = []
        self._final = False

    def __len__(self) -> int:
        return len(self.parent)

    def grow(self, n: int) -> None:
        if n > len(self.parent):
            self.parent.extend(range(len(self.parent), n))
            self.size.extend([1] * (n - len(self.size)))

    def find(self, a: int) -> int:
        parent = self.parent
        if a >= len(parent) or a < 0:
            raise DataError(f"address id {a} is not covered by the clustering")
        if self._final:
            return parent[a]
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a: int, b: int) -> int:
        if self._final:
            raise RuntimeError("clusters are finalized")
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb] or (self.size[ra] == self.size[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def entity_size(self, a: int) -> int:
        return self.size[self.find(a)]

    def finalize(self) -> "EntityClusters":
        """Compress every path; afterwards ``find`` is a read-only lookup."""
        if not self._final:
            for a in range(len(self.parent)):
                self.find(a)
            self._final = True
        return self

    def groups(self, addresses: Iterable[int] | None = None) -> dict[int, list[int]]:
        ids = range(len(self.parent)) if addresses is None else addresses
        out: dict[int, list[int]] = {}
        for a in ids:
            out.setdefault(self.find(a), []).append(a)
        return out

    def partition(self, addresses: Iterable[int] | None = None) -> set[frozenset[int]]:
        return {frozenset(g) for g in self.groups(addresses).values()}

    @classmethod
    def replay(cls, n: int, merge_log: Iterable[MergeRecord]) -> "EntityClusters":
        ec = cls(n)
        for rec in merge_log:
            head = rec.members[0]
            for m in rec.members[1:]:
                ec.union(head, m)
            ec.merge_log.append(rec)
        return ec


def multi_input_merge(tx: TxRecord, clusters: EntityClusters, growth_cap: int | None = None) -> EntityClusters:
    """Place every input address of ``tx`` in one entity (coinbase: no-op)."""
    if tx.is_coinbase:
        return clusters
    addrs = tx.input_addresses
    if len(addrs) < 2:
        return clusters
    _merge(clusters, tx.txid, MULTI_INPUT, addrs, growth_cap)
    return clusters


def _merge(clusters, txid, tag, members, growth_cap):
    head = members[0]
    accepted = [head]
    for m in members[1:]:
        if clusters.find(head) == clusters.find(m):
            continue
        if growth_cap is not None and not growth_guard(clusters, head, m, growth_cap):
            clusters.rejected.append((txid, head, m))
            log.debug("growth guard rejected %s: %d + %d", txid, head, m)
            continue
        clusters.union(head, m)
        accepted.append(m)
    if len(accepted) > 1:
        clusters.merge_log.append(MergeRecord(txid, tag, tuple(accepted)))


def detect_change_address(tx: TxRecord, store: TxStore, config: HeuristicConfig = HeuristicConfig()) -> int | None:
    """Return the change output of ``tx`` or None.

    An output qualifies when it appears for the first time at ``tx``; the
    transaction must not be coinbase and must not pay any of its own inputs.
    Under ``cond4`` exactly one output may qualify. Under ``cond4_prime`` the
    qualifying output is the single fresh one whose fellow outputs are all
    paid again later in the window. With the guards enabled, a transaction is
    declared change-less when some output already received exactly one
    payment, or already took part in a self-change transaction.
    """
    if tx.is_coinbase or not tx.inputs:
        return None
    ins = set(tx.input_addresses)
    outs = tx.output_addresses
    if ins.intersection(outs):
        return None
    pos = store.ordinal(tx.txid)
    if config.enable_no_change_guards:
        for o in outs:
            if store.receipts_before(o, pos) == 1:
                return None
            seen = store.self_change_seen.get(o)
            if seen is not None and seen < pos:
                return None
    fresh = [o for o in outs if store.first_seen[o].ordinal == pos]
    if config.change_condition_variant == COND4:
        candidates = fresh
    else:
        candidates = [o for o in fresh
                      if all(store.receipts_after(x, pos) > 0 for x in outs if x != o)]
    if len(candidates) != 1:
        return None
    return candidates[0]


def value_heuristic_filter(tx: TxRecord, candidate: int) -> bool:
    """True when the change value is below every input value."""
    values = [v for a, v in tx.outputs if a == candidate]
    if not values:
        raise ValueError("candidate is not an output of the transaction")
    change = sum(values)
    return all(change < v for _, v in tx.inputs)


def growth_guard(clusters: EntityClusters, a: int, b: int, cap: int) -> bool:
    """Allow a merge unless both sides are already larger than ``cap``."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    return min(clusters.entity_size(a), clusters.entity_size(b)) <= cap


def cluster_entities(store: TxStore, config: HeuristicConfig = HeuristicConfig()) -> EntityClusters:
    clusters = EntityClusters(len(store.book))
    cap = config.growth_merge_cap if config.enable_growth_guard else None
    for tx in store:
        if tx.is_coinbase:
            continue
        if config.enable_multi_input:
            multi_input_merge(tx, clusters, cap)
        if not config.enable_change_address:
            continue
        change = detect_change_address(tx, store, config)
        if change is None:
            continue
        tag = CHANGE_ADDRESS
        if config.enable_value_heuristic:
            if not value_heuristic_filter(tx, change):
                continue
            tag = VALUE_BASED
        _merge(clusters, tx.txid, tag, (tx.input_addresses[0], change), cap)
    clusters.finalize()
    frac = largest_entity_fraction(clusters, store.addresses())
    if frac > COLLAPSE_FRACTION:
        msg = (f"largest entity holds {frac:.1%} of {len(store.first_seen)} addresses; "
               "clustering may have collapsed")
        clusters.warnings.append(msg)
        log.warning(msg)
    return clusters


def largest_entity_fraction(clusters: EntityClusters, addresses: Iterable[int]) -> float:
    addresses = list(addresses)
    if len(addresses) < 2:
        return 0.0
    counts = Counter(clusters.find(a) for a in addresses)
    return max(counts.values()) / len(addresses)


def write_partition(clusters: EntityClusters, book: AddressBook, addresses: Iterable[int], path) -> None:
    """CSV ``address,entity_id``; entity_id is the root address id."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "entity_id"])
        for a in sorted(addresses):
            w.writerow([book.name(a), clusters.find(a)])


def read_partition(path, book: AddressBook) -> EntityClusters:
    """Rebuild clusters from a partition CSV written against the same book."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["address", "entity_id"]:
            raise DataError(f"{path}: expected header 'address,entity_id'")
        for row in reader:
            pairs.append((book.intern(row["address"]), int(row["entity_id"])))
    ec = EntityClusters(len(book))
    for aid, root in pairs:
        if root >= len(book):
            raise DataError(f"{path}: entity id {root} unknown to the address book")
        ec.parent[aid] = root
    for aid, root in pairs:
        if ec.parent[root] != root:
            raise DataError(f"{path}: entity id {root} is not its own root")
    counts = Counter(ec.parent[a] for a in range(len(book)))
    for r, c in counts.items():
        ec.size[r] = c
    return ec.finalize()


def write_merge_log(clusters: EntityClusters, book: AddressBook, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in clusters.merge_log:
            fh.write(json.dumps({"txid": rec.txid, "heuristic": rec.heuristic,
                                 "members": [book.name(m) for m in rec.members]},
                                separators=(",", ":")) + "\n")


def read_merge_log(path, book: AddressBook) -> list[MergeRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(MergeRecord(d["txid"], d["heuristic"],
                                       tuple(book.intern(m) for m in d["members"])))
    return out

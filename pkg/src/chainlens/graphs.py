"""Time segmentation and the two graph views of a segment.

The aggregated graph keeps transactions as nodes (address -> tx -> address).
The user graph collapses every tx node into entity-to-entity edges, one per
(input entity, output entity) pair.
"""
from __future__ import annotations

import bisect
import csv
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, NamedTuple, Sequence

from .entities import EntityClusters
from .errors import SegmentError
from .ingest import TxStore

FIFTEEN_DAYS = "15Days"
ONE_MONTH = "1Month"
GRANULARITIES = (FIFTEEN_DAYS, ONE_MONTH)


@dataclass(frozen=True)
class Segment:
    granularity: str
    index: int
    start: int  # unix seconds, inclusive
    end: int  # unix seconds, exclusive
    ordinals: tuple[int, ...] = ()

    @property
    def label(self) -> str:
        d = datetime.fromtimestamp(self.start, timezone.utc)
        if self.granularity == ONE_MONTH:
            return f"{d:%Y-%m}"
        return f"{d:%Y-%m}-{'1' if d.day == 1 else '2'}"

    @property
    def half(self) -> str:
        """'1' / '2' for the month halves of 15Days segments, 'all' for months."""
        if self.granularity == ONE_MONTH:
            return "all"
        return "1" if datetime.fromtimestamp(self.start, timezone.utc).day == 1 else "2"

    def __len__(self) -> int:
        return len(self.ordinals)


def _month_start(ts: int) -> datetime:
    d = datetime.fromtimestamp(ts, timezone.utc)
    return datetime(d.year, d.month, 1, tzinfo=timezone.utc)


def _next_month(d: datetime) -> datetime:
    return datetime(d.year + (d.month == 12), d.month % 12 + 1, 1, tzinfo=timezone.utc)


def segment_bounds(granularity: str, start: int, end: int) -> list[tuple[int, int]]:
    """Calendar-aligned [lo, hi) windows covering [start, end) in UTC."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    bounds = []
    m = _month_start(start)
    while int(m.timestamp()) < end:
        nxt = _next_month(m)
        if granularity == ONE_MONTH:
            bounds.append((int(m.timestamp()), int(nxt.timestamp())))
        else:
            mid = m.replace(day=16)
            bounds.append((int(m.timestamp()), int(mid.timestamp())))
            bounds.append((int(mid.timestamp()), int(nxt.timestamp())))
        m = nxt
    return [(lo, hi) for lo, hi in bounds if hi > start]


def default_span(store: TxStore) -> tuple[int, int]:
    """From the first day of the first month to the end of the last month."""
    if not len(store):
        return (0, 0)
    lo = min(r.time for r in store)
    hi = max(r.time for r in store)
    return int(_month_start(lo).timestamp()), int(_next_month(_month_start(hi)).timestamp())


def segment_store(store: TxStore, granularity: str,
                  span: tuple[int, int] | None = None) -> list[Segment]:
    """Partition the store into calendar segments; every tx lands in exactly one."""
    start, end = span if span is not None else default_span(store)
    offenders = [r.txid for r in store if not start <= r.time < end]
    if offenders:
        more = f" (+{len(offenders) - 5} more)" if len(offenders) > 5 else ""
        raise SegmentError(
            f"{len(offenders)} transactions fall outside the span: {', '.join(offenders[:5])}{more}")
    bounds = segment_bounds(granularity, start, end) if end > start else []
    members: list[list[int]] = [[] for _ in bounds]
    los = [lo for lo, _ in bounds]
    for i, r in enumerate(store):
        members[bisect.bisect_right(los, r.time) - 1].append(i)
    return [Segment(granularity, k, lo, hi, tuple(m))
            for k, ((lo, hi), m) in enumerate(zip(bounds, members))]


@dataclass
class AggregatedGraph:
    txids: list[str] = field(default_factory=list)
    heights: list[int] = field(default_factory=list)
    in_edges: list[tuple[int, int, int, int]] = field(default_factory=list)  # (addr, tx node, sats, height)
    out_edges: list[tuple[int, int, int, int]] = field(default_factory=list)  # (tx node, addr, sats, height)

    @property
    def address_nodes(self) -> set[int]:
        return {e[0] for e in self.in_edges} | {e[1] for e in self.out_edges}

    @property
    def n_tx_nodes(self) -> int:
        return len(self.txids)

    def tx_degrees(self) -> list[tuple[int, int]]:
        """(in-edge count, out-edge count) per tx node."""
        deg = [[0, 0] for _ in self.txids]
        for _, t, _, _ in self.in_edges:
            deg[t][0] += 1
        for t, _, _, _ in self.out_edges:
            deg[t][1] += 1
        return [tuple(d) for d in deg]


def build_aggregated_graph(store: TxStore, seg: Segment) -> AggregatedGraph:
    ag = AggregatedGraph()
    for node, i in enumerate(seg.ordinals):
        tx = store[i]
        ag.txids.append(tx.txid)
        ag.heights.append(tx.height)
        ag.in_edges.extend((a, node, v, tx.height) for a, v in tx.inputs)
        ag.out_edges.extend((node, a, v, tx.height) for a, v in tx.outputs)
    return ag


class UGEdge(NamedTuple):
    src: int
    dst: int
    sats: int
    height: int
    txid: str


@dataclass
class UserGraph:
    edges: list[UGEdge] = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return sorted({e.src for e in self.edges} | {e.dst for e in self.edges})

    def incident(self) -> dict[int, tuple[list[UGEdge], list[UGEdge]]]:
        """entity -> (incoming edges, outgoing edges), each in height order."""
        adj: dict[int, tuple[list, list]] = defaultdict(lambda: ([], []))
        for e in self.edges:
            adj[e.dst][0].append(e)
            adj[e.src][1].append(e)
        return dict(adj)


def apportion(total: int, weights: Sequence[int]) -> list[int]:
    """Split integer ``total`` proportionally to ``weights`` (largest remainder)."""
    n = len(weights)
    wsum = sum(weights)
    if wsum <= 0:
        weights, wsum = [1] * n, n
    shares = [total * w // wsum for w in weights]
    rems = [total * w % wsum for w in weights]
    left = total - sum(shares)
    for k in sorted(range(n), key=lambda k: (-rems[k], k))[:left]:
        shares[k] += 1
    return shares


def build_user_graph(store: TxStore, seg: Segment,
                     clusters: EntityClusters | None = None) -> UserGraph:
    """Entity-level multigraph of ``seg``; identity mapping when ``clusters`` is None.

    With one input entity each edge carries the value paid to the output
    entity. With several, each output value is split across input entities
    in proportion to what they put in. Self-loops are kept.
    """
    resolve: Callable[[int], int] = clusters.find if clusters is not None else (lambda a: a)
    ug = UserGraph()
    for i in seg.ordinals:
        tx = store[i]
        if not tx.inputs:
            continue
        contrib: dict[int, int] = {}
        for a, v in tx.inputs:
            e = resolve(a)
            contrib[e] = contrib.get(e, 0) + v
        received: dict[int, int] = {}
        for a, v in tx.outputs:
            e = resolve(a)
            received[e] = received.get(e, 0) + v
        senders = list(contrib)
        weights = [contrib[s] for s in senders]
        split = {dst: apportion(value, weights) for dst, value in received.items()}
        for s_idx, s in enumerate(senders):
            for dst in received:
                ug.edges.append(UGEdge(s, dst, split[dst][s_idx], tx.height, tx.txid))
    return ug


def write_edge_list(ug: UserGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "sats", "height", "txid"])
        w.writerows(ug.edges)


def read_edge_list(path) -> UserGraph:
    ug = UserGraph()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ug.edges.append(UGEdge(int(row["src"]), int(row["dst"]), int(row["sats"]),
                                   int(row["height"]), row["txid"]))
    return ug


def segment_manifest(segments: Sequence[Segment], store: TxStore) -> list[dict]:
    out = []
    for s in segments:
        heights = [store[i].height for i in s.ordinals]
        out.append({
            "index": s.index, "label": s.label, "start": s.start, "end": s.end,
            "n_tx": len(s),
            "first_height": min(heights) if heights else None,
            "last_height": max(heights) if heights else None,
        })
    return out

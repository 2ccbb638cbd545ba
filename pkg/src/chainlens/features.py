"""Per-entity feature vectors for one segment.

Non-temporal features come straight from the user-graph edge multiset.
Temporal features are four per-entity signals, each reduced to a fixed
set of summary statistics:

* ``degree_burst``   edges touching the entity in each active block
* ``balance_burst``  net satoshi flow in each active block
* ``inter_event``    block gaps between consecutive transactions
* ``attractiveness`` per window, share of counterparties already met before
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .entities import EntityClusters
from .graphs import Segment, UserGraph, build_user_graph
from .ingest import TxStore

NON_TEMPORAL = (
    "in_degree", "out_degree", "total_degree",
    "unique_in_degree", "unique_out_degree", "unique_total_degree",
    "clustering_coefficient",
    "max_in_payment", "max_out_payment", "in_balance", "out_balance", "txn_sum",
    "first_txn_block", "last_txn_block", "active_span",
)
SIGNALS = ("degree_burst", "balance_burst", "inter_event", "attractiveness")
DEFAULT_STATS = ("max", "mean", "std")
DEFAULT_WINDOW = 144

STAT_FUNCS = {
    "max": np.max,
    "min": np.min,
    "mean": np.mean,
    "std": np.std,
    "median": np.median,
    "sum": np.sum,
    "count": len,
}


@dataclass
class FeatureMatrix:
    columns: list[str]
    entities: list[int]
    values: np.ndarray
    mask: np.ndarray | None = None  # rows x signals, True where the signal had data
    mask_columns: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.entities), len(self.columns))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")
        if self.mask is None:
            self.mask = np.zeros((len(self.entities), len(self.mask_columns)), dtype=bool)

    def __len__(self) -> int:
        return len(self.entities)

    def row(self, entity: int) -> np.ndarray:
        return self.values[self.entities.index(entity)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def as_dict(self, entity: int) -> dict[str, float]:
        return dict(zip(self.columns, self.row(entity)))


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 2 ** 53:
        return str(int(v))
    return repr(float(v))


def write_matrix(m: FeatureMatrix, path) -> None:
    """CSV with an ``entity_id`` column, plus ``<path>.mask.csv`` and ``<path>.json``."""
    path = str(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", *m.columns])
        for e, row in zip(m.entities, m.values):
            w.writerow([e, *(_fmt(v) for v in row)])
    if m.mask_columns:
        with open(path[:-4] + ".mask.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", *m.mask_columns])
            for e, row in zip(m.entities, m.mask):
                w.writerow([e, *(int(b) for b in row)])
    with open(path[:-4] + ".json", "w", encoding="utf-8") as fh:
        json.dump({**m.provenance, "columns": m.columns, "mask_columns": m.mask_columns,
                   "rows": len(m)}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_matrix(path) -> FeatureMatrix:
    path = str(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    with open(path[:-4] + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    mask_cols = meta.pop("mask_columns")
    meta.pop("columns"), meta.pop("rows")
    entities = [int(r[0]) for r in rows]
    values = np.array([[float(x) for x in r[1:]] for r in rows], dtype=float)
    mask = None
    if mask_cols:
        with open(path[:-4] + ".mask.csv", newline="", encoding="utf-8") as fh:
            mrows = list(csv.reader(fh))[1:]
        mask = np.array([[x == "1" for x in r[1:]] for r in mrows], dtype=bool).reshape(len(rows), len(mask_cols))
    return FeatureMatrix(header[1:], entities, values, mask, mask_cols, meta)


def clustering_coefficients(ug: UserGraph) -> dict[int, float]:
    """Local clustering coefficient on the undirected simple projection."""
    nbrs: dict[int, set[int]] = {v: set() for v in ug.nodes}
    for e in ug.edges:
        if e.src != e.dst:
            nbrs[e.src].add(e.dst)
            nbrs[e.dst].add(e.src)
    cc = {}
    for v, nv in nbrs.items():
        k = len(nv)
        if k < 2:
            cc[v] = 0.0
            continue
        links = sum(len(nv & nbrs[u]) for u in nv) // 2
        cc[v] = 2.0 * links / (k * (k - 1))
    return cc


def _non_temporal_row(entity, incoming, outgoing, cc):
    senders = {e.src for e in incoming}
    receivers = {e.dst for e in outgoing}
    in_bal = sum(e.sats for e in incoming)
    out_bal = sum(e.sats for e in outgoing)
    heights = [e.height for e in incoming] + [e.height for e in outgoing]
    first, last = min(heights), max(heights)
    return [
        len(incoming), len(outgoing), len(incoming) + len(outgoing),
        len(senders), len(receivers), len(senders | receivers),
        cc,
        max((e.sats for e in incoming), default=0), max((e.sats for e in outgoing), default=0),
        in_bal, out_bal, in_bal - out_bal,
        first, last, last - first,
    ]


def non_temporal_features(ug: UserGraph, seg: Segment | None = None) -> FeatureMatrix:
    """Degree, balance and activity features for every entity in ``ug``."""
    adj = ug.incident()
    cc = clustering_coefficients(ug)
    entities = sorted(adj)
    rows = [_non_temporal_row(v, *adj[v], cc[v]) for v in entities]
    prov = {} if seg is None else {"granularity": seg.granularity, "segment": seg.index,
                                   "label": seg.label}
    return FeatureMatrix(list(NON_TEMPORAL), entities, np.array(rows, dtype=float).reshape(len(rows), len(NON_TEMPORAL)),
                         provenance=prov)


def _events(entity, incoming, outgoing):
    """Distinct (height, txid) pairs the entity took part in, height-sorted."""
    return sorted({(e.height, e.txid) for e in incoming} | {(e.height, e.txid) for e in outgoing})


def _inter_event(events) -> list[int]:
    hs = [h for h, _ in events]
    return [b - a for a, b in zip(hs, hs[1:])]


def inter_event_times(entity: int, ug: UserGraph, seg: Segment | None = None) -> list[int]:
    """Block gaps between consecutive transactions of ``entity`` (either role)."""
    incoming = [e for e in ug.edges if e.dst == entity]
    outgoing = [e for e in ug.edges if e.src == entity]
    return _inter_event(_events(entity, incoming, outgoing))


def _attractiveness(entity, incoming, outgoing, window, origin):
    per_window: dict[int, set[int]] = {}
    for e in incoming:
        if e.src != entity:
            per_window.setdefault((e.height - origin) // window, set()).add(e.src)
    for e in outgoing:
        if e.dst != entity:
            per_window.setdefault((e.height - origin) // window, set()).add(e.dst)
    prior: set[int] = set()
    series = []
    for w in sorted(per_window):
        cur = per_window[w]
        series.append(len(cur & prior) / len(cur))
        prior |= cur
    return series


def attractiveness_series(entity: int, ug: UserGraph, seg: Segment | None = None,
                          window: int = DEFAULT_WINDOW, origin: int | None = None) -> list[float]:
    """Per block window, the fraction of counterparties seen in earlier windows.

    Windows are ``window`` blocks long, counted from ``origin`` (default: the
    lowest height in ``ug``). Windows without counterparties are skipped.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if origin is None:
        origin = min((e.height for e in ug.edges), default=0)
    incoming = [e for e in ug.edges if e.dst == entity]
    outgoing = [e for e in ug.edges if e.src == entity]
    return _attractiveness(entity, incoming, outgoing, window, origin)


def _bursts(entity, incoming, outgoing):
    deg: dict[int, int] = {}
    bal: dict[int, int] = {}
    for e in incoming:
        deg[e.height] = deg.get(e.height, 0) + 1
        bal[e.height] = bal.get(e.height, 0) + e.sats
    for e in outgoing:
        deg[e.height] = deg.get(e.height, 0) + 1
        bal[e.height] = bal.get(e.height, 0) - e.sats
    blocks = sorted(deg)
    return [deg[h] for h in blocks], [bal[h] for h in blocks]


@dataclass
class SeriesBundle:
    degree: list[int]
    balance: list[int]
    inter_event: list[int]
    attractiveness: list[float]

    def signal(self, name: str) -> list:
        return {"degree_burst": self.degree, "balance_burst": self.balance,
                "inter_event": self.inter_event, "attractiveness": self.attractiveness}[name]


def series_bundles(ug: UserGraph, window: int = DEFAULT_WINDOW,
                   origin: int | None = None) -> dict[int, SeriesBundle]:
    if origin is None:
        origin = min((e.height for e in ug.edges), default=0)
    out = {}
    for v, (incoming, outgoing) in ug.incident().items():
        deg, bal = _bursts(v, incoming, outgoing)
        out[v] = SeriesBundle(deg, bal, _inter_event(_events(v, incoming, outgoing)),
                              _attractiveness(v, incoming, outgoing, window, origin))
    return out


def summarize_series(series: Sequence[float], stats: Sequence[str] = DEFAULT_STATS) -> tuple[list[float], bool]:
    """Fixed-length summary of a series; an empty series gives zeros and False."""
    if not stats:
        raise ValueError("at least one statistic is required")
    unknown = [s for s in stats if s not in STAT_FUNCS]
    if unknown:
        raise ValueError(f"unknown statistics {unknown}")
    if len(series) == 0:
        return [0.0] * len(stats), False
    arr = np.asarray(series, dtype=float)
    return [float(STAT_FUNCS[s](arr)) for s in stats], True


def temporal_columns(stats: Sequence[str] = DEFAULT_STATS) -> list[str]:
    return [f"{sig}_{st}" for sig in SIGNALS for st in stats]


def assemble_dataset(store: TxStore, seg: Segment, variant: int,
                     clusters: EntityClusters | None = None, *,
                     window: int = DEFAULT_WINDOW, stats: Sequence[str] = DEFAULT_STATS,
                     ug: UserGraph | None = None) -> FeatureMatrix:
    """Feature matrix for one segment under dataset variant 1, 2 or 3.

    1: non-temporal features over raw addresses.
    2: non-temporal features over clustered entities.
    3: variant 2 plus the temporal signal summaries.
    """
    if variant not in (1, 2, 3):
        raise ValueError(f"variant must be 1, 2 or 3, got {variant}")
    if variant >= 2 and clusters is None:
        raise ValueError(f"variant {variant} requires entity clusters")
    if ug is None:
        ug = build_user_graph(store, seg, clusters if variant >= 2 else None)
    base = non_temporal_features(ug, seg)
    prov = {"granularity": seg.granularity, "segment": seg.index, "label": seg.label,
            "variant": variant}
    if variant < 3:
        base.provenance = prov
        return base
    origin = min((store[i].height for i in seg.ordinals), default=0)
    bundles = series_bundles(ug, window, origin)
    extra = np.zeros((len(base), len(SIGNALS) * len(stats)))
    mask = np.zeros((len(base), len(SIGNALS)), dtype=bool)
    for r, v in enumerate(base.entities):
        b = bundles[v]
        for s, sig in enumerate(SIGNALS):
            vals, present = summarize_series(b.signal(sig), stats)
            extra[r, s * len(stats):(s + 1) * len(stats)] = vals
            mask[r, s] = present
    prov.update(stats=list(stats), window=window)
    return FeatureMatrix(base.columns + temporal_columns(stats), base.entities,
                         np.hstack([base.values, extra]), mask,
                         [f"{sig}_present" for sig in SIGNALS], prov)

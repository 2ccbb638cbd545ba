"""Unsupervised suspect detection.

Per segment: z-score the feature matrix, run K-Means, take the cluster that
holds the most labelled-malicious entities, and flag each benign member whose
cosine distance to some malicious member is at most ``10**-epsilon``.
Across segments, ``p = flagged segments / active segments`` per entity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DetectError
from .features import FeatureMatrix

log = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_N_INIT = 1
DEFAULT_EPSILON = 12.0
EPSILON_GRID = tuple(range(21))
MAX_ITER = 300
TOL = 1e-6

STABLE_BENIGN = "stable-benign"
BEHAVIOR_CHANGER = "behavior-changer"
PERSISTENT_SUSPECT = "persistent-suspect"
HIGHLIGHT_BAND = (Fraction(3, 10), Fraction(6, 10))


def zscore_normalize(m: FeatureMatrix) -> tuple[FeatureMatrix, np.ndarray, np.ndarray, list[str]]:
    """Column-wise ``(x - mean) / std`` with the population std.

    Constant columns become zeros and are returned by name in the last slot.
    """
    if len(m) < 2:
        raise DetectError("z-score normalisation needs at least 2 rows")
    X = m.values
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flat = std == 0
    Z = np.zeros_like(X)
    Z[:, ~flat] = (X[:, ~flat] - mean[~flat]) / std[~flat]
    flagged = [c for c, f in zip(m.columns, flat) if f]
    out = FeatureMatrix(list(m.columns), list(m.entities), Z, m.mask.copy(),
                        list(m.mask_columns), dict(m.provenance))
    return out, mean, std, flagged


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    seed: object
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)
    entities: list[int] = field(default_factory=list)

    def as_map(self) -> dict[int, int]:
        return dict(zip(self.entities, self.labels.tolist()))


def _sq_dists(X, C):
    d = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", d, d)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[[idx]])[:, 0])
    return X[centers].copy()


def kmeans(X, k: int = DEFAULT_K, seed=0, max_iter: int = MAX_ITER, tol: float = TOL,
           n_init: int = 1) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding, deterministic for a given seed.

    Stops when no centroid moves by ``tol`` or more, or after ``max_iter``
    iterations. A cluster that empties is re-seeded at the point farthest
    from its current centroid. With ``n_init > 1`` the seed is split into
    that many child streams and the lowest-inertia run is kept (first on ties).
    """
    if n_init < 1:
        raise DetectError("n_init must be >= 1")
    if n_init > 1:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        # fresh copy so the caller's sequence is not advanced
        children = np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key).spawn(n_init)
        runs = [kmeans(X, k, c, max_iter, tol) for c in children]
        best = min(range(n_init), key=lambda i: (runs[i].inertia, i))
        runs[best].seed = seed
        return runs[best]
    entities: list[int] = []
    if isinstance(X, FeatureMatrix):
        entities = list(X.entities)
        X = X.values
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k < 1:
        raise DetectError("K must be >= 1")
    if n < k:
        raise DetectError(f"{n} rows cannot form K={k} clusters; use K <= {n}")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(n), labels]
        history.append(float(point_cost.sum()))
        new = np.empty_like(C)
        empty = []
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                empty.append(j)
        if empty:
            used: set[int] = set()
            for j in empty:
                for idx in np.argsort(-point_cost, kind="stable"):
                    if int(idx) not in used:
                        used.add(int(idx))
                        new[j] = X[idx]
                        point_cost[idx] = 0.0
                        break
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    d2 = _sq_dists(X, C)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    history.append(inertia)
    return ClusterAssignment(labels, C, inertia, seed, it, history, entities)


def select_malicious_cluster(labels: np.ndarray, malicious: np.ndarray, k: int | None = None) -> int | None:
    """Index of the cluster with most malicious rows (lowest index on ties).

    Returns None when no malicious row exists: the segment is skipped.
    """
    labels = np.asarray(labels)
    malicious = np.asarray(malicious, dtype=bool)
    if not malicious.any():
        return None
    k = int(labels.max()) + 1 if k is None else k
    counts = np.bincount(labels[malicious], minlength=k)
    return int(np.argmax(counts))


def _unit_rows(X):
    norms = np.sqrt((X * X).sum(axis=1))
    ok = norms > 0
    U = np.zeros_like(X)
    U[ok] = X[ok] / norms[ok, None]
    return U, ok


def nearest_cosine_distance(X, labels, chosen: int, malicious) -> dict[int, float]:
    """For each benign row of the chosen cluster: min over malicious rows of 1 - cos.

    Computed as ``0.5 * |u - v|**2`` on unit vectors so identical directions
    give exactly 0. All-zero rows are left out.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    malicious = np.asarray(malicious, dtype=bool)
    in_c = labels == chosen
    U, ok = _unit_rows(X)
    zero = np.flatnonzero(in_c & ~ok)
    if len(zero):
        log.warning("%d zero-vector rows excluded from cosine similarity", len(zero))
    mal = np.flatnonzero(in_c & malicious & ok)
    ben = np.flatnonzero(in_c & ~malicious & ok)
    if len(mal) == 0:
        return {}
    M = U[mal]
    out = {}
    for start in range(0, len(ben), 256):
        rows = ben[start:start + 256]
        diff = U[rows][:, None, :] - M[None, :, :]
        d = 0.5 * np.einsum("bmd,bmd->bm", diff, diff).min(axis=1)
        out.update(zip(rows.tolist(), d.tolist()))
    return out


def flag_suspects(X, labels, chosen: int, malicious, epsilon: float) -> set[int]:
    """Row indices of benign members flagged by ``1 - cos <= 10**-epsilon``."""
    if not 0 <= epsilon <= 20:
        raise ValueError("epsilon must lie in [0, 20]")
    thr = 10.0 ** (-epsilon)
    return {r for r, d in nearest_cosine_distance(X, labels, chosen, malicious).items() if d <= thr}


@dataclass
class EpsilonSweep:
    grid: list[float]
    counts: list[int]

    def rows(self):
        return list(zip(self.grid, self.counts))


def epsilon_sweep(X, labels, chosen: int, malicious, grid: Iterable[float] = EPSILON_GRID) -> EpsilonSweep:
    grid = sorted(float(e) for e in grid)
    if grid and (grid[0] < 0 or grid[-1] > 20):
        raise ValueError("epsilon grid must lie in [0, 20]")
    d = np.array(sorted(nearest_cosine_distance(X, labels, chosen, malicious).values()))
    counts = [int(np.searchsorted(d, 10.0 ** (-e), side="right")) for e in grid]
    assert all(a >= b for a, b in zip(counts, counts[1:])), "sweep counts must not increase"
    return EpsilonSweep(grid, counts)


def malicious_probability(flags: Mapping[int, Iterable], activity: Mapping[int, Iterable]) -> dict[int, Fraction]:
    """Exact ``p = |flagged segments| / |active segments|`` per entity."""
    flags = {k: set(v) for k, v in flags.items()}
    out = {}
    for k, segs in activity.items():
        segs = set(segs)
        if not segs:
            continue
        f = flags.get(k, set())
        if not f <= segs:
            raise DetectError(f"entity {k} flagged in segments {sorted(f - segs)} where it was not active")
        out[k] = Fraction(len(f), len(segs))
    stray = [k for k, v in flags.items() if v and k not in out]
    if stray:
        raise DetectError(f"entities {stray[:5]} flagged without recorded activity")
    return out


def classify(p: Fraction) -> str:
    if p == 0:
        return STABLE_BENIGN
    if p == 1:
        return PERSISTENT_SUSPECT
    return BEHAVIOR_CHANGER


@dataclass
class SuspectReport:
    classes: dict[str, dict[int, str]]
    probabilities: dict[str, dict[int, Fraction]]

    def members(self, granularity: str, cls: str) -> set[int]:
        return {k for k, c in self.classes[granularity].items() if c == cls}

    def band(self, granularity: str, lo: Fraction = HIGHLIGHT_BAND[0],
             hi: Fraction = HIGHLIGHT_BAND[1]) -> set[int]:
        return {k for k, p in self.probabilities[granularity].items() if 0 < p < 1 and lo <= p <= hi}

    def persistent_intersection(self) -> set[int]:
        sets = [self.members(g, PERSISTENT_SUSPECT) for g in self.classes]
        return set.intersection(*sets) if sets else set()

    def counts(self, granularity: str) -> dict[str, int]:
        cls = self.classes[granularity]
        return {c: sum(1 for v in cls.values() if v == c)
                for c in (STABLE_BENIGN, BEHAVIOR_CHANGER, PERSISTENT_SUSPECT)}


def behavior_report(p_maps: Mapping[str, Mapping[int, Fraction]]) -> SuspectReport:
    """Classify entities per granularity: p = 0, 0 < p < 1, p = 1."""
    classes = {g: {k: classify(p) for k, p in pm.items()} for g, pm in p_maps.items()}
    return SuspectReport(classes, {g: dict(pm) for g, pm in p_maps.items()})


@dataclass
class SegmentOutcome:
    index: int
    label: str
    entities: list[int]
    chosen: int | None = None
    skip_reason: str | None = None
    flagged: set[int] = field(default_factory=set)
    detected_malicious: set[int] = field(default_factory=set)
    sweep: EpsilonSweep | None = None
    assignment: ClusterAssignment | None = None
    zero_variance: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> bool:
        return self.skip_reason is not None


def detect_segment(m: FeatureMatrix, malicious: set[int], k: int = DEFAULT_K, seed=0,
                   epsilon: float = DEFAULT_EPSILON, grid: Sequence[float] = EPSILON_GRID,
                   index: int = 0, label: str = "", skip_reason: str | None = None,
                   n_init: int = DEFAULT_N_INIT) -> SegmentOutcome:
    out = SegmentOutcome(index, label, list(m.entities), skip_reason=skip_reason)
    if out.skipped:
        return out
    if len(m) < max(k, 2):
        out.skip_reason = f"{len(m)} entities, fewer than K={k}"
        return out
    Z, _, _, out.zero_variance = zscore_normalize(m)
    a = kmeans(Z, k, seed, n_init=n_init)
    a.entities = list(m.entities)
    out.assignment = a
    is_mal = np.array([e in malicious for e in m.entities], dtype=bool)
    chosen = select_malicious_cluster(a.labels, is_mal, k)
    if chosen is None:
        out.skip_reason = "no labelled-malicious entity in segment"
        return out
    out.chosen = chosen
    ents = np.asarray(m.entities)
    out.flagged = {int(ents[r]) for r in flag_suspects(Z.values, a.labels, chosen, is_mal, epsilon)}
    out.detected_malicious = {int(e) for e in ents[(a.labels == chosen) & is_mal]}
    out.sweep = epsilon_sweep(Z.values, a.labels, chosen, is_mal, grid)
    return out


def aggregate(outcomes: Sequence[SegmentOutcome], malicious: set[int]) -> tuple[dict[int, Fraction], dict[int, tuple[int, int]]]:
    """p per entity over non-skipped segments, plus (n_flagged, n_active).

    Benign entities count a segment when flagged as suspects; labelled
    entities count it when they sit in the chosen malicious cluster.
    """
    flags: dict[int, set[int]] = {}
    activity: dict[int, set[int]] = {}
    for o in outcomes:
        if o.skipped:
            continue
        for e in o.entities:
            activity.setdefault(e, set()).add(o.index)
        for e in (o.flagged | o.detected_malicious):
            flags.setdefault(e, set()).add(o.index)
    p = malicious_probability(flags, activity)
    tally = {e: (len(flags.get(e, ())), len(activity[e])) for e in p}
    return p, tally

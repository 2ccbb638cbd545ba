"""Stage runner: ingest -> cluster -> graph -> features -> fit -> detect -> report.

Every stage has a key derived from its parameters and the keys of the stages
it reads. A stage whose key matches the previous manifest, and whose recorded
outputs still hash the same, is skipped. Wall-clock timings and the lock
file live under ``<out>/.run`` so the rest of the tree is reproducible byte
for byte.
"""
from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import PipelineConfig
from .detect import SegmentOutcome, aggregate, classify, detect_segment
from .entities import (HeuristicConfig, cluster_entities, largest_entity_fraction,
                       read_partition, write_merge_log, write_partition, COLLAPSE_FRACTION)
from .errors import ChainlensError, DataError, FitError, StageError
from .features import FeatureMatrix, assemble_dataset, read_matrix, series_bundles, write_matrix
from .graphs import (GRANULARITIES, build_aggregated_graph, build_user_graph, segment_manifest,
                     segment_store, write_edge_list)
from .ingest import LabelSet, filter_analyzable, load_labels, read_transactions
from .statfit import (MODELS, histogram_from_masses, kl_divergence, log_edges, log_histogram,
                      select_best_fit)

log = logging.getLogger(__name__)

STAGES = ("fetch", "ingest", "cluster", "graph", "features", "fit", "detect", "report")
FIT_SIGNALS = ("in_degree", "out_degree", "inter_event")
RUN_DIR = ".run"
INCOMPLETE = "INCOMPLETE"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of ``out`` for the duration of a run."""
    d = out / RUN_DIR
    d.mkdir(parents=True, exist_ok=True)
    fh = open(d / "lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except OSError:
        fh.close()
        raise ChainlensError(f"another run holds the lock on {out}")
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def segment_seed(seed: int, granularity: str, variant: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(GRANULARITIES.index(granularity), variant, index))


def matrix_path(out: Path, g: str, v: int, label: str) -> Path:
    return out / "features" / g / f"v{v}" / f"{label}.csv"


@dataclass
class VariantDetection:
    granularity: str
    variant: int
    outcomes: list[SegmentOutcome]
    p: dict
    tally: dict
    malicious: set[int]


def detect_variant(matrices: list[FeatureMatrix], labels_: list[str], malicious: set[int],
                   granularity: str, variant: int, k: int, epsilon: float, seed: int,
                   skip: dict[int, str] | None = None) -> VariantDetection:
    """Run per-segment detection and the p aggregation for one (granularity, variant)."""
    skip = skip or {}
    outcomes = []
    for i, (m, lab) in enumerate(zip(matrices, labels_)):
        outcomes.append(detect_segment(m, malicious, k, segment_seed(seed, granularity, variant, i),
                                       epsilon, index=i, label=lab, skip_reason=skip.get(i)))
    p, tally = aggregate(outcomes, malicious)
    return VariantDetection(granularity, variant, outcomes, p, tally, malicious)


class Context:
    """Lazily materialised state shared by the stages of one run."""

    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._store = None
        self._labels = None
        self._clusters = None
        self._segments: dict = {}
        self._ugs: dict = {}
        self._matrices: dict = {}

    def _load_input(self):
        store = filter_analyzable(read_transactions(self.cfg.input))
        labels = load_labels(self.cfg.labels, store.book) if self.cfg.labels else LabelSet(store.book)
        self._store, self._labels = store, labels

    @property
    def store(self):
        if self._store is None:
            self._load_input()
        return self._store

    @property
    def labels(self) -> LabelSet:
        if self._labels is None:
            self._load_input()
        return self._labels

    @property
    def heuristics(self) -> HeuristicConfig:
        return HeuristicConfig.from_names(self.cfg.heuristics, growth_merge_cap=self.cfg.growth_cap)

    @property
    def clusters(self):
        if self._clusters is None:
            store = self.store
            self._clusters = read_partition(self.out / "cluster" / "entities.csv", store.book)
        return self._clusters

    def segments(self, g):
        if g not in self._segments:
            self._segments[g] = segment_store(self.store, g)
        return self._segments[g]

    def ugs(self, g, clustered: bool):
        key = (g, clustered)
        if key not in self._ugs:
            cl = self.clusters if clustered else None
            self._ugs[key] = [build_user_graph(self.store, s, cl) for s in self.segments(g)]
        return self._ugs[key]

    def matrices(self, g, v) -> list[FeatureMatrix]:
        if (g, v) not in self._matrices:
            self._matrices[(g, v)] = [read_matrix(matrix_path(self.out, g, v, s.label))
                                      for s in self.segments(g)]
        return self._matrices[(g, v)]

    def malicious_entities(self, v: int) -> set[int]:
        mal = self.labels.malicious()
        if v == 1:
            return set(mal)
        return {self.clusters.find(a) for a in mal}

    def skip_reasons(self, g: str, v: int) -> dict[int, str]:
        """Segments whose clustering collapsed are excluded for the clustered variants."""
        if v == 1:
            return {}
        out = {}
        for s in self.segments(g):
            addrs = {a for i in s.ordinals for a, _ in self.store[i].inputs + self.store[i].outputs}
            frac = largest_entity_fraction(self.clusters, addrs)
            if frac > COLLAPSE_FRACTION:
                out[s.index] = f"entity collapse: largest entity holds {frac:.1%} of segment addresses"
        return out


# -- stages ---------------------------------------------------------------------

def stage_fetch(ctx: Context) -> tuple[list[Path], list[str]]:
    cfg = ctx.cfg
    if not cfg.rpc_url:
        return [], []
    from .rpc import RPCClient, fetch_to_jsonl
    client = RPCClient(cfg.rpc_url, cfg.rpc_user, cfg.rpc_pass)
    fetch_to_jsonl(client, cfg.from_height, cfg.to_height, cfg.input, resume=True)
    return [], []


def stage_ingest(ctx: Context):
    d = ctx.out / "ingest"
    d.mkdir(parents=True, exist_ok=True)
    raw = read_transactions(ctx.cfg.input)
    store = ctx.store
    n_self = sum(1 for r in store if r.is_self_change)
    summary = {
        "input_sha256": sha256_file(ctx.cfg.input),
        "n_tx": len(raw), "n_flagged": len(raw) - len(store), "n_analyzable": len(store),
        "n_coinbase": sum(1 for r in store if r.is_coinbase), "n_self_change": n_self,
        "n_addresses": len(store.addresses()),
        "first_height": store[0].height if len(store) else None,
        "last_height": store[len(store) - 1].height if len(store) else None,
        "n_labels": len(ctx.labels), "n_malicious_labels": len(ctx.labels.malicious()),
    }
    write_json(d / "summary.json", summary)
    return [d / "summary.json"], []


def stage_cluster(ctx: Context):
    d = ctx.out / "cluster"
    d.mkdir(parents=True, exist_ok=True)
    store = ctx.store
    cl = cluster_entities(store, ctx.heuristics)
    ctx._clusters = cl
    addrs = store.addresses()
    write_partition(cl, store.book, addrs, d / "entities.csv")
    write_merge_log(cl, store.book, d / "merges.jsonl")
    groups = cl.groups(addrs)
    write_json(d / "summary.json", {
        "n_addresses": len(addrs), "n_entities": len(groups),
        "largest_entity": max((len(g) for g in groups.values()), default=0),
        "largest_fraction": largest_entity_fraction(cl, addrs),
        "n_merges": len(cl.merge_log), "n_rejected": len(cl.rejected),
        "heuristics": list(ctx.cfg.heuristics),
    })
    return [d / "entities.csv", d / "merges.jsonl", d / "summary.json"], list(cl.warnings)


def stage_graph(ctx: Context):
    outs = []
    raw_needed = 1 in ctx.cfg.variants
    for g in ctx.cfg.granularities:
        d = ctx.out / "graph" / g
        d.mkdir(parents=True, exist_ok=True)
        segs = ctx.segments(g)
        meta = segment_manifest(segs, ctx.store)
        for s, row, ug in zip(segs, meta, ctx.ugs(g, True)):
            ag = build_aggregated_graph(ctx.store, s)
            row.update(ag_tx_nodes=ag.n_tx_nodes, ag_in_edges=len(ag.in_edges),
                       ag_out_edges=len(ag.out_edges), ug_edges=len(ug.edges),
                       ug_nodes=len(ug.nodes))
            p = d / f"{s.label}.ug.csv"
            write_edge_list(ug, p)
            outs.append(p)
        if raw_needed:
            for s, ug in zip(segs, ctx.ugs(g, False)):
                p = d / f"{s.label}.raw.csv"
                write_edge_list(ug, p)
                outs.append(p)
        write_json(d / "segments.json", meta)
        outs.append(d / "segments.json")
    return outs, []


def stage_features(ctx: Context):
    outs = []
    cfg = ctx.cfg
    for g in cfg.granularities:
        for v in cfg.variants:
            d = ctx.out / "features" / g / f"v{v}"
            d.mkdir(parents=True, exist_ok=True)
            ugs = ctx.ugs(g, v >= 2)
            mats = []
            for s, ug in zip(ctx.segments(g), ugs):
                m = assemble_dataset(ctx.store, s, v, ctx.clusters if v >= 2 else None,
                                     window=cfg.window, stats=cfg.stats, ug=ug)
                m.provenance["config_sha256"] = cfg.digest()
                p = matrix_path(ctx.out, g, v, s.label)
                write_matrix(m, p)
                mats.append(m)
                outs.append(p)
                outs.append(p.with_suffix(".json"))
                if m.mask_columns:
                    outs.append(Path(str(p)[:-4] + ".mask.csv"))
            ctx._matrices[(g, v)] = mats
    return outs, []


def fit_samples(ctx: Context, g: str) -> dict[tuple[str, str, str], np.ndarray]:
    """Pooled samples keyed by (segment half, class, signal) at the entity level."""
    mal = ctx.malicious_entities(2)
    pools: dict = {}
    for s, ug in zip(ctx.segments(g), ctx.ugs(g, True)):
        adj = ug.incident()
        bundles = series_bundles(ug, ctx.cfg.window)
        for e, (inc, outg) in adj.items():
            cls = "malicious" if e in mal else "benign"
            for sig, vals in (("in_degree", [len(inc)]), ("out_degree", [len(outg)]),
                              ("inter_event", bundles[e].inter_event)):
                pools.setdefault((s.half, cls, sig), []).extend(vals)
    return {k: np.asarray(v, dtype=float) for k, v in sorted(pools.items())}


def _load_reference(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        ref = json.load(fh)
    return {k: histogram_from_masses(v["edges"], v["masses"]) for k, v in ref.items()}


def stage_fit(ctx: Context):
    outs, warnings = [], []
    x_min = ctx.cfg.x_min
    reference = _load_reference(ctx.cfg.reference)
    for g in ctx.cfg.granularities:
        d = ctx.out / "fit" / g
        d.mkdir(parents=True, exist_ok=True)
        pools = fit_samples(ctx, g)
        results = []
        halves = sorted({h for h, _, _ in pools})
        for half in halves:
            for sig in FIT_SIGNALS:
                by_cls = {c: pools.get((half, c, sig), np.zeros(0)) for c in ("malicious", "benign")}
                tails = [x[x >= x_min] for x in by_cls.values()]
                hi = max((float(t.max()) for t in tails if len(t)), default=None)
                edges = log_edges(x_min, hi if hi and hi > x_min else x_min * 10) if hi else None
                hists = {}
                for cls, x in by_cls.items():
                    row = {"half": half, "class": cls, "signal": sig, "n": int(len(x)),
                           "n_tail": int(np.sum(x >= x_min))}
                    try:
                        best, table = select_best_fit(x, MODELS, x_min)
                        row.update(best=best.to_dict(), comparison=table)
                    except FitError as exc:
                        row["error"] = str(exc)
                        warnings.append(f"{g} {half} {cls} {sig}: {exc}")
                    if edges is not None and row["n_tail"]:
                        h = log_histogram(x, x_min, edges)
                        hists[cls] = h
                        p = d / f"hist_{sig}_{half}_{cls}.csv"
                        write_csv(p, ["bin_lo", "bin_hi", "count", "mass"],
                                  [[repr(float(a)), repr(float(b)), int(c), repr(float(m))]
                                   for a, b, c, m in zip(h.edges[:-1], h.edges[1:], h.counts, h.masses)])
                        outs.append(p)
                    ref = reference.get(f"{sig}_{cls}")
                    if ref is not None and row["n_tail"]:
                        try:
                            row["kld_reference"] = kl_divergence(log_histogram(x, x_min, ref.edges), ref)
                        except ValueError as exc:
                            row["kld_reference_error"] = str(exc)
                    results.append(row)
                if len(hists) == 2:
                    results.append({"half": half, "signal": sig, "class": "malicious||benign",
                                    "kld": kl_divergence(hists["malicious"], hists["benign"])})
        write_json(d / "fits.json", {"x_min": x_min, "models": list(MODELS), "fits": results})
        outs.append(d / "fits.json")
    return outs, warnings


def stage_detect(ctx: Context):
    cfg = ctx.cfg
    outs, warnings = [], []
    store = ctx.store
    book = store.book
    addrs = store.addresses()
    members = ctx.clusters.groups(addrs)
    for g in cfg.granularities:
        segs = ctx.segments(g)
        for v in cfg.variants:
            d = ctx.out / "detect" / g / f"v{v}"
            d.mkdir(parents=True, exist_ok=True)
            res = detect_variant(ctx.matrices(g, v), [s.label for s in segs], ctx.malicious_entities(v),
                                 g, v, cfg.k, cfg.epsilon, cfg.seed, ctx.skip_reasons(g, v))
            seg_rows = []
            for o in res.outcomes:
                ss = segment_seed(cfg.seed, g, v, o.index)
                seg_rows.append({
                    "index": o.index, "label": o.label, "n_entities": len(o.entities),
                    "skip_reason": o.skip_reason, "chosen_cluster": o.chosen,
                    "n_flagged": len(o.flagged), "n_malicious_in_cluster": len(o.detected_malicious),
                    "zero_variance_columns": o.zero_variance,
                    "inertia": o.assignment.inertia if o.assignment else None,
                    "iterations": o.assignment.n_iter if o.assignment else None,
                    "seed": cfg.seed, "spawn_key": list(ss.spawn_key),
                })
                if o.skipped:
                    warnings.append(f"{g} v{v} {o.label}: skipped ({o.skip_reason})")
                if o.sweep is not None:
                    p = d / f"sweep_{o.label}.csv"
                    write_csv(p, ["epsilon", "count"], [[int(e), c] for e, c in o.sweep.rows()])
                    outs.append(p)
            write_json(d / "segments.json", {"granularity": g, "variant": v, "k": cfg.k,
                                             "epsilon": cfg.epsilon, "seed": cfg.seed,
                                             "segments": seg_rows})
            pk_rows, sus_rows = [], []
            for e in sorted(res.p):
                p = res.p[e]
                nf, na = res.tally[e]
                lab = "malicious" if e in res.malicious else "benign"
                cls = classify(p)
                pk_rows.append([e, lab, repr(float(p)), f"{p.numerator}/{p.denominator}", na, nf, cls])
                if lab == "benign" and p > 0:
                    names = [book.name(e)] if v == 1 else sorted(book.name(a) for a in members.get(e, [e]))
                    for name in names:
                        sus_rows.append([e, name, g, v, repr(float(p)), cls, na, nf])
            write_csv(d / "pk.csv", ["entity_id", "label", "p", "p_exact", "n_active", "n_flagged",
                                     "classification"], pk_rows)
            write_csv(d / "suspects.csv", ["entity_id", "address", "granularity", "variant", "p",
                                           "classification", "n_active", "n_flagged"], sus_rows)
            outs += [d / "segments.json", d / "pk.csv", d / "suspects.csv"]
    return outs, warnings


def stage_report(ctx: Context):
    from .report import report_summary
    return report_summary(ctx.out, ctx.cfg), []


_STAGE_FUNCS: dict[str, Callable] = {
    "fetch": stage_fetch, "ingest": stage_ingest, "cluster": stage_cluster, "graph": stage_graph,
    "features": stage_features, "fit": stage_fit, "detect": stage_detect, "report": stage_report,
}


def _stage_params(cfg: PipelineConfig, name: str):
    return {
        "fetch": (cfg.rpc_url, cfg.rpc_user, cfg.from_height, cfg.to_height),
        "ingest": (cfg.input,),
        "cluster": (cfg.heuristics, cfg.growth_cap),
        "graph": (cfg.granularities, 1 in cfg.variants),
        "features": (cfg.granularities, cfg.variants, cfg.stats, cfg.window),
        "fit": (cfg.granularities, cfg.x_min, cfg.window, cfg.reference and sha256_file(cfg.reference)),
        "detect": (cfg.granularities, cfg.variants, cfg.k, cfg.epsilon, cfg.seed),
        "report": (),
    }[name]


_DEPENDS = {
    "fetch": (), "ingest": ("fetch",), "cluster": ("ingest",), "graph": ("cluster",),
    "features": ("graph",), "fit": ("graph",), "detect": ("features",),
    "report": ("fit", "detect"),
}


@dataclass
class RunResult:
    manifest: dict
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def _outputs_intact(out: Path, entry: dict) -> bool:
    for rel, digest in entry.get("outputs", {}).items():
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def run_pipeline(cfg: PipelineConfig, until: str = "report") -> RunResult:
    """Run (or resume) the pipeline into ``cfg.out`` up to and including ``until``."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    if not cfg.rpc_url and not Path(cfg.input).is_file():
        raise DataError(f"input file not found: {cfg.input}")
    if cfg.labels and not Path(cfg.labels).is_file():
        raise DataError(f"labels file not found: {cfg.labels}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with run_lock(out):
        mpath = out / "manifest.json"
        old = {}
        if mpath.is_file():
            try:
                old = json.loads(mpath.read_text(encoding="utf-8")).get("stages", {})
            except ValueError:
                old = {}
        marker = out / INCOMPLETE
        marker.write_text("run in progress\n", encoding="utf-8")
        ctx = Context(cfg, out)
        result = RunResult({})
        stages: dict[str, dict] = {}
        keys: dict[str, str] = {}
        for name in STAGES[:STAGES.index(until) + 1]:
            inputs = {}
            if name == "ingest":
                inputs["input"] = sha256_file(cfg.input)
                inputs["labels"] = sha256_file(cfg.labels) if cfg.labels else ""
            key = _key(name, _stage_params(cfg, name), inputs, [keys[d] for d in _DEPENDS[name]])
            keys[name] = key
            prev = old.get(name)
            t0 = time.perf_counter()
            if prev and prev.get("key") == key and _outputs_intact(out, prev):
                stages[name] = prev
                result.skipped.append(name)
            else:
                try:
                    paths, warnings = _STAGE_FUNCS[name](ctx)
                except Exception as exc:
                    marker.write_text(f"stage: {name}\ncause: {type(exc).__name__}: {exc}\n", encoding="utf-8")
                    raise StageError(name, exc) from exc
                stages[name] = {
                    "key": key,
                    "outputs": {p.relative_to(out).as_posix(): sha256_file(p) for p in sorted(paths)},
                    "warnings": warnings,
                }
                result.ran.append(name)
            result.timings[name] = round(time.perf_counter() - t0, 4)
        manifest = {
            "tool": "chainlens", "version": __version__,
            "config_sha256": cfg.digest(), "config": [ln for ln in cfg.to_lines() if not ln.startswith("out = ")],
            "stages": stages,
            "warnings": [w for s in stages.values() for w in s["warnings"]],
        }
        write_json(mpath, manifest)
        write_json(out / RUN_DIR / "timings.json", {"ran": result.ran, "skipped": result.skipped,
                                                     "seconds": result.timings})
        marker.unlink()
        result.manifest = manifest
        return result

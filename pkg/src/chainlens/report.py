"""Summary report built only from the artifact tree of a run."""
from __future__ import annotations

import csv
import json
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .detect import (BEHAVIOR_CHANGER, EPSILON_GRID, HIGHLIGHT_BAND, PERSISTENT_SUSPECT,
                     STABLE_BENIGN, behavior_report)
from .pipeline import FIT_SIGNALS, write_csv
from .plotting import plot_distribution, plot_pk_histogram, plot_sweep

PK_BINS = [(Fraction(i, 10), Fraction(i + 1, 10)) for i in range(10)]


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def pk_bin(p: Fraction) -> int:
    """Index of the tenth-wide bin holding ``p``; p = 1 goes to the last bin."""
    return min(int(p * 10), 9)


def pk_table(rows: list[dict]) -> list[list]:
    counts = [[0, 0] for _ in PK_BINS]
    for r in rows:
        counts[pk_bin(Fraction(r["p_exact"]))][0 if r["label"] == "malicious" else 1] += 1
    return [[str(float(lo)), str(float(hi)), m, b] for (lo, hi), (m, b) in zip(PK_BINS, counts)]


def report_summary(out, cfg: PipelineConfig) -> list[Path]:
    out = Path(out)
    d = out / "report"
    figs = d / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    lines = ["chainlens run summary", ""]

    ingest = _load(out / "ingest" / "summary.json")
    cluster = _load(out / "cluster" / "summary.json")
    lines += [
        "[ingest]  source: ingest/summary.json",
        f"transactions: {ingest['n_tx']} ({ingest['n_flagged']} flagged and excluded)",
        f"addresses: {ingest['n_addresses']}; self-change txs: {ingest['n_self_change']}",
        f"labels: {ingest['n_labels']} ({ingest['n_malicious_labels']} malicious)",
        "",
        "[cluster]  source: cluster/summary.json",
        f"entities: {cluster['n_entities']} from {cluster['n_addresses']} addresses; "
        f"largest entity {cluster['largest_entity']} ({cluster['largest_fraction']:.2%})",
        "",
    ]

    persistent: dict[int, dict[str, set]] = {}
    for g in cfg.granularities:
        for v in cfg.variants:
            src = out / "detect" / g / f"v{v}"
            rows = _read_csv(src / "pk.csv")
            segs = _load(src / "segments.json")["segments"]
            suspects = _read_csv(src / "suspects.csv")
            benign = [r for r in rows if r["label"] == "benign"]
            pmap = {int(r["entity_id"]): Fraction(r["p_exact"]) for r in benign}
            rep = behavior_report({g: pmap})
            persistent.setdefault(v, {})[g] = rep.members(g, PERSISTENT_SUSPECT)
            counts = rep.counts(g)
            n_sus = sum(1 for p in pmap.values() if p > 0)
            skipped = [s for s in segs if s["skip_reason"]]
            lines += [
                f"[detect {g} variant {v}]  source: detect/{g}/v{v}/pk.csv",
                f"segments: {len(segs)} ({len(skipped)} skipped)",
                *[f"  skipped {s['label']}: {s['skip_reason']}" for s in skipped],
                f"suspect entities: {n_sus}; suspect addresses: {len({r['address'] for r in suspects})}",
                f"{STABLE_BENIGN}: {counts[STABLE_BENIGN]}; {BEHAVIOR_CHANGER}: {counts[BEHAVIOR_CHANGER]} "
                f"(p in [{float(HIGHLIGHT_BAND[0])}, {float(HIGHLIGHT_BAND[1])}]: {len(rep.band(g))}); "
                f"{PERSISTENT_SUSPECT}: {counts[PERSISTENT_SUSPECT]}",
                "",
            ]
            table = pk_table(rows)
            p = d / f"pk_{g}_v{v}.csv"
            write_csv(p, ["bin_lo", "bin_hi", "malicious", "benign"], table)
            paths.append(p)
            fig = figs / f"pk_{g}_v{v}.png"
            plot_pk_histogram([(float(lo), float(hi)) for lo, hi in PK_BINS], [r[2] for r in table],
                              [r[3] for r in table], f"p distribution, {g}, variant {v}", fig)
            paths.append(fig)

            curves = {}
            for s in segs:
                f = src / f"sweep_{s['label']}.csv"
                if f.is_file():
                    curves[s["label"]] = [int(r["count"]) for r in _read_csv(f)]
            labels_ = sorted(curves)
            p = d / f"sweep_{g}_v{v}.csv"
            write_csv(p, ["epsilon", *labels_],
                      [[e, *(curves[lab][i] for lab in labels_)] for i, e in enumerate(EPSILON_GRID)])
            paths.append(p)
            fig = figs / f"sweep_{g}_v{v}.png"
            plot_sweep(list(EPSILON_GRID), curves, f"epsilon sweep, {g}, variant {v}", fig)
            paths.append(fig)

    for v, per_g in sorted(persistent.items()):
        if len(per_g) > 1:
            both = set.intersection(*per_g.values())
            lines.append(f"persistent suspects in every granularity (variant {v}): {len(both)}")
    lines.append("")

    for g in cfg.granularities:
        src = out / "fit" / g
        fits = _load(src / "fits.json")["fits"]
        rows = []
        lines.append(f"[fit {g}]  source: fit/{g}/fits.json")
        for r in fits:
            if "best" in r:
                b = r["best"]
                prm = b["params"]
                rows.append([r["half"], r["class"], r["signal"], b["model"], prm.get("alpha", ""),
                             prm.get("lambda", ""), prm.get("mu", ""), prm.get("sigma", ""),
                             b["x_min"], b["ks"], b["n"]])
                shown = ", ".join(f"{k}={v:.4g}" for k, v in sorted(prm.items()))
                lines.append(f"  {r['half']:>3} {r['class']:<9} {r['signal']:<11} {b['model']} ({shown}), n={b['n']}")
            elif "kld" in r:
                lines.append(f"  {r['half']:>3} KLD(malicious||benign) {r['signal']}: {r['kld']:.4g}")
            elif "error" in r:
                lines.append(f"  {r['half']:>3} {r['class']:<9} {r['signal']:<11} no fit: {r['error']}")
        p = d / f"fits_{g}.csv"
        write_csv(p, ["half", "class", "signal", "model", "alpha", "lambda", "mu", "sigma",
                      "x_min", "ks", "n_tail"], rows)
        paths.append(p)
        halves = sorted({r["half"] for r in fits})
        for half in halves:
            for sig in FIT_SIGNALS:
                hists = {}
                for cls in ("malicious", "benign"):
                    f = src / f"hist_{sig}_{half}_{cls}.csv"
                    if f.is_file():
                        hr = _read_csv(f)
                        edges = [float(x["bin_lo"]) for x in hr] + [float(hr[-1]["bin_hi"])]
                        hists[cls] = (np.asarray(edges, dtype=float), [float(x["mass"]) for x in hr])
                fig = figs / f"dist_{g}_{half}_{sig}.png"
                plot_distribution(hists, f"{sig}, {g}, half {half}", sig, fig)
                paths.append(fig)
        lines.append("")

    summary = d / "summary.txt"
    summary.write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")
    paths.append(summary)
    return paths

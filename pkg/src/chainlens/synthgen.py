"""Synthetic Bitcoin-like economies with known wallet ownership.

Each wallet owns a deposit address funded by a few coinbases, then spends
UTXOs to other wallets. The change policy, address reuse and co-spends are
tunable so the generator covers both the regime where the clustering
heuristics are exact and regimes where they are not.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .entities import EntityClusters
from .errors import DataError
from .features import FeatureMatrix
from .ingest import BENIGN, MALICIOUS, AddressBook, TxRecord, TxStore, write_transactions

START_TIME = 1577836800  # 2020-01-01T00:00:00Z
START_HEIGHT = 610000
BLOCK_SECONDS = 600


@dataclass(frozen=True)
class WalletSpec:
    n_wallets: int = 50
    fresh_change_prob: float = 1.0
    self_change_prob: float = 0.0
    address_reuse_prob: float = 0.0
    fresh_receive_prob: float = 0.0
    cospend_prob: float = 0.0
    activity_sigma: float = 1.0  # spread of per-wallet activity weights (log-normal)
    value_mu: float = 13.8  # ln sats
    value_sigma: float = 1.5
    coinbase_value: int = 625_000_000
    coinbase_prob: float = 0.02
    seed_coinbases: int = 2
    fee: int = 1000
    malicious_fraction: float = 0.1
    malicious_in_degree_mult: float = 5.0
    malicious_value_mult: float = 10.0
    malicious_span: float = 0.3
    n_blocks: int = 26208  # 182 days of 10-minute blocks
    start_height: int = START_HEIGHT
    start_time: int = START_TIME

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_prob") or f.name in ("malicious_fraction", "malicious_span"):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{f.name} must lie in [0, 1], got {v}")
        for name in ("n_wallets", "n_blocks", "coinbase_value"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed_coinbases < 0 or self.fee < 0:
            raise ValueError("seed_coinbases and fee must be >= 0")
        if self.value_sigma < 0 or self.activity_sigma < 0:
            raise ValueError("sigmas must be >= 0")

    @classmethod
    def compliant(cls, n_wallets: int = 50, **kw) -> "WalletSpec":
        """Regime where multi-input plus change detection is exact."""
        base = dict(n_wallets=n_wallets, fresh_change_prob=1.0, self_change_prob=0.0,
                    address_reuse_prob=0.0, fresh_receive_prob=0.0, cospend_prob=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "WalletSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in kv.items():
            if k not in types:
                raise ValueError(f"unknown wallet spec key {k!r}")
            kw[k] = int(v) if types[k] in (int, "int") else float(v)
        return cls(**kw)

    def to_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]


def read_kv(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_wallet_spec(path) -> WalletSpec:
    return WalletSpec.from_mapping(read_kv(path))


@dataclass
class GroundTruth:
    address_wallet: dict[str, int] = field(default_factory=dict)
    wallet_labels: dict[int, str] = field(default_factory=dict)
    changes: dict[str, str] = field(default_factory=dict)  # txid -> true change address

    def label_of(self, address: str) -> str:
        return self.wallet_labels[self.address_wallet[address]]

    def wallets(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for a, w in self.address_wallet.items():
            out.setdefault(w, []).append(a)
        return out

    def partition(self) -> set[frozenset[str]]:
        return {frozenset(v) for v in self.wallets().values()}

    def malicious_addresses(self) -> list[str]:
        return [a for a, w in self.address_wallet.items() if self.wallet_labels[w] == MALICIOUS]


class _Wallet:
    def __init__(self, wid, malicious, lo, hi, send_w, recv_w):
        self.id = wid
        self.malicious = malicious
        self.lo, self.hi = lo, hi
        self.send_w, self.recv_w = send_w, recv_w
        self.addrs: list[str] = []
        self.utxos: list[tuple[str, int]] = []  # (addr, sats)

    @property
    def balance(self) -> int:
        return sum(v for _, v in self.utxos)

    def active(self, frac: float) -> bool:
        return self.lo <= frac <= self.hi


def _address(seed, wid: int, k: int) -> str:
    h = hashlib.sha256(f"addr:{seed}:{wid}:{k}".encode()).hexdigest()
    return "bc1q" + h[:38]


def _txid(seed, i: int) -> str:
    return hashlib.sha256(f"tx:{seed}:{i}".encode()).hexdigest()


def generate_economy(spec: WalletSpec, n_tx: int, seed: int = 0) -> tuple[TxStore, GroundTruth]:
    """Simulate ``n_tx`` transactions; deterministic in (spec, n_tx, seed)."""
    if n_tx < 1:
        raise ValueError("n_tx must be >= 1")
    if spec.coinbase_value <= 2 * spec.fee + 1:
        raise DataError("infeasible spec: coinbase_value cannot cover a fee and a payment")
    if spec.seed_coinbases == 0 and spec.coinbase_prob == 0:
        raise DataError("infeasible spec: no coinbases, so no wallet ever holds funds")
    rng = np.random.default_rng(seed)
    truth = GroundTruth()
    n_mal = int(round(spec.n_wallets * spec.malicious_fraction))
    mal_ids = set(rng.choice(spec.n_wallets, size=n_mal, replace=False).tolist()) if n_mal else set()
    wallets = []
    for w in range(spec.n_wallets):
        act = float(rng.lognormal(0.0, spec.activity_sigma))
        if w in mal_ids:
            lo = float(rng.uniform(0.0, 1.0 - spec.malicious_span))
            wallets.append(_Wallet(w, True, lo, lo + spec.malicious_span, act, spec.malicious_in_degree_mult))
        else:
            wallets.append(_Wallet(w, False, 0.0, 1.0, act, 1.0))
        truth.wallet_labels[w] = MALICIOUS if w in mal_ids else BENIGN

    def new_address(wal):
        a = _address(seed, wal.id, len(wal.addrs))
        wal.addrs.append(a)
        truth.address_wallet[a] = wal.id
        return a

    for wal in wallets:
        new_address(wal)  # deposit address

    book = AddressBook()
    records: list[TxRecord] = []

    def emit(inputs, outputs, coinbase=False):
        i = len(records)
        height = spec.start_height + i * spec.n_blocks // n_tx
        txid = _txid(seed, i)
        records.append(TxRecord(
            txid, height, spec.start_time + (height - spec.start_height) * BLOCK_SECONDS,
            tuple((book.intern(a), v) for a, v in inputs),
            tuple((book.intern(a), v) for a, v in outputs), is_coinbase=coinbase))
        return txid

    def coinbase(wal):
        emit((), ((wal.addrs[0], spec.coinbase_value),), coinbase=True)
        wal.utxos.append((wal.addrs[0], spec.coinbase_value))

    def pick(cands, weights):
        w = np.asarray(weights, dtype=float)
        return cands[int(rng.choice(len(cands), p=w / w.sum()))]

    def select(wal, target):
        order = rng.permutation(len(wal.utxos))
        chosen, total = [], 0
        for j in order:
            chosen.append(int(j))
            total += wal.utxos[j][1]
            if total >= target:
                break
        coins = [wal.utxos[j] for j in sorted(chosen)]
        for j in sorted(chosen, reverse=True):
            del wal.utxos[j]
        return coins, total

    for _ in range(spec.seed_coinbases):
        for wal in wallets:
            if len(records) < n_tx:
                coinbase(wal)

    min_spend = spec.fee + 2
    while len(records) < n_tx:
        frac = len(records) / n_tx
        live = [w for w in wallets if w.active(frac)]
        if not live:
            live = wallets
        funded = [w for w in live if w.balance >= min_spend]
        if not funded or rng.random() < spec.coinbase_prob:
            coinbase(pick(live, [w.send_w for w in live]))
            continue
        sender = pick(funded, [w.send_w for w in funded])
        partners = [w for w in funded if w is not sender]
        if partners and rng.random() < spec.cospend_prob:
            _cospend(sender, pick(partners, [w.send_w for w in partners]), spec, emit, new_address, select)
            continue
        mult = spec.malicious_value_mult if sender.malicious else 1.0
        amount = int(rng.lognormal(spec.value_mu, spec.value_sigma) * mult)
        amount = max(1, min(amount, sender.balance - spec.fee - 1))
        coins, total = select(sender, amount + spec.fee + 1)
        receivers = [w for w in live if w is not sender]
        if receivers:
            receiver = pick(receivers, [w.recv_w for w in receivers])
            pay_to = new_address(receiver) if rng.random() < spec.fresh_receive_prob else receiver.addrs[0]
        else:
            receiver = sender
            pay_to = new_address(sender)
        in_addrs = [a for a, _ in coins]
        change_to = None
        if rng.random() < spec.self_change_prob:
            change_to = in_addrs[0]
        else:
            reusable = [a for a in sender.addrs if a not in in_addrs and a != pay_to]
            if reusable and rng.random() < spec.address_reuse_prob:
                change_to = reusable[int(rng.integers(len(reusable)))]
            elif rng.random() < spec.fresh_change_prob:
                change_to = new_address(sender)
        if change_to is None:
            amount = total - spec.fee
        outputs = [(pay_to, amount)]
        if change_to is not None:
            outputs.append((change_to, total - amount - spec.fee))
        txid = emit(coins, outputs)
        receiver.utxos.append((pay_to, amount))
        if change_to is not None:
            truth.changes[txid] = change_to
            sender.utxos.append((change_to, total - amount - spec.fee))

    return TxStore(records, book), truth


def _cospend(a, b, spec, emit, new_address, select):
    """Two wallets co-sign one tx; each takes its own share back at a fresh address."""
    legs = []
    for wal in (a, b):
        coins, total = select(wal, spec.fee + 2)
        legs.append((wal, coins, total))
    half = spec.fee // 2
    outs = []
    inputs = []
    for k, (wal, coins, total) in enumerate(legs):
        inputs.extend(coins)
        fee_share = half if k == 0 else spec.fee - half
        outs.append((wal, new_address(wal), total - fee_share))
    emit(inputs, [(addr, v) for _, addr, v in outs])
    for wal, addr, v in outs:
        wal.utxos.append((addr, v))


def write_economy(store: TxStore, truth: GroundTruth, out_dir) -> dict[str, Path]:
    """txs.jsonl, truth.csv, changes.csv and labels.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / n for k, n in (("txs", "txs.jsonl"), ("truth", "truth.csv"),
                                     ("changes", "changes.csv"), ("labels", "labels.csv"))}
    write_transactions(store, paths["txs"])
    with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "wallet", "label"])
        for a, wid in truth.address_wallet.items():
            w.writerow([a, wid, truth.wallet_labels[wid]])
    with open(paths["changes"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["txid", "change_address"])
        w.writerows(truth.changes.items())
    with open(paths["labels"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "label"])
        for a in truth.malicious_addresses():
            w.writerow([a, MALICIOUS])
    return paths


def read_truth(path) -> GroundTruth:
    gt = GroundTruth()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            wid = int(row["wallet"])
            gt.address_wallet[row["address"]] = wid
            gt.wallet_labels[wid] = row["label"]
    return gt


@dataclass(frozen=True)
class ClusteringMetrics:
    precision: float
    recall: float
    f1: float
    ari: float
    n_addresses: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _pairs(n):
    return n * (n - 1) // 2


def evaluate_clustering(predicted: EntityClusters, truth: GroundTruth, book: AddressBook) -> ClusteringMetrics:
    """Pairwise precision/recall/F1 and the adjusted Rand index over truth's addresses."""
    missing = [a for a in truth.address_wallet if a not in book or book.get(a) >= len(predicted)]
    if missing:
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        raise DataError(f"{len(missing)} addresses not covered by the clustering: {', '.join(missing[:5])}{more}")
    cont: dict[tuple[int, int], int] = {}
    rows: dict[int, int] = {}
    cols: dict[int, int] = {}
    for a, w in truth.address_wallet.items():
        e = predicted.find(book.get(a))
        cont[(e, w)] = cont.get((e, w), 0) + 1
        rows[e] = rows.get(e, 0) + 1
        cols[w] = cols.get(w, 0) + 1
    n = len(truth.address_wallet)
    tp = sum(_pairs(c) for c in cont.values())
    pred_pairs = sum(_pairs(c) for c in rows.values())
    true_pairs = sum(_pairs(c) for c in cols.values())
    precision = tp / pred_pairs if pred_pairs else 1.0
    recall = tp / true_pairs if true_pairs else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = _pairs(n)
    expected = pred_pairs * true_pairs / total if total else 0.0
    max_index = (pred_pairs + true_pairs) / 2
    if math.isclose(max_index, expected):
        ari = 1.0
    else:
        ari = (tp - expected) / (max_index - expected)
    return ClusteringMetrics(precision, recall, f1, ari, n)


def plant_clones(matrices: Sequence[FeatureMatrix], sources: Sequence[int],
                 first_id: int) -> tuple[list[FeatureMatrix], dict[int, int]]:
    """Append a copy of each source entity's row under a new id, in every segment it appears.

    Returns the new matrices and the clone -> source mapping.
    """
    clone_of = {first_id + i: s for i, s in enumerate(sources)}
    out = []
    for m in matrices:
        idx = {e: r for r, e in enumerate(m.entities)}
        add = [(c, idx[s]) for c, s in clone_of.items() if s in idx]
        if not add:
            out.append(m)
            continue
        rows = [r for _, r in add]
        out.append(FeatureMatrix(
            list(m.columns), list(m.entities) + [c for c, _ in add],
            np.vstack([m.values, m.values[rows]]),
            np.vstack([m.mask, m.mask[rows]]) if m.mask.size else m.mask,
            list(m.mask_columns), dict(m.provenance)))
    return out, clone_of

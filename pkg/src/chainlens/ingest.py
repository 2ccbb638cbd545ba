"""Transaction records, the address interner, JSONL parsing and label loading.

The JSONL schema carries one transaction per line::

    {"txid": "<64 hex>", "height": 612345, "time": 1577836800,
     "coinbase": false, "op_return": false, "script_hash_only": false,
     "inputs": [{"addr": "1A...", "sats": 5000}],
     "outputs": [{"addr": "1B...", "sats": 4000}]}

Block height is the unit of time for everything downstream; the wall-clock
``time`` field is only used to cut segments.
"""
from __future__ import annotations

import bisect
import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .errors import LabelError, ParseError

MALICIOUS = "malicious"
BENIGN = "benign"
_LABELS = (MALICIOUS, BENIGN)

_TXID_RE = re.compile(r"^[0-9a-fA-F]{64}$")
_FIELDS = ("txid", "height", "time", "coinbase", "op_return", "script_hash_only", "inputs", "outputs")


class AddressBook:
    """Bijective interning of address strings to dense integer handles."""

    def __init__(self, addresses: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        for a in addresses:
            self.intern(a)

    def intern(self, address: str) -> int:
        aid = self._ids.get(address)
        if aid is None:
            aid = len(self._names)
            self._ids[address] = aid
            self._names.append(address)
        return aid

    def get(self, address: str) -> int | None:
        return self._ids.get(address)

    def name(self, aid: int) -> str:
        return self._names[aid]

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, address: str) -> bool:
        return address in self._ids


@dataclass(frozen=True)
class TxRecord:
    txid: str
    height: int
    time: int
    inputs: tuple[tuple[int, int], ...]
    outputs: tuple[tuple[int, int], ...]
    is_coinbase: bool = False
    has_op_return: bool = False
    has_script_hash_only_output: bool = False

    @property
    def input_addresses(self) -> tuple[int, ...]:
        """Distinct input addresses in first-occurrence order."""
        return tuple(dict.fromkeys(a for a, _ in self.inputs))

    @property
    def output_addresses(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(a for a, _ in self.outputs))

    @property
    def input_value(self) -> int:
        return sum(v for _, v in self.inputs)

    @property
    def output_value(self) -> int:
        return sum(v for _, v in self.outputs)

    @property
    def fee(self) -> int:
        return 0 if self.is_coinbase else self.input_value - self.output_value

    @property
    def is_self_change(self) -> bool:
        return bool(set(self.input_addresses) & set(self.output_addresses))

    @property
    def is_flagged(self) -> bool:
        return self.has_op_return or self.has_script_hash_only_output


class FirstSeen(NamedTuple):
    height: int
    ordinal: int
    role: str  # "input" or "output"


class TxStore:
    """Immutable, height-ordered transaction sequence plus per-address history.

    Records are stably sorted by height, so the intra-block order is the
    order in which the records were supplied. ``ordinal`` is the position
    of a transaction in that sequence.
    """

    def __init__(self, records: Iterable[TxRecord], book: AddressBook | None = None):
        self.records: tuple[TxRecord, ...] = tuple(sorted(records, key=lambda r: r.height))
        self.book = book if book is not None else AddressBook()
        self._ordinal = {r.txid: i for i, r in enumerate(self.records)}
        self.first_seen: dict[int, FirstSeen] = {}
        self.receipts: dict[int, list[int]] = {}
        self.self_change_seen: dict[int, int] = {}
        self._build_index()

    def _build_index(self) -> None:
        first = self.first_seen
        for i, tx in enumerate(self.records):
            for a, _ in tx.inputs:
                if a not in first:
                    first[a] = FirstSeen(tx.height, i, "input")
            for a in tx.output_addresses:
                if a not in first:
                    first[a] = FirstSeen(tx.height, i, "output")
                self.receipts.setdefault(a, []).append(i)
            if tx.is_self_change:
                for a in (*tx.input_addresses, *tx.output_addresses):
                    self.self_change_seen.setdefault(a, i)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TxRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> TxRecord:
        return self.records[i]

    def ordinal(self, txid: str) -> int:
        return self._ordinal[txid]

    def addresses(self) -> list[int]:
        """Address ids occurring in this store, ascending."""
        return sorted(self.first_seen)

    def receipts_before(self, address: int, ordinal: int) -> int:
        """Number of earlier transactions that paid ``address``."""
        return bisect.bisect_left(self.receipts.get(address, ()), ordinal)

    def receipts_after(self, address: int, ordinal: int) -> int:
        r = self.receipts.get(address, ())
        return len(r) - bisect.bisect_right(r, ordinal)

    def output_receipt_count(self, address: int) -> int:
        return len(self.receipts.get(address, ()))


def _int_field(obj, key, lineno, minimum=0):
    v = obj.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ParseError(f"field '{key}' must be an integer", lineno)
    if v < minimum:
        raise ParseError(f"field '{key}' is negative ({v})", lineno)
    return v


def _bool_field(obj, key, lineno):
    v = obj.get(key, False)
    if not isinstance(v, bool):
        raise ParseError(f"field '{key}' must be a boolean", lineno)
    return v


def _legs(obj, key, lineno, book):
    raw = obj.get(key)
    if not isinstance(raw, list):
        raise ParseError(f"field '{key}' must be a list", lineno)
    legs = []
    for leg in raw:
        if not isinstance(leg, dict) or not isinstance(leg.get("addr"), str) or not leg["addr"]:
            raise ParseError(f"every entry of '{key}' needs a non-empty 'addr' string", lineno)
        legs.append((book.intern(leg["addr"]), _int_field(leg, "sats", lineno)))
    return tuple(legs)


def parse_record(obj: dict, book: AddressBook, lineno: int | None = None) -> TxRecord:
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", lineno)
    txid = obj.get("txid")
    if not isinstance(txid, str) or not _TXID_RE.match(txid):
        raise ParseError("field 'txid' must be 64 hex characters", lineno)
    rec = TxRecord(
        txid=txid.lower(),
        height=_int_field(obj, "height", lineno),
        time=_int_field(obj, "time", lineno),
        inputs=_legs(obj, "inputs", lineno, book),
        outputs=_legs(obj, "outputs", lineno, book),
        is_coinbase=_bool_field(obj, "coinbase", lineno),
        has_op_return=_bool_field(obj, "op_return", lineno),
        has_script_hash_only_output=_bool_field(obj, "script_hash_only", lineno),
    )
    if not rec.outputs:
        raise ParseError("transaction has no outputs", lineno)
    if rec.is_coinbase and rec.inputs:
        raise ParseError("coinbase transaction must have no inputs", lineno)
    if not rec.is_coinbase and rec.input_value < rec.output_value:
        raise ParseError(
            f"outputs ({rec.output_value}) exceed inputs ({rec.input_value})", lineno)
    return rec


def parse_transactions(lines: Iterable[str], book: AddressBook | None = None) -> TxStore:
    """Parse JSONL lines into a :class:`TxStore`. Blank lines are ignored."""
    book = book if book is not None else AddressBook()
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        rec = parse_record(obj, book, lineno)
        if rec.txid in seen:
            raise ParseError(f"duplicate txid {rec.txid}", lineno)
        seen.add(rec.txid)
        records.append(rec)
    return TxStore(records, book)


def read_transactions(path: str | Path, book: AddressBook | None = None) -> TxStore:
    with open(path, encoding="utf-8") as fh:
        return parse_transactions(fh, book)


def record_to_dict(rec: TxRecord, book: AddressBook) -> dict:
    return {
        "txid": rec.txid,
        "height": rec.height,
        "time": rec.time,
        "coinbase": rec.is_coinbase,
        "op_return": rec.has_op_return,
        "script_hash_only": rec.has_script_hash_only_output,
        "inputs": [{"addr": book.name(a), "sats": v} for a, v in rec.inputs],
        "outputs": [{"addr": book.name(a), "sats": v} for a, v in rec.outputs],
    }


def dumps_record(obj: dict) -> str:
    """Canonical single-line JSON: schema key order, no whitespace."""
    return json.dumps({k: obj[k] for k in _FIELDS}, separators=(",", ":"))


def serialize_transactions(store: TxStore) -> Iterator[str]:
    for rec in store:
        yield dumps_record(record_to_dict(rec, store.book)) + "\n"


def write_transactions(store: TxStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(serialize_transactions(store))


def filter_analyzable(store: TxStore) -> TxStore:
    """Drop op_return and script-hash-only transactions; the index is rebuilt."""
    return TxStore((r for r in store if not r.is_flagged), store.book)


class LabelSet:
    """Ground-truth tags keyed by address id. Absent addresses are unknown."""

    def __init__(self, book: AddressBook, labels: dict[int, str] | None = None):
        self.book = book
        self._labels: dict[int, str] = {}
        for aid, lab in (labels or {}).items():
            self.add(aid, lab)

    def add(self, aid: int, label: str) -> None:
        if label not in _LABELS:
            raise LabelError(f"unknown label {label!r}")
        prev = self._labels.get(aid)
        if prev is not None and prev != label:
            raise LabelError(
                f"address {self.book.name(aid)} labelled both {prev} and {label}")
        self._labels[aid] = label

    def get(self, aid: int) -> str | None:
        return self._labels.get(aid)

    def lookup(self, address: str) -> str | None:
        aid = self.book.get(address)
        return None if aid is None else self._labels.get(aid)

    def is_malicious(self, aid: int) -> bool:
        return self._labels.get(aid) == MALICIOUS

    def malicious(self) -> set[int]:
        return {a for a, lab in self._labels.items() if lab == MALICIOUS}

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, aid: int) -> bool:
        return aid in self._labels


def load_labels(path: str | Path, book: AddressBook) -> LabelSet:
    """Read an ``address,label`` CSV. New addresses are interned into ``book``."""
    labels = LabelSet(book)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return labels
        if [h.strip() for h in header] != ["address", "label"]:
            raise LabelError(f"{path}: expected header 'address,label', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise LabelError(f"{path}:{row_no}: expected 2 columns")
            address, label = row[0].strip(), row[1].strip().lower()
            if label not in _LABELS:
                raise LabelError(f"{path}:{row_no}: unknown label {row[1]!r}")
            labels.add(book.intern(address), label)
    return labels

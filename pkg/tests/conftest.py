"""Shared fixture builders: tiny hand-written stores and cached synthetic economies."""
import hashlib
import json
from functools import lru_cache

import pytest

from chainlens.ingest import parse_transactions
from chainlens.synthgen import START_TIME, WalletSpec, generate_economy

BASE_HEIGHT = 100


def txid(n) -> str:
    return hashlib.sha256(f"fixture:{n}".encode()).hexdigest()


def _legs(items, default):
    out = []
    for it in items:
        if isinstance(it, str):
            out.append({"addr": it, "sats": default})
        else:
            out.append({"addr": it[0], "sats": it[1]})
    return out


def rec(n, ins=(), outs=(), height=None, time=None, coinbase=False, op_return=False,
        script_hash_only=False, in_sats=100, out_sats=10) -> dict:
    """One JSONL-schema record. Legs are 'addr' or ('addr', sats)."""
    h = BASE_HEIGHT + n if height is None else height
    return {
        "txid": txid(n), "height": h,
        "time": START_TIME + (h - BASE_HEIGHT) * 600 if time is None else time,
        "coinbase": coinbase, "op_return": op_return, "script_hash_only": script_hash_only,
        "inputs": _legs(ins, in_sats), "outputs": _legs(outs, out_sats),
    }


def store_of(*records):
    return parse_transactions(json.dumps(r) for r in records)


@lru_cache(maxsize=None)
def economy(n_wallets, n_tx, seed, **kw):
    return generate_economy(WalletSpec(n_wallets=n_wallets, **kw), n_tx, seed)


@pytest.fixture(scope="session")
def small_economy():
    return economy(20, 1000, 7)


# acceptance results, filled by tests/test_acceptance.py and echoed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Minimal Bitcoin Core JSON-RPC client and block-to-JSONL conversion."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterator

import requests

from .errors import ChainlensError, FetchError, RPCAuthError
from .ingest import dumps_record

log = logging.getLogger(__name__)

SATS_PER_BTC = Decimal(100_000_000)


class RPCError(ChainlensError):
    """The node answered with a JSON-RPC error object."""

    def __init__(self, method, error):
        self.error = error
        super().__init__(f"{method}: {error}")


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 5
    backoff: float = 0.5
    max_backoff: float = 8.0


class RPCClient:
    def __init__(self, url: str, user: str | None = None, password: str | None = None,
                 timeout: float = 30.0, session: requests.Session | None = None):
        self.url = url
        self.auth = (user, password or "") if user is not None else None
        self.timeout = timeout
        self.session = session or requests.Session()
        self._id = 0

    def call(self, method: str, *params):
        self._id += 1
        payload = {"jsonrpc": "1.0", "id": self._id, "method": method, "params": list(params)}
        resp = self.session.post(self.url, json=payload, auth=self.auth, timeout=self.timeout)
        if resp.status_code in (401, 403):
            raise RPCAuthError(f"authentication rejected by {self.url} (HTTP {resp.status_code})")
        try:
            body = resp.json()
        except ValueError:
            resp.raise_for_status()
            raise RPCError(method, f"non-JSON response (HTTP {resp.status_code})") from None
        if body.get("error"):
            raise RPCError(method, body["error"])
        return body["result"]

    def getblockhash(self, height: int) -> str:
        return self.call("getblockhash", height)

    def getblock(self, blockhash: str, verbosity: int = 2) -> dict:
        return self.call("getblock", blockhash, verbosity)

    def getrawtransaction(self, txid: str) -> dict:
        return self.call("getrawtransaction", txid, True)


def _retrying(fn: Callable, policy: RetryPolicy):
    delay = policy.backoff
    for attempt in range(1, policy.attempts + 1):
        try:
            return fn()
        except (RPCAuthError, RPCError):
            raise
        except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
            if attempt == policy.attempts:
                raise
            log.warning("RPC attempt %d failed (%s); retrying in %.1fs", attempt, exc, delay)
            time.sleep(delay)
            delay = min(delay * 2, policy.max_backoff)


def fetch_blocks(client: RPCClient, lo: int, hi: int,
                 retry: RetryPolicy = RetryPolicy()) -> Iterator[dict]:
    """Yield verbosity-2 blocks for heights ``lo..hi`` inclusive, ascending."""
    if lo > hi:
        raise ValueError(f"invalid height range: {lo} > {hi}")
    if lo < 0:
        raise ValueError("heights must be non-negative")
    last = None
    for h in range(lo, hi + 1):
        try:
            block = _retrying(lambda: client.getblock(client.getblockhash(h), 2), retry)
        except (requests.RequestException, OSError) as exc:
            raise FetchError(f"giving up on block {h}: {exc}", last_height=last) from exc
        yield block
        last = h


def to_sats(value) -> int:
    return int((Decimal(str(value)) * SATS_PER_BTC).to_integral_value())


def _script_address(spk: dict) -> str | None:
    if spk.get("address"):
        return spk["address"]
    addrs = spk.get("addresses") or []
    return addrs[0] if len(addrs) == 1 else None


class PrevoutResolver:
    """Maps outpoints to (address, sats), from converted blocks or the node."""

    def __init__(self, client: RPCClient | None = None):
        self.client = client
        self._cache: dict[tuple[str, int], tuple[str, int]] = {}

    def remember(self, txid: str, n: int, address: str, sats: int) -> None:
        self._cache[(txid, n)] = (address, sats)

    def resolve(self, vin: dict) -> tuple[str, int]:
        key = (vin["txid"], vin["vout"])
        if "prevout" in vin:  # verbosity-3 nodes embed the spent output
            p = vin["prevout"]
            addr = _script_address(p.get("scriptPubKey", {})) or f"unresolved:{key[0]}:{key[1]}"
            return addr, to_sats(p["value"])
        hit = self._cache.pop(key, None)
        if hit is not None:
            return hit
        if self.client is None:
            raise ChainlensError(f"cannot resolve outpoint {key[0]}:{key[1]}")
        prev = self.client.getrawtransaction(key[0])
        out = prev["vout"][key[1]]
        addr = _script_address(out.get("scriptPubKey", {})) or f"unresolved:{key[0]}:{key[1]}"
        return addr, to_sats(out["value"])


def block_to_records(block: dict, resolver: PrevoutResolver) -> list[dict]:
    """Convert one verbosity-2 block into JSONL-schema dicts."""
    records = []
    for tx in block["tx"]:
        txid = tx["txid"]
        coinbase = any("coinbase" in vin for vin in tx["vin"])
        inputs = []
        if not coinbase:
            for vin in tx["vin"]:
                addr, sats = resolver.resolve(vin)
                inputs.append({"addr": addr, "sats": sats})
        outputs = []
        op_return = script_hash_only = False
        for vout in tx["vout"]:
            spk = vout.get("scriptPubKey", {})
            sats = to_sats(vout["value"])
            addr = _script_address(spk)
            if spk.get("type") == "nulldata":
                op_return = True
            elif addr is None:
                script_hash_only = True
            if addr is None:
                addr = f"unresolved:{txid}:{vout['n']}"
            resolver.remember(txid, vout["n"], addr, sats)
            outputs.append({"addr": addr, "sats": sats})
        records.append({
            "txid": txid, "height": block["height"], "time": block["time"],
            "coinbase": coinbase, "op_return": op_return, "script_hash_only": script_hash_only,
            "inputs": inputs, "outputs": outputs,
        })
    return records


def last_height_in(path: Path) -> int | None:
    last = None
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    last = json.loads(line)["height"]
    return last


def fetch_to_jsonl(client: RPCClient, lo: int, hi: int, path: str | Path,
                   retry: RetryPolicy = RetryPolicy(), resume: bool = False) -> int:
    """Append converted blocks to ``path``; returns the number of blocks written.

    Each block's lines are written and flushed together, so after a failure
    ``FetchError.last_height + 1`` is a safe place to resume.
    """
    path = Path(path)
    if resume:
        done = last_height_in(path)
        if done is not None:
            lo = max(lo, done + 1)
    if lo > hi:
        return 0
    resolver = PrevoutResolver(client)
    written = 0
    with open(path, "a" if resume else "w", encoding="utf-8", newline="\n") as fh:
        for block in fetch_blocks(client, lo, hi, retry):
            lines = [dumps_record(r) + "\n" for r in block_to_records(block, resolver)]
            fh.writelines(lines)
            fh.flush()
            written += 1
    return written

"""Block fetching against an in-process JSON-RPC stub standing in for a node."""
import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from chainlens.errors import FetchError, RPCAuthError
from chainlens.ingest import read_transactions
from chainlens.rpc import (PrevoutResolver, RetryPolicy, RPCClient, block_to_records, fetch_blocks,
                           fetch_to_jsonl, to_sats)

FAST = RetryPolicy(attempts=2, backoff=0.01, max_backoff=0.01)


def _hex(tag, n):
    return (f"{tag}{n:x}".encode().hex() * 64)[:64]


def make_chain(n_blocks):
    """Regtest-like chain: every block has a coinbase; from block 1 on it also spends the previous coinbase."""
    blocks = []
    for h in range(n_blocks):
        cb = {"txid": _hex("cb", h), "vin": [{"coinbase": "03abcd", "sequence": 0}],
              "vout": [{"n": 0, "value": 50.0, "scriptPubKey": {"type": "witness_v0_keyhash",
                                                                 "address": f"miner{h}"}}]}
        txs = [cb]
        if h >= 1:
            txs.append({"txid": _hex("sp", h),
                        "vin": [{"txid": _hex("cb", h - 1), "vout": 0}],
                        "vout": [{"n": 0, "value": 30.0, "scriptPubKey": {"address": f"pay{h}"}},
                                 {"n": 1, "value": 19.9999, "scriptPubKey": {"address": f"chg{h}"}},
                                 {"n": 2, "value": 0.0, "scriptPubKey": {"type": "nulldata"}}]})
        blocks.append({"hash": _hex("bh", h), "height": h, "time": 1577836800 + 600 * h, "tx": txs})
    return blocks


class Node:
    def __init__(self, blocks, user="u", password="p", fail_from=None):
        self.blocks = blocks
        self.by_hash = {b["hash"]: b for b in blocks}
        self.txs = {t["txid"]: t for b in blocks for t in b["tx"]}
        self.auth = "Basic " + base64.b64encode(f"{user}:{password}".encode()).decode()
        self.fail_from = fail_from
        self.calls = []


def serve(node):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):
            if self.headers.get("Authorization") != node.auth:
                self.send_response(401)
                self.end_headers()
                return
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            method, params = body["method"], body["params"]
            node.calls.append(method)
            if method == "getblockhash" and node.fail_from is not None and params[0] >= node.fail_from:
                self.send_response(503)
                self.end_headers()
                return
            if method == "getblockhash":
                result = node.blocks[params[0]]["hash"] if params[0] < len(node.blocks) else None
                err = None if result else {"code": -8, "message": "Block height out of range"}
            elif method == "getblock":
                result, err = node.by_hash[params[0]], None
            elif method == "getrawtransaction":
                result, err = node.txs[params[0]], None
            else:
                result, err = None, {"code": -32601, "message": "Method not found"}
            data = json.dumps({"result": result, "error": err, "id": body["id"]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    srv = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv, f"http://127.0.0.1:{srv.server_address[1]}"


@pytest.fixture
def node():
    n = Node(make_chain(10))
    srv, url = serve(n)
    n.url = url
    yield n
    srv.shutdown()


def test_single_height(node):
    blocks = list(fetch_blocks(RPCClient(node.url, "u", "p"), 4, 4, FAST))
    assert [b["height"] for b in blocks] == [4]


def test_invalid_range(node):
    with pytest.raises(ValueError):
        list(fetch_blocks(RPCClient(node.url, "u", "p"), 5, 4, FAST))


def test_ten_blocks_to_jsonl(node, tmp_path):
    out = tmp_path / "txs.jsonl"
    n = fetch_to_jsonl(RPCClient(node.url, "u", "p"), 0, 9, out, FAST)
    assert n == 10
    store = read_transactions(out)
    coinbases = [r for r in store if r.is_coinbase]
    assert len(coinbases) == 10 and all(not r.inputs for r in coinbases)
    spends = [r for r in store if not r.is_coinbase]
    assert all(r.has_op_return for r in spends)
    assert all(store.book.name(r.inputs[0][0]) == f"miner{r.height - 1}" for r in spends)
    assert spends[0].inputs[0][1] == 5_000_000_000


def test_refetch_is_byte_identical(node, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    fetch_to_jsonl(RPCClient(node.url, "u", "p"), 0, 9, a, FAST)
    fetch_to_jsonl(RPCClient(node.url, "u", "p"), 0, 9, b, FAST)
    assert a.read_bytes() == b.read_bytes()


def test_auth_failure_is_distinct(node):
    with pytest.raises(RPCAuthError):
        list(fetch_blocks(RPCClient(node.url, "u", "wrong"), 0, 0, FAST))


def test_network_failure_carries_last_height_and_resumes(tmp_path):
    n = Node(make_chain(10), fail_from=6)
    srv, url = serve(n)
    out = tmp_path / "txs.jsonl"
    try:
        with pytest.raises(FetchError) as ei:
            fetch_to_jsonl(RPCClient(url, "u", "p"), 0, 9, out, FAST)
        assert ei.value.last_height == 5
        n.fail_from = None
        wrote = fetch_to_jsonl(RPCClient(url, "u", "p"), 0, 9, out, FAST, resume=True)
        assert wrote == 4
    finally:
        srv.shutdown()
    full = tmp_path / "full.jsonl"
    n2 = Node(make_chain(10))
    srv2, url2 = serve(n2)
    try:
        fetch_to_jsonl(RPCClient(url2, "u", "p"), 0, 9, full, FAST)
    finally:
        srv2.shutdown()
    assert out.read_bytes() == full.read_bytes()


def test_unreachable_endpoint():
    with pytest.raises(FetchError) as ei:
        list(fetch_blocks(RPCClient("http://127.0.0.1:9", "u", "p", timeout=0.5), 0, 0, FAST))
    assert ei.value.last_height is None


def test_block_conversion_flags_unresolvable_output():
    block = {"height": 3, "time": 1577836800, "tx": [
        {"txid": _hex("cb", 3), "vin": [{"coinbase": "00"}],
         "vout": [{"n": 0, "value": 1.5, "scriptPubKey": {"type": "multisig"}}]}]}
    (r,) = block_to_records(block, PrevoutResolver())
    assert r["coinbase"] and r["script_hash_only"] and not r["op_return"]
    assert r["outputs"][0]["sats"] == 150_000_000


def test_to_sats_exact():
    assert to_sats(0.1) == 10_000_000
    assert to_sats("20.99999999") == 2_099_999_999

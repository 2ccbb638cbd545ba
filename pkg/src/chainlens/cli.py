"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig
from .errors import ChainlensError, DataError, StageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3
PIPELINE_COMMANDS = ("ingest", "cluster", "graph", "features", "fit", "detect", "report", "run")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pipeline_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--in", dest="input", help="transactions JSONL")
    p.add_argument("--labels", help="labels CSV (address,label)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--granularity", action="append", help="15Days or 1Month (repeat or comma-separate)")
    p.add_argument("--variant", action="append", help="1, 2 or 3 (repeat or comma-separate)")
    p.add_argument("--heuristics", help="comma list, e.g. multi_input,change")
    p.add_argument("--window", type=int, help="attractiveness window in blocks")
    p.add_argument("--stats", help="comma list of summary statistics")
    p.add_argument("--x-min", dest="x_min", type=float)
    p.add_argument("--reference", help="JSON of reference histograms for cross-chain KLD")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _rpc_flags(p):
    p.add_argument("--rpc-url", dest="rpc_url")
    p.add_argument("--rpc-user", dest="rpc_user")
    p.add_argument("--rpc-pass", dest="rpc_pass")
    p.add_argument("--from-height", dest="from_height", type=int)
    p.add_argument("--to-height", dest="to_height", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="chainlens", description="Bitcoin transaction-graph forensics.")
    ap.add_argument("--version", action="version", version=f"chainlens {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fetch", help="download blocks over JSON-RPC into JSONL")
    _rpc_flags(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="JSONL file to write (appended on resume)")
    p.add_argument("--no-resume", action="store_true")

    for name in PIPELINE_COMMANDS:
        helps = {"run": "full pipeline", "ingest": "validate transactions and labels"}
        p = sub.add_parser(name, help=helps.get(name, f"run the pipeline through the {name} stage"))
        _pipeline_flags(p)
        if name == "run":
            _rpc_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic economy with ground truth")
    p.add_argument("--spec", help="wallet spec key = value file")
    p.add_argument("--wallets", type=int)
    p.add_argument("--n-tx", dest="n_tx", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("config", help="print configuration")
    p.add_argument("--defaults", action="store_true", help="print all defaults")
    p.add_argument("--config")
    return ap


def _split(values):
    out = []
    for v in values or []:
        out.extend(x.strip() for x in v.split(",") if x.strip())
    return out


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    kv = {}
    for key in ("input", "labels", "out", "seed", "epsilon", "k", "heuristics", "window", "stats",
                "x_min", "reference", "rpc_url", "rpc_user", "rpc_pass", "from_height", "to_height"):
        v = getattr(args, key, None)
        if v is not None:
            kv[key] = v
    if getattr(args, "granularity", None):
        kv["granularities"] = _split(args.granularity)
    if getattr(args, "variant", None):
        kv["variants"] = _split(args.variant)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        return PipelineConfig.from_mapping(kv, base=cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline
    cfg = resolve_config(args)
    until = "report" if args.command == "run" else args.command
    res = run_pipeline(cfg, until=until)
    for w in res.manifest["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"ran: {', '.join(res.ran) or '-'}; skipped (unchanged): {', '.join(res.skipped) or '-'}")
    print(f"artifacts in {cfg.out}")
    if until == "report":
        print((Path(cfg.out) / "report" / "summary.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _cmd_fetch(args) -> int:
    from .rpc import RPCClient, fetch_to_jsonl
    cfg = resolve_config(args)
    if not cfg.rpc_url:
        raise UsageError("fetch needs --rpc-url (or rpc_url in --config)")
    client = RPCClient(cfg.rpc_url, cfg.rpc_user, cfg.rpc_pass)
    n = fetch_to_jsonl(client, cfg.from_height, cfg.to_height, args.out, resume=not args.no_resume)
    print(f"wrote {n} blocks to {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synthgen import WalletSpec, generate_economy, load_wallet_spec, write_economy
    spec = load_wallet_spec(args.spec) if args.spec else WalletSpec()
    if args.wallets is not None:
        spec = WalletSpec.from_mapping({**{k: str(v) for k, v in spec.__dict__.items()},
                                        "n_wallets": str(args.wallets)})
    store, truth = generate_economy(spec, args.n_tx, args.seed)
    paths = write_economy(store, truth, args.out)
    (Path(args.out) / "spec.txt").write_text("\n".join(spec.to_lines()) + "\n", encoding="utf-8")
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


def _cmd_config(args) -> int:
    cfg = PipelineConfig() if args.defaults or not args.config else PipelineConfig.load(args.config)
    print("\n".join(cfg.to_lines()))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "fetch":
            return _cmd_fetch(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "config":
            return _cmd_config(args)
        return _cmd_pipeline(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc.cause, DataError) else EXIT_STAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ChainlensError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

"""``distrifs`` command line: one binary for every role.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import client as client_mod
from . import core, simnet, transport, wire
from .indexer import CrawlError, Indexer, IndexerConfig, load_config_file
from .server import FileServer, ServeConfig

logger = logging.getLogger("distrifs")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _addr(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _out(args, text: str = "", payload=None):
    if args.json and payload is not None:
        print(payload if isinstance(payload, str) else json.dumps(payload, sort_keys=True))
    elif text:
        print(text)


def cmd_hash(args):
    digest = core.hash_file(args.file)
    _out(args, digest, {"hash": digest, "path": args.file})
    return EXIT_OK


def cmd_verify(args):
    expected = core.parse_hash(args.hash)
    outcome = core.verify_file(args.file, expected)
    if isinstance(outcome, core.Match):
        _out(args, f"OK {expected}", {"verdict": "match", "expected": expected, "actual": expected})
        return EXIT_OK
    _out(
        args,
        f"MISMATCH expected {outcome.expected} actual {outcome.actual}",
        {"verdict": "mismatch", "expected": outcome.expected, "actual": outcome.actual},
    )
    return EXIT_FAIL


def _client(args, cfg=None, **kw):
    cfg = cfg or client_mod.bootstrap(args.config_dir)
    c = client_mod.Client.from_config(cfg, **kw)
    if getattr(args, "indexer", None):
        c.indexers = [u.rstrip("/") for u in args.indexer]
    return c


def cmd_search(args):
    if (args.query is None) == (args.hash is None):
        raise UsageError("give either a query or --hash")
    c = _client(args)
    result = c.search(query=args.query, hash=args.hash)
    for note in result.notices:
        print(note, file=sys.stderr)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.json:
        print(wire.encode(result.response()))
    else:
        for hit in result.hits:
            r = hit.record
            print(f"{r.hash}  {r.size_bytes:>12}  {r.name}")
            for s in hit.sources:
                lat = f"{s.latency_ms:.1f} ms" if s.latency_ms is not None else "latency ?"
                tp = f"{s.throughput_bps / 1e6:.2f} Mbps" if s.throughput_bps is not None else "speed ?"
                print(f"    {s.url}  {lat}  {tp}")
    return EXIT_OK if result.hits else EXIT_FAIL


def _prompt(record: core.FileRecord) -> bool:
    print(
        f"file:     {record.name}\nsize:     {record.size_bytes} bytes\n"
        f"modified: {record.modified_unix_s}\nsha256:   {record.hash}",
        file=sys.stderr,
    )
    try:
        answer = input("Download this file? [y/N] ")
    except EOFError:
        return False
    return answer.strip().lower() in ("y", "yes")


def cmd_get(args):
    cfg = client_mod.bootstrap(args.config_dir)
    if args.scanner:
        cfg.scanner_command = args.scanner
    if args.no_scan:
        cfg.scan_enabled = False
    mode = client_mod.PERMISSIVE if (args.yes or args.permissive) else cfg.security_mode
    c = _client(args, cfg, mode=mode, confirm=_prompt)
    out = Path(args.out) if args.out else Path.cwd() / args.hash.lower()
    report = c.download(args.hash, out, server_url=args.server, overwrite=args.overwrite)
    for w in c.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.json:
        print(wire.encode(report))
    else:
        print(f"{report.verdict.upper()}  {report.output_path}")
        print(f"  expected {report.expected}")
        print(f"  actual   {report.actual}")
        print(f"  server   {report.server_used}")
        if report.reason:
            print(f"  reason   {report.reason}")
        print(f"  scanner  {report.scanner_verdict}" + (f" ({report.scanner_detail})" if report.scanner_detail else ""))
    return EXIT_OK if report.verified else EXIT_FAIL


def cmd_indexers(args):
    cfg = client_mod.bootstrap(args.config_dir)
    entries = client_mod.manage_indexers(cfg, args.action, args.url)
    if args.json:
        print(json.dumps({"indexers": [{"url": e.url, "is_default": e.is_default} for e in entries]}, sort_keys=True))
    else:
        for e in entries:
            print(f"{e.url}{'  (default)' if e.is_default else ''}")
    return EXIT_OK


def _wait_forever():
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


def cmd_serve(args):
    host, port = args.addr
    config = ServeConfig(
        root=Path(args.dir),
        host=host,
        port=port,
        max_concurrent=args.max_concurrent,
        queue_wait_timeout_s=args.queue_timeout,
        token_ttl_s=args.token_ttl,
        name=args.name,
        public_url=args.public_url,
    )
    srv = FileServer(config).start()
    print(f"listening on {srv.url}", flush=True)
    try:
        _wait_forever()
    finally:
        srv.stop()
    return EXIT_OK


def cmd_index(args):
    settings = load_config_file(args.config) if args.config else {}
    listen = args.addr or (_addr(settings["listen"]) if "listen" in settings else ("127.0.0.1", 7400))
    config = IndexerConfig(
        host=listen[0],
        port=listen[1],
        db_path=Path(args.db or settings.get("db", "distrifs-index")),
        name=args.name or settings.get("name", "distrifs-indexer"),
        self_url=args.self_url or settings.get("self_url"),
        peers=(args.peer or []) + settings.get("peers", []),
        upstreams=(args.upstream or []) + settings.get("upstreams", []),
        cutoff=args.cutoff if args.cutoff is not None else settings.get("cutoff", 100_000),
        crawl_interval_s=args.crawl_interval if args.crawl_interval is not None else settings.get("crawl_interval", 900.0),
        background=not args.no_background,
        local_first=args.local_first or settings.get("local_first", False),
    )
    idx = Indexer(config).start()
    print(f"listening on {idx.url}", flush=True)
    for url in args.register or []:
        try:
            res = idx.register_server(url)
            logger.info("registered %s: %d files (truncated=%s)", url, res.files_indexed, res.truncated)
        except (CrawlError, wire.WireError) as exc:
            logger.error("could not register %s: %s", url, exc)
    try:
        _wait_forever()
    finally:
        idx.stop()
    return EXIT_OK


def cmd_simnet(args):
    result = simnet.run_scenario_file(args.scenario)
    print(json.dumps(result.to_dict(), sort_keys=True, indent=None if args.json else 2, default=str))
    return EXIT_OK if result.availability in (None, 1.0) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit machine-readable JSON")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument(
        "--config-dir",
        type=Path,
        default=None,
        help="client config directory (default: $DISTRIFS_CONFIG_DIR or the platform config dir)",
    )

    p = argparse.ArgumentParser(prog="distrifs", description="Decentralized HTTP file distribution.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("hash", parents=[common], help="print the SHA-256 of a file")
    s.add_argument("file")
    s.set_defaults(func=cmd_hash)

    s = sub.add_parser("verify", parents=[common], help="check a downloaded file against a hash")
    s.add_argument("file")
    s.add_argument("hash")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("search", parents=[common], help="search the configured indexers")
    s.add_argument("query", nargs="?")
    s.add_argument("--hash")
    s.add_argument("--indexer", action="append", help="query this indexer instead of the configured set (repeatable)")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("get", parents=[common], help="download and verify a file by hash")
    s.add_argument("hash")
    s.add_argument("--out", "-o")
    s.add_argument("--indexer", action="append")
    s.add_argument("--server", help="skip search and download from this server")
    s.add_argument("--yes", "-y", action="store_true", help="do not ask for confirmation")
    s.add_argument("--permissive", action="store_true")
    s.add_argument("--no-scan", action="store_true", help="disable malware scanning for this download")
    s.add_argument("--scanner", help="scanner command, run as '<command> <path>'")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("indexers", parents=[common], help="manage the client's indexer list")
    s.add_argument("action", choices=["add", "remove", "list"])
    s.add_argument("url", nargs="?")
    s.set_defaults(func=cmd_indexers)

    s = sub.add_parser("serve", parents=[common], help="run a file server")
    s.add_argument("--dir", required=True)
    s.add_argument("--addr", type=_addr, default=("127.0.0.1", 7401))
    s.add_argument("--max-concurrent", type=int, default=0, help="0 = unlimited")
    s.add_argument("--queue-timeout", type=float, default=120.0)
    s.add_argument("--token-ttl", type=int, default=60)
    s.add_argument("--name", default="distrifs-server")
    s.add_argument("--public-url")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("index", parents=[common], help="run an indexer")
    s.add_argument("--addr", type=_addr)
    s.add_argument("--db")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--name")
    s.add_argument("--self-url")
    s.add_argument("--peer", action="append")
    s.add_argument("--upstream", action="append")
    s.add_argument("--cutoff", type=int)
    s.add_argument("--crawl-interval", type=float)
    s.add_argument("--register", action="append", help="crawl this server at startup")
    s.add_argument("--no-background", action="store_true", help="disable periodic re-crawl")
    s.add_argument("--local-first", action="store_true", help="only ask peers when the local store has no hits")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("simnet", parents=[common], help="run a simulated-network scenario")
    s.add_argument("--scenario", required=True)
    s.set_defaults(func=cmd_simnet)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"distrifs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        client_mod.ClientError,
        OSError,
        ValueError,
        transport.HTTPStatusError,
    ) as exc:
        print(f"distrifs: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

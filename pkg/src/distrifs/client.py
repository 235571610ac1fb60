"""Downloading client: multi-indexer search, server selection, verified download.

A download never leaves unverified bytes under the requested name. Bytes are
streamed to a temporary file next to the destination, hashed, and only then
renamed into place. Anything that fails the hash check or the malware scan
ends up as ``<name>.blocked`` instead.
"""

from __future__ import annotations

import json
import logging
import os
import random
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from . import core, transport, wire
from .indexer import remote_search

logger = logging.getLogger(__name__)

DEFAULT_INDEXERS = ("http://127.0.0.1:7400",)
CONFIG_FILE = "config.json"
INDEXER_TIMEOUT_S = 5.0
QUEUE_DEADLINE_S = 300.0
CLIENT_HOPS = 2
LATENCY_TIE_WINDOW = 0.20
STRICT = "strict"
PERMISSIVE = "permissive"


class ClientError(Exception):
    pass


class ConfigError(ClientError):
    pass


class NoIndexerReachable(ClientError):
    pass


class NoServerFound(ClientError):
    pass


class AllCandidatesUnreachable(NoServerFound):
    def __init__(self, attempts: dict):
        detail = "; ".join(f"{u}: {e}" for u, e in attempts.items())
        super().__init__(f"no candidate server reachable ({detail})")
        self.attempts = attempts


class QueueTimeout(ClientError):
    """The server's download queue did not admit us in time. Retry later."""

    def __init__(self, message, retry_after_s: Optional[int] = None):
        super().__init__(message)
        self.retry_after_s = retry_after_s


class DownloadAborted(ClientError):
    pass


# -- configuration --------------------------------------------------------------


def default_config_dir() -> Path:
    env = os.environ.get("DISTRIFS_CONFIG_DIR")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CONFIG_HOME") or os.path.join(os.path.expanduser("~"), ".config")
    return Path(base) / "distrifs"


@dataclass
class IndexerEntry:
    url: str
    is_default: bool = False


@dataclass
class ClientConfig:
    indexers: list = field(default_factory=list)
    security_mode: str = STRICT
    scan_enabled: bool = True
    scanner_command: Optional[str] = None
    user_agent: str = wire.USER_AGENT
    path: Optional[Path] = None

    def indexer_urls(self) -> list:
        return [e.url for e in self.indexers]

    def to_json(self) -> dict:
        return {
            "indexers": [{"url": e.url, "is_default": e.is_default} for e in self.indexers],
            "security_mode": self.security_mode,
            "scan_enabled": self.scan_enabled,
            "scanner_command": self.scanner_command,
            "user_agent": self.user_agent,
        }


def _defaults() -> ClientConfig:
    return ClientConfig(indexers=[IndexerEntry(u, True) for u in DEFAULT_INDEXERS])


def _parse_config(path: Path) -> ClientConfig:
    try:
        data = json.loads(path.read_text())
        entries = [IndexerEntry(str(e["url"]), bool(e.get("is_default", False))) for e in data["indexers"]]
        mode = data.get("security_mode", STRICT)
        if mode not in (STRICT, PERMISSIVE):
            raise ValueError(f"unknown security_mode {mode!r}")
        return ClientConfig(
            indexers=entries,
            security_mode=mode,
            scan_enabled=bool(data.get("scan_enabled", True)),
            scanner_command=data.get("scanner_command"),
            user_agent=data.get("user_agent") or wire.USER_AGENT,
            path=path,
        )
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"corrupted config file {path}: {exc}") from None


def save_config(cfg: ClientConfig):
    if cfg.path is None:
        return
    cfg.path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".config-", dir=cfg.path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, cfg.path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def bootstrap(config_dir: Optional[Path] = None) -> ClientConfig:
    """Load the client config, writing built-in defaults on first run.

    A config dir that cannot be written yields in-memory defaults and a
    warning. A config file that does not parse raises ConfigError; it is
    never silently replaced.
    """
    config_dir = Path(config_dir) if config_dir is not None else default_config_dir()
    path = config_dir / CONFIG_FILE
    if path.exists():
        return _parse_config(path)
    cfg = _defaults()
    cfg.path = path
    try:
        save_config(cfg)
    except OSError as exc:
        logger.warning("config dir %s is not writable (%s); using in-memory defaults", config_dir, exc)
        cfg.path = None
    return cfg


def manage_indexers(cfg: ClientConfig, action: str, url: Optional[str] = None) -> list:
    if action == "list":
        return list(cfg.indexers)
    if url is None or not wire.is_absolute_url(url):
        raise ClientError(f"indexer must be an absolute http(s) URL: {url!r}")
    url = url.rstrip("/")
    if action == "add":
        if url not in cfg.indexer_urls():
            cfg.indexers.append(IndexerEntry(url, False))
            save_config(cfg)
    elif action == "remove":
        if url not in cfg.indexer_urls():
            raise ClientError(f"indexer not configured: {url}")
        if len(cfg.indexers) == 1:
            raise ClientError("refusing to remove the last indexer; add another one first")
        cfg.indexers = [e for e in cfg.indexers if e.url != url]
        save_config(cfg)
    else:
        raise ClientError(f"unknown action {action!r}")
    return list(cfg.indexers)


# -- malware scanning -----------------------------------------------------------


@dataclass
class ScanVerdict:
    verdict: str  # clean | flagged | skipped
    detail: str = ""


class CommandScanner:
    """Runs ``<command> <path>``; exit 0 means clean, 1 means flagged.

    Any other exit status is treated as flagged as well, so a broken
    scanner never waves a file through.
    """

    def __init__(self, command: str, timeout: float = 600):
        self.command = command
        self.name = shlex.split(command)[0]
        self.timeout = timeout

    def __call__(self, path) -> ScanVerdict:
        try:
            proc = subprocess.run(
                [*shlex.split(self.command), str(path)], capture_output=True, text=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            return ScanVerdict("flagged", f"scanner failed: {exc}")
        if proc.returncode == 0:
            return ScanVerdict("clean")
        output = (proc.stdout + proc.stderr).strip()
        if proc.returncode == 1:
            return ScanVerdict("flagged", output or "flagged by scanner")
        return ScanVerdict("flagged", f"scanner exited {proc.returncode}: {output}")


# -- selection ------------------------------------------------------------------


def rank_candidates(measured, rng: random.Random):
    """Pick from ``[(ServerRef, latency_ms), ...]``.

    Lowest latency wins; everything within 20% of it is a tie, broken by the
    highest known throughput, then uniformly at random.
    """
    if not measured:
        raise NoServerFound("no candidates")
    best = min(lat for _, lat in measured)
    window = [(ref, lat) for ref, lat in measured if lat <= best * (1 + LATENCY_TIE_WINDOW)]
    top = max(-1.0 if ref.throughput_bps is None else ref.throughput_bps for ref, _ in window)
    tied = [ref for ref, _ in window if (-1.0 if ref.throughput_bps is None else ref.throughput_bps) == top]
    return rng.choice(tied)


@dataclass
class SearchResult:
    hits: list
    warnings: list = field(default_factory=list)
    notices: list = field(default_factory=list)
    truncated: bool = False

    def response(self) -> wire.SearchResponse:
        return wire.SearchResponse(hits=self.hits, truncated=self.truncated)


def consistency_warnings(per_indexer: dict) -> list:
    """Warn for every file name that maps to more than one hash."""
    names: dict = {}
    for resp in per_indexer.values():
        for hit in resp.hits:
            for name in [hit.record.name, *hit.alt_names]:
                names.setdefault(name, set()).add(hit.record.hash)
    return [
        f"name {name!r} maps to different hashes across indexers: {', '.join(sorted(hashes))}"
        for name, hashes in sorted(names.items())
        if len(hashes) > 1
    ]


def quarantine_path(out: Path) -> Path:
    return out.with_name(out.name + ".blocked")


class Client:
    def __init__(
        self,
        indexers,
        mode: str = STRICT,
        scanner: Optional[Callable] = None,
        scan_enabled: bool = True,
        user_agent: str = wire.USER_AGENT,
        confirm: Optional[Callable[[core.FileRecord], bool]] = None,
        indexer_timeout_s: float = INDEXER_TIMEOUT_S,
        queue_deadline_s: float = QUEUE_DEADLINE_S,
        rng: Optional[random.Random] = None,
        source_address: Optional[tuple] = None,
    ):
        self.indexers = [u.rstrip("/") for u in indexers]
        self.mode = mode
        self.scanner = scanner
        self.scan_enabled = scan_enabled
        self.confirm = confirm
        self.indexer_timeout_s = indexer_timeout_s
        self.queue_deadline_s = queue_deadline_s
        self.rng = rng or random.Random()
        self.opts = transport.ClientOptions(user_agent=user_agent, source_address=source_address)
        self.warnings: list = []

    @classmethod
    def from_config(cls, cfg: ClientConfig, **kw) -> "Client":
        scanner = CommandScanner(cfg.scanner_command) if cfg.scanner_command else None
        kw.setdefault("mode", cfg.security_mode)
        return cls(cfg.indexer_urls(), scanner=scanner, scan_enabled=cfg.scan_enabled, user_agent=cfg.user_agent, **kw)

    def _warn(self, msg):
        self.warnings.append(msg)
        logger.warning("%s", msg)

    # -- search ----------------------------------------------------------

    def search(self, query: Optional[str] = None, hash: Optional[str] = None) -> SearchResult:
        if not self.indexers:
            raise ClientError("no indexers configured")
        if hash is not None:
            hash = core.parse_hash(hash)
        req = wire.SearchRequest(query=query, hash=hash, hop_budget=CLIENT_HOPS, visited=[])
        wire.validate(req)

        per_indexer, notices = {}, []
        with ThreadPoolExecutor(max_workers=len(self.indexers)) as pool:
            futures = {
                pool.submit(remote_search, url, req, self.indexer_timeout_s, self.opts): url for url in self.indexers
            }
            for fut, url in futures.items():
                try:
                    per_indexer[url] = fut.result()
                except (transport.TransportError, transport.HTTPStatusError, wire.WireError) as exc:
                    notices.append(f"indexer {url} skipped: {exc}")
        if not per_indexer:
            raise NoIndexerReachable("no indexer reachable")

        merged = wire.merge_responses(per_indexer.values())
        hits = merged.hits
        if hash is not None:
            hits = [h for h in hits if h.record.hash == hash]
        warnings = consistency_warnings(per_indexer)
        for w in warnings:
            self._warn(w)
        if not hits:
            notices.append("no file found on the queried indexers")
        return SearchResult(hits=hits, warnings=warnings, notices=notices, truncated=merged.truncated)

    # -- selection -------------------------------------------------------

    def _measure(self, url: str, content_hash: str) -> float:
        t0 = time.perf_counter()
        transport.request("GET", f"{url}/api/v1/meta/{content_hash}", timeout=self.indexer_timeout_s, opts=self.opts)
        return (time.perf_counter() - t0) * 1000.0

    def select_server(self, hit: wire.SearchHit, exclude=()) -> wire.ServerRef:
        """Measure round trips to every candidate and rank them.

        Probes run concurrently. Once the fastest answer is in at latency L,
        anything that has not answered by 1.2 L cannot be in the tie window,
        so we stop waiting for it.
        """
        candidates = [s for s in hit.sources if s.url not in exclude]
        if not candidates:
            raise NoServerFound("no untried server hosts this file")
        attempts: dict = {}
        measured = []
        pool = ThreadPoolExecutor(max_workers=len(candidates))
        try:
            start = time.perf_counter()
            futures = {pool.submit(self._measure, ref.url, hit.record.hash): ref for ref in candidates}
            pending = set(futures)
            cutoff = None
            while pending:
                if cutoff is None:
                    timeout = None
                else:
                    timeout = max(0.0, cutoff - (time.perf_counter() - start))
                done, pending = wait(pending, timeout=timeout, return_when=FIRST_COMPLETED)
                if not done:
                    break
                for fut in done:
                    ref = futures[fut]
                    exc = fut.exception()
                    if exc is not None:
                        attempts[ref.url] = exc
                        continue
                    measured.append((ref, fut.result()))
                if measured and cutoff is None:
                    best = min(lat for _, lat in measured)
                    cutoff = best * (1 + LATENCY_TIE_WINDOW) / 1000.0 + 0.002
        finally:
            pool.shutdown(wait=False)
        if not measured:
            raise AllCandidatesUnreachable(attempts)
        chosen = rank_candidates(measured, self.rng)
        latency = dict((r.url, lat) for r, lat in measured)[chosen.url]
        return replace(chosen, latency_ms=latency)

    # -- download --------------------------------------------------------

    def verify(self, path, expected: str) -> core.VerificationOutcome:
        return core.verify_file(path, expected)

    def download(
        self,
        content_hash: str,
        out,
        mode: Optional[str] = None,
        server_url: Optional[str] = None,
        overwrite: bool = False,
    ) -> wire.DownloadReport:
        """Fetch, verify and (optionally) scan one file.

        On a hash mismatch the bytes are quarantined and one more attempt is
        made through a different server, if another one hosts the file.
        """
        content_hash = core.parse_hash(content_hash)
        mode = mode or self.mode
        out = Path(out)
        if out.exists():
            if not overwrite:
                raise FileExistsError(f"output path exists: {out}")
            out.unlink()

        if server_url:
            hit = wire.SearchHit(
                record=core.FileRecord(content_hash, "file", 0, 0, "file"),
                sources=[wire.ServerRef(url=server_url.rstrip("/"))],
            )
        else:
            result = self.search(hash=content_hash)
            if not result.hits:
                raise NoServerFound(f"no server found for {content_hash}; the download failed")
            hit = result.hits[0]

        tried: set = set()
        retries_left = 1
        last: Optional[wire.DownloadReport] = None
        confirmed = mode == PERMISSIVE
        errors: dict = {}
        while True:
            try:
                ref = self.select_server(hit, exclude=tried)
            except NoServerFound as exc:
                if last is not None:
                    return last
                if isinstance(exc, AllCandidatesUnreachable):
                    errors.update(exc.attempts)
                if errors and all(isinstance(e, QueueTimeout) for e in errors.values()):
                    raise list(errors.values())[-1]
                raise NoServerFound(
                    f"no server could deliver {content_hash}: "
                    + ("; ".join(f"{u}: {e}" for u, e in errors.items()) or str(exc))
                ) from None
            tried.add(ref.url)
            try:
                report, confirmed = self._attempt(ref.url, content_hash, out, confirmed)
            except (transport.TransportError, transport.HTTPStatusError, wire.WireError, QueueTimeout) as exc:
                logger.info("server %s failed: %s", ref.url, exc)
                errors[ref.url] = exc
                continue
            if report.verified or report.reason != "hash mismatch":
                return report
            last = report
            if retries_left == 0:
                return report
            retries_left -= 1
            logger.warning("hash mismatch from %s; retrying via another server", ref.url)

    def _attempt(self, url, content_hash, out: Path, confirmed: bool):
        meta = transport.get_json(f"{url}/api/v1/meta/{content_hash}", "FileRecord", timeout=self.indexer_timeout_s, opts=self.opts)
        if meta.hash != content_hash:
            return self._blocked(out, content_hash, meta.hash, url, "hash mismatch"), confirmed
        if not confirmed:
            if self.confirm is None or not self.confirm(meta):
                raise DownloadAborted("download not confirmed")
            confirmed = True

        try:
            grant = transport.post_json(
                f"{url}/api/v1/token", {"hash": content_hash}, "TokenGrant", timeout=self.queue_deadline_s, opts=self.opts
            )
        except transport.HTTPStatusError as exc:
            if exc.status == 503:
                retry = exc.headers.get("retry-after")
                raise QueueTimeout(f"{url}: download queue full, retry later", int(retry) if retry and retry.isdigit() else None) from None
            raise
        except transport.TransportError as exc:
            if isinstance(exc.__cause__, TimeoutError):
                raise QueueTimeout(f"{url}: gave up waiting in the download queue") from None
            raise

        out.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{out.name}.", suffix=".part", dir=out.parent)
        tmp = Path(tmp_name)
        try:
            with os.fdopen(fd, "wb") as fh, transport.open_stream(grant.download_url, timeout=self.queue_deadline_s, opts=self.opts) as stream:
                for chunk in stream.iter_chunks():
                    fh.write(chunk)
            outcome = core.verify_file(tmp, content_hash)
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise

        if isinstance(outcome, core.Mismatch):
            os.replace(tmp, quarantine_path(out))
            return self._report(out, content_hash, outcome.actual, url, "blocked", "hash mismatch"), confirmed

        os.replace(tmp, out)
        report = self._report(out, content_hash, content_hash, url, "verified", None)
        return self._scan(report, out), confirmed

    def _blocked(self, out, expected, actual, url, reason):
        return self._report(out, expected, actual, url, "blocked", reason)

    def _report(self, out, expected, actual, url, verdict, reason):
        return wire.DownloadReport(
            output_path=str(out), expected=expected, actual=actual, verdict=verdict, server_used=url, reason=reason
        )

    def _scan(self, report: wire.DownloadReport, out: Path) -> wire.DownloadReport:
        if not self.scan_enabled:
            return report
        if self.scanner is None:
            self._warn("virus scanning is enabled but no scanner is configured; scan skipped")
            return replace(report, scanner_verdict="skipped", scanner_detail="no scanner configured")
        result = self.scanner(out)
        if result.verdict == "clean":
            return replace(report, scanner_verdict="clean")
        if result.verdict == "skipped":
            return replace(report, scanner_verdict="skipped", scanner_detail=result.detail or None)
        os.replace(out, quarantine_path(out))
        return replace(
            report, verdict="blocked", reason="scanner", scanner_verdict="flagged", scanner_detail=result.detail or None
        )

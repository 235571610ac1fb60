"""File host: catalog, download tokens, bounded download queue, HTTP streams.

A download is a two step exchange. ``POST /api/v1/token`` reserves one of
``max_concurrent`` slots (waiting in a global FIFO if none is free) and
returns a single-use URL; ``GET /dl/{token}`` streams the file and frees the
slot when the stream ends or the client goes away. A token that is never
fetched gives its slot back when it expires.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import unquote, urlparse

from . import core, wire
from .transport import BaseHandler, Service

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_TTL_S = 60
DEFAULT_QUEUE_TIMEOUT_S = 120.0
STREAM_CHUNK = 64 * 1024
THROTTLED_CHUNK = 8 * 1024


class NotFound(LookupError):
    pass


class Gone(Exception):
    pass


class RetryLater(Exception):
    def __init__(self, queue_length: int, retry_after_s: int = 1):
        super().__init__(f"download queue is full ({queue_length} waiting), retry later")
        self.queue_length = queue_length
        self.retry_after_s = retry_after_s


@dataclass
class ServeConfig:
    root: Path
    host: str = "127.0.0.1"
    port: int = 7401
    max_concurrent: int = 0
    queue_wait_timeout_s: float = DEFAULT_QUEUE_TIMEOUT_S
    token_ttl_s: int = DEFAULT_TOKEN_TTL_S
    name: str = "distrifs-server"
    public_url: Optional[str] = None

    def __post_init__(self):
        self.root = Path(self.root)
        if self.token_ttl_s <= 0:
            raise ValueError("token_ttl_s must be positive")
        if self.max_concurrent < 0:
            raise ValueError("max_concurrent must be >= 0 (0 = unlimited)")


@dataclass
class Faults:
    """Injected misbehaviour, used by the simulation harness."""

    tamper: bool = False
    throttle_bps: Optional[float] = None


@dataclass
class DownloadToken:
    token: str
    hash: str
    issued_unix_s: int
    expires_unix_s: int
    consumed: bool = False
    expired: bool = False


class TokenQueue:
    """Token table plus the FIFO concurrency queue, guarded by one condition.

    Every transition (grant, consume, expire, release) happens under the
    same lock, so the whole thing behaves as one linearizable state machine.
    ``clock`` supplies wall time for token expiry; queue waits use the
    monotonic clock.
    """

    RETAIN_S = 3600

    def __init__(self, max_concurrent: int, token_ttl_s: int, clock: Callable[[], float] = time.time):
        self.max_concurrent = max_concurrent
        self.token_ttl_s = token_ttl_s
        self.clock = clock
        self._cond = threading.Condition()
        self._tokens: dict[str, DownloadToken] = {}
        self._holding: set[str] = set()
        self._waiting: deque = deque()
        self._next_ticket = 0
        self.active = 0
        self.max_active_seen = 0
        self.grant_log: deque = deque(maxlen=100_000)

    @property
    def waiting(self) -> int:
        with self._cond:
            return len(self._waiting)

    def _has_room(self) -> bool:
        return self.max_concurrent == 0 or self.active < self.max_concurrent

    def _sweep(self):
        now = self.clock()
        for tok in list(self._tokens.values()):
            if not tok.consumed and not tok.expired and now >= tok.expires_unix_s:
                tok.expired = True
                self._release_locked(tok.token)
            elif now >= tok.expires_unix_s + self.RETAIN_S and tok.token not in self._holding:
                del self._tokens[tok.token]

    def _release_locked(self, token: str):
        if token in self._holding:
            self._holding.discard(token)
            self.active -= 1
            self._cond.notify_all()

    def acquire(self, content_hash: str, timeout: float) -> DownloadToken:
        """Block in FIFO order until a slot is free, then issue a token."""
        with self._cond:
            ticket = self._next_ticket
            self._next_ticket += 1
            self._waiting.append(ticket)
            deadline = time.monotonic() + timeout
            while True:
                self._sweep()
                if self._waiting[0] == ticket and self._has_room():
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._waiting.remove(ticket)
                    self._cond.notify_all()
                    raise RetryLater(len(self._waiting), retry_after_s=max(1, int(self.token_ttl_s)))
                self._cond.wait(min(remaining, 0.2))
            self._waiting.popleft()
            now = self.clock()
            tok = DownloadToken(
                token=secrets.token_hex(16),
                hash=content_hash,
                issued_unix_s=int(now),
                expires_unix_s=int(now) + int(self.token_ttl_s),
            )
            self._tokens[tok.token] = tok
            self._holding.add(tok.token)
            self.active += 1
            self.max_active_seen = max(self.max_active_seen, self.active)
            self.grant_log.append(ticket)
            # the next ticket may now be at the head with room to spare
            self._cond.notify_all()
            return tok

    def consume(self, token: str) -> DownloadToken:
        with self._cond:
            self._sweep()
            tok = self._tokens.get(token)
            if tok is None:
                raise NotFound("unknown token")
            if tok.consumed:
                raise Gone("token already used")
            if tok.expired:
                raise Gone("token expired")
            tok.consumed = True
            return tok

    def release(self, token: str):
        with self._cond:
            self._release_locked(token)

    def sweep(self):
        with self._cond:
            self._sweep()


@dataclass
class CatalogDelta:
    added: int = 0
    removed: int = 0
    changed: int = 0


@dataclass
class Catalog:
    by_hash: dict = field(default_factory=dict)  # hash -> canonical FileRecord
    paths: dict = field(default_factory=dict)  # hash -> [rel_path, ...]
    by_path: dict = field(default_factory=dict)  # rel_path -> FileRecord

    @classmethod
    def from_records(cls, records):
        cat = cls()
        for rec in records:
            cat.by_path[rec.rel_path] = rec
            cat.paths.setdefault(rec.hash, []).append(rec.rel_path)
            cat.by_hash.setdefault(rec.hash, rec)
        return cat

    def listing(self):
        return sorted(self.by_hash.values(), key=lambda r: r.rel_path)


def build_catalog(root, warnings: Optional[list] = None) -> Catalog:
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise OSError(f"cannot read served directory {root}")
    return Catalog.from_records(core.scan_directory(root, warnings))


class FileServer:
    def __init__(self, config: ServeConfig, clock: Callable[[], float] = time.time):
        self.config = config
        self.clock = clock
        self.faults = Faults()
        self.catalog = build_catalog(config.root)
        self.queue = TokenQueue(config.max_concurrent, config.token_ttl_s, clock)
        self._catalog_lock = threading.Lock()
        self.service: Optional[Service] = None

    # -- catalog ---------------------------------------------------------

    def list_files(self):
        return self.catalog.listing()

    def get_metadata(self, content_hash: str) -> core.FileRecord:
        if not core.is_content_hash(content_hash):
            raise wire.ValidationError("hash must be 64 lowercase hex characters")
        rec = self.catalog.by_hash.get(content_hash)
        if rec is None:
            raise NotFound(content_hash)
        return rec

    def refresh_index(self) -> CatalogDelta:
        """Rescan the root and swap the catalog in one step.

        On a scan failure the previous catalog stays in place and the error
        propagates.
        """
        new = build_catalog(self.config.root)
        with self._catalog_lock:
            old = self.catalog
            delta = CatalogDelta()
            for path, rec in new.by_path.items():
                prev = old.by_path.get(path)
                if prev is None:
                    delta.added += 1
                elif prev.hash != rec.hash:
                    delta.changed += 1
            delta.removed = sum(1 for p in old.by_path if p not in new.by_path)
            self.catalog = new
        return delta

    # -- tokens and streams ----------------------------------------------

    def request_token(self, content_hash: str, base_url: str, timeout: Optional[float] = None) -> wire.TokenGrant:
        self.get_metadata(content_hash)
        wait = self.config.queue_wait_timeout_s if timeout is None else timeout
        tok = self.queue.acquire(content_hash, wait)
        base = (self.config.public_url or base_url).rstrip("/")
        return wire.TokenGrant(token=tok.token, download_url=f"{base}/dl/{tok.token}", expires_unix_s=tok.expires_unix_s)

    def open_download(self, token: str):
        """Consume ``token`` and open its file; returns (record, handle).

        The slot stays reserved until :meth:`finish` is called.
        """
        tok = self.queue.consume(token)
        catalog = self.catalog
        rec = catalog.by_hash.get(tok.hash)
        for rel in catalog.paths.get(tok.hash, []):
            try:
                handle = open(self.config.root / rel, "rb")
            except OSError:
                continue
            return rec or catalog.by_path[rel], handle
        self.queue.release(token)
        raise NotFound("file no longer available")

    def finish(self, token: str):
        self.queue.release(token)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "FileServer":
        self.service = Service((self.config.host, self.config.port), ServerHandler)
        self.service.app = self
        self.service.start()
        logger.info("serving %d files from %s on %s", len(self.catalog.by_hash), self.config.root, self.url)
        return self

    @property
    def url(self) -> str:
        return self.service.base_url

    def stop(self):
        if self.service is not None:
            self.service.stop()
            self.service = None


class ServerHandler(BaseHandler):
    log = logger

    @property
    def app(self) -> FileServer:
        return self.server.app

    def _dispatch(self, method):
        path = unquote(urlparse(self.path).path)
        try:
            if method == "GET" and path == "/api/v1/info":
                self.send_json(200, {"name": self.app.config.name, "version": wire.PROTOCOL_VERSION, "files": len(self.app.catalog.by_hash)})
            elif method == "GET" and path == "/api/v1/list":
                self.send_json(200, wire.encode(self.app.list_files()))
            elif method == "GET" and path.startswith("/api/v1/meta/"):
                rec = self.app.get_metadata(path[len("/api/v1/meta/"):])
                self.send_json(200, wire.encode(rec))
            elif method == "POST" and path == "/api/v1/token":
                self._token()
            elif method == "GET" and path.startswith("/dl/"):
                self._download(path[len("/dl/"):])
            else:
                self.send_error_json(404, "not_found", "no such endpoint")
        except wire.WireError as exc:
            self.send_error_json(400, "bad_request", str(exc))
        except NotFound as exc:
            self.send_error_json(404, "not_found", str(exc))
        except Gone as exc:
            self.send_error_json(410, "gone", str(exc))
        except RetryLater as exc:
            self.send_error_json(
                503,
                "retry_later",
                str(exc),
                {"Retry-After": str(exc.retry_after_s), "X-DistriFS-Queue": str(exc.queue_length)},
            )

    def _token(self):
        body = self.read_body()
        try:
            data = json.loads(body or b"{}")
        except ValueError:
            raise wire.ParseError("malformed JSON") from None
        if not isinstance(data, dict) or "hash" not in data:
            raise wire.SchemaError("hash", "TokenRequest")
        h = data["hash"]
        if not core.is_content_hash(h):
            raise wire.ValidationError("hash must be 64 lowercase hex characters")
        host = self.headers.get("Host") or "{}:{}".format(*self.server.server_address[:2])
        grant = self.app.request_token(h, f"http://{host}")
        self.send_json(200, wire.encode(grant))

    def _download(self, token):
        if not wire.is_token(token):
            raise NotFound("unknown token")
        rec, handle = self.app.open_download(token)
        faults = self.app.faults
        try:
            size = os.fstat(handle.fileno()).st_size
            self.send_response(200)
            self.send_header("Content-Type", "application/octet-stream")
            self.send_header("Content-Length", str(size))
            self.send_header("Content-Disposition", f'attachment; filename="{rec.name}"')
            self.send_header("X-DistriFS-Hash", rec.hash)
            self.send_header("X-DistriFS-Name", rec.name)
            self.end_headers()
            chunk_size = THROTTLED_CHUNK if faults.throttle_bps else STREAM_CHUNK
            first = True
            while True:
                chunk = handle.read(chunk_size)
                if not chunk:
                    break
                if first and faults.tamper:
                    chunk = bytes([chunk[0] ^ 0xFF]) + chunk[1:]
                first = False
                self.wfile.write(chunk)
                if faults.throttle_bps:
                    time.sleep(len(chunk) / faults.throttle_bps)
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, TimeoutError):
            logger.debug("download aborted by client")
            self.close_connection = True
        finally:
            handle.close()
            self.app.finish(token)

"""Minimal HTTP plumbing shared by every role.

Outgoing requests go through :func:`request` / :func:`open_stream`, which send
only Host, User-Agent, Accept-Encoding and (for bodies) the content headers.
Incoming requests are handled by subclasses of :class:`BaseHandler`, whose
access log never records the peer address or User-Agent.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import urlparse

from . import wire

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0


class TransportError(OSError):
    """The remote end could not be reached or hung up."""


class HTTPStatusError(Exception):
    def __init__(self, url: str, status: int, body: bytes, headers=None):
        self.url = url
        self.status = status
        self.body = body
        self.headers = headers or {}
        self.error = None
        self.detail = ""
        try:
            err = wire.decode(body, "ErrorBody")
            self.error, self.detail = err.error, err.detail
        except (wire.WireError, UnicodeDecodeError):
            pass
        super().__init__(f"{url}: HTTP {status} {self.error or ''} {self.detail}".rstrip())


@dataclass
class Response:
    status: int
    headers: dict
    body: bytes

    def json(self):
        return json.loads(self.body)


@dataclass
class ClientOptions:
    user_agent: str = wire.USER_AGENT
    source_address: Optional[tuple] = None


def _connection(url: str, timeout: float, opts: ClientOptions):
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.hostname:
        raise ValueError(f"not an http(s) URL: {url}")
    cls = http.client.HTTPSConnection if parsed.scheme == "https" else http.client.HTTPConnection
    conn = cls(parsed.hostname, parsed.port, timeout=timeout, source_address=opts.source_address)
    target = parsed.path or "/"
    if parsed.query:
        target += "?" + parsed.query
    return conn, target


def _send(conn, method, target, body, headers, opts):
    hdrs = {"User-Agent": opts.user_agent}
    if body is not None:
        hdrs["Content-Type"] = "application/json"
    hdrs.update(headers or {})
    conn.request(method, target, body=body, headers=hdrs)
    return conn.getresponse()


def request(
    method: str,
    url: str,
    body=None,
    headers: Optional[dict] = None,
    timeout: float = DEFAULT_TIMEOUT,
    opts: Optional[ClientOptions] = None,
    ok=(200,),
) -> Response:
    """Perform one request and read the whole body.

    Non-``ok`` statuses raise HTTPStatusError; connection problems raise
    TransportError.
    """
    opts = opts or ClientOptions()
    if isinstance(body, str):
        body = body.encode("utf-8")
    conn, target = _connection(url, timeout, opts)
    try:
        resp = _send(conn, method, target, body, headers, opts)
        data = resp.read()
    except (OSError, http.client.HTTPException) as exc:
        raise TransportError(f"{method} {url}: {exc}") from exc
    finally:
        conn.close()
    hdrs = {k.lower(): v for k, v in resp.getheaders()}
    if resp.status not in ok:
        raise HTTPStatusError(url, resp.status, data, hdrs)
    return Response(resp.status, hdrs, data)


class Stream:
    """An open streaming GET; iterate for chunks, always close."""

    def __init__(self, conn, resp, url):
        self._conn = conn
        self._resp = resp
        self.url = url
        self.status = resp.status
        self.headers = {k.lower(): v for k, v in resp.getheaders()}

    def iter_chunks(self, size=64 * 1024):
        while True:
            try:
                chunk = self._resp.read(size)
            except (OSError, http.client.HTTPException) as exc:
                raise TransportError(f"GET {self.url}: {exc}") from exc
            if not chunk:
                return
            yield chunk

    def close(self):
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_stream(url: str, timeout: float = DEFAULT_TIMEOUT, opts: Optional[ClientOptions] = None) -> Stream:
    opts = opts or ClientOptions()
    conn, target = _connection(url, timeout, opts)
    try:
        resp = _send(conn, "GET", target, None, None, opts)
    except (OSError, http.client.HTTPException) as exc:
        conn.close()
        raise TransportError(f"GET {url}: {exc}") from exc
    if resp.status != 200:
        try:
            data = resp.read()
        except (OSError, http.client.HTTPException):
            data = b""
        conn.close()
        raise HTTPStatusError(url, resp.status, data, {k.lower(): v for k, v in resp.getheaders()})
    return Stream(conn, resp, url)


def get_json(url, expected=None, timeout=DEFAULT_TIMEOUT, opts=None, headers=None):
    resp = request("GET", url, headers=headers, timeout=timeout, opts=opts)
    if expected is None:
        return resp.json()
    return wire.decode(resp.body, expected)


def post_json(url, payload, expected=None, timeout=DEFAULT_TIMEOUT, opts=None):
    body = payload if isinstance(payload, str) else json.dumps(payload, sort_keys=True, separators=(",", ":"))
    resp = request("POST", url, body=body, timeout=timeout, opts=opts)
    if expected is None:
        return resp.json()
    return wire.decode(resp.body, expected)


# -- server side ---------------------------------------------------------------


class Service(ThreadingHTTPServer):
    """Threaded HTTP server with a deep accept backlog and test hooks."""

    daemon_threads = True
    request_queue_size = 256
    allow_reuse_address = True

    def __init__(self, addr, handler_cls):
        super().__init__(addr, handler_cls)
        self.header_log: Optional[list] = None
        self.header_lock = threading.Lock()
        self.request_delay_s = 0.0
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "Service":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:
            self.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self.server_close()


class BaseHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "DistriFS/1.0"
    sys_version = ""
    log = logger

    def setup(self):
        super().setup()
        # A stuck peer must not pin a handler thread forever.
        self.connection.settimeout(300)

    def log_message(self, format, *args):
        # Default implementation prefixes the client address; drop it.
        self.log.debug(format, *args)

    def log_request(self, code="-", size="-"):
        self.log.debug("%s %s -> %s", self.command, self.path.split("?", 1)[0], code)

    def _before(self):
        srv = self.server
        if srv.header_log is not None:
            with srv.header_lock:
                srv.header_log.append((self.command, self.path, list(self.headers.items())))
        if srv.request_delay_s > 0:
            time.sleep(srv.request_delay_s)

    def do_GET(self):
        self._before()
        self._dispatch("GET")

    def do_POST(self):
        self._before()
        self._dispatch("POST")

    def _dispatch(self, method):  # pragma: no cover - overridden
        self.send_error_json(404, "not_found", "no such endpoint")

    def read_body(self, limit=16 * 1024 * 1024) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length > limit:
            raise wire.ValidationError("request body too large")
        return self.rfile.read(length) if length else b""

    def send_json(self, status: int, payload, extra_headers: Optional[dict] = None):
        if isinstance(payload, str):
            body = payload.encode("utf-8")
        else:
            body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (extra_headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def send_error_json(self, status: int, code: str, detail: str = "", extra_headers=None):
        self.send_json(status, wire.encode(wire.ErrorBody(error=code, detail=detail)), extra_headers)


def free_port(host="127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]

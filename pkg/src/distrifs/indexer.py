"""Discovery service mapping content hashes and names to hosting servers.

Store layout (see :mod:`distrifs.store`)::

    e/{hash}               -> IndexEntry  {"record", "servers", "alt_names"}
    s/{url digest}         -> ServerEntry
    n/{name token}/{hash}  -> 1           name-token postings for text search
    a/{url digest}/{hash}  -> 1           which records a server contributed

Only metadata is stored; the indexer never downloads file bodies except the
small throughput sample taken by :meth:`Indexer.probe_server`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import parse_qs, quote, urlencode, urlparse

from . import core, transport, wire
from .store import Batch, IndexStore

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 100_000
DEFAULT_CRAWL_INTERVAL_S = 15 * 60
STALE_AFTER_CRAWLS = 3
PEER_TIMEOUT_S = 5.0
MAX_HITS = wire.MAX_SEARCH_HITS
EWMA_ALPHA = 0.3
PROBE_SAMPLE_BYTES = 64 * 1024
PROBE_MAX_FILE = 1024 * 1024
DEFAULT_HOPS = 2

_SPLIT = re.compile(r"[\W_]+")


def tokenize(text: str) -> list:
    """Lowercase and split on every non-alphanumeric character."""
    return [t for t in _SPLIT.split(text.lower()) if t]


def name_matches(query: str, name: str) -> bool:
    """Every query token must be a substring of some name token."""
    q = tokenize(query)
    n = tokenize(name)
    return bool(q) and all(any(qt in nt for nt in n) for qt in q)


def url_digest(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()[:32]


def ewma(previous: Optional[float], sample: float, alpha: float = EWMA_ALPHA) -> float:
    if previous is None:
        return sample
    return alpha * sample + (1 - alpha) * previous


class CrawlError(Exception):
    """A server returned a listing that does not parse; nothing was ingested."""


@dataclass
class IndexerConfig:
    host: str = "127.0.0.1"
    port: int = 7400
    db_path: Optional[Path] = None
    name: str = "distrifs-indexer"
    self_url: Optional[str] = None
    peers: list = field(default_factory=list)
    upstreams: list = field(default_factory=list)
    cutoff: int = DEFAULT_CUTOFF
    crawl_interval_s: float = DEFAULT_CRAWL_INTERVAL_S
    stale_after_crawls: int = STALE_AFTER_CRAWLS
    peer_timeout_s: float = PEER_TIMEOUT_S
    cache_size: int = 10_000
    background: bool = True
    # answer from the local store alone whenever it has hits
    local_first: bool = False


def load_config_file(path) -> dict:
    """Parse a ``key = value`` config file.

    Recognised keys: listen, db, peers, upstreams, cutoff, crawl_interval,
    name, self_url, local_first. List values are comma separated. ``#``
    starts a comment.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in ("peers", "upstreams"):
            out[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key in ("cutoff",):
            out[key] = int(value)
        elif key in ("crawl_interval",):
            out[key] = float(value)
        elif key == "local_first":
            if value.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"{path}:{lineno}: local_first must be a boolean")
            out[key] = value.lower() in ("true", "yes", "1")
        elif key in ("listen", "db", "name", "self_url"):
            out[key] = value
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return out


class Indexer:
    def __init__(self, config: IndexerConfig, clock: Callable[[], float] = time.time, client_opts=None):
        self.config = config
        self.clock = clock
        self.opts = client_opts or transport.ClientOptions()
        self.store = IndexStore(config.db_path, cache_size=config.cache_size)
        self._write_lock = threading.Lock()
        self._stop = threading.Event()
        self._scheduler: Optional[threading.Thread] = None
        self.service: Optional[transport.Service] = None
        self.identity = config.self_url
        self.search_requests = 0
        self._count_lock = threading.Lock()
        self._peers: dict = {}
        for url in config.peers:
            self.add_peer(url)
        for url in config.upstreams:
            self.add_peer(url, upstream=True)

    # -- peers -----------------------------------------------------------

    def add_peer(self, url: str, upstream: bool = False):
        url = url.rstrip("/")
        if not wire.is_absolute_url(url):
            raise ValueError(f"peer must be an absolute http(s) URL: {url}")
        if self.identity and url == self.identity.rstrip("/"):
            logger.warning("ignoring self as peer/upstream")
            return
        current = self._peers.get(url)
        self._peers[url] = wire.PeerRef(url=url, is_upstream=upstream or (current.is_upstream if current else False))

    def peers(self) -> list:
        return list(self._peers.values())

    # -- store helpers ---------------------------------------------------

    def _server_key(self, url):
        return f"s/{url_digest(url)}"

    def server_entry(self, url) -> Optional[dict]:
        return self.store.get(self._server_key(url))

    def servers(self) -> list:
        return [v for _, v in self.store.scan("s/")]

    def _attributed(self, url) -> set:
        prefix = f"a/{url_digest(url)}/"
        return {k[len(prefix):] for k in self.store.keys(prefix)}

    def entry(self, content_hash) -> Optional[dict]:
        return self.store.get(f"e/{content_hash}")

    def entry_count(self) -> int:
        return self.store.count("e/")

    def _put_entry(self, batch, pending, h, entry):
        pending[h] = entry
        batch.put(f"e/{h}", entry)

    def _load_entry(self, pending, h):
        if h in pending:
            return pending[h]
        e = self.entry(h)
        if e is None:
            return None
        return {"record": e["record"], "servers": list(e["servers"]), "alt_names": list(e.get("alt_names", []))}

    def _attach(self, batch, pending, url, rec: core.FileRecord):
        h = rec.hash
        e = self._load_entry(pending, h)
        if e is None:
            e = {"record": wire.record_to_dict(rec), "servers": [], "alt_names": []}
            for tok in set(tokenize(rec.name)):
                batch.put(f"n/{tok}/{h}", 1)
        elif rec.name != e["record"]["name"] and rec.name not in e["alt_names"]:
            # first-seen name wins; conflicting names are kept as alternates
            e["alt_names"].append(rec.name)
        if url not in e["servers"]:
            e["servers"].append(url)
            e["servers"].sort()
        self._put_entry(batch, pending, h, e)
        batch.put(f"a/{url_digest(url)}/{h}", 1)

    def _detach(self, batch, pending, url, h):
        batch.delete(f"a/{url_digest(url)}/{h}")
        e = self._load_entry(pending, h)
        if e is None:
            return
        if url in e["servers"]:
            e["servers"].remove(url)
        if e["servers"]:
            self._put_entry(batch, pending, h, e)
        else:
            pending[h] = None
            batch.delete(f"e/{h}")
            for tok in set(tokenize(e["record"]["name"])):
                batch.delete(f"n/{tok}/{h}")

    def _server_doc(self, url, **updates) -> dict:
        now = int(self.clock())
        doc = dict(self.server_entry(url) or {"url": url, "first_seen_unix_s": now, "last_crawl_unix_s": now, "file_count": 0, "reachable": True})
        doc.update(updates)
        return doc

    # -- crawl -----------------------------------------------------------

    def register_server(self, url: str) -> wire.CrawlResult:
        """Fetch a server's listing and index up to ``cutoff`` records."""
        url = url.rstrip("/")
        if not wire.is_absolute_url(url):
            raise wire.ValidationError("url must be an absolute http(s) URL")
        try:
            resp = transport.request("GET", f"{url}/api/v1/list", timeout=self.config.peer_timeout_s, opts=self.opts)
        except (transport.TransportError, transport.HTTPStatusError) as exc:
            logger.info("crawl of %s failed: %s", url, exc)
            with self._write_lock:
                doc = self._server_doc(url, reachable=False, registered=True)
                self.store.put(self._server_key(url), doc)
            return wire.CrawlResult(files_indexed=0, truncated=False, reachable=False)
        try:
            listing = wire.decode(resp.body, "FileList")
        except wire.WireError as exc:
            raise CrawlError(f"malformed listing from {url}: {exc}") from None

        unique, seen = [], set()
        for rec in listing:
            if rec.hash not in seen:
                seen.add(rec.hash)
                unique.append(rec)
        truncated = len(unique) > self.config.cutoff
        accepted = unique[: self.config.cutoff]
        self._ingest_crawl(url, accepted)
        self._push_upstreams(url, accepted)
        return wire.CrawlResult(files_indexed=len(accepted), truncated=truncated, reachable=True)

    def _ingest_crawl(self, url, records):
        with self._write_lock:
            batch, pending = Batch(), {}
            keep = {r.hash for r in records}
            for h in self._attributed(url) - keep:
                self._detach(batch, pending, url, h)
            for rec in records:
                self._attach(batch, pending, url, rec)
            doc = self._server_doc(
                url, last_crawl_unix_s=int(self.clock()), file_count=len(records), reachable=True, registered=True
            )
            batch.put(self._server_key(url), doc)
            self.store.write(batch)

    def _push_upstreams(self, url, records):
        ups = [p.url for p in self._peers.values() if p.is_upstream]
        if not ups or self.identity is None:
            return
        items = [wire.SyncItem(record=r, server=url) for r in records]
        for up in ups:
            for i in range(0, max(len(items), 1), wire.SYNC_BATCH_CAP):
                batch = wire.SyncBatch(origin=self.identity, records=items[i : i + wire.SYNC_BATCH_CAP])
                try:
                    transport.post_json(f"{up}/api/v1/sync", wire.encode(batch), timeout=self.config.peer_timeout_s, opts=self.opts)
                except (transport.TransportError, transport.HTTPStatusError) as exc:
                    logger.warning("sync to upstream %s failed: %s", up, exc)
                    break

    def sync_push(self, batch: wire.SyncBatch) -> int:
        """Merge records pushed by another indexer; returns how many were accepted.

        Pairs already present count as accepted without changing state.
        New pairs for a server already at the cutoff are refused.
        """
        wire.validate(batch)
        accepted = 0
        with self._write_lock:
            wb, pending = Batch(), {}
            by_server: dict = {}
            for item in batch.records:
                by_server.setdefault(item.server.rstrip("/"), []).append(item.record)
            for url, records in by_server.items():
                have = self._attributed(url)
                count = len(have)
                for rec in records:
                    if rec.hash in have:
                        accepted += 1
                        continue
                    if count >= self.config.cutoff:
                        continue
                    self._attach(wb, pending, url, rec)
                    have.add(rec.hash)
                    count += 1
                    accepted += 1
                doc = self._server_doc(url, file_count=count, last_crawl_unix_s=int(self.clock()))
                wb.put(self._server_key(url), doc)
            self.store.write(wb)
        return accepted

    # -- search ----------------------------------------------------------

    def _source(self, url) -> Optional[wire.ServerRef]:
        doc = self.server_entry(url)
        if doc is None or not doc.get("reachable", True):
            return None
        return wire.ServerRef(
            url=url,
            latency_ms=doc.get("latency_ms"),
            throughput_bps=doc.get("throughput_bps"),
            last_probed_unix_s=doc.get("last_probed_unix_s"),
        )

    def _hit(self, entry) -> Optional[wire.SearchHit]:
        sources = [s for s in (self._source(u) for u in entry["servers"]) if s is not None]
        if not sources:
            return None
        return wire.SearchHit(
            record=wire.record_from_dict(entry["record"]),
            sources=sources,
            alt_names=list(entry.get("alt_names", [])),
        )

    def _text_candidates(self, query) -> set:
        qtokens = tokenize(query)
        if not qtokens:
            return set()
        matches = [set() for _ in qtokens]
        for key in self.store.keys("n/"):
            _, tok, h = key.split("/", 2)
            for i, qt in enumerate(qtokens):
                if qt in tok:
                    matches[i].add(h)
        return set.intersection(*matches)

    def search_local(self, req: wire.SearchRequest) -> wire.SearchResponse:
        if req.hash is not None:
            e = self.entry(req.hash)
            hit = self._hit(e) if e else None
            return wire.SearchResponse(hits=[hit] if hit else [], truncated=False)
        hits = []
        for h in self._text_candidates(req.query):
            e = self.entry(h)
            hit = self._hit(e) if e else None
            if hit:
                hits.append(hit)
        hits.sort(key=lambda x: (x.record.name, x.record.hash))
        return wire.SearchResponse(hits=hits[:MAX_HITS], truncated=len(hits) > MAX_HITS)

    def search_federated(self, req: wire.SearchRequest) -> wire.SearchResponse:
        """Local lookup merged with the answers of every peer not yet visited.

        With ``local_first`` set, a non-empty local answer is returned as is
        and peers are only asked on a miss.
        """
        wire.validate(req)
        with self._count_lock:
            self.search_requests += 1
        local = self.search_local(req)
        if req.hop_budget == 0 or (local.hits and self.config.local_first):
            return local
        visited = list(req.visited)
        if self.identity and self.identity not in visited:
            visited.append(self.identity)
        targets = [p.url for p in self._peers.values() if p.url not in visited]
        if not targets:
            return local
        forward = wire.SearchRequest(query=req.query, hash=req.hash, hop_budget=req.hop_budget - 1, visited=visited)
        responses = [local]
        pool = ThreadPoolExecutor(max_workers=len(targets))
        try:
            futures = [pool.submit(self._ask_peer, url, forward) for url in targets]
            done, _ = wait(futures, timeout=self.config.peer_timeout_s + 1)
            for f in done:
                if f.exception() is None and f.result() is not None:
                    responses.append(f.result())
        finally:
            pool.shutdown(wait=False)
        return wire.merge_responses(responses)

    def _ask_peer(self, url, req: wire.SearchRequest) -> Optional[wire.SearchResponse]:
        try:
            return remote_search(url, req, timeout=self.config.peer_timeout_s, opts=self.opts)
        except (transport.TransportError, transport.HTTPStatusError, wire.WireError) as exc:
            logger.info("peer %s skipped: %s", url, exc)
            return None

    # -- probing and eviction --------------------------------------------

    def probe_server(self, url: str) -> dict:
        """Measure latency and throughput, folding them into EWMAs."""
        url = url.rstrip("/")
        doc = self.server_entry(url)
        if doc is None:
            raise KeyError(f"server not registered: {url}")
        smallest = None
        for h in self._attributed(url):
            e = self.entry(h)
            if e and (smallest is None or e["record"]["size_bytes"] < smallest["size_bytes"]):
                smallest = e["record"]
        meta_url = f"{url}/api/v1/meta/{smallest['hash']}" if smallest else f"{url}/api/v1/info"
        try:
            t0 = time.perf_counter()
            transport.request("GET", meta_url, timeout=self.config.peer_timeout_s, opts=self.opts)
            latency = (time.perf_counter() - t0) * 1000.0
        except (transport.TransportError, transport.HTTPStatusError) as exc:
            logger.info("probe of %s failed: %s", url, exc)
            with self._write_lock:
                self.store.put(self._server_key(url), self._server_doc(url, reachable=False))
            return {"latency_ms": None, "throughput_bps": None}

        throughput = None
        if smallest and smallest["size_bytes"] <= PROBE_MAX_FILE:
            throughput = self._sample_throughput(url, smallest["hash"])

        with self._write_lock:
            doc = self._server_doc(url)
            doc["reachable"] = True
            doc["latency_ms"] = ewma(doc.get("latency_ms"), latency)
            if throughput is not None:
                doc["throughput_bps"] = ewma(doc.get("throughput_bps"), throughput)
            doc["last_probed_unix_s"] = int(self.clock())
            self.store.put(self._server_key(url), doc)
        return {"latency_ms": doc["latency_ms"], "throughput_bps": doc.get("throughput_bps")}

    def _sample_throughput(self, url, content_hash) -> Optional[float]:
        try:
            t0 = time.perf_counter()
            grant = transport.post_json(
                f"{url}/api/v1/token", {"hash": content_hash}, "TokenGrant", timeout=self.config.peer_timeout_s, opts=self.opts
            )
            got = 0
            with transport.open_stream(grant.download_url, timeout=self.config.peer_timeout_s, opts=self.opts) as s:
                for chunk in s.iter_chunks():
                    got += len(chunk)
                    if got >= PROBE_SAMPLE_BYTES:
                        break
            elapsed = time.perf_counter() - t0
        except (transport.TransportError, transport.HTTPStatusError, wire.WireError) as exc:
            logger.info("throughput sample from %s failed: %s", url, exc)
            return None
        if got == 0 or elapsed <= 0:
            return None
        return got * 8 / elapsed

    @property
    def stale_ttl_s(self) -> float:
        return self.config.stale_after_crawls * self.config.crawl_interval_s

    def evict_stale(self) -> int:
        """Drop servers not crawled within the stale TTL.

        Returns the number of (hash, server) attributions removed.
        """
        now = self.clock()
        removed = 0
        with self._write_lock:
            batch, pending = Batch(), {}
            for doc in self.servers():
                if now - doc["last_crawl_unix_s"] <= self.stale_ttl_s:
                    continue
                url = doc["url"]
                hashes = self._attributed(url)
                for h in hashes:
                    self._detach(batch, pending, url, h)
                removed += len(hashes)
                newdoc = dict(doc, reachable=False, file_count=0)
                batch.put(self._server_key(url), newdoc)
            self.store.write(batch)
        return removed

    def recrawl(self):
        for doc in self.servers():
            if doc.get("registered"):
                try:
                    self.register_server(doc["url"])
                except CrawlError as exc:
                    logger.warning("%s", exc)

    def tick(self):
        """One scheduler round: re-crawl, probe reachable servers, evict."""
        self.recrawl()
        for doc in self.servers():
            if doc.get("registered") and doc.get("reachable"):
                self.probe_server(doc["url"])
        self.evict_stale()

    def _run_scheduler(self):
        while not self._stop.wait(self.config.crawl_interval_s):
            try:
                self.tick()
            except Exception:  # keep the scheduler alive
                logger.exception("scheduler round failed")

    # -- lifecycle -------------------------------------------------------

    def bind(self) -> "Indexer":
        self.service = transport.Service((self.config.host, self.config.port), IndexerHandler)
        self.service.app = self
        if self.identity is None:
            self.identity = self.service.base_url
        return self

    def start(self) -> "Indexer":
        if self.service is None:
            self.bind()
        self.service.start()
        if self.config.background:
            self._scheduler = threading.Thread(target=self._run_scheduler, daemon=True)
            self._scheduler.start()
        logger.info("indexer %s listening on %s", self.config.name, self.url)
        return self

    @property
    def url(self) -> str:
        return self.service.base_url

    def stop(self):
        self._stop.set()
        if self.service is not None:
            self.service.stop()
            self.service = None
        self.store.close()


def search_url(base: str, req: wire.SearchRequest) -> str:
    params = {"hash": req.hash} if req.hash is not None else {"q": req.query}
    return f"{base.rstrip('/')}/api/v1/search?{urlencode(params, quote_via=quote)}"


def search_headers(req: wire.SearchRequest) -> dict:
    return {"X-DistriFS-Hops": str(req.hop_budget), "X-DistriFS-Visited": ",".join(req.visited)}


def remote_search(base: str, req: wire.SearchRequest, timeout=PEER_TIMEOUT_S, opts=None) -> wire.SearchResponse:
    return transport.get_json(search_url(base, req), "SearchResponse", timeout=timeout, opts=opts, headers=search_headers(req))


class IndexerHandler(transport.BaseHandler):
    log = logger

    @property
    def app(self) -> Indexer:
        return self.server.app

    def _dispatch(self, method):
        parsed = urlparse(self.path)
        path = parsed.path
        try:
            if method == "GET" and path == "/api/v1/info":
                self.send_json(200, {"name": self.app.config.name, "version": wire.PROTOCOL_VERSION, "entries": self.app.entry_count()})
            elif method == "GET" and path == "/api/v1/peers":
                self.send_json(200, {"peers": [wire.to_dict(p) for p in self.app.peers()]})
            elif method == "GET" and path == "/api/v1/search":
                self._search(parse_qs(parsed.query))
            elif method == "POST" and path == "/api/v1/register":
                self._register()
            elif method == "POST" and path == "/api/v1/sync":
                batch = wire.decode(self.read_body(), "SyncBatch")
                self.send_json(200, {"accepted": self.app.sync_push(batch)})
            else:
                self.send_error_json(404, "not_found", "no such endpoint")
        except wire.SchemaError as exc:
            self.send_error_json(400, "schema", str(exc))
        except wire.WireError as exc:
            self.send_error_json(400, "bad_request", str(exc))
        except CrawlError as exc:
            self.send_error_json(502, "bad_listing", str(exc))

    def _search(self, params):
        try:
            hops = int(self.headers.get("X-DistriFS-Hops", DEFAULT_HOPS))
        except ValueError:
            raise wire.ValidationError("X-DistriFS-Hops must be an integer") from None
        visited_raw = self.headers.get("X-DistriFS-Visited", "")
        visited = [v.strip() for v in visited_raw.split(",") if v.strip()]
        q = params.get("q", [None])[0]
        h = params.get("hash", [None])[0]
        req = wire.SearchRequest(query=q, hash=h, hop_budget=hops, visited=visited)
        resp = self.app.search_federated(req)
        self.send_json(200, wire.encode(resp))

    def _register(self):
        try:
            data = json.loads(self.read_body() or b"{}")
        except ValueError:
            raise wire.ParseError("malformed JSON") from None
        if not isinstance(data, dict) or "url" not in data:
            raise wire.SchemaError("url", "RegisterRequest")
        result = self.app.register_server(str(data["url"]))
        self.send_json(200, wire.encode(result))

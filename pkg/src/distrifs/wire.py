"""JSON message schemas shared by the client, indexer and server.

All endpoints live under ``/api/v1/``. Encoding is canonical: keys sorted,
no whitespace, absent optional fields omitted, so identical messages always
produce identical bytes. Decoding ignores unknown keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional
from urllib.parse import urlparse

from .core import FileRecord, is_content_hash, record_problem

API_PREFIX = "/api/v1"
PROTOCOL_VERSION = "1.0"
USER_AGENT = "DistriFS/1.0"
MAX_HOP_BUDGET = 8
SYNC_BATCH_CAP = 1000
TOKEN_HEX_LEN = 32
MAX_SEARCH_HITS = 100


class WireError(ValueError):
    pass


class ParseError(WireError):
    pass


class SchemaError(WireError):
    def __init__(self, field_name: str, type_name: str, message: Optional[str] = None):
        super().__init__(message or f"{type_name}: missing required field {field_name!r}")
        self.field = field_name


class ValidationError(WireError):
    def __init__(self, rule: str):
        super().__init__(rule)
        self.rule = rule


def is_absolute_url(url: object) -> bool:
    if not isinstance(url, str):
        return False
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


def is_token(value: object) -> bool:
    return (
        isinstance(value, str)
        and len(value) == TOKEN_HEX_LEN
        and all(c in "0123456789abcdef" for c in value)
    )


@dataclass
class ServerRef:
    url: str
    latency_ms: Optional[float] = None
    throughput_bps: Optional[float] = None
    last_probed_unix_s: Optional[int] = None


@dataclass
class SearchHit:
    record: FileRecord
    sources: list
    alt_names: list = field(default_factory=list)


@dataclass
class SearchRequest:
    query: Optional[str] = None
    hash: Optional[str] = None
    hop_budget: int = 2
    visited: list = field(default_factory=list)


@dataclass
class SearchResponse:
    hits: list = field(default_factory=list)
    truncated: bool = False


@dataclass
class TokenGrant:
    token: str
    download_url: str
    expires_unix_s: int


@dataclass
class SyncItem:
    record: FileRecord
    server: str


@dataclass
class SyncBatch:
    origin: str
    records: list = field(default_factory=list)


@dataclass
class CrawlResult:
    files_indexed: int
    truncated: bool
    reachable: bool = True


@dataclass
class PeerRef:
    url: str
    is_upstream: bool = False


@dataclass
class ErrorBody:
    error: str
    detail: str = ""


@dataclass
class DownloadReport:
    output_path: str
    expected: str
    actual: str
    verdict: str  # "verified" | "blocked"
    server_used: str
    scanner_verdict: str = "skipped"  # "clean" | "flagged" | "skipped"
    reason: Optional[str] = None
    scanner_detail: Optional[str] = None

    @property
    def verified(self) -> bool:
        return self.verdict == "verified"


# -- validation ---------------------------------------------------------------


def _fail(rule: str):
    raise ValidationError(rule)


def _check_number(value, name, optional=True):
    if value is None:
        if not optional:
            _fail(f"{name} is required")
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0 or value != value:
        _fail(f"{name} must be a non-negative number")


def _check_record(rec):
    if not isinstance(rec, FileRecord):
        _fail("record must be a FileRecord")
    problem = record_problem(rec)
    if problem:
        _fail(problem)


def _check_server_ref(ref):
    if not is_absolute_url(ref.url):
        _fail("url must be an absolute http(s) URL")
    _check_number(ref.latency_ms, "latency_ms")
    _check_number(ref.throughput_bps, "throughput_bps")
    if ref.last_probed_unix_s is not None and (
        isinstance(ref.last_probed_unix_s, bool) or not isinstance(ref.last_probed_unix_s, int)
    ):
        _fail("last_probed_unix_s must be an integer")


def _check_hit(hit):
    _check_record(hit.record)
    if not hit.sources:
        _fail("sources must be non-empty")
    for ref in hit.sources:
        if not isinstance(ref, ServerRef):
            _fail("sources must hold ServerRef values")
        _check_server_ref(ref)
    if any(not isinstance(n, str) for n in hit.alt_names):
        _fail("alt_names must be strings")


def _check_search_request(req):
    if (req.query is None) == (req.hash is None):
        _fail("exactly one of query|hash")
    if req.query is not None and (not isinstance(req.query, str) or not req.query.strip()):
        _fail("query must be a non-empty string")
    if req.hash is not None and not is_content_hash(req.hash):
        _fail("hash must be 64 lowercase hex characters")
    if isinstance(req.hop_budget, bool) or not isinstance(req.hop_budget, int):
        _fail("hop_budget must be an integer")
    if not 0 <= req.hop_budget <= MAX_HOP_BUDGET:
        _fail(f"hop_budget must be between 0 and {MAX_HOP_BUDGET}")
    if not isinstance(req.visited, list) or any(
        not isinstance(v, str) or not v or "," in v for v in req.visited
    ):
        _fail("visited must be a list of non-empty identity strings without commas")


def _check_search_response(resp):
    if not isinstance(resp.truncated, bool):
        _fail("truncated must be a boolean")
    seen = set()
    for hit in resp.hits:
        if not isinstance(hit, SearchHit):
            _fail("hits must hold SearchHit values")
        _check_hit(hit)
        for ref in hit.sources:
            pair = (hit.record.hash, ref.url)
            if pair in seen:
                _fail("hits must be deduplicated by (hash, server_url)")
            seen.add(pair)


def _check_token_grant(grant):
    if not is_token(grant.token):
        _fail("token must be 32 lowercase hex characters")
    if not is_absolute_url(grant.download_url):
        _fail("download_url must be an absolute http(s) URL")
    if not urlparse(grant.download_url).path.endswith(f"/dl/{grant.token}"):
        _fail("download_url path must end with /dl/{token}")
    if isinstance(grant.expires_unix_s, bool) or not isinstance(grant.expires_unix_s, int):
        _fail("expires_unix_s must be an integer")


def _check_sync_batch(batch):
    if not isinstance(batch.origin, str) or not batch.origin:
        _fail("origin must be a non-empty string")
    if len(batch.records) > SYNC_BATCH_CAP:
        _fail(f"records must not exceed {SYNC_BATCH_CAP} per batch")
    for item in batch.records:
        if not isinstance(item, SyncItem):
            _fail("records must hold SyncItem values")
        _check_record(item.record)
        if not is_absolute_url(item.server):
            _fail("server must be an absolute http(s) URL")


def _check_crawl_result(res):
    if isinstance(res.files_indexed, bool) or not isinstance(res.files_indexed, int) or res.files_indexed < 0:
        _fail("files_indexed must be a non-negative integer")
    if not isinstance(res.truncated, bool) or not isinstance(res.reachable, bool):
        _fail("truncated and reachable must be booleans")


def _check_peer_ref(peer):
    if not is_absolute_url(peer.url):
        _fail("url must be an absolute http(s) URL")
    if not isinstance(peer.is_upstream, bool):
        _fail("is_upstream must be a boolean")


def _check_error(err):
    if not isinstance(err.error, str) or not err.error:
        _fail("error must be a non-empty machine code")
    if not isinstance(err.detail, str):
        _fail("detail must be a string")


def _check_report(rep):
    if rep.verdict not in ("verified", "blocked"):
        _fail("verdict must be 'verified' or 'blocked'")
    if not is_content_hash(rep.expected) or not is_content_hash(rep.actual):
        _fail("expected and actual must be content hashes")
    if rep.verdict == "verified" and rep.expected != rep.actual:
        _fail("verified verdict requires expected == actual")
    if rep.verdict == "blocked" and not rep.reason:
        _fail("blocked verdict requires a reason")
    if rep.scanner_verdict not in ("clean", "flagged", "skipped"):
        _fail("scanner_verdict must be clean, flagged or skipped")
    if not isinstance(rep.output_path, str) or not rep.output_path:
        _fail("output_path must be a non-empty string")
    if not isinstance(rep.server_used, str):
        _fail("server_used must be a string")


# -- dict conversion ----------------------------------------------------------


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def record_to_dict(rec: FileRecord) -> dict:
    return {
        "hash": rec.hash,
        "modified_unix_s": rec.modified_unix_s,
        "name": rec.name,
        "rel_path": rec.rel_path,
        "size_bytes": rec.size_bytes,
    }


def _server_ref_to_dict(ref):
    return _drop_none(
        {
            "url": ref.url,
            "latency_ms": ref.latency_ms,
            "throughput_bps": ref.throughput_bps,
            "last_probed_unix_s": ref.last_probed_unix_s,
        }
    )


def _hit_to_dict(hit):
    d = {
        "record": record_to_dict(hit.record),
        "sources": [_server_ref_to_dict(s) for s in hit.sources],
    }
    if hit.alt_names:
        d["alt_names"] = list(hit.alt_names)
    return d


def _to_dict(msg) -> Any:
    if isinstance(msg, FileRecord):
        return record_to_dict(msg)
    if isinstance(msg, ServerRef):
        return _server_ref_to_dict(msg)
    if isinstance(msg, SearchHit):
        return _hit_to_dict(msg)
    if isinstance(msg, SearchRequest):
        return _drop_none(
            {"query": msg.query, "hash": msg.hash, "hop_budget": msg.hop_budget, "visited": list(msg.visited)}
        )
    if isinstance(msg, SearchResponse):
        return {"hits": [_hit_to_dict(h) for h in msg.hits], "truncated": msg.truncated}
    if isinstance(msg, TokenGrant):
        return {"token": msg.token, "download_url": msg.download_url, "expires_unix_s": msg.expires_unix_s}
    if isinstance(msg, SyncItem):
        return {"record": record_to_dict(msg.record), "server": msg.server}
    if isinstance(msg, SyncBatch):
        return {
            "origin": msg.origin,
            "records": [{"record": record_to_dict(i.record), "server": i.server} for i in msg.records],
        }
    if isinstance(msg, CrawlResult):
        return {"files_indexed": msg.files_indexed, "truncated": msg.truncated, "reachable": msg.reachable}
    if isinstance(msg, PeerRef):
        return {"url": msg.url, "is_upstream": msg.is_upstream}
    if isinstance(msg, ErrorBody):
        return {"error": msg.error, "detail": msg.detail}
    if isinstance(msg, DownloadReport):
        return _drop_none(
            {
                "output_path": msg.output_path,
                "expected": msg.expected,
                "actual": msg.actual,
                "verdict": msg.verdict,
                "reason": msg.reason,
                "server_used": msg.server_used,
                "scanner_verdict": msg.scanner_verdict,
                "scanner_detail": msg.scanner_detail,
            }
        )
    if isinstance(msg, list):
        return [_to_dict(m) for m in msg]
    raise TypeError(f"not a wire message: {type(msg).__name__}")


class _Fields:
    """Typed accessor over a decoded JSON object."""

    def __init__(self, data, type_name):
        if not isinstance(data, dict):
            raise ValidationError(f"{type_name} must be a JSON object")
        self.data = data
        self.type_name = type_name

    def req(self, key, kinds):
        if key not in self.data:
            raise SchemaError(key, self.type_name)
        return self._typed(key, self.data[key], kinds)

    def opt(self, key, kinds, default=None):
        value = self.data.get(key)
        if value is None:
            return default
        return self._typed(key, value, kinds)

    def _typed(self, key, value, kinds):
        if isinstance(value, bool) and bool not in kinds:
            raise ValidationError(f"{self.type_name}.{key} has the wrong type")
        if not isinstance(value, kinds):
            raise ValidationError(f"{self.type_name}.{key} has the wrong type")
        return value


def record_from_dict(data) -> FileRecord:
    f = _Fields(data, "FileRecord")
    rec = dict(
        hash=f.req("hash", (str,)),
        name=f.req("name", (str,)),
        size_bytes=f.req("size_bytes", (int,)),
        modified_unix_s=f.req("modified_unix_s", (int,)),
        rel_path=f.req("rel_path", (str,)),
    )
    try:
        return FileRecord(**rec)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _server_ref_from_dict(data):
    f = _Fields(data, "ServerRef")
    return ServerRef(
        url=f.req("url", (str,)),
        latency_ms=f.opt("latency_ms", (int, float)),
        throughput_bps=f.opt("throughput_bps", (int, float)),
        last_probed_unix_s=f.opt("last_probed_unix_s", (int,)),
    )


def _hit_from_dict(data):
    f = _Fields(data, "SearchHit")
    return SearchHit(
        record=record_from_dict(f.req("record", (dict,))),
        sources=[_server_ref_from_dict(s) for s in f.req("sources", (list,))],
        alt_names=list(f.opt("alt_names", (list,), [])),
    )


def _search_request_from_dict(data):
    f = _Fields(data, "SearchRequest")
    return SearchRequest(
        query=f.opt("query", (str,)),
        hash=f.opt("hash", (str,)),
        hop_budget=f.req("hop_budget", (int,)),
        visited=list(f.req("visited", (list,))),
    )


def _search_response_from_dict(data):
    f = _Fields(data, "SearchResponse")
    return SearchResponse(
        hits=[_hit_from_dict(h) for h in f.req("hits", (list,))],
        truncated=f.req("truncated", (bool,)),
    )


def _token_grant_from_dict(data):
    f = _Fields(data, "TokenGrant")
    return TokenGrant(
        token=f.req("token", (str,)),
        download_url=f.req("download_url", (str,)),
        expires_unix_s=f.req("expires_unix_s", (int,)),
    )


def _sync_item_from_dict(data):
    f = _Fields(data, "SyncItem")
    return SyncItem(record=record_from_dict(f.req("record", (dict,))), server=f.req("server", (str,)))


def _sync_batch_from_dict(data):
    f = _Fields(data, "SyncBatch")
    items = f.req("records", (list,))
    if len(items) > SYNC_BATCH_CAP:
        raise SchemaError("records", "SyncBatch", f"SyncBatch: records exceed the cap of {SYNC_BATCH_CAP}")
    return SyncBatch(origin=f.req("origin", (str,)), records=[_sync_item_from_dict(i) for i in items])


def _crawl_result_from_dict(data):
    f = _Fields(data, "CrawlResult")
    return CrawlResult(
        files_indexed=f.req("files_indexed", (int,)),
        truncated=f.req("truncated", (bool,)),
        reachable=f.opt("reachable", (bool,), True),
    )


def _peer_ref_from_dict(data):
    f = _Fields(data, "PeerRef")
    return PeerRef(url=f.req("url", (str,)), is_upstream=f.opt("is_upstream", (bool,), False))


def _error_from_dict(data):
    f = _Fields(data, "ErrorBody")
    return ErrorBody(error=f.req("error", (str,)), detail=f.opt("detail", (str,), ""))


def _report_from_dict(data):
    f = _Fields(data, "DownloadReport")
    return DownloadReport(
        output_path=f.req("output_path", (str,)),
        expected=f.req("expected", (str,)),
        actual=f.req("actual", (str,)),
        verdict=f.req("verdict", (str,)),
        server_used=f.req("server_used", (str,)),
        scanner_verdict=f.opt("scanner_verdict", (str,), "skipped"),
        reason=f.opt("reason", (str,)),
        scanner_detail=f.opt("scanner_detail", (str,)),
    )


def _file_list_from_dict(data):
    if not isinstance(data, list):
        raise ValidationError("FileList must be a JSON array")
    return [record_from_dict(d) for d in data]


_CHECKS: dict = {
    FileRecord: _check_record,
    ServerRef: _check_server_ref,
    SearchHit: _check_hit,
    SearchRequest: _check_search_request,
    SearchResponse: _check_search_response,
    TokenGrant: _check_token_grant,
    SyncItem: lambda i: _check_sync_batch(SyncBatch(origin="-", records=[i])),
    SyncBatch: _check_sync_batch,
    CrawlResult: _check_crawl_result,
    PeerRef: _check_peer_ref,
    ErrorBody: _check_error,
    DownloadReport: _check_report,
}

_DECODERS: dict[str, Callable[[Any], Any]] = {
    "FileRecord": record_from_dict,
    "FileList": _file_list_from_dict,
    "ServerRef": _server_ref_from_dict,
    "SearchHit": _hit_from_dict,
    "SearchRequest": _search_request_from_dict,
    "SearchResponse": _search_response_from_dict,
    "TokenGrant": _token_grant_from_dict,
    "SyncItem": _sync_item_from_dict,
    "SyncBatch": _sync_batch_from_dict,
    "CrawlResult": _crawl_result_from_dict,
    "PeerRef": _peer_ref_from_dict,
    "ErrorBody": _error_from_dict,
    "DownloadReport": _report_from_dict,
}

WIRE_TYPES = tuple(_DECODERS)


def validate(msg) -> None:
    """Raise ValidationError naming the first broken invariant of ``msg``."""
    if isinstance(msg, list):
        for m in msg:
            validate(m)
        return
    check = _CHECKS.get(type(msg))
    if check is None:
        raise TypeError(f"not a wire message: {type(msg).__name__}")
    check(msg)


def to_dict(msg) -> Any:
    validate(msg)
    return _to_dict(msg)


def encode(msg) -> str:
    """Canonical JSON text for a wire message (or a list of FileRecords)."""
    return json.dumps(to_dict(msg), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def from_obj(data, expected: str):
    try:
        decoder = _DECODERS[expected]
    except KeyError:
        raise ValueError(f"unknown wire type {expected!r}") from None
    msg = decoder(data)
    validate(msg)
    return msg


def decode(text, expected: str):
    """Parse ``text`` as the wire type named ``expected``.

    Raises ParseError for malformed JSON, SchemaError for a missing
    required field, ValidationError for a broken invariant.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8", errors="replace")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    return from_obj(data, expected)


def merge_responses(responses) -> SearchResponse:
    """Union hits by hash, deduplicating sources by server URL."""
    by_hash: dict = {}
    order = []
    truncated = False
    for resp in responses:
        truncated = truncated or resp.truncated
        for hit in resp.hits:
            h = hit.record.hash
            if h not in by_hash:
                by_hash[h] = SearchHit(record=hit.record, sources=[], alt_names=[])
                order.append(h)
            merged = by_hash[h]
            known = {s.url for s in merged.sources}
            merged.sources.extend(s for s in hit.sources if s.url not in known)
            names = set(merged.alt_names) | {merged.record.name}
            if hit.record.name not in names:
                merged.alt_names.append(hit.record.name)
            merged.alt_names.extend(n for n in hit.alt_names if n not in names and n not in merged.alt_names)
    hits = [by_hash[h] for h in order]
    hits.sort(key=lambda x: (x.record.name, x.record.hash))
    if len(hits) > MAX_SEARCH_HITS:
        truncated = True
    return SearchResponse(hits=hits[:MAX_SEARCH_HITS], truncated=truncated)

import json
import random
import threading
import time

import pytest

from distrifs import transport, wire
from distrifs.server import (
    FileServer,
    Gone,
    NotFound,
    RetryLater,
    ServeConfig,
    TokenQueue,
    build_catalog,
)
from sha256_ref import sha256_hex


class FakeClock:
    def __init__(self, t=1_700_000_000.0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def served(tree):
    srv = FileServer(ServeConfig(root=tree, port=0)).start()
    yield srv
    srv.stop()


def _grant(url, h, **kw):
    return transport.post_json(url + "/api/v1/token", {"hash": h}, "TokenGrant", **kw)


# -- catalog -----------------------------------------------------------------


def test_catalog_of_fixture_tree(tree):
    cat = build_catalog(tree)
    assert len(cat.by_hash) == 3
    assert {r.hash for r in cat.listing()} == {sha256_hex(b"alpha\n"), sha256_hex(b"bravo\n"), sha256_hex(b"charlie\n")}


def test_duplicate_content_collapses(tmp_path):
    (tmp_path / "x").write_bytes(b"same")
    (tmp_path / "y").write_bytes(b"same")
    cat = build_catalog(tmp_path)
    h = sha256_hex(b"same")
    assert list(cat.by_hash) == [h]
    assert cat.paths[h] == ["x", "y"]


def test_unreadable_root_fails(tmp_path):
    with pytest.raises(OSError):
        FileServer(ServeConfig(root=tmp_path / "missing", port=0))


def test_config_rejects_zero_ttl(tmp_path):
    with pytest.raises(ValueError):
        ServeConfig(root=tmp_path, token_ttl_s=0)


def test_empty_root_serves_empty_list(tmp_path):
    srv = FileServer(ServeConfig(root=tmp_path, port=0)).start()
    try:
        assert transport.get_json(srv.url + "/api/v1/list") == []
        info = transport.get_json(srv.url + "/api/v1/info")
        assert info["version"] == "1.0" and info["files"] == 0
    finally:
        srv.stop()


def test_list_sorted_by_rel_path(served):
    listing = transport.get_json(served.url + "/api/v1/list", "FileList")
    assert [r.rel_path for r in listing] == ["a.txt", "sub/b.txt", "sub/deep/c.txt"]


def test_metadata_errors_are_distinct(served):
    h = sha256_hex(b"bravo\n")
    rec = transport.get_json(f"{served.url}/api/v1/meta/{h}", "FileRecord")
    assert rec.size_bytes == 6
    with pytest.raises(NotFound):
        served.get_metadata("0" * 64)
    with pytest.raises(wire.ValidationError):
        served.get_metadata("abc")
    for bad, status in [("0" * 64, 404), ("abc", 400)]:
        with pytest.raises(transport.HTTPStatusError) as err:
            transport.get_json(f"{served.url}/api/v1/meta/{bad}")
        assert err.value.status == status


def test_refresh_index_deltas(tree):
    srv = FileServer(ServeConfig(root=tree, port=0))
    assert vars(srv.refresh_index()) == {"added": 0, "removed": 0, "changed": 0}
    (tree / "new.txt").write_bytes(b"new")
    assert srv.refresh_index().added == 1
    assert "new.txt" in [r.rel_path for r in srv.list_files()]
    old = srv.catalog.by_path["a.txt"].hash
    (tree / "a.txt").write_bytes(b"ALPHA")
    delta = srv.refresh_index()
    assert delta.changed == 1
    assert srv.catalog.by_path["a.txt"].hash == sha256_hex(b"ALPHA") != old
    (tree / "new.txt").unlink()
    assert srv.refresh_index().removed == 1


def test_failed_refresh_keeps_catalog(tmp_path):
    root = tmp_path / "r"
    root.mkdir()
    (root / "f").write_bytes(b"f")
    srv = FileServer(ServeConfig(root=root, port=0))
    (root / "f").unlink()
    root.rmdir()
    with pytest.raises(OSError):
        srv.refresh_index()
    assert len(srv.list_files()) == 1


# -- tokens and streams --------------------------------------------------------


def test_download_stream(served):
    h = sha256_hex(b"charlie\n")
    grant = _grant(served.url, h)
    assert wire.is_token(grant.token)
    assert grant.download_url == f"{served.url}/dl/{grant.token}"
    resp = transport.request("GET", grant.download_url)
    assert resp.body == b"charlie\n"
    assert resp.headers["content-length"] == "8"
    assert resp.headers["x-distrifs-hash"] == h
    assert resp.headers["x-distrifs-name"] == "c.txt"
    with pytest.raises(transport.HTTPStatusError) as err:
        transport.request("GET", grant.download_url)
    assert err.value.status == 410 and err.value.error == "gone"
    assert served.queue.active == 0


def test_unknown_token_and_hash(served):
    with pytest.raises(transport.HTTPStatusError) as err:
        transport.request("GET", served.url + "/dl/" + "a" * 32)
    assert err.value.status == 404
    with pytest.raises(transport.HTTPStatusError) as err:
        _grant(served.url, "f" * 64)
    assert err.value.status == 404
    with pytest.raises(transport.HTTPStatusError) as err:
        transport.request("POST", served.url + "/api/v1/token", body="{}")
    assert err.value.status == 400


def test_tokens_are_unpredictable(served):
    h = sha256_hex(b"alpha\n")
    toks = {served.request_token(h, "http://x").token for _ in range(200)}
    assert len(toks) == 200


def test_expired_token_is_gone_and_frees_slot(tree):
    clock = FakeClock()
    srv = FileServer(ServeConfig(root=tree, port=0, max_concurrent=1, token_ttl_s=60), clock=clock)
    h = sha256_hex(b"alpha\n")
    first = srv.request_token(h, "http://x")
    assert srv.queue.active == 1
    with pytest.raises(RetryLater):
        srv.request_token(h, "http://x", timeout=0.05)
    clock.t += 61
    second = srv.request_token(h, "http://x", timeout=1)
    assert srv.queue.active == 1
    with pytest.raises(Gone, match="expired"):
        srv.open_download(first.token)
    rec, handle = srv.open_download(second.token)
    handle.close()
    srv.finish(second.token)
    assert srv.queue.active == 0


def test_second_request_waits_for_first_stream(tree):
    srv = FileServer(ServeConfig(root=tree, port=0, max_concurrent=1))
    h = sha256_hex(b"alpha\n")
    first = srv.request_token(h, "http://x")
    got = threading.Event()

    def second():
        srv.request_token(h, "http://x", timeout=5)
        got.set()

    t = threading.Thread(target=second)
    t.start()
    assert not got.wait(0.3)
    _, handle = srv.open_download(first.token)
    handle.close()
    srv.finish(first.token)
    assert got.wait(2)
    t.join()


def test_queue_timeout_returns_retry_later(tree):
    srv = FileServer(ServeConfig(root=tree, port=0, max_concurrent=1, queue_wait_timeout_s=1.0)).start()
    try:
        h = sha256_hex(b"alpha\n")
        _grant(srv.url, h)
        start = time.monotonic()
        with pytest.raises(transport.HTTPStatusError) as err:
            _grant(srv.url, h)
        elapsed = time.monotonic() - start
        assert 0.9 <= elapsed < 3.0
        assert err.value.status == 503
        assert err.value.error == "retry_later"
        assert int(err.value.headers["retry-after"]) >= 1
        assert err.value.headers["x-distrifs-queue"] == "0"
    finally:
        srv.stop()


def test_client_abort_releases_slot(tmp_path):
    (tmp_path / "big").write_bytes(bytes(4 << 20))
    srv = FileServer(ServeConfig(root=tmp_path, port=0, max_concurrent=1)).start()
    srv.faults.throttle_bps = 256 * 1024
    try:
        grant = _grant(srv.url, sha256_hex(bytes(4 << 20)))
        stream = transport.open_stream(grant.download_url)
        next(stream.iter_chunks(1024))
        assert srv.queue.active == 1
        stream.close()
        deadline = time.monotonic() + 10
        while srv.queue.active and time.monotonic() < deadline:
            time.sleep(0.05)
        assert srv.queue.active == 0
    finally:
        srv.stop()


def test_download_of_file_removed_after_open_completes(tree):
    srv = FileServer(ServeConfig(root=tree, port=0)).start()
    try:
        h = sha256_hex(b"alpha\n")
        grant = _grant(srv.url, h)
        (tree / "a.txt").unlink()
        srv.refresh_index()
        with pytest.raises(transport.HTTPStatusError) as err:
            transport.request("GET", grant.download_url)
        assert err.value.status == 404
        assert srv.queue.active == 0
    finally:
        srv.stop()


# -- queue model ----------------------------------------------------------------


def test_fifo_grant_order():
    q = TokenQueue(max_concurrent=1, token_ttl_s=60)
    first = q.acquire("h", 1)
    order = []
    threads = []
    for i in range(8):
        t = threading.Thread(target=lambda i=i: order.append((i, q.acquire("h", 10))))
        t.start()
        threads.append(t)
        while q.waiting < i + 1:
            time.sleep(0.005)
    q.release(first.token)
    for _ in range(8):
        while len(order) < _ + 1:
            time.sleep(0.005)
        q.release(order[-1][1].token)
    for t in threads:
        t.join()
    assert [i for i, _ in order] == list(range(8))
    assert list(q.grant_log) == list(range(9))


@pytest.mark.parametrize("seed", range(20))
def test_random_schedules_conserve_slots(seed):
    rng = random.Random(seed)
    clock = FakeClock()
    k = rng.randint(1, 4)
    q = TokenQueue(max_concurrent=k, token_ttl_s=10, clock=clock)
    live = []
    for _ in range(300):
        op = rng.random()
        if op < 0.4:
            try:
                live.append(q.acquire("h", 0))
            except RetryLater:
                assert q.active == k
        elif op < 0.7 and live:
            tok = live.pop(rng.randrange(len(live)))
            try:
                q.consume(tok.token)
            except Gone:
                pass
            q.release(tok.token)
        elif op < 0.85:
            clock.t += rng.uniform(0, 6)
            q.sweep()
        elif live:
            tok = rng.choice(live)
            try:
                q.consume(tok.token)
                with pytest.raises(Gone):
                    q.consume(tok.token)
            except Gone:
                pass
        assert 0 <= q.active <= k
    for tok in live:
        q.release(tok.token)
    assert q.active == 0
    assert q.max_active_seen <= k


def test_token_endpoint_rejects_malformed_body(served):
    with pytest.raises(transport.HTTPStatusError) as err:
        transport.request("POST", served.url + "/api/v1/token", body="{not json")
    assert err.value.status == 400
    body = json.loads(err.value.body)
    assert body["error"] == "bad_request"

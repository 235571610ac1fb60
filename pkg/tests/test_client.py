import json
import os
import random
import stat
import sys

import pytest

from distrifs import client as cl
from distrifs import transport, wire
from distrifs.core import FileRecord
from distrifs.simnet import FileSpec, IndexerSpec, ServerSpec, Topology, spawn

ALLOWED_HEADERS = {"host", "user-agent", "accept-encoding", "content-type", "content-length", "x-distrifs-hops", "x-distrifs-visited"}


# -- config ---------------------------------------------------------------------


def test_bootstrap_writes_defaults(tmp_path):
    cfg = cl.bootstrap(tmp_path)
    assert cfg.indexer_urls() == list(cl.DEFAULT_INDEXERS)
    assert all(e.is_default for e in cfg.indexers)
    assert cfg.security_mode == cl.STRICT
    assert cfg.scan_enabled
    assert json.loads((tmp_path / cl.CONFIG_FILE).read_text())["indexers"][0]["is_default"] is True


def test_removed_default_stays_removed(tmp_path):
    cfg = cl.bootstrap(tmp_path)
    cl.manage_indexers(cfg, "add", "http://mine:7400/")
    cl.manage_indexers(cfg, "remove", cl.DEFAULT_INDEXERS[0])
    again = cl.bootstrap(tmp_path)
    assert again.indexer_urls() == ["http://mine:7400"]


def test_add_appends_last(tmp_path):
    cfg = cl.bootstrap(tmp_path)
    entries = cl.manage_indexers(cfg, "add", "http://b:1")
    assert entries[-1] == cl.IndexerEntry("http://b:1", False)
    assert cl.manage_indexers(cfg, "add", "http://b:1") == entries


def test_remove_last_indexer_refused(tmp_path):
    cfg = cl.bootstrap(tmp_path)
    with pytest.raises(cl.ClientError, match="last indexer"):
        cl.manage_indexers(cfg, "remove", cl.DEFAULT_INDEXERS[0])
    assert cl.bootstrap(tmp_path).indexer_urls() == list(cl.DEFAULT_INDEXERS)


def test_manage_rejects_bad_url(tmp_path):
    cfg = cl.bootstrap(tmp_path)
    with pytest.raises(cl.ClientError):
        cl.manage_indexers(cfg, "add", "not a url")


def test_corrupt_config_names_file(tmp_path):
    (tmp_path / cl.CONFIG_FILE).write_text("{nope")
    with pytest.raises(cl.ConfigError) as err:
        cl.bootstrap(tmp_path)
    assert str(tmp_path / cl.CONFIG_FILE) in str(err.value)
    assert (tmp_path / cl.CONFIG_FILE).read_text() == "{nope"


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_dir_gives_in_memory_defaults(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        cfg = cl.bootstrap(ro / "sub")
        assert cfg.path is None and cfg.indexer_urls() == list(cl.DEFAULT_INDEXERS)
    finally:
        ro.chmod(stat.S_IRWXU)


def test_unwritable_config_path_gives_in_memory_defaults(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = cl.bootstrap(blocker / "cfg")
    assert cfg.path is None and cfg.indexer_urls() == list(cl.DEFAULT_INDEXERS)


def test_env_config_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("DISTRIFS_CONFIG_DIR", str(tmp_path / "x"))
    assert cl.default_config_dir() == tmp_path / "x"


# -- selection ---------------------------------------------------------------------


def _oracle_winners(measured):
    """Independent restatement of the ranking rule."""
    lats = [lat for _, lat in measured]
    best = min(lats)
    window = [(r, lat) for r, lat in measured if lat <= 1.2 * best]
    tput = lambda r: r.throughput_bps if r.throughput_bps is not None else -1
    top = max(tput(r) for r, _ in window)
    return {r.url for r, _ in window if tput(r) == top}


@pytest.mark.parametrize("seed", range(200))
def test_rank_matches_oracle(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 6)
    measured = [
        (
            wire.ServerRef(
                url=f"http://s{i}:1",
                throughput_bps=rng.choice([None, 10e6, 50e6, rng.uniform(1e6, 1e8)]),
            ),
            rng.choice([rng.uniform(1, 300), 30.0, 33.0]),
        )
        for i in range(n)
    ]
    winners = _oracle_winners(measured)
    picks = {cl.rank_candidates(measured, random.Random(k)).url for k in range(60)}
    assert picks <= winners
    if len(winners) > 1:
        assert len(picks) > 1


def test_throughput_breaks_latency_tie():
    a = wire.ServerRef(url="http://a:1", throughput_bps=10e6)
    b = wire.ServerRef(url="http://b:1", throughput_bps=50e6)
    assert cl.rank_candidates([(a, 30.0), (b, 34.0)], random.Random(0)).url == "http://b:1"
    assert cl.rank_candidates([(a, 30.0), (b, 90.0)], random.Random(0)).url == "http://a:1"


def test_rank_empty():
    with pytest.raises(cl.NoServerFound):
        cl.rank_candidates([], random.Random(0))


def _two_servers(lat_a, lat_b, **spec_kw):
    f = FileSpec(name="app.bin", size=1000, key="app")
    return Topology(
        servers=[ServerSpec(files=[f], injected_latency_ms=lat_a, **spec_kw), ServerSpec(files=[f], injected_latency_ms=lat_b)],
        indexers=[IndexerSpec()],
        registrations=[(0, 0), (0, 1)],
    )


def test_select_prefers_lower_latency():
    with spawn(_two_servers(30, 90)) as net:
        c = net.client()
        hit = c.search(hash=net.hash_of("app")).hits[0]
        for _ in range(5):
            assert c.select_server(hit).url == net.servers[0].url


def test_select_single_candidate_and_all_down():
    f = FileSpec(name="x.bin", size=10)
    topo = Topology(servers=[ServerSpec(files=[f])], indexers=[IndexerSpec()], registrations=[(0, 0)])
    with spawn(topo) as net:
        c = net.client()
        hit = c.search(hash=net.hash_of("x.bin")).hits[0]
        assert c.select_server(hit).url == net.servers[0].url
        net.take_down(0)
        with pytest.raises(cl.AllCandidatesUnreachable) as err:
            c.select_server(hit)
        assert net.servers[0].url in err.value.attempts


# -- search --------------------------------------------------------------------------


def _two_indexers(same_content):
    a = FileSpec(name="app.bin", size=100, key="app-a")
    b = FileSpec(name="app.bin", size=100, key="app-a" if same_content else "app-b")
    return Topology(
        servers=[ServerSpec(files=[a]), ServerSpec(files=[b])],
        indexers=[IndexerSpec(), IndexerSpec()],
        registrations=[(0, 0), (1, 1)],
    )


def test_agreeing_indexers_merge_sources():
    with spawn(_two_indexers(True)) as net:
        res = net.client().search(query="app.bin")
        assert len(res.hits) == 1 and res.warnings == []
        assert {s.url for s in res.hits[0].sources} == {n.url for n in net.servers}


def test_conflicting_indexers_warn():
    with spawn(_two_indexers(False)) as net:
        c = net.client()
        res = c.search(query="app.bin")
        assert len(res.hits) == 2
        assert len(res.warnings) == 1
        for key in ("app-a", "app-b"):
            assert net.hash_of(key) in res.warnings[0]
        assert c.warnings == res.warnings


def test_unreachable_indexer_is_skipped_with_notice():
    with spawn(_two_indexers(True)) as net:
        dead = f"http://127.0.0.1:{transport.free_port()}"
        c = cl.Client([net.indexers[0].url, dead], mode=cl.PERMISSIVE)
        res = c.search(query="app")
        assert len(res.hits) == 1
        assert any(dead in n for n in res.notices)


def test_no_indexer_reachable():
    c = cl.Client([f"http://127.0.0.1:{transport.free_port()}"])
    with pytest.raises(cl.NoIndexerReachable, match="no indexer reachable"):
        c.search(query="x")


def test_empty_indexer_set():
    with pytest.raises(cl.ClientError):
        cl.Client([]).search(query="x")


def test_zero_hits_notice_and_download_fails(tmp_path):
    with spawn(_two_indexers(True)) as net:
        c = net.client()
        res = c.search(query="missing")
        assert res.hits == [] and res.notices
        with pytest.raises(cl.NoServerFound):
            c.download("0" * 64, tmp_path / "out")
        assert not (tmp_path / "out").exists()


# -- download ------------------------------------------------------------------------


def _single(tamper=False, size=5000):
    f = FileSpec(name="data.bin", size=size)
    return Topology(servers=[ServerSpec(files=[f], tamper=tamper)], indexers=[IndexerSpec()], registrations=[(0, 0)])


def test_healthy_download_is_byte_identical():
    with spawn(_single()) as net:
        out = net.out_path()
        rep = net.client().download(net.hash_of("data.bin"), out)
        assert rep.verified and rep.verdict == "verified"
        assert out.read_bytes() == net.content("data.bin")
        assert rep.server_used == net.servers[0].url
        assert list(out.parent.glob("*.part")) == []


def test_tampered_download_is_quarantined():
    with spawn(_single(tamper=True)) as net:
        out = net.out_path()
        rep = net.client().download(net.hash_of("data.bin"), out)
        assert rep.verdict == "blocked" and rep.reason == "hash mismatch"
        assert rep.actual != rep.expected
        assert not out.exists()
        blocked = cl.quarantine_path(out)
        assert blocked.exists() and blocked.read_bytes() != net.content("data.bin")
        wire.validate(rep)


def test_tamper_then_honest_retry():
    f = FileSpec(name="app.bin", size=3000, key="app")
    topo = Topology(
        servers=[ServerSpec(files=[f], tamper=True), ServerSpec(files=[f], injected_latency_ms=80)],
        indexers=[IndexerSpec()],
        registrations=[(0, 0), (0, 1)],
    )
    with spawn(topo) as net:
        out = net.out_path()
        rep = net.client().download(net.hash_of("app"), out)
        assert rep.verified and rep.server_used == net.servers[1].url
        assert out.read_bytes() == net.content("app")
        assert cl.quarantine_path(out).exists()


def test_only_one_retry():
    f = FileSpec(name="app.bin", size=3000, key="app")
    topo = Topology(
        servers=[ServerSpec(files=[f], tamper=True) for _ in range(3)],
        indexers=[IndexerSpec()],
        registrations=[(0, 0), (0, 1), (0, 2)],
    )
    with spawn(topo) as net:
        log = net.record_headers()
        rep = net.client().download(net.hash_of("app"), net.out_path())
        assert rep.verdict == "blocked"
        fetches = [p for m, p, _ in log if p.startswith("/dl/")]
        assert len(fetches) == 2


def test_existing_output_is_not_clobbered():
    with spawn(_single()) as net:
        out = net.out_path()
        out.write_bytes(b"mine")
        with pytest.raises(FileExistsError):
            net.client().download(net.hash_of("data.bin"), out)
        assert out.read_bytes() == b"mine"
        rep = net.client().download(net.hash_of("data.bin"), out, overwrite=True)
        assert rep.verified and out.read_bytes() == net.content("data.bin")


def test_direct_server_download():
    with spawn(_single()) as net:
        out = net.out_path()
        c = cl.Client([], mode=cl.PERMISSIVE, scan_enabled=False)
        rep = c.download(net.hash_of("data.bin"), out, server_url=net.servers[0].url)
        assert rep.verified


def test_strict_mode_requires_confirmation():
    with spawn(_single()) as net:
        seen = []
        c = net.client(mode=cl.STRICT, confirm=lambda rec: seen.append(rec) or False)
        out = net.out_path()
        with pytest.raises(cl.DownloadAborted):
            c.download(net.hash_of("data.bin"), out)
        assert seen[0].name == "data.bin" and seen[0].size_bytes == 5000
        assert not out.exists()
        assert net.servers[0].app.queue.active == 0
        c = net.client(mode=cl.STRICT, confirm=lambda rec: True)
        assert c.download(net.hash_of("data.bin"), out).verified


def test_queue_full_is_retryable_error():
    f = FileSpec(name="q.bin", size=100)
    topo = Topology(
        servers=[ServerSpec(files=[f], max_concurrent=1, queue_timeout_s=0.3)],
        indexers=[IndexerSpec()],
        registrations=[(0, 0)],
    )
    with spawn(topo) as net:
        h = net.hash_of("q.bin")
        net.servers[0].app.request_token(h, "http://x")
        with pytest.raises(cl.QueueTimeout) as err:
            net.client().download(h, net.out_path())
        assert "retry later" in str(err.value)


def test_queue_timeout_error_class(tmp_path):
    f = FileSpec(name="q.bin", size=100)
    topo = Topology(servers=[ServerSpec(files=[f], max_concurrent=1, queue_timeout_s=0.3)])
    with spawn(topo) as net:
        h = net.hash_of("q.bin")
        net.servers[0].app.request_token(h, "http://x")
        with pytest.raises(cl.QueueTimeout) as err:
            net.client()._attempt(net.servers[0].url, h, tmp_path / "o", True)
        assert err.value.retry_after_s >= 1


# -- scanning -------------------------------------------------------------------------


class SpyScanner:
    def __init__(self, verdict="clean"):
        self.verdict = verdict
        self.calls = []

    def __call__(self, path):
        self.calls.append(path)
        return cl.ScanVerdict(self.verdict, "EICAR" if self.verdict == "flagged" else "")


def test_scanner_never_sees_unverified_file():
    with spawn(_single(tamper=True)) as net:
        spy = SpyScanner()
        rep = net.client(scanner=spy, scan_enabled=True).download(net.hash_of("data.bin"), net.out_path())
        assert rep.verdict == "blocked" and spy.calls == []
        assert rep.scanner_verdict == "skipped"


def test_flagged_file_is_quarantined():
    with spawn(_single()) as net:
        spy = SpyScanner("flagged")
        out = net.out_path()
        rep = net.client(scanner=spy, scan_enabled=True).download(net.hash_of("data.bin"), out)
        assert spy.calls == [out]
        assert (rep.verdict, rep.reason, rep.scanner_verdict, rep.scanner_detail) == ("blocked", "scanner", "flagged", "EICAR")
        assert not out.exists() and cl.quarantine_path(out).exists()


def test_clean_scan_and_disabled_scan():
    with spawn(_single()) as net:
        spy = SpyScanner("clean")
        rep = net.client(scanner=spy, scan_enabled=True).download(net.hash_of("data.bin"), net.out_path())
        assert rep.scanner_verdict == "clean" and len(spy.calls) == 1
        rep = net.client(scanner=spy, scan_enabled=False).download(net.hash_of("data.bin"), net.out_path())
        assert rep.scanner_verdict == "skipped" and len(spy.calls) == 1


def test_no_scanner_configured_warns():
    with spawn(_single()) as net:
        c = net.client(scan_enabled=True)
        rep = c.download(net.hash_of("data.bin"), net.out_path())
        assert rep.verified and rep.scanner_verdict == "skipped"
        assert any("no scanner" in w for w in c.warnings)


@pytest.mark.parametrize("code, verdict", [(0, "clean"), (1, "flagged"), (3, "flagged")])
def test_command_scanner_exit_codes(tmp_path, code, verdict):
    target = tmp_path / "f"
    target.write_bytes(b"x")
    cmd = f'{sys.executable} -c "import sys; sys.exit({code})"'
    assert cl.CommandScanner(cmd)(target).verdict == verdict


def test_command_scanner_missing_binary(tmp_path):
    assert cl.CommandScanner("/nonexistent/scanner")(tmp_path).verdict == "flagged"


# -- headers ----------------------------------------------------------------------------


def test_header_discipline():
    f = FileSpec(name="app.bin", size=3000, key="app")
    topo = Topology(
        servers=[ServerSpec(files=[f], tamper=True), ServerSpec(files=[f])],
        indexers=[IndexerSpec()],
        registrations=[(0, 0), (0, 1)],
    )
    with spawn(topo) as net:
        log = net.record_headers()
        c = net.client()
        c.search(query="app")
        c.download(net.hash_of("app"), net.out_path())
        assert log
        for _, _, headers in log:
            names = {k.lower() for k, _ in headers}
            assert names <= ALLOWED_HEADERS, names
            assert [v for k, v in headers if k.lower() == "user-agent"] == ["DistriFS/1.0"]


def test_consistency_warnings_unit():
    rec = lambda h, n: FileRecord(hash=h, name=n, size_bytes=0, modified_unix_s=0, rel_path=n)
    ref = [wire.ServerRef(url="http://s:1")]
    a = wire.SearchResponse(hits=[wire.SearchHit(rec("1" * 64, "x"), ref)])
    b = wire.SearchResponse(hits=[wire.SearchHit(rec("2" * 64, "x"), ref), wire.SearchHit(rec("3" * 64, "y"), ref)])
    warnings = cl.consistency_warnings({"A": a, "B": b})
    assert len(warnings) == 1 and "1" * 64 in warnings[0] and "2" * 64 in warnings[0]

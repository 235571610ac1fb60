"""In-process simulated network of real servers, indexers and clients.

Everything binds ephemeral loopback ports and lives under one temporary
directory, so parallel runs never collide and teardown leaves nothing
behind. Fixture bytes are derived from the topology seed, which makes every
run bit-reproducible.

Fault injections: added request latency, payload tampering (first byte
flipped), full takedown, and throttled streams.
"""

from __future__ import annotations

import json
import logging
import random
import shutil
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import core, transport
from .client import PERMISSIVE, Client, ClientError
from .indexer import DEFAULT_CUTOFF, Indexer, IndexerConfig
from .server import FileServer, ServeConfig

logger = logging.getLogger(__name__)

SIM_CRAWL_INTERVAL_S = 60.0


class SimnetError(RuntimeError):
    pass


@dataclass
class FileSpec:
    name: str
    size: int
    key: Optional[str] = None  # files sharing a key have identical bytes

    @property
    def content_key(self) -> str:
        return self.key or self.name


@dataclass
class ServerSpec:
    files: list = field(default_factory=list)
    injected_latency_ms: float = 0.0
    tamper: bool = False
    max_concurrent: int = 0
    throttle_bps: Optional[float] = None
    queue_timeout_s: float = 120.0
    token_ttl_s: int = 60


@dataclass
class IndexerSpec:
    peers: list = field(default_factory=list)
    upstreams: list = field(default_factory=list)
    cutoff: int = DEFAULT_CUTOFF
    local_first: bool = False


@dataclass
class Topology:
    servers: list = field(default_factory=list)
    indexers: list = field(default_factory=list)
    registrations: list = field(default_factory=list)  # (indexer index, server index)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        servers = []
        for s in data.get("servers", []):
            s = dict(s)
            s["files"] = [FileSpec(**f) for f in s.get("files", [])]
            servers.append(ServerSpec(**s))
        return cls(
            servers=servers,
            indexers=[IndexerSpec(**i) for i in data.get("indexers", [])],
            registrations=[tuple(r) for r in data.get("registrations", [])],
            seed=data.get("seed", 0),
        )


def fixture_bytes(seed: int, key: str, size: int) -> bytes:
    return random.Random(f"{seed}:{key}").randbytes(size)


class SimClock:
    """Manually advanced wall clock shared by simulated instances."""

    def __init__(self, start: Optional[float] = None):
        self._now = time.time() if start is None else start
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float):
        with self._lock:
            self._now += seconds


@dataclass
class ServerNode:
    spec: ServerSpec
    root: Path
    app: FileServer
    url: str
    down: bool = False


class Network:
    """Handle over a running topology. Use as a context manager."""

    def __init__(self, topology: Topology, workdir: Path, clock: SimClock, owns_workdir: bool):
        self.topology = topology
        self.workdir = workdir
        self.clock = clock
        self.servers: list = []
        self.indexers: list = []
        self._owns_workdir = owns_workdir
        self._closed = False
        self._contents: dict = {}

    # -- fixtures --------------------------------------------------------

    def content(self, key: str) -> bytes:
        return self._contents[key]

    def hash_of(self, key: str) -> str:
        return core.compute_hash(self._contents[key])

    # -- clients ---------------------------------------------------------

    def client(self, indexers=None, **kw) -> Client:
        urls = [self.indexers[i].url for i in indexers] if indexers is not None else [i.url for i in self.indexers]
        kw.setdefault("mode", PERMISSIVE)
        kw.setdefault("scan_enabled", False)
        return Client(urls, **kw)

    def out_path(self, name: str = "download") -> Path:
        d = self.workdir / "downloads"
        d.mkdir(exist_ok=True)
        return d / f"{uuid.uuid4().hex}-{name}"

    # -- faults ----------------------------------------------------------

    def take_down(self, index: int) -> bool:
        node = self.servers[index]
        if not node.down:
            node.app.stop()
            node.down = True
        return True

    def settle(self):
        """Advance past the stale TTL, then re-crawl and evict everywhere."""
        ttl = max((idx.stale_ttl_s for idx in self.indexers), default=0)
        self.clock.advance(ttl + 1)
        for idx in self.indexers:
            idx.recrawl()
            idx.evict_stale()

    def record_headers(self) -> list:
        log: list = []
        for node in self.servers:
            if not node.down:
                node.app.service.header_log = log
        for idx in self.indexers:
            idx.service.header_log = log
        return log

    # -- teardown --------------------------------------------------------

    def teardown(self):
        if self._closed:
            return
        self._closed = True
        for node in self.servers:
            if not node.down:
                node.app.stop()
                node.down = True
        for idx in self.indexers:
            idx.stop()
        if self._owns_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.teardown()


def spawn(topology: Topology, workdir: Optional[Path] = None, clock: Optional[SimClock] = None) -> Network:
    """Start every server and indexer of ``topology`` and run its registrations."""
    owns = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="distrifs-sim-")) if owns else Path(workdir)
    net = Network(topology, workdir, clock or SimClock(), owns)
    try:
        for i, spec in enumerate(topology.servers):
            root = workdir / f"server{i}"
            root.mkdir(parents=True)
            for f in spec.files:
                data = net._contents.get(f.content_key)
                if data is None:
                    data = fixture_bytes(topology.seed, f.content_key, f.size)
                    net._contents[f.content_key] = data
                path = root / f.name
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
            app = FileServer(
                ServeConfig(
                    root=root,
                    port=0,
                    max_concurrent=spec.max_concurrent,
                    queue_wait_timeout_s=spec.queue_timeout_s,
                    token_ttl_s=spec.token_ttl_s,
                    name=f"sim-server-{i}",
                ),
                clock=net.clock,
            )
            app.faults.tamper = spec.tamper
            app.faults.throttle_bps = spec.throttle_bps
            app.start()
            app.service.request_delay_s = spec.injected_latency_ms / 1000.0
            net.servers.append(ServerNode(spec=spec, root=root, app=app, url=app.url))

        for j, spec in enumerate(topology.indexers):
            idx = Indexer(
                IndexerConfig(
                    port=0,
                    db_path=workdir / f"indexer{j}",
                    name=f"sim-indexer-{j}",
                    cutoff=spec.cutoff,
                    crawl_interval_s=SIM_CRAWL_INTERVAL_S,
                    background=False,
                    local_first=spec.local_first,
                ),
                clock=net.clock,
            )
            idx.bind()
            net.indexers.append(idx)
        for j, spec in enumerate(topology.indexers):
            for p in spec.peers:
                net.indexers[j].add_peer(net.indexers[p].url)
            for u in spec.upstreams:
                net.indexers[j].add_peer(net.indexers[u].url, upstream=True)
        for idx in net.indexers:
            idx.start()
        for node in net.servers:
            transport.get_json(f"{node.url}/api/v1/info")
        for idx in net.indexers:
            transport.get_json(f"{idx.url}/api/v1/info")
        for j, i in topology.registrations:
            net.indexers[j].register_server(net.servers[i].url)
    except Exception as exc:
        net.teardown()
        raise SimnetError(f"failed to spawn topology: {exc}") from exc
    return net


# -- scenarios ----------------------------------------------------------------


class Recorder:
    """Serialized sink for outcomes coming from concurrent client threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.outcomes: list = []

    def add(self, **outcome):
        with self._lock:
            self.outcomes.append(outcome)


@dataclass
class ScenarioResult:
    outcomes: list = field(default_factory=list)
    elapsed_s: float = 0.0
    download_attempts: int = 0
    download_successes: int = 0
    max_concurrent_streams: int = 0

    @property
    def availability(self) -> Optional[float]:
        if self.download_attempts == 0:
            return None
        return self.download_successes / self.download_attempts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["availability"] = self.availability
        return d


class _Sampler(threading.Thread):
    def __init__(self, net: Network, interval_s: float = 0.002):
        super().__init__(daemon=True)
        self.net = net
        self.interval_s = interval_s
        self.max_seen = 0
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            for node in self.net.servers:
                self.max_seen = max(self.max_seen, node.app.queue.active)
            time.sleep(self.interval_s)

    def stop(self):
        self._halt.set()
        self.join()


def _download_once(net: Network, rec: Recorder, content_hash: str, client_kw: dict, op_index: int):
    client = net.client(**client_kw)
    out = net.out_path()
    t0 = time.perf_counter()
    try:
        report = client.download(content_hash, out)
        ok = report.verified and core.compute_hash(out.read_bytes()) == content_hash
        rec.add(op="download", index=op_index, ok=ok, server=report.server_used, verdict=report.verdict, elapsed_s=time.perf_counter() - t0)
    except (ClientError, OSError) as exc:
        rec.add(op="download", index=op_index, ok=False, detail=str(exc), elapsed_s=time.perf_counter() - t0)


def run_scenario(net: Network, actions: list) -> ScenarioResult:
    """Execute scripted client actions and collect metrics.

    Supported actions (dicts): ``search`` (query/hash/file), ``download``
    (file or hash, optional ``clients`` for concurrency and ``stagger_ms``),
    ``take_down`` (server), ``settle``, ``sleep`` (seconds). Failures of
    individual actions are recorded, never raised.
    """
    rec = Recorder()
    sampler = _Sampler(net)
    for node in net.servers:
        node.app.queue.max_active_seen = node.app.queue.active
    sampler.start()
    t0 = time.perf_counter()
    try:
        for i, action in enumerate(actions):
            op = action.get("op")
            h = action.get("hash") or (net.hash_of(action["file"]) if "file" in action else None)
            client_kw = {k: action[k] for k in ("indexers",) if k in action}
            if op == "download":
                n = int(action.get("clients", 1))
                stagger = action.get("stagger_ms", 0) / 1000.0
                with ThreadPoolExecutor(max_workers=max(n, 1)) as pool:
                    for _ in range(n):
                        pool.submit(_download_once, net, rec, h, client_kw, i)
                        if stagger:
                            time.sleep(stagger)
            elif op == "search":
                try:
                    res = net.client(**client_kw).search(query=action.get("query"), hash=h)
                    rec.add(op="search", index=i, ok=True, hits=len(res.hits), warnings=res.warnings)
                except ClientError as exc:
                    rec.add(op="search", index=i, ok=False, detail=str(exc))
            elif op == "take_down":
                net.take_down(int(action["server"]))
                rec.add(op="take_down", index=i, ok=True, server=int(action["server"]))
            elif op == "settle":
                net.settle()
                rec.add(op="settle", index=i, ok=True)
            elif op == "sleep":
                time.sleep(float(action.get("seconds", 0)))
                rec.add(op="sleep", index=i, ok=True)
            else:
                rec.add(op=str(op), index=i, ok=False, detail="unknown action")
    finally:
        sampler.stop()
    downloads = [o for o in rec.outcomes if o["op"] == "download"]
    high_water = max([sampler.max_seen] + [n.app.queue.max_active_seen for n in net.servers])
    return ScenarioResult(
        outcomes=rec.outcomes,
        elapsed_s=time.perf_counter() - t0,
        download_attempts=len(downloads),
        download_successes=sum(1 for o in downloads if o["ok"]),
        max_concurrent_streams=high_water,
    )


def run_scenario_file(path) -> ScenarioResult:
    spec = json.loads(Path(path).read_text())
    topo = Topology.from_dict(dict(spec.get("topology", {}), seed=spec.get("seed", 0)))
    with spawn(topo) as net:
        return run_scenario(net, spec.get("actions", []))


# -- out-of-process indexer ----------------------------------------------------


class IndexerProcess:
    """An indexer running as a separate ``python -m distrifs index`` process."""

    def __init__(self, db_path: Path, extra_args=(), log_path: Optional[Path] = None):
        self.db_path = Path(db_path)
        self.extra_args = list(extra_args)
        self.log_path = log_path
        self.proc: Optional[subprocess.Popen] = None
        self.url: Optional[str] = None
        self._log = None

    def start(self, timeout: float = 20.0) -> "IndexerProcess":
        cmd = [
            sys.executable, "-m", "distrifs", "index",
            "--addr", "127.0.0.1:0", "--db", str(self.db_path), "--no-background", "-v",
            *self.extra_args,
        ]
        self._log = open(self.log_path, "ab") if self.log_path else subprocess.DEVNULL
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=self._log)
        deadline = time.monotonic() + timeout
        line = self.proc.stdout.readline().decode().strip()
        if not line.startswith("listening on "):
            self.kill()
            raise SimnetError(f"indexer process failed to start: {line!r}")
        self.url = line[len("listening on "):]
        while time.monotonic() < deadline:
            try:
                transport.get_json(f"{self.url}/api/v1/info", timeout=1)
                return self
            except (transport.TransportError, transport.HTTPStatusError):
                time.sleep(0.05)
        self.kill()
        raise SimnetError("indexer process never became healthy")

    def kill(self):
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=10)
        if self.proc is not None and self.proc.stdout:
            self.proc.stdout.close()
        if self._log not in (None, subprocess.DEVNULL):
            self._log.close()
            self._log = None
        self.proc = None

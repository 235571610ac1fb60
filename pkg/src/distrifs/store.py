"""Persistent ordered key-value store backing the indexer.

SQLite provides the durable ordered map and atomic batches; a small LRU
keeps hot entries in memory. Values are JSON documents. File bodies never
go in here.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Optional

DEFAULT_CACHE_SIZE = 10_000
DB_FILE = "index.sqlite3"


def _prefix_end(prefix: str) -> str:
    return prefix[:-1] + chr(ord(prefix[-1]) + 1)


class LRUCache:
    def __init__(self, capacity: int = DEFAULT_CACHE_SIZE):
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        try:
            value = self._data[key]
        except KeyError:
            self.misses += 1
            return None
        self._data.move_to_end(key)
        self.hits += 1
        return value

    def put(self, key, value):
        if self.capacity <= 0:
            return
        self._data[key] = value
        self._data.move_to_end(key)
        while len(self._data) > self.capacity:
            self._data.popitem(last=False)

    def discard(self, key):
        self._data.pop(key, None)

    def __len__(self):
        return len(self._data)


class Batch:
    """Buffered writes applied atomically by :meth:`IndexStore.write`."""

    def __init__(self):
        self.ops: list = []

    def put(self, key: str, value):
        self.ops.append((key, value))

    def delete(self, key: str):
        self.ops.append((key, None))


class IndexStore:
    """Ordered map of str -> JSON value with atomic batches and prefix scans.

    ``path`` is a directory; ``None`` keeps everything in memory (tests).
    Keys under ``cached_prefixes`` are held in the LRU on read. Cached values
    are shared objects; callers must not mutate them.
    """

    def __init__(
        self,
        path: Optional[Path] = None,
        cache_size: int = DEFAULT_CACHE_SIZE,
        cached_prefixes: tuple = ("e/", "s/"),
    ):
        if path is None:
            target = ":memory:"
        else:
            Path(path).mkdir(parents=True, exist_ok=True)
            target = str(Path(path) / DB_FILE)
        self.path = path
        self._lock = threading.RLock()
        self._db = sqlite3.connect(target, check_same_thread=False, isolation_level=None)
        self._db.execute("CREATE TABLE IF NOT EXISTS kv (k TEXT PRIMARY KEY, v TEXT NOT NULL) WITHOUT ROWID")
        self.cache = LRUCache(cache_size)
        self.cached_prefixes = cached_prefixes

    def close(self):
        with self._lock:
            self._db.close()

    def get(self, key: str):
        cacheable = key.startswith(self.cached_prefixes)
        with self._lock:
            if cacheable:
                hit = self.cache.get(key)
                if hit is not None:
                    return hit
            row = self._db.execute("SELECT v FROM kv WHERE k = ?", (key,)).fetchone()
            if row is None:
                return None
            value = json.loads(row[0])
            if cacheable:
                self.cache.put(key, value)
            return value

    def write(self, batch: Batch):
        if not batch.ops:
            return
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                for key, value in batch.ops:
                    if value is None:
                        self._db.execute("DELETE FROM kv WHERE k = ?", (key,))
                    else:
                        self._db.execute(
                            "INSERT OR REPLACE INTO kv (k, v) VALUES (?, ?)",
                            (key, json.dumps(value, sort_keys=True, separators=(",", ":"))),
                        )
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
            self._db.execute("COMMIT")
            for key, value in batch.ops:
                if key.startswith(self.cached_prefixes):
                    if value is None:
                        self.cache.discard(key)
                    else:
                        self.cache.put(key, value)

    def put(self, key: str, value):
        b = Batch()
        b.put(key, value)
        self.write(b)

    def scan(self, prefix: str) -> Iterator[tuple]:
        """(key, value) pairs whose key starts with ``prefix``, in key order."""
        with self._lock:
            rows = self._db.execute(
                "SELECT k, v FROM kv WHERE k >= ? AND k < ? ORDER BY k", (prefix, _prefix_end(prefix))
            ).fetchall()
        for k, v in rows:
            yield k, json.loads(v)

    def keys(self, prefix: str) -> list:
        with self._lock:
            rows = self._db.execute(
                "SELECT k FROM kv WHERE k >= ? AND k < ? ORDER BY k", (prefix, _prefix_end(prefix))
            ).fetchall()
        return [r[0] for r in rows]

    def count(self, prefix: str) -> int:
        with self._lock:
            (n,) = self._db.execute(
                "SELECT COUNT(*) FROM kv WHERE k >= ? AND k < ?", (prefix, _prefix_end(prefix))
            ).fetchone()
        return n

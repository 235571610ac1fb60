"""Content hashing, file metadata and directory scanning.

Every file on the network is identified by the lowercase hex SHA-256 of its
full contents. Everything else (servers, indexers, the client) builds on the
helpers here.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

logger = logging.getLogger(__name__)

CHUNK_SIZE = 64 * 1024
HASH_RE = re.compile(r"^[0-9a-f]{64}$")


class HashReadError(OSError):
    """Reading a stream failed part-way through hashing."""

    def __init__(self, position: int, cause: BaseException):
        super().__init__(f"read failed at byte {position}: {cause}")
        self.position = position
        self.__cause__ = cause


def is_content_hash(value: object) -> bool:
    return isinstance(value, str) and HASH_RE.match(value) is not None


def parse_hash(text: str) -> str:
    """Normalize user input to the canonical form, or raise ValueError."""
    value = text.strip().lower()
    if not HASH_RE.match(value):
        raise ValueError(f"not a SHA-256 hex digest: {text!r}")
    return value


@dataclass(frozen=True)
class FileRecord:
    hash: str
    name: str
    size_bytes: int
    modified_unix_s: int
    rel_path: str

    def __post_init__(self):
        problem = record_problem(self)
        if problem:
            raise ValueError(problem)


def record_problem(rec: FileRecord) -> Optional[str]:
    """Return a description of the first broken FileRecord invariant, if any."""
    if not is_content_hash(rec.hash):
        return "hash must be 64 lowercase hex characters"
    if not isinstance(rec.size_bytes, int) or isinstance(rec.size_bytes, bool) or rec.size_bytes < 0:
        return "size_bytes must be a non-negative integer"
    if not isinstance(rec.modified_unix_s, int) or isinstance(rec.modified_unix_s, bool):
        return "modified_unix_s must be an integer"
    if not isinstance(rec.rel_path, str) or not rec.rel_path:
        return "rel_path must be a non-empty string"
    if rec.rel_path.startswith("/"):
        return "rel_path must not begin with '/'"
    parts = rec.rel_path.split("/")
    if ".." in parts or "" in parts:
        return "rel_path must not contain '..' or empty segments"
    if rec.name != parts[-1]:
        return "name must equal the final segment of rel_path"
    return None


@dataclass(frozen=True)
class Match:
    pass


@dataclass(frozen=True)
class Mismatch:
    expected: str
    actual: str

    def __post_init__(self):
        if self.expected == self.actual:
            raise ValueError("Mismatch requires differing digests")


VerificationOutcome = Union[Match, Mismatch]


def compute_hash(content: Union[bytes, bytearray, BinaryIO, Iterable[bytes]]) -> str:
    """SHA-256 of a byte string, a readable binary stream, or an iterable of chunks.

    Streams are consumed incrementally in ``CHUNK_SIZE`` reads so the input
    may be larger than memory.
    """
    h = hashlib.sha256()
    if isinstance(content, (bytes, bytearray, memoryview)):
        h.update(content)
        return h.hexdigest()
    position = 0
    if hasattr(content, "read"):
        while True:
            try:
                chunk = content.read(CHUNK_SIZE)
            except OSError as exc:
                raise HashReadError(position, exc) from exc
            if not chunk:
                break
            h.update(chunk)
            position += len(chunk)
    else:
        iterator = iter(content)
        while True:
            try:
                chunk = next(iterator)
            except StopIteration:
                break
            except OSError as exc:
                raise HashReadError(position, exc) from exc
            h.update(chunk)
            position += len(chunk)
    return h.hexdigest()


def hash_file(path: Union[str, os.PathLike]) -> str:
    with open(path, "rb") as fh:
        return compute_hash(fh)


def verify_file(path: Union[str, os.PathLike], expected: str) -> VerificationOutcome:
    """Compare a file's digest with ``expected``.

    Missing or unreadable files raise OSError; that is never reported as a
    Mismatch.
    """
    expected = parse_hash(expected)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such regular file: {p}")
    actual = hash_file(p)
    if actual == expected:
        return Match()
    return Mismatch(expected=expected, actual=actual)


def file_record(path: Union[str, os.PathLike], rel_path: str) -> FileRecord:
    st = os.stat(path)
    digest = hash_file(path)
    return FileRecord(
        hash=digest,
        name=rel_path.rsplit("/", 1)[-1],
        size_bytes=st.st_size,
        modified_unix_s=int(st.st_mtime),
        rel_path=rel_path,
    )


def scan_directory(root: Union[str, os.PathLike], warnings: Optional[list] = None) -> list:
    """Hash every regular file below ``root``.

    Symbolic links are never followed. Entries that cannot be read are
    skipped; a message for each is appended to ``warnings`` when given.
    Records come back sorted by ``rel_path``.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"not a directory: {root}")
    sink = warnings if warnings is not None else []

    found = []
    stack = [("", root)]
    while stack:
        prefix, directory = stack.pop()
        try:
            entries = list(os.scandir(directory))
        except OSError as exc:
            sink.append(f"skipped directory {prefix or '.'}: {exc}")
            logger.warning("skipped directory %s: %s", prefix or ".", exc)
            continue
        for entry in entries:
            rel = f"{prefix}/{entry.name}" if prefix else entry.name
            try:
                if entry.is_symlink():
                    continue
                if entry.is_dir(follow_symlinks=False):
                    stack.append((rel, Path(entry.path)))
                elif entry.is_file(follow_symlinks=False):
                    found.append((rel, entry.path))
            except OSError as exc:
                sink.append(f"skipped {rel}: {exc}")

    records = []
    for rel, full in sorted(found):
        try:
            records.append(file_record(full, rel))
        except OSError as exc:
            sink.append(f"skipped {rel}: {exc}")
            logger.warning("skipped %s: %s", rel, exc)
    return records

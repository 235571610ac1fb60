"""DistriFS: decentralized file distribution over plain HTTP."""

from .core import FileRecord, Match, Mismatch, compute_hash, scan_directory, verify_file

__version__ = "1.0"

__all__ = ["FileRecord", "Match", "Mismatch", "compute_hash", "scan_directory", "verify_file"]

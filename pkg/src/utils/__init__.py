"""Utility functions"""

from .helpers import ensure_dir, short_hash, write_json_atomic, read_json
from .errors import RelocError
from .logger import log

__all__ = ["ensure_dir", "short_hash", "write_json_atomic", "read_json", "RelocError", "log"]

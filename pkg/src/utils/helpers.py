"""Utility functions"""

import hashlib
import json
import os
from pathlib import Path


def ensure_dir(directory) -> Path:
    """Ensure directory exists"""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def canonical_json(data) -> str:
    """Key-sorted, whitespace-free JSON used for hashing"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def short_hash(data, length: int = 16) -> str:
    """SHA-256 of the canonical JSON form, truncated"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:length]


def write_json_atomic(path, data, indent: int = 2):
    """Write JSON to a temp file and rename it onto ``path``"""
    path = Path(path)
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, "w") as f:
            json.dump(data, f, indent=indent, sort_keys=True)
        os.replace(temp_path, path)
    except (IOError, OSError):
        if os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError:
                pass
        raise
    return path


def read_json(path):
    with open(path, "r") as f:
        return json.load(f)

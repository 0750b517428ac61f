"""Canonical JSON serialization and content hashing.

Every hash in the package (snapshot ids, entry ids, config hashes, request
fingerprints, transcript digests) goes through these helpers so that equal
content produces equal bytes on every machine.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def content_hash(obj: Any) -> str:
    return sha256_hex(canonical_bytes(obj))


def dump_pretty(obj: Any) -> str:
    """Stable human-readable JSON; key order is whatever the caller built."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"

"""Deterministic seed derivation.

A single master seed fans out to per-component seeds through a stable hash,
so that e.g. adding a site to a config never reshuffles the data another
site generates.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(master: int, *labels: object) -> int:
    """Derive a child seed from a master seed and a label path.

    The derivation is sha256 over ``"<master>/<label>/<label>/..."`` truncated
    to 63 bits, so it is stable across platforms and Python versions.
    """
    key = "/".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK

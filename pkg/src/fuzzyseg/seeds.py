"""Counter-based seed derivation.

Every random draw in a run hangs off one root seed through a named path,
so adding or removing one consumer never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *path) -> int:
    """Stable 63-bit seed for the consumer named by path components."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1

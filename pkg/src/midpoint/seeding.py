"""Deterministic random streams derived from one master seed.

Every consumer asks for a generator keyed by a path such as
``("fold", 3, "scheme", "MPSS", "user", "42")``.  The path is folded into
the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, so streams are
independent of evaluation order and safe to use from parallel workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        if part < 0:
            raise ValueError("seed path integers must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key_part(p) for p in path))


def derive_rng(master: int, *path) -> np.random.Generator:
    """Generator for the stream at ``path`` below ``master``."""
    return np.random.default_rng(derive_seed(master, *path))


def derive_int(master: int, *path) -> int:
    """A 32-bit integer seed for libraries that want a plain int."""
    return int(derive_seed(master, *path).generate_state(1)[0])

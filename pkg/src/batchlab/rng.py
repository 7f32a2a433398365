"""Named, seedable random streams.

Every random draw in a run descends from one integer root seed.  A stream is
obtained by hashing its name into the spawn key of a ``numpy.random.SeedSequence``
so that streams are independent of the order in which they are requested and
reproducible across platforms (PCG64 is platform independent).
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

# stream paths drawn by the library; the GP fit itself is deterministic
STREAMS = (("pool", "x"), ("pool", "noise"), ("test", "x"), ("test", "noise"), ("seed_set",),
           ("strategy", "<name>"), ("gfn", "<purpose>", "..."))


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(root: int, *names: str | int) -> np.random.SeedSequence:
    key = tuple(n if isinstance(n, int) else _key(n) for n in names)
    return np.random.SeedSequence(int(root), spawn_key=key)


def stream(root: int, *names: str | int) -> np.random.Generator:
    """Generator for the named sub-stream of ``root``.

    ``stream(7, "gfn", 3)`` and ``stream(7, "gfn", 4)`` are independent.
    """
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *names)))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g


def manifest(root: int, paths=STREAMS) -> dict:
    """Seed manifest recorded alongside every run.

    Each stream is listed with its spawn key; placeholder components such as
    ``<name>`` stand for the strategy or purpose string hashed at run time.
    """
    streams = {}
    for path in paths:
        streams["/".join(path)] = [None if p.startswith("<") or p == "..." else _key(p) for p in path]
    return {"root_seed": int(root), "bit_generator": "PCG64", "spawn_key": "crc32(utf-8 name)",
            "streams": streams}

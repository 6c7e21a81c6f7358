"""Seeded random streams.

All randomness in the package comes from numpy ``Generator`` objects backed by
Philox-4x64, a counter-based generator whose output for a given seed is fixed
across platforms.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(seed: int, *streams: str) -> list:
    """Independent named child streams derived from one seed."""
    out = []
    for name in streams:
        key = int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        out.append(np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key]))))
    return out


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe copy of a generator state."""
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = _arrays(state)
    return np.random.Generator(bitgen)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _arrays(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _arrays(v) for k, v in obj.items()}
    return obj

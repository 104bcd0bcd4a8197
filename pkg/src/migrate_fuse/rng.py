"""Counter-based normal draws keyed by (seed, family, id).

Each draw is a pure function of its key, so results do not depend on
iteration order, chunking or worker count. Uniforms come from the
SplitMix64 finalizer applied to the key; normals from Box-Muller.
"""
from __future__ import annotations

import numpy as np

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

FAMILIES = {
    "row": 1,
    "state_diag": 2,
    "state_offdiag": 3,
    "state_pair": 4,
    "county_row": 5,
    "county_col": 6,
    "entry": 7,
    "population": 8,
    "layout": 9,
    "covariate": 10,
    "misc": 11,
}


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _key(seed: int, family: str | int) -> np.uint64:
    fam = FAMILIES[family] if isinstance(family, str) else int(family)
    with np.errstate(over="ignore"):
        k = _mix(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        k = _mix(np.array([k ^ (np.uint64(fam) * _GOLDEN)], dtype=np.uint64))[0]
    return k


def uniforms(seed: int, family: str | int, ids, stream: int = 0) -> np.ndarray:
    """Uniform(0, 1) draws, one per id, never exactly 0."""
    ids = np.asarray(ids, dtype=np.uint64)
    k = _key(seed, family)
    with np.errstate(over="ignore"):
        z = _mix((ids * np.uint64(2) + np.uint64(stream)) * _GOLDEN + k)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, family: str | int, ids) -> np.ndarray:
    """Standard normal draws, one per id."""
    u1 = uniforms(seed, family, ids, 0)
    u2 = uniforms(seed, family, ids, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

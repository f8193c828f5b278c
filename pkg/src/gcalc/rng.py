"""Counter-based draws keyed by (seed, control id, path block).

Each block of paths gets its own Philox counter range, so a draw depends
only on its (seed, control, block, row, step) coordinates and never on the
order in which blocks are generated.
"""

from __future__ import annotations

import hashlib

import numpy as np

INCREMENT_LAWS = ("rademacher", "gaussian")
_MASK64 = (1 << 64) - 1


def control_key(seed: int, control_id: str) -> int:
    h = int.from_bytes(hashlib.blake2b(control_id.encode(), digest_size=8).digest(), "little")
    return (int(seed) & _MASK64) | (h << 64)


def block_generator(seed: int, control_id: str, block: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=control_key(seed, control_id), counter=int(block) << 64)
    return np.random.Generator(bitgen)


def block_draws(seed: int, control_id: str, block: int, rows: int, steps: int, law: str = "rademacher") -> np.ndarray:
    """Standardized increments of shape (rows, steps): mean 0, variance 1."""
    gen = block_generator(seed, control_id, block)
    if law == "rademacher":
        bits = gen.integers(0, 2, size=(rows, steps), dtype=np.int8)
        return (2.0 * bits - 1.0).astype(float)
    if law == "gaussian":
        return gen.standard_normal((rows, steps))
    raise ValueError(f"unknown increment law {law!r}; expected one of {INCREMENT_LAWS}")

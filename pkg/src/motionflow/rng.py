"""Deterministic random streams with stable, hash-addressed substreams.

Every stream is a counter-based Philox-4x64 generator keyed by
SHA-256(seed, path), so a stream's output depends only on the root seed and
the tags used to reach it, never on draw order elsewhere in the program.
``spawn`` is pure addressing: spawning the same tag twice returns the same
stream, so distinct consumers must use distinct tags.

Uniform doubles come from the generator's native 64-bit conversion,
``(x >> 11) * 2**-53``, which yields values in [0, 1) with 53 random
mantissa bits. Reruns with the same seed are bit-identical across platforms
because Philox is a pure integer counter cipher.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["SeededRng", "ALGORITHM"]

ALGORITHM = "philox4x64"


def _derive_key(seed: int, path: tuple[str, ...]) -> np.ndarray:
    msg = repr((ALGORITHM, int(seed), path)).encode("utf-8")
    digest = hashlib.sha256(msg).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class SeededRng:
    """A named, reproducible random stream."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[str, ...] = ("root",)):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def spawn(self, tag: str) -> "SeededRng":
        """Child stream addressed by ``tag``; independent of this stream's state."""
        return SeededRng(self.seed, self.path + (str(tag),))

    # -- draws ---------------------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return (self._gen.random(size) < p).astype(np.float64)

    def poisson(self, lam: float, size=None) -> np.ndarray:
        return self._gen.poisson(lam, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={'/'.join(self.path)})"

"""Counter-based random streams.

A :class:`Stream` is a value: a seed plus a key path.  Two equal streams always
produce the same numbers, whatever thread or process draws from them, which is
what makes chunked parallel estimation reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_TINY = 2.0**-53


def _key_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative integers or strings")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class Stream:
    seed: int
    key: tuple = ()

    def child(self, *parts) -> "Stream":
        return Stream(self.seed, self.key + tuple(parts))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=tuple(_key_word(p) for p in self.key))
        return np.random.Generator(np.random.Philox(seq))


def as_stream(stream) -> Stream:
    """Accept a Stream, an int seed or None (seed 0)."""
    if isinstance(stream, Stream):
        return stream
    if stream is None:
        return Stream(0)
    return Stream(int(stream))


def open_uniform(gen: np.random.Generator, shape) -> np.ndarray:
    """Uniforms strictly inside (0, 1)."""
    return np.clip(gen.random(shape), _TINY, 1.0 - _TINY)

"""Named random substreams derived from one master seed.

A stream is identified by the master seed plus a path of names, e.g.
``substream(seed, "noise", 3)`` for participant 3's noise. Each name is
mapped to a 32-bit word (CRC-32 for strings, the value itself for ints) and
the words become the ``spawn_key`` of a :class:`numpy.random.SeedSequence`.
Streams with different paths are statistically independent, and rebuilding
one path never depends on which other streams were drawn first, so partial
reruns reproduce the same numbers.
"""

import zlib

import numpy as np


def _word(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0 or name >= 2**32:
            raise ValueError(f"integer stream names must fit in 32 bits, got {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    key = tuple(_word(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))

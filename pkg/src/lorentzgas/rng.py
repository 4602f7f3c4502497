"""Counter-based random substreams.

Every random quantity is drawn from numpy's Philox4x64-10 generator keyed by
(seed, stream tag, block index). Items (orbits, Ulam boxes, rays) are grouped into
blocks of ``BLOCK`` consecutive indices and item k reads row ``k % BLOCK`` of its
block. Draws therefore depend only on (seed, tag, k), never on how work is split
between workers.
"""

import numpy as np

BLOCK = 1024

HORIZON = 1
MU0 = 2
SRB = 3
LEBESGUE = 4
ULAM = 5
ORACLE = 6

_MASK64 = (1 << 64) - 1


def substream(seed: int, tag: int, block: int) -> np.random.Generator:
    key = (int(seed) & _MASK64) | (int(tag) & 0xFF) << 64 | (int(block) & ((1 << 56) - 1)) << 72
    return np.random.Generator(np.random.Philox(key=key))


def uniform_rows(seed: int, tag: int, start: int, count: int, width: int) -> np.ndarray:
    """Rows ``start .. start+count-1`` of the (item, width) uniform table for ``tag``."""
    out = np.empty((count, width))
    if count == 0:
        return out
    first = start // BLOCK
    last = (start + count - 1) // BLOCK
    pos = 0
    for b in range(first, last + 1):
        rows = substream(seed, tag, b).random((BLOCK, width))
        lo = max(start - b * BLOCK, 0)
        hi = min(start + count - b * BLOCK, BLOCK)
        out[pos:pos + hi - lo] = rows[lo:hi]
        pos += hi - lo
    return out

"""Seedable counter-based random streams.

Every source of randomness in the package draws from a named Philox
stream keyed by (seed, stream id, index). Philox is counter-based, so
the same (seed, stream, index) triple yields the same values on every
platform and every run, independent of draw order in other streams.
"""

import numpy as np

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_DROPOUT = 2
STREAM_GRADCHECK = 3


def stream(seed, stream_id, index=0):
    """Return a fresh Generator for the given (seed, stream, index) triple."""
    if not 0 <= index < 2**32:
        raise ValueError(f"stream index out of range: {index}")
    key = np.array([seed, (int(stream_id) << 32) | int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

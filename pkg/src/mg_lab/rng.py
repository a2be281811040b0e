"""Named random substreams derived from a single 64-bit seed."""
import zlib

import numpy as np

DATA = "data"
INIT = "init"
DROP = "drop"
SCALE = "scale"
SAMPLER = "sampler"
EVAL = "eval"


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, name, *index)``.

    The name is hashed with CRC32 so the mapping is stable across processes
    and Python versions (unlike ``hash``).
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    entropy = [seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode()), *index]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

"""Named random substreams derived from a single experiment seed."""

import numpy as np

INIT = 0
SAMPLING = 1
SHUFFLE = 2
HEAD_INIT = 3


def substream(seed: int, stream: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([seed, stream])

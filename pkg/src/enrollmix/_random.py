import numpy as np


def as_generator(seed):
    """Return a ``numpy.random.Generator`` for an int seed or pass one through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(seed, *keys):
    """Derive a child seed from ``seed`` and a tuple of non-negative integer keys.

    The derivation goes through ``SeedSequence`` so that (seed, keys) pairs
    map to statistically independent streams, independent of call order.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)

"""Seed handling.

Every random draw in the package comes from a PCG64 generator. Streams for
batch item ``i`` of a run seeded with ``master`` are derived from the pair
``(master, i)``, so a batch gives the same results in any execution order.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def _check(seed):
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def generator(seed):
    """Generator for a single run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_check(seed))))


def stream(master, index):
    """Generator for item ``index`` of a batch seeded with ``master``."""
    ss = np.random.SeedSequence([_check(master), _check(index)])
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(master, index):
    """Integer seed for item ``index``; used when a callee wants a seed, not a generator."""
    ss = np.random.SeedSequence([_check(master), _check(index)])
    return int(ss.generate_state(1, np.uint64)[0])

"""Synthetic labour markets with a smoothed block-structured transition matrix."""

from dataclasses import dataclass

import numpy as np

from lmsbi import rng as rngmod
from lmsbi.errors import ValidationError
from lmsbi.market import MarketSpec


@dataclass(frozen=True)
class SynthConfig:
    n: int = 10
    workers_per_occupation: int = 100
    block_count: int = 2
    intra_block_mass: float = 0.8
    smoothing_epsilon: float = 0.01
    p_max: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"n must be a positive integer, got {self.n}")
        if self.workers_per_occupation < 1:
            raise ValidationError("workers_per_occupation must be >= 1")
        if not 1 <= self.block_count <= self.n:
            raise ValidationError(f"block_count must lie in [1, n={self.n}], got {self.block_count}")
        if not 0.0 < self.intra_block_mass < 1.0:
            raise ValidationError("intra_block_mass must lie in (0, 1)")
        if not self.smoothing_epsilon >= 0.0:
            raise ValidationError("smoothing_epsilon must be >= 0")
        if not 0.0 <= self.p_max <= 1.0:
            raise ValidationError("p_max must lie in [0, 1]")


def block_labels(n, block_count):
    """Contiguous equal-size blocks; the remainder joins the last block."""
    size = n // block_count
    return np.minimum(np.arange(n) // size, block_count - 1)


def block_matrix(n, block_count, intra_block_mass, smoothing_epsilon):
    labels = block_labels(n, block_count)
    same = labels[:, None] == labels[None, :]
    P = np.zeros((n, n))
    for i in range(n):
        inside = same[i]
        n_in = inside.sum()
        n_out = n - n_in
        if n_out == 0:
            P[i] = 1.0 / n
            continue
        P[i, inside] = intra_block_mass / n_in
        P[i, ~inside] = (1.0 - intra_block_mass) / n_out
    P += smoothing_epsilon
    return P / P.sum(axis=1, keepdims=True)


def generate_market(cfg: SynthConfig) -> MarketSpec:
    gen = rngmod.generator(cfg.seed)
    z = np.full(cfg.n, cfg.workers_per_occupation, dtype=np.int64)
    p = gen.uniform(0.0, cfg.p_max, size=cfg.n)
    P = block_matrix(cfg.n, cfg.block_count, cfg.intra_block_mass, cfg.smoothing_epsilon)
    return MarketSpec(n=cfg.n, z=z, p=p, P=P)

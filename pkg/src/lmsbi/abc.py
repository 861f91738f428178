"""Rejection ABC, used as a likelihood-free reference on small problems."""

import math
from dataclasses import dataclass

import numpy as np

from lmsbi import rng as rngmod
from lmsbi.errors import ValidationError


@dataclass(frozen=True)
class AbcConfig:
    draws: int = 10_000
    quantile: float = 0.01
    epsilon: float = None
    scale: str = "mad"
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ValidationError("draws must be >= 1")
        if self.epsilon is None and not 0.0 < self.quantile <= 1.0:
            raise ValidationError("quantile must lie in (0, 1]")
        if self.epsilon is not None and not self.epsilon >= 0.0:
            raise ValidationError("epsilon must be >= 0")
        if self.scale not in ("mad", "std"):
            raise ValidationError("scale must be 'mad' or 'std'")


@dataclass
class AbcResult:
    accepted: np.ndarray
    distances: np.ndarray
    threshold: float
    thetas: np.ndarray
    all_distances: np.ndarray

    @property
    def acceptance_rate(self):
        return self.accepted.shape[0] / self.thetas.shape[0]

    def to_csv(self, path, columns=None):
        cols = columns or [f"theta_{k}" for k in range(self.accepted.shape[1])]
        with open(path, "w") as fh:
            fh.write(",".join([*cols, "distance"]) + "\n")
            for th, d in zip(self.accepted, self.distances):
                fh.write(",".join(repr(float(x)) for x in (*th, d)) + "\n")


def summary_scale(S, kind="mad"):
    """Per-component scale of a batch of summaries; degenerate components get scale 1."""
    if kind == "mad":
        s = np.median(np.abs(S - np.median(S, axis=0)), axis=0)
    else:
        s = S.std(axis=0)
    return np.where(s > 0.0, s, 1.0)


def rejection_abc(prior, simulator, summary, y, cfg: AbcConfig) -> AbcResult:
    """Draw ``cfg.draws`` prior samples, simulate, keep the closest.

    ``prior.sample(count, gen)`` draws parameters, ``simulator(theta, seed)``
    returns data and ``summary(data)`` a vector. Distances are Euclidean
    after dividing each summary component by its batch scale (median
    absolute deviation by default). Draw ``i`` is simulated with seed
    ``(cfg.seed, i + 1)``.
    """
    thetas = np.atleast_2d(prior.sample(cfg.draws, rngmod.stream(cfg.seed, 0)))
    if thetas.shape[0] != cfg.draws:
        thetas = thetas.reshape(cfg.draws, -1)
    S = np.stack([
        np.atleast_1d(np.asarray(summary(simulator(th, rngmod.child_seed(cfg.seed, i + 1))), dtype=np.float64))
        for i, th in enumerate(thetas)
    ])
    s_obs = np.atleast_1d(np.asarray(summary(y), dtype=np.float64))
    scale = summary_scale(S, cfg.scale)
    dist = np.sqrt((((S - s_obs) / scale) ** 2).sum(axis=1))
    if cfg.epsilon is not None:
        keep = np.flatnonzero(dist <= cfg.epsilon)
        if keep.size == 0:
            raise ValidationError(
                f"no draw within epsilon={cfg.epsilon} (min distance {dist.min():.4g}); use quantile mode"
            )
        threshold = float(cfg.epsilon)
    else:
        k = max(1, math.ceil(cfg.quantile * cfg.draws - 1e-9))
        keep = np.sort(np.argsort(dist, kind="stable")[:k])
        threshold = float(dist[keep].max())
    return AbcResult(accepted=thetas[keep], distances=dist[keep], threshold=threshold, thetas=thetas,
                     all_distances=dist)

"""Simulation-based calibration.

For each trial a parameter is drawn from the prior, data are simulated from
it, and the rank of the true parameter among ``L`` posterior draws is
recorded per component. A calibrated posterior gives ranks uniform on
``0..L``.

Reading the histogram shape: a central peak (tails under-represented) means
the posterior is wider than it should be; a U shape (mass piling in the
extreme bins) means it is too narrow; a slope means bias.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from lmsbi import rng as rngmod
from lmsbi.errors import ValidationError


def uniformity_band(N, bins, coverage=0.99, p=None):
    """Central ``coverage`` interval of Binomial(N, p) bin counts (``p = 1/bins`` by default)."""
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    p = np.full(bins, 1.0 / bins) if p is None else np.asarray(p, dtype=np.float64)
    if coverage >= 1.0:
        return np.zeros(bins), np.full(bins, float(N))
    a = (1.0 - coverage) / 2.0
    low = np.maximum(stats.binom.ppf(a, N, p), 0.0)
    high = stats.binom.ppf(1.0 - a, N, p)
    return low, high


def rank_bins(L, bins):
    """Bin index for each rank value ``0..L`` and the probability of each bin under uniform ranks."""
    idx = (np.arange(L + 1) * bins) // (L + 1)
    prob = np.bincount(idx, minlength=bins) / (L + 1)
    return idx, prob


def shape_flag(counts, prob, N, z_crit=3.0):
    """Classify a rank histogram by the mass in its outer fifth."""
    bins = counts.size
    k = max(1, bins // 10)
    tail = np.r_[np.arange(k), np.arange(bins - k, bins)]
    exp_p = prob[tail].sum()
    if N == 0 or exp_p in (0.0, 1.0):
        return "undetermined"
    z_tail = (counts[tail].sum() - N * exp_p) / np.sqrt(N * exp_p * (1 - exp_p))
    half = bins // 2
    lo_p = prob[:half].sum()
    z_skew = (counts[:half].sum() - N * lo_p) / np.sqrt(N * lo_p * (1 - lo_p))
    if z_tail < -z_crit:
        return "central_peak"
    if z_tail > z_crit:
        return "edge_heavy"
    if abs(z_skew) > z_crit:
        return "skewed"
    return "uniform"


@dataclass
class SbcReport:
    ranks: np.ndarray
    L: int
    bins: int
    counts: np.ndarray
    band_low: np.ndarray
    band_high: np.ndarray
    chi2: np.ndarray
    p_values: np.ndarray
    in_band_fraction: np.ndarray
    patterns: list
    skipped: int = 0
    skipped_reasons: list = field(default_factory=list)
    names: tuple = ()

    @property
    def trials(self):
        return self.ranks.shape[0]

    def passes(self, alpha=0.01):
        return self.p_values > alpha

    def to_dict(self):
        return {
            "trials": int(self.trials),
            "skipped": int(self.skipped),
            "skipped_reasons": self.skipped_reasons[:20],
            "L": int(self.L),
            "bins": int(self.bins),
            "parameters": [
                {
                    "name": self.names[k] if k < len(self.names) else f"theta_{k}",
                    "ranks": self.ranks[:, k].tolist(),
                    "counts": self.counts[k].tolist(),
                    "chi2": float(self.chi2[k]),
                    "p_value": float(self.p_values[k]),
                    "in_band_fraction": float(self.in_band_fraction[k]),
                    "pattern": self.patterns[k],
                }
                for k in range(self.counts.shape[0])
            ],
            "band_low": self.band_low.tolist(),
            "band_high": self.band_high.tolist(),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("parameter,rank_bin,count,band_low,band_high\n")
            for k in range(self.counts.shape[0]):
                name = self.names[k] if k < len(self.names) else f"theta_{k}"
                for b in range(self.bins):
                    fh.write(f"{name},{b},{int(self.counts[k, b])},{int(self.band_low[b])},{int(self.band_high[b])}\n")


def summarize_ranks(ranks, L, bins=20, coverage=0.99, skipped=0, skipped_reasons=(), names=()):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.ndim == 1:
        ranks = ranks[:, None]
    if ranks.size and (ranks.min() < 0 or ranks.max() > L):
        raise ValidationError("ranks must lie in [0, L]")
    N, D = ranks.shape
    idx, prob = rank_bins(L, bins)
    counts = np.stack([np.bincount(idx[ranks[:, k]], minlength=bins) for k in range(D)]) if N else np.zeros((D, bins), int)
    low, high = uniformity_band(N, bins, coverage, p=prob)
    chi2 = np.empty(D)
    pval = np.empty(D)
    for k in range(D):
        if N:
            res = stats.chisquare(counts[k], f_exp=N * prob)
            chi2[k], pval[k] = res.statistic, res.pvalue
        else:
            chi2[k], pval[k] = np.nan, np.nan
    in_band = ((counts >= low) & (counts <= high)).mean(axis=1)
    patterns = [shape_flag(counts[k], prob, N) for k in range(D)]
    return SbcReport(ranks=ranks, L=L, bins=bins, counts=counts, band_low=low, band_high=high, chi2=chi2,
                     p_values=pval, in_band_fraction=in_band, patterns=patterns, skipped=skipped,
                     skipped_reasons=list(skipped_reasons), names=tuple(names))


def run_sbc(prior, simulator, posterior_factory, N=300, L=100, seed=0, bins=20, coverage=0.99, names=()):
    """Rank statistics over ``N`` trials.

    ``prior.sample(count, gen)`` draws parameters; ``simulator(theta, seed)``
    returns data; ``posterior_factory(data, L, seed)`` returns ``L`` posterior
    draws (``L x D``). Trials whose posterior raises are skipped and counted.
    """
    if L < 1 or N < 1:
        raise ValidationError("N and L must be positive")
    ranks, reasons = [], []
    for i in range(N):
        theta = np.ravel(prior.sample(1, rngmod.stream(seed, 3 * i)))
        data = simulator(theta, rngmod.child_seed(seed, 3 * i + 1))
        try:
            draws = np.asarray(posterior_factory(data, L, rngmod.child_seed(seed, 3 * i + 2)), dtype=np.float64)
            draws = draws.reshape(L, -1)
        except Exception as exc:  # noqa: BLE001 - any posterior failure skips the trial
            reasons.append(f"trial {i}: {type(exc).__name__}: {exc}")
            continue
        ranks.append((draws < theta[None, :]).sum(axis=0))
    ranks = np.array(ranks, dtype=np.int64).reshape(len(ranks), -1) if ranks else np.zeros((0, len(names) or 1), int)
    return summarize_ranks(ranks, L, bins, coverage, skipped=len(reasons), skipped_reasons=reasons, names=names)

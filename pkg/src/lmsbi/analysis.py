"""Post-inference analytics and the scaling benchmark."""

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from lmsbi.errors import LmsbiError, ValidationError
from lmsbi.market import BehaviouralParams, SimulationConfig, simulate_micro


def posterior_correlation(samples):
    """Pearson correlation matrix; constant columns get correlation 0 (diagonal stays 1)."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("need at least 2 samples")
    dev = X - X.mean(axis=0)
    sd = np.sqrt((dev * dev).sum(axis=0))
    flat = sd == 0
    if flat.any():
        warnings.warn(f"zero-variance columns {np.flatnonzero(flat).tolist()}; their correlations set to 0",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(flat, 1.0, sd)
    C = (dev.T @ dev) / np.outer(safe, safe)
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    C = np.clip((C + C.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return C


@dataclass
class HdrSelection:
    samples: np.ndarray
    log_prob: np.ndarray
    discarded_log_prob: np.ndarray


def select_top_density(candidates, log_prob, count):
    """Keep the ``count`` candidates with the highest log-density (stable on ties)."""
    order = np.argsort(-log_prob, kind="stable")
    keep, drop = order[:count], order[count:]
    return HdrSelection(candidates[keep], log_prob[keep], log_prob[drop])


def hdr_sample(posterior, count=100, seed=0, oversample=20):
    """``count`` draws from the highest-density region, chosen from ``oversample * count`` posterior draws."""
    from lmsbi.npe import posterior_log_prob, posterior_sample

    if count < 1:
        raise ValidationError("count must be >= 1")
    cand = posterior_sample(posterior, oversample * count, seed)
    return select_top_density(cand, posterior_log_prob(posterior, cand), count)


FEATURES = ("gain_rate", "loss_rate", "co_occurrence")


def run_features(micro, z, start=0):
    """Gain, loss and co-occurrence rates over steps ``start..T-1``.

    Gains are hires into each occupation (column sums of ``J``). Losses are
    separations, recovered exactly from the employment balance
    ``e_t = e_{t-1} - separations + hires`` with ``e_{-1} = z``. Each rate is
    normalized by the total workforce. Co-occurrence averages
    ``sum_i min(gains_i, losses_i) / workforce`` over steps, so it is large
    only when occupations hire and shed workers in the same step.
    """
    z = np.asarray(z, dtype=np.float64)
    workforce = z.sum()
    e = micro.indicators.indicator("e")
    hires = micro.transitions.sum(axis=1).astype(np.float64)
    prev = np.vstack([z[None, :], e[:-1]])
    seps = prev + hires - e
    s = slice(start, None)
    gain = hires[s].sum(axis=1) / workforce
    loss = seps[s].sum(axis=1) / workforce
    both = np.minimum(hires[s], seps[s]).sum(axis=1) / workforce
    return np.array([gain.mean(), loss.mean(), both.mean()])


@dataclass
class ClusterResult:
    labels: np.ndarray
    features: np.ndarray
    params: np.ndarray
    centroids: np.ndarray
    summaries: list
    failures: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("run,delta_u,delta_v,r,label," + ",".join(FEATURES) + "\n")
            for i, (th, lab, f) in enumerate(zip(self.params, self.labels, self.features)):
                fh.write(",".join([str(i), *(repr(float(x)) for x in th), str(int(lab)),
                                   *(repr(float(x)) for x in f)]) + "\n")


def pattern_cluster(spec, parameter_sets, r=0.55, cfg: SimulationConfig = SimulationConfig(T=600, t_shock=231),
                    k=3, restarts=50, seed=0):
    """Simulate each parameter set with ``r`` fixed, extract run features, k-means them.

    Every run uses ``cfg.seed`` (common random numbers), so differences
    between runs come from the parameters alone. Features are z-scored
    before clustering. Features are taken over post-shock steps when a shock
    is configured.
    """
    from sklearn.cluster import KMeans

    sets = np.atleast_2d(np.asarray(parameter_sets, dtype=np.float64))
    if sets.shape[0] == 0:
        raise ValidationError("parameter_sets is empty")
    feats, used, failures = [], [], {}
    start = cfg.t_shock or 0
    for i, th in enumerate(sets):
        try:
            params = BehaviouralParams(th[0], th[1], r)
            micro = simulate_micro(spec, params, cfg)
        except LmsbiError as exc:
            failures[i] = str(exc)
            continue
        feats.append(run_features(micro, spec.z, start))
        used.append([th[0], th[1], r])
    F = np.array(feats)
    P = np.array(used)
    if F.shape[0] == 0:
        raise ValidationError(f"every simulation failed: {failures}")
    mu, sd = F.mean(axis=0), F.std(axis=0)
    Z = (F - mu) / np.where(sd > 0, sd, 1.0)
    n_clusters = min(k, F.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=n_clusters, n_init=restarts, random_state=seed).fit(Z)
    labels = km.labels_.astype(np.int64)
    centroids = km.cluster_centers_ * np.where(sd > 0, sd, 1.0) + mu
    summaries = []
    for c in range(n_clusters):
        m = labels == c
        summaries.append({
            "cluster": c,
            "size": int(m.sum()),
            "delta_u_mean": float(P[m, 0].mean()) if m.any() else float("nan"),
            "delta_v_mean": float(P[m, 1].mean()) if m.any() else float("nan"),
            **{f: float(F[m, j].mean()) if m.any() else float("nan") for j, f in enumerate(FEATURES)},
        })
    return ClusterResult(labels=labels, features=F, params=P, centroids=centroids, summaries=summaries,
                         failures=failures)


@dataclass
class BenchRecord:
    n: int
    phase: str
    rep: int
    seconds: float
    epochs: int = 0


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    defined: bool = True


def linear_fit(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(x).size < 2:
        return LinearFit(float("nan"), float("nan"), float("nan"), defined=False)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), float(r2))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark cell: simulate ``sims`` runs, then train on them."""

    sims: int = 50
    T: int = 600
    t_shock: int = 231
    training: bool = True
    summary_mode: str = "handcrafted"
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0


@dataclass
class BenchResult:
    records: list
    fit: LinearFit
    training_epochs_pearson: float
    failures: dict = field(default_factory=dict)

    def mean_times(self, phase="simulation"):
        ns = sorted({r.n for r in self.records if r.phase == phase})
        return ns, [float(np.mean([r.seconds for r in self.records if r.phase == phase and r.n == n])) for n in ns]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("n,phase,rep,seconds,epochs\n")
            for r in self.records:
                fh.write(f"{r.n},{r.phase},{r.rep},{r.seconds!r},{r.epochs}\n")

    def fit_dict(self):
        return {"slope": self.fit.slope, "intercept": self.fit.intercept, "r2": self.fit.r2,
                "defined": self.fit.defined, "pearson_training_time_epochs": self.training_epochs_pearson,
                "pearson_reference": 0.93}


def bench_scaling(n_values, repetitions=25, cfg: BenchConfig = BenchConfig(), progress=None):
    """Wall-time of the simulation and training phases per occupation count.

    Fits mean simulation time against ``n`` by least squares and reports the
    Pearson correlation between training time and epochs across all cells.
    """
    from lmsbi.npe import PriorBox, default_train_config, fit_posterior, run_simulation_batch, sample_prior
    from lmsbi.synth import SynthConfig, generate_market

    n_values = [int(n) for n in n_values]
    if n_values != sorted(n_values):
        raise ValidationError("n values must be sorted ascending")
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    records, failures = [], {}
    for n in n_values:
        spec = generate_market(SynthConfig(n=n, block_count=max(1, min(n, n // 5 or 1)), seed=cfg.seed))
        sim_cfg = SimulationConfig(T=cfg.T, t_shock=cfg.t_shock if cfg.t_shock < cfg.T else None, seed=cfg.seed)
        for rep in range(repetitions):
            try:
                thetas = sample_prior(PriorBox(), cfg.sims, cfg.seed * 1_000_003 + n * 1000 + rep)
                t0 = time.perf_counter()
                batch = run_simulation_batch(spec, replace(sim_cfg, seed=cfg.seed + rep), thetas)
                records.append(BenchRecord(n, "simulation", rep, time.perf_counter() - t0))
                if cfg.training:
                    t0 = time.perf_counter()
                    tc = replace(default_train_config(cfg.summary_mode), seed=rep, max_epochs=cfg.max_epochs,
                                 patience=cfg.patience)
                    b = fit_posterior(batch, cfg.summary_mode, tc)
                    records.append(BenchRecord(n, "training", rep, time.perf_counter() - t0, b.log.epochs_run))
            except LmsbiError as exc:
                failures[(n, rep)] = str(exc)
            if progress:
                progress(n, rep)
    sim = [r for r in records if r.phase == "simulation"]
    ns = sorted({r.n for r in sim})
    means = [np.mean([r.seconds for r in sim if r.n == n]) for n in ns]
    fit = linear_fit(ns, means)
    tr = [r for r in records if r.phase == "training"]
    rho = pearson([r.seconds for r in tr], [r.epochs for r in tr])
    return BenchResult(records=records, fit=fit, training_epochs_pearson=rho, failures=failures)


def svg_plot(path, series, xlabel="", ylabel="", title="", scatter=False, width=480, height=320):
    """Minimal self-contained SVG line/scatter plot. ``series`` maps label -> (x, y)."""
    pad = 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="{pad}" y="{height - pad + 15}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for k, (label, (x, y)) in enumerate(series.items()):
        col = colors[k % len(colors)]
        pts = [(px(a), py(b)) for a, b in zip(np.asarray(x, float), np.asarray(y, float))]
        if scatter:
            out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{col}"/>' for a, b in pts]
        else:
            out.append('<polyline fill="none" stroke="{}" points="{}"/>'.format(
                col, " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)))
        out.append(f'<text x="{width - pad}" y="{pad + 14 * k}" font-size="11" fill="{col}" '
                   f'text-anchor="end">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))


@dataclass
class RecoveryResult:
    """Per-replicate posterior summaries keyed by summary mode; arrays are ``replicates x 3``."""

    theta: np.ndarray
    level: float
    means: dict
    stds: dict
    lower: dict
    upper: dict
    seconds: dict

    def coverage(self, mode):
        """Fraction of replicates whose credible interval contains each true component."""
        return ((self.lower[mode] <= self.theta) & (self.theta <= self.upper[mode])).mean(axis=0)

    def to_csv(self, path):
        from lmsbi.npe import PARAM_COLUMNS

        cols = ",".join(f"{s}_{p}" for s in ("mean", "std", "lower", "upper") for p in PARAM_COLUMNS)
        with open(path, "w") as fh:
            fh.write(f"mode,replicate,{cols},seconds\n")
            for mode in self.means:
                for k in range(self.means[mode].shape[0]):
                    vals = np.concatenate([self.means[mode][k], self.stds[mode][k], self.lower[mode][k],
                                           self.upper[mode][k]])
                    fh.write(f"{mode},{k}," + ",".join(f"{x:.10g}" for x in vals)
                             + f",{self.seconds[mode][k]:.3f}\n")


def recovery_study(spec, theta=None, sims=1000, replicates=20, modes=("learned", "handcrafted"),
                   cfg: SimulationConfig = SimulationConfig(T=600, t_shock=231), train_cfgs=None,
                   samples=4000, level=0.9, seed=0, progress=None):
    """Repeat the full pipeline at a known ``theta`` and record posterior location and width.

    Replicate ``k`` draws a fresh observation, prior sample and simulation batch;
    every mode in ``modes`` is fitted on that same batch. ``train_cfgs`` maps a
    mode to its TrainConfig (default: the per-mode library default, seeded by ``k``).
    """
    from lmsbi import rng as rngmod
    from lmsbi.npe import (
        THETA_STAR, PriorBox, condition, credible_interval, default_train_config, fit_posterior, observe,
        posterior_sample, run_simulation_batch, sample_prior,
    )

    theta = np.asarray(THETA_STAR if theta is None else theta, dtype=np.float64)
    if replicates < 1:
        raise ValidationError("replicates must be >= 1")
    train_cfgs = train_cfgs or {}
    out = {name: {m: [] for m in modes} for name in ("means", "stds", "lower", "upper", "seconds")}
    for k in range(replicates):
        y = observe(spec, cfg, theta, seed=rngmod.child_seed(seed, 3 * k))
        thetas = sample_prior(PriorBox(), sims, rngmod.child_seed(seed, 3 * k + 1))
        batch = run_simulation_batch(spec, cfg, thetas, master_seed=rngmod.child_seed(seed, 3 * k + 2))
        for mode in modes:
            t0 = time.perf_counter()
            tc = replace(train_cfgs.get(mode, default_train_config(mode)), seed=k)
            draws = posterior_sample(condition(fit_posterior(batch, mode, tc), y), samples, k)
            lo, hi = credible_interval(draws, level)
            out["means"][mode].append(draws.mean(axis=0))
            out["stds"][mode].append(draws.std(axis=0, ddof=1))
            out["lower"][mode].append(lo)
            out["upper"][mode].append(hi)
            out["seconds"][mode].append(time.perf_counter() - t0)
        if progress:
            progress(k)
    arr = {name: {m: np.array(v) for m, v in d.items()} for name, d in out.items()}
    return RecoveryResult(theta=theta, level=level, **arr)

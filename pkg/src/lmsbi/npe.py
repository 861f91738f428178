"""Neural posterior estimation over the labour-market simulator.

Pipeline: uniform prior draws -> seeded simulation batch -> summaries ->
conditional MAF training -> conditioning on an observed trajectory ->
amortized sampling restricted to the prior box.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from lmsbi import rng as rngmod
from lmsbi.errors import LmsbiError, NumericError, ValidationError
from lmsbi.flow import FlowArch, MafStack, Standardizer, TrainConfig, TrainLog, train
from lmsbi.market import PARAM_NAMES, BehaviouralParams, MacroTrajectory, SimulationConfig, simulate
from lmsbi.summaries import RecurrentEmbedding, SummaryVector, handcrafted

THETA_STAR = np.array([0.016, 0.012, 0.55])
MAX_LEAKAGE = 0.99


@dataclass(frozen=True)
class PriorBox:
    lower: tuple = (0.0, 0.0, 0.0)
    upper: tuple = (0.02, 0.02, 1.0)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("lower and upper must be equal-length vectors")
        if not np.all(lo < hi):
            raise ValidationError("prior box needs lower < upper in every dimension")

    @property
    def dim(self):
        return len(self.lower)

    @property
    def lo(self):
        return np.asarray(self.lower, dtype=np.float64)

    @property
    def hi(self):
        return np.asarray(self.upper, dtype=np.float64)

    def contains(self, theta):
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.lo) & (theta <= self.hi), axis=1)

    def log_density(self):
        return -float(np.log(self.hi - self.lo).sum())

    def sample(self, count, gen):
        return gen.uniform(self.lo, self.hi, size=(count, self.dim))


def sample_prior(prior: PriorBox, count, seed):
    if count < 1:
        raise ValidationError("count must be >= 1")
    gen = rngmod.generator(seed)
    return prior.sample(count, gen)


@dataclass
class SimulationBatch:
    """Simulated dataset: ``thetas[i]`` produced ``data[i]`` (a ``T x 4n`` matrix)."""

    thetas: np.ndarray
    data: np.ndarray
    seconds: np.ndarray
    seeds: np.ndarray
    failures: dict = field(default_factory=dict)

    def __len__(self):
        return self.thetas.shape[0]

    def trajectory(self, i):
        return MacroTrajectory(self.data[i])


def _simulate_one(args):
    spec, cfg, theta, seed, simulator = args
    t0 = time.perf_counter()
    try:
        out = simulator(spec, BehaviouralParams.from_array(theta), replace(cfg, seed=seed))
        data = out.data if isinstance(out, MacroTrajectory) else np.asarray(out)
        return data, time.perf_counter() - t0, None
    except (LmsbiError, ValueError, ArithmeticError) as exc:
        return None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"


def run_simulation_batch(spec, cfg: SimulationConfig, thetas, master_seed=None, simulator=simulate,
                         order=None, workers=1, prior: Optional[PriorBox] = None):
    """One simulation per row of ``thetas``; item ``i`` uses seed ``(master_seed, i)``.

    ``order`` permutes execution order only; results are stored by index.
    Failed items are recorded in ``failures`` and dropped from the dataset.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    prior = prior or PriorBox()
    if not np.all(prior.contains(thetas)):
        raise ValidationError("all thetas must lie inside the prior box")
    master = cfg.seed if master_seed is None else master_seed
    N = thetas.shape[0]
    seeds = np.array([rngmod.child_seed(master, i) for i in range(N)], dtype=np.uint64)
    idx = list(range(N)) if order is None else [int(i) for i in order]
    if sorted(idx) != list(range(N)):
        raise ValidationError("order must be a permutation of range(len(thetas))")
    jobs = [(spec, cfg, thetas[i], int(seeds[i]), simulator) for i in idx]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, jobs, chunksize=max(1, N // (4 * workers))))
    else:
        results = [_simulate_one(j) for j in jobs]
    by_index = dict(zip(idx, results))
    seconds = np.array([by_index[i][1] for i in range(N)])
    failures = {i: by_index[i][2] for i in range(N) if by_index[i][2] is not None}
    ok = [i for i in range(N) if i not in failures]
    data = np.stack([by_index[i][0] for i in ok]) if ok else np.empty((0, cfg.T, 4 * spec.n))
    return SimulationBatch(thetas=thetas[ok], data=data, seconds=seconds, seeds=seeds[ok], failures=failures)


class SummaryPipeline:
    """Maps raw ``T x 4n`` trajectories to flow contexts, identically for training and observation."""

    def __init__(self, mode="handcrafted", stat_mode="per_series", embedding=None, input_std=None):
        if mode not in ("handcrafted", "learned"):
            raise ValidationError(f"summary mode must be 'handcrafted' or 'learned', got {mode!r}")
        self.mode = mode
        self.stat_mode = stat_mode
        self.embedding = embedding
        self.input_std = input_std

    def prepare(self, data):
        """Flow training inputs: summary rows (handcrafted) or standardized sequences (learned)."""
        data = np.asarray(data, dtype=np.float64)
        if self.mode == "handcrafted":
            return np.stack([handcrafted(x, self.stat_mode).values for x in data])
        return self.input_std(data)

    def __call__(self, y) -> SummaryVector:
        x = y.data if isinstance(y, MacroTrajectory) else np.asarray(y, dtype=np.float64)
        if self.mode == "handcrafted":
            return handcrafted(x, self.stat_mode)
        if x.shape[1] != self.embedding.input_size:
            raise ValidationError(f"observation has {x.shape[1]} columns, embedding expects {self.embedding.input_size}")
        if self.input_std.mean.ndim == 2 and x.shape[0] != self.input_std.mean.shape[0]:
            raise ValidationError(f"observation has {x.shape[0]} steps, training used {self.input_std.mean.shape[0]}")
        return SummaryVector(self.embedding.forward(self.input_std(x)), "learned")


@dataclass
class PosteriorBuilder:
    """Trained estimator, not yet conditioned on data."""

    flow: MafStack
    summary: SummaryPipeline
    prior: PriorBox
    log: TrainLog

    @property
    def context_dim(self):
        return self.flow.context_dim


# the recurrent embedding trains jointly with the flow and tolerates a larger step
LEARNED_TRAIN = TrainConfig(learning_rate=2e-3)


def default_train_config(mode):
    return LEARNED_TRAIN if mode == "learned" else TrainConfig()


def fit_posterior(dataset: SimulationBatch, mode="handcrafted", train_cfg: Optional[TrainConfig] = None,
                  arch: FlowArch = FlowArch(), hidden_size=32, stat_mode="per_series",
                  prior: Optional[PriorBox] = None, progress=None) -> PosteriorBuilder:
    if mode not in ("handcrafted", "learned"):
        raise ValidationError(f"summary mode must be 'handcrafted' or 'learned', got {mode!r}")
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    train_cfg = train_cfg or default_train_config(mode)
    data = np.asarray(dataset.data, dtype=np.float64)
    if data.ndim != 3:
        raise ValidationError(f"dataset trajectories must be N x T x 4n, got shape {data.shape}")
    if mode == "handcrafted":
        summary = SummaryPipeline("handcrafted", stat_mode)
        ctx = summary.prepare(data)
        flow, _, log = train(dataset.thetas, ctx, train_cfg, arch, progress=progress)
    else:
        N, T, I = data.shape
        # standardized per time step and column, so the shock-driven trend is removed
        input_std = Standardizer.fit(data)
        emb = RecurrentEmbedding(I, hidden_size, seed=rngmod.child_seed(train_cfg.seed, 1))
        if T >= 3:
            emb.chrono_init(T, rngmod.child_seed(train_cfg.seed, 2))
        summary = SummaryPipeline("learned", embedding=emb, input_std=input_std)
        flow, _, log = train(dataset.thetas, summary.prepare(data), train_cfg, arch, embedding=emb,
                             progress=progress)
    return PosteriorBuilder(flow=flow, summary=summary, prior=prior or PriorBox(), log=log)


@dataclass
class MafPosterior:
    flow: MafStack
    summary: SummaryPipeline
    prior: PriorBox
    context: SummaryVector
    leakage: float

    @property
    def embedding(self):
        return self.summary.embedding


LEAKAGE_DRAWS = 4096
LEAKAGE_SEED = 0x5EED


def condition(builder: PosteriorBuilder, y) -> MafPosterior:
    """Fix the observation's summary as context and estimate the out-of-box mass."""
    try:
        ctx = builder.summary(y)
    except LmsbiError:
        raise
    except Exception as exc:
        raise NumericError(f"summary of observation failed: {exc}") from exc
    draws, _ = builder.flow.sample(ctx.values, LEAKAGE_DRAWS, rngmod.generator(LEAKAGE_SEED))
    leakage = 1.0 - float(builder.prior.contains(draws).mean())
    return MafPosterior(flow=builder.flow, summary=builder.summary, prior=builder.prior, context=ctx,
                        leakage=leakage)


def posterior_sample(post: MafPosterior, count, seed, return_leakage=False):
    """Flow draws restricted to the prior box by rejection."""
    gen = rngmod.generator(seed)
    accepted = []
    n_acc = drawn = 0
    while n_acc < count:
        batch = max(64, int(1.2 * (count - n_acc) / max(1e-3, 1.0 - post.leakage)))
        s, _ = post.flow.sample(post.context.values, batch, gen)
        keep = s[post.prior.contains(s)]
        drawn += batch
        accepted.append(keep)
        n_acc += keep.shape[0]
        rate = 1.0 - n_acc / drawn
        if rate > MAX_LEAKAGE:
            raise NumericError(
                f"posterior leakage {rate:.4f} exceeds {MAX_LEAKAGE}: {n_acc} of {drawn} draws inside the prior box"
            )
    out = np.concatenate(accepted)[:count]
    if return_leakage:
        return out, 1.0 - n_acc / drawn
    return out


def posterior_log_prob(post: MafPosterior, theta):
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta2 = np.atleast_2d(theta)
    if not np.all(post.prior.contains(theta2)):
        raise ValidationError("theta outside the prior box")
    lp = post.flow.log_prob(theta2, post.context.values) - np.log1p(-min(post.leakage, MAX_LEAKAGE))
    return float(lp[0]) if single else lp


def observe(spec, cfg: SimulationConfig, theta=THETA_STAR, seed=None):
    """Pseudo-real observation simulated at known parameters."""
    seed = cfg.seed if seed is None else seed
    return simulate(spec, BehaviouralParams.from_array(theta), replace(cfg, seed=seed))


def credible_interval(samples, level=0.9):
    a = (1.0 - level) / 2.0
    return np.quantile(samples, [a, 1.0 - a], axis=0)


PARAM_COLUMNS = list(PARAM_NAMES)


_STAT_MODES = ("per_series", "per_step")


def save_posterior(path, builder: PosteriorBuilder):
    """Checkpoint a trained estimator together with its summary pipeline and prior."""
    from lmsbi.flow import save_checkpoint

    s = builder.summary
    extra = {
        "summary_mode": np.array([0.0 if s.mode == "handcrafted" else 1.0]),
        "stat_mode": np.array([float(_STAT_MODES.index(s.stat_mode))]),
        "prior_lower": builder.prior.lo,
        "prior_upper": builder.prior.hi,
    }
    if s.mode == "learned":
        extra["input_mean"] = s.input_std.mean
        extra["input_std"] = s.input_std.std
    save_checkpoint(path, builder.flow, s.embedding, extra)


def load_posterior(path) -> PosteriorBuilder:
    from lmsbi.flow import load_checkpoint

    flow, emb, extra = load_checkpoint(path)
    try:
        learned = bool(extra["summary_mode"][0])
        stat_mode = _STAT_MODES[int(extra["stat_mode"][0])]
        prior = PriorBox(tuple(extra["prior_lower"]), tuple(extra["prior_upper"]))
        input_std = Standardizer(extra["input_mean"], extra["input_std"]) if learned else None
    except (KeyError, IndexError) as exc:
        raise ValidationError(f"{path}: checkpoint lacks posterior metadata ({exc})") from exc
    summary = SummaryPipeline("learned" if learned else "handcrafted", stat_mode, emb, input_std)
    return PosteriorBuilder(flow=flow, summary=summary, prior=prior, log=TrainLog())

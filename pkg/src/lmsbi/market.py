"""Discrete-time labour-market ABM.

Occupations are nodes of a transition network. Each step, employed workers
separate into unemployment, occupations open vacancies, and unemployed
workers apply along the network and fill vacancies. An optional automation
shock moves labour demand away from occupations with high automation
probability.

Indicator layout per step (one row of a macro trajectory):
``e_1..e_n, u_1..u_n, v_1..v_n, d_1..d_n``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from lmsbi import rng as rngmod
from lmsbi.errors import NumericError, ResourceError, ValidationError

PARAM_NAMES = ("delta_u", "delta_v", "r")
INDICATORS = ("e", "u", "v", "d")
DEFAULT_MICRO_BUDGET = 8 * 1024**3
INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True, eq=False)
class MarketSpec:
    """Occupation network: workforce ``z``, automation probabilities ``p``, transitions ``P``."""

    n: int
    z: np.ndarray
    p: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"n must be a positive integer, got {self.n!r}")
        n = int(self.n)
        z = np.asarray(self.z)
        p = np.asarray(self.p, dtype=np.float64)
        P = np.asarray(self.P, dtype=np.float64)
        if z.shape != (n,):
            raise ValidationError(f"z must have length n={n}, got shape {z.shape}")
        if not np.all(np.isfinite(z.astype(np.float64))) or np.any(z != np.round(z)):
            raise ValidationError("z must contain integers")
        z = z.astype(np.int64)
        if np.any(z < 1):
            raise ValidationError(f"z_i >= 1 violated at occupations {np.flatnonzero(z < 1).tolist()}")
        if p.shape != (n,):
            raise ValidationError(f"p must have length n={n}, got shape {p.shape}")
        if not np.all((p >= 0.0) & (p <= 1.0)):
            raise ValidationError("p_i in [0, 1] violated")
        if P.shape != (n, n):
            raise ValidationError(f"P must be {n}x{n}, got shape {P.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0.0):
            raise ValidationError("P entries must be finite and >= 0")
        rows = P.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1.0) > 1e-9)
        if bad.size:
            raise ValidationError(f"rows of P must sum to 1 within 1e-9; rows {bad.tolist()} do not")
        for name, arr in (("z", z), ("p", p), ("P", P)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n", n)

    def __eq__(self, other):
        if not isinstance(other, MarketSpec):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.P, other.P)
        )

    @property
    def workforce(self):
        return int(self.z.sum())


@dataclass(frozen=True)
class BehaviouralParams:
    """Separation rate, vacancy-opening rate and same-occupation stay probability."""

    delta_u: float
    delta_v: float
    r: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            val = float(getattr(self, name))
            if not np.isfinite(val):
                raise ValidationError(f"{name} must be finite")
            object.__setattr__(self, name, val)
        if not 0.0 <= self.delta_u <= 0.02:
            raise ValidationError(f"delta_u must lie in [0, 0.02], got {self.delta_u}")
        if not 0.0 <= self.delta_v <= 0.02:
            raise ValidationError(f"delta_v must lie in [0, 0.02], got {self.delta_v}")
        if not 0.0 <= self.r <= 1.0:
            raise ValidationError(f"r must lie in [0, 1], got {self.r}")

    @classmethod
    def from_array(cls, theta):
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.shape != (3,):
            raise ValidationError(f"theta must have 3 components, got {theta.shape}")
        return cls(*theta)

    def as_array(self):
        return np.array([self.delta_u, self.delta_v, self.r])


@dataclass
class MarketState:
    e: np.ndarray
    u: np.ndarray
    v: np.ndarray
    d: np.ndarray

    def copy(self):
        return MarketState(self.e.copy(), self.u.copy(), self.v.copy(), self.d.copy())

    def validate(self, spec: Optional[MarketSpec] = None):
        for name in ("e", "u", "v"):
            if np.any(getattr(self, name) < 0):
                raise ValidationError(f"state.{name} has negative entries")
        if spec is not None:
            for name in INDICATORS:
                if getattr(self, name).shape != (spec.n,):
                    raise ValidationError(f"state.{name} must have length {spec.n}")
            if int(self.e.sum() + self.u.sum()) != spec.workforce:
                raise ValidationError("worker conservation violated: sum(e+u) != sum(z)")


@dataclass(frozen=True)
class SimulationConfig:
    """Run settings.

    ``gamma_u`` and ``gamma_v`` scale how strongly a gap between employment
    and demand raises the separation and vacancy probabilities on top of the
    baseline rates. ``burn_in`` steps are run at pre-shock demand and not
    recorded. ``vacancy_lifetime`` (steps) expires unfilled vacancies; ``None``
    keeps them open indefinitely.
    """

    T: int = 600
    t_shock: Optional[int] = None
    shock_mode: str = "step"
    sigmoid_half_width: float = 10.0
    gamma_u: float = 0.1
    gamma_v: float = 0.1
    seed: int = 0
    burn_in: int = 0
    vacancy_lifetime: Optional[int] = None

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValidationError(f"T must be >= 1, got {self.T}")
        if self.t_shock is not None and not 0 <= self.t_shock < self.T:
            raise ValidationError(f"t_shock must satisfy 0 <= t_shock < T={self.T}, got {self.t_shock}")
        if self.shock_mode not in ("step", "sigmoid"):
            raise ValidationError(f"shock_mode must be 'step' or 'sigmoid', got {self.shock_mode!r}")
        if not self.sigmoid_half_width > 0:
            raise ValidationError("sigmoid_half_width must be > 0")
        for name in ("gamma_u", "gamma_v"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.burn_in < 0:
            raise ValidationError("burn_in must be >= 0")
        if self.vacancy_lifetime is not None and self.vacancy_lifetime < 1:
            raise ValidationError("vacancy_lifetime must be >= 1 when set")
        if not 0 <= int(self.seed) <= rngmod.MASK64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


@dataclass(eq=False)
class MacroTrajectory:
    """``T x 4n`` indicator matrix."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] % 4 or self.data.shape[1] == 0:
            raise ValidationError(f"macro data must be T x 4n, got shape {self.data.shape}")

    @property
    def T(self):
        return self.data.shape[0]

    @property
    def n(self):
        return self.data.shape[1] // 4

    def indicator(self, name):
        k = INDICATORS.index(name)
        return self.data[:, k * self.n:(k + 1) * self.n]

    def unemployment_rate(self):
        e = self.indicator("e").sum(axis=1)
        u = self.indicator("u").sum(axis=1)
        return u / (e + u)

    def __eq__(self, other):
        return isinstance(other, MacroTrajectory) and np.array_equal(self.data, other.data)


@dataclass(eq=False)
class MicroTrajectory:
    """Per-step transition counts ``J_t[i, j]`` plus the matching indicators."""

    transitions: np.ndarray
    indicators: MacroTrajectory

    @property
    def T(self):
        return self.transitions.shape[0]

    @property
    def n(self):
        return self.transitions.shape[1]

    def blocks(self):
        """``T x n x (n+4)`` array: each step's transition matrix next to its indicator columns."""
        ind = self.indicators.data.reshape(self.T, 4, self.n).transpose(0, 2, 1)
        return np.concatenate([self.transitions.astype(np.float64), ind], axis=2)

    def __eq__(self, other):
        return (
            isinstance(other, MicroTrajectory)
            and np.array_equal(self.transitions, other.transitions)
            and self.indicators == other.indicators
        )


def init_state(spec: MarketSpec) -> MarketState:
    if not isinstance(spec, MarketSpec):
        raise ValidationError("init_state expects a MarketSpec")
    e = spec.z.astype(np.int64).copy()
    return MarketState(e=e, u=np.zeros(spec.n, np.int64), v=np.zeros(spec.n, np.int64), d=e.astype(np.float64))


def shocked_demand(spec: MarketSpec) -> np.ndarray:
    """Post-shock demand: ``(1 - p) * z`` rescaled to the pre-shock total."""
    d0 = spec.z.astype(np.float64)
    raw = (1.0 - spec.p) * d0
    total = raw.sum()
    if total <= 0.0:
        raise ValidationError("all occupations fully automatable (p == 1); shocked demand undefined")
    return raw * (d0.sum() / total)


def target_demand(spec: MarketSpec, t: int, cfg: SimulationConfig) -> np.ndarray:
    if not 0 <= t < cfg.T:
        raise ValidationError(f"t must satisfy 0 <= t < T={cfg.T}, got {t}")
    d0 = spec.z.astype(np.float64)
    if cfg.t_shock is None:
        return d0
    if cfg.shock_mode == "step":
        return shocked_demand(spec) if t >= cfg.t_shock else d0
    w = 1.0 / (1.0 + np.exp(-(t - cfg.t_shock) / cfg.sigmoid_half_width))
    return d0 + w * (shocked_demand(spec) - d0)


def demand_path(spec: MarketSpec, cfg: SimulationConfig) -> np.ndarray:
    """``T x n`` target demand for every step."""
    d0 = spec.z.astype(np.float64)
    t = np.arange(cfg.T)[:, None]
    if cfg.t_shock is None:
        return np.broadcast_to(d0, (cfg.T, spec.n)).copy()
    if cfg.shock_mode == "step":
        return np.where(t >= cfg.t_shock, shocked_demand(spec), d0)
    w = 1.0 / (1.0 + np.exp(-(t - cfg.t_shock) / cfg.sigmoid_half_width))
    return d0 + w * (shocked_demand(spec) - d0)


def application_weights(spec: MarketSpec, r: float) -> np.ndarray:
    """``w_ij = r 1{i=j} + (1 - r) P_ij``."""
    return r * np.eye(spec.n) + (1.0 - r) * spec.P


@njit(cache=True)
def _alias_tables(W):
    """Walker alias tables ``(prob, alias)`` for each row of ``W``."""
    n = W.shape[0]
    prob = np.ones((n, n))
    alias = np.zeros((n, n), np.int64)
    small = np.empty(n, np.int64)
    large = np.empty(n, np.int64)
    q = np.empty(n)
    for i in range(n):
        tot = 0.0
        for j in range(n):
            tot += W[i, j]
            alias[i, j] = j
        if tot <= 0.0:
            continue
        ns = 0
        nl = 0
        for j in range(n):
            q[j] = W[i, j] * n / tot
            if q[j] < 1.0:
                small[ns] = j
                ns += 1
            else:
                large[nl] = j
                nl += 1
        while ns > 0 and nl > 0:
            ns -= 1
            s = small[ns]
            g = large[nl - 1]
            prob[i, s] = q[s]
            alias[i, s] = g
            q[g] -= 1.0 - q[s]
            if q[g] < 1.0:
                nl -= 1
                small[ns] = g
                ns += 1
    return prob, alias


_MAX_REJECTIONS = 32


@njit(cache=True)
def _kernel(e, u, v, demand, W, prob, alias, delta_u, delta_v, gamma_u, gamma_v, gen, J):
    """One step on raw arrays; returns ``(e, u, v, new_vacancies)``.

    Separations and vacancies use the state entering the step. Each
    unemployed worker in pool ``i`` sends one application to ``j`` with
    probability proportional to ``W[i, j] * v[j]``; occupation ``j`` hires
    ``min(v_j, applicants_j)`` applicants drawn uniformly without replacement.
    Hires are added to ``J``, which the caller supplies zeroed. Destinations
    are proposed from the row alias tables ``prob, alias`` of ``W`` and
    accepted with probability ``v_j / max(v)``; a row falls back to an exact
    inverse CDF after repeated rejections, so the expected work per step is
    linear in ``n`` plus the number of unemployed workers.
    """
    n = e.shape[0]
    sep = np.zeros(n, np.int64)
    new_v = np.zeros(n, np.int64)
    for i in range(n):
        denom = max(e[i], 1)
        pu = delta_u + (1.0 - delta_u) * gamma_u * max(0.0, e[i] - demand[i]) / denom
        pv = delta_v + (1.0 - delta_v) * gamma_v * max(0.0, demand[i] - e[i] - v[i]) / denom
        pu = min(max(pu, 0.0), 1.0)
        pv = min(max(pv, 0.0), 1.0)
        if e[i] > 0:
            sep[i] = gen.binomial(e[i], pu)
            new_v[i] = gen.binomial(e[i], pv)
    e2 = e - sep
    u2 = u + sep
    v2 = v + new_v

    # only occupations with open vacancies can receive applications
    open_ = np.empty(n, np.int64)
    k_open = 0
    for j in range(n):
        if v2[j] > 0:
            open_[k_open] = j
            k_open += 1
    total_u = 0
    for i in range(n):
        total_u += u2[i]
    if k_open == 0 or total_u == 0:
        return e2, u2, v2, new_v

    vmax = 0
    vsum = 0
    for k in range(k_open):
        vmax = max(vmax, v2[open_[k]])
        vsum += v2[open_[k]]
    # rough cost of one proposal relative to one CDF term
    trial_cost = 4.0 * n * vmax / vsum
    src = np.empty(total_u, np.int64)
    dst = np.empty(total_u, np.int64)
    cum = np.empty(k_open)
    m = 0
    for i in range(n):
        if u2[i] == 0:
            continue
        tot = -1.0
        tries = _MAX_REJECTIONS if u2[i] * trial_cost < k_open else 0
        for _ in range(u2[i]):
            # propose from the row alias table, accept with probability v_j / vmax
            j = -1
            for _ in range(tries):
                x = gen.random() * n
                c = min(int(x), n - 1)
                if x - c >= prob[i, c]:
                    c = alias[i, c]
                if gen.random() * vmax < v2[c]:
                    j = c
                    break
            if j < 0:
                # exact inverse CDF over open occupations, built once per row
                if tot < 0.0:
                    tot = 0.0
                    for k in range(k_open):
                        tot += W[i, open_[k]] * v2[open_[k]]
                        cum[k] = tot
                if tot <= 0.0:
                    break
                x = gen.random() * tot
                lo = 0
                hi = k_open - 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cum[mid] > x:
                        hi = mid
                    else:
                        lo = mid + 1
                j = open_[lo]
            src[m] = i
            dst[m] = j
            m += 1

    # group applicants by destination (counting sort)
    start = np.zeros(n + 1, np.int64)
    for k in range(m):
        start[dst[k] + 1] += 1
    for j in range(n):
        start[j + 1] += start[j]
    fill = start[:n].copy()
    pool = np.empty(m, np.int64)
    for k in range(m):
        pool[fill[dst[k]]] = src[k]
        fill[dst[k]] += 1

    for k in range(k_open):
        j = open_[k]
        a = start[j]
        apps = start[j + 1] - a
        hires = min(apps, v2[j])
        # partial Fisher-Yates picks a uniform subset of the applicants
        for h in range(hires):
            c = a + h + min(int(gen.random() * (apps - h)), apps - h - 1)
            i = pool[c]
            pool[c] = pool[a + h]
            pool[a + h] = i
            J[i, j] += 1
            u2[i] -= 1
        e2[j] += hires
        v2[j] -= hires
    return e2, u2, v2, new_v


def step(state: MarketState, spec: MarketSpec, params: BehaviouralParams, demand, rng,
         gamma_u: float = 0.1, gamma_v: float = 0.1):
    """Advance one step; returns ``(new_state, J)``.

    Separation and vacancy probabilities are computed from the state entering
    the step. Separated workers join the unemployed pool before matching.
    """
    demand = np.asarray(demand, dtype=np.float64)
    if demand.shape != (spec.n,):
        raise ValidationError(f"demand must have length {spec.n}")
    state.validate(spec)
    W = application_weights(spec, params.r)
    J = np.zeros((spec.n, spec.n), np.int64)
    prob, alias = _alias_tables(W)
    e, u, v, _ = _kernel(state.e.astype(np.int64), state.u.astype(np.int64), state.v.astype(np.int64),
                         demand, W, prob, alias, params.delta_u, params.delta_v, float(gamma_u), float(gamma_v), rng, J)
    return MarketState(e=e, u=u, v=v, d=demand.copy()), J


@njit(cache=True)
def _loop(z, demands, W, delta_u, delta_v, gamma_u, gamma_v, burn_in, lifetime, record_micro, gen):
    n = z.shape[0]
    T = demands.shape[0]
    e = z.copy()
    u = np.zeros(n, np.int64)
    v = np.zeros(n, np.int64)
    d0 = z.astype(np.float64)
    out = np.empty((T, 4 * n))
    trans = np.zeros((T if record_micro else 0, n, n), np.int64)
    # cohorts[:, k] holds vacancies opened k steps ago
    cohorts = np.zeros((n, max(lifetime, 1)), np.int64)
    # macro runs never read hires, so one scratch matrix is reused
    scratch = np.zeros((n, n), np.int64)
    prob, alias = _alias_tables(W)
    for t in range(-burn_in, T):
        demand = demands[t] if t >= 0 else d0
        J = trans[t] if record_micro and t >= 0 else scratch
        e, u, v2, new_v = _kernel(e, u, v, demand, W, prob, alias, delta_u, delta_v, gamma_u, gamma_v, gen, J)
        if lifetime > 0:
            cohorts[:, 0] += new_v
            for j in range(n):
                left = v[j] + new_v[j] - v2[j]
                for k in range(lifetime - 1, -1, -1):
                    if left == 0:
                        break
                    use = min(cohorts[j, k], left)
                    cohorts[j, k] -= use
                    left -= use
                for k in range(lifetime - 1, 0, -1):
                    cohorts[j, k] = cohorts[j, k - 1]
                cohorts[j, 0] = 0
                v2[j] = 0
                for k in range(lifetime):
                    v2[j] += cohorts[j, k]
        v = v2
        if t >= 0:
            for i in range(n):
                out[t, i] = e[i]
                out[t, n + i] = u[i]
                out[t, 2 * n + i] = v[i]
                out[t, 3 * n + i] = demand[i]
    return out, trans


def _run(spec, params, cfg, record_micro):
    gen = rngmod.generator(cfg.seed)
    out, trans = _loop(
        spec.z.astype(np.int64), demand_path(spec, cfg), application_weights(spec, params.r),
        params.delta_u, params.delta_v, float(cfg.gamma_u), float(cfg.gamma_v),
        int(cfg.burn_in), int(cfg.vacancy_lifetime or 0), bool(record_micro), gen,
    )
    return MacroTrajectory(out), (trans if record_micro else None)


def simulate(spec: MarketSpec, params: BehaviouralParams, cfg: SimulationConfig) -> MacroTrajectory:
    """Run ``cfg.T`` recorded steps from :func:`init_state`; deterministic in ``cfg.seed``."""
    macro, _ = _run(spec, params, cfg, record_micro=False)
    return macro


def micro_memory_estimate(sims: int, T: int, n: int, bytes_per_element: int) -> int:
    """Bytes needed to hold ``sims`` micro trajectories: ``sims*T*n*(n+4)*bytes``."""
    args = {"sims": sims, "T": T, "n": n, "bytes_per_element": bytes_per_element}
    for name, val in args.items():
        if isinstance(val, bool) or int(val) != val or val < 1:
            raise ValidationError(f"{name} must be a positive integer, got {val!r}")
    total = int(sims) * int(T) * int(n) * (int(n) + 4) * int(bytes_per_element)
    if total > INT64_MAX:
        raise NumericError(f"memory estimate {total} overflows a signed 64-bit byte count")
    return total


def simulate_micro(spec: MarketSpec, params: BehaviouralParams, cfg: SimulationConfig,
                   memory_budget: int = DEFAULT_MICRO_BUDGET) -> MicroTrajectory:
    """Like :func:`simulate`, also recording the transition matrix of every step."""
    est = micro_memory_estimate(1, cfg.T, spec.n, 8)
    if est > memory_budget:
        raise ResourceError(
            f"micro trajectory needs {est} bytes ({est / 1024**3:.2f} GiB), budget is {memory_budget} bytes",
            estimate=est,
        )
    macro, trans = _run(spec, params, cfg, record_micro=True)
    return MicroTrajectory(transitions=trans, indicators=macro)

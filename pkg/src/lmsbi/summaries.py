"""Trajectory summaries: reshape, ten handcrafted statistics, GRU embedding."""

from dataclasses import dataclass

import numpy as np
from numba import njit

from lmsbi.errors import NumericError, ValidationError
from lmsbi.market import MacroTrajectory

STAT_NAMES = ("min", "max", "mean", "var", "q25", "q50", "q75", "acf1", "acf2", "acf3")
KINDS = ("handcrafted_per_series", "handcrafted_per_step", "learned")


@dataclass(eq=False)
class SummaryVector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.kind not in KINDS:
            raise ValidationError(f"unknown summary kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"{self.kind} summary has non-finite entries")

    @property
    def dim(self):
        return self.values.size

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# kind={self.kind} dim={self.dim}\n")
            fh.write("index,value\n")
            for i, x in enumerate(self.values):
                fh.write(f"{i},{x!r}\n")


def stack_states(macro: MacroTrajectory) -> np.ndarray:
    """``n x 4T`` matrix ``[S_1 ... S_T]``; column ``4t + k`` is indicator ``k`` at step ``t``."""
    T, n = macro.T, macro.n
    return macro.data.reshape(T, 4, n).transpose(2, 0, 1).reshape(n, 4 * T)


def reshape_macro(X) -> np.ndarray:
    """Time-major ``T x 4n`` matrix from either layout.

    Accepts a :class:`MacroTrajectory` (already time-major) or the ``n x 4T``
    state stack from :func:`stack_states`.
    """
    if isinstance(X, MacroTrajectory):
        return X.data.copy()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] % 4 or X.shape[1] == 0:
        raise ValidationError(f"expected an n x 4T state stack, got shape {X.shape}")
    n, T = X.shape[0], X.shape[1] // 4
    return X.reshape(n, T, 4).transpose(1, 2, 0).reshape(T, 4 * n)


def unreshape_macro(X, n) -> np.ndarray:
    """Inverse of :func:`reshape_macro` back to the ``n x 4T`` stack."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 4 * n:
        raise ValidationError(f"expected T x {4 * n}, got shape {X.shape}")
    return stack_states(MacroTrajectory(X))


def _stats(X):
    """Ten statistics down axis 0 of ``X``; returns shape ``(10, m)``."""
    T = X.shape[0]
    mean = X.mean(axis=0)
    dev = X - mean
    ss = (dev * dev).sum(axis=0)
    flat = (np.ptp(X, axis=0) == 0) | (ss == 0)
    safe = np.where(flat, 1.0, ss)
    acf = [np.where(flat, 0.0, (dev[:-k] * dev[k:]).sum(axis=0) / safe) for k in (1, 2, 3)]
    q = np.quantile(X, [0.25, 0.5, 0.75], axis=0, method="linear")
    var = np.where(flat, 0.0, ss / T)
    return np.stack([X.min(axis=0), X.max(axis=0), mean, var, q[0], q[1], q[2], *acf])


def handcrafted(X, mode="per_series") -> SummaryVector:
    """Ten statistics per column (``per_series``) or per row (``per_step``).

    Variance is the population variance. Lag-k autocorrelation is
    ``sum (x_t - m)(x_{t+k} - m) / sum (x_t - m)^2`` and is 0 for constant
    sequences. Quantiles interpolate linearly between order statistics.
    ``per_series`` output is grouped by column: the ten statistics of column 0,
    then of column 1, and so on.
    """
    if isinstance(X, MacroTrajectory):
        X = X.data
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"expected a T x 4n matrix, got shape {X.shape}")
    if X.shape[0] < 4:
        raise ValidationError(f"need T >= 4 steps for autocorrelation up to lag 3, got T={X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise NumericError("trajectory has non-finite entries")
    if mode == "per_series":
        return SummaryVector(_stats(X).T.ravel(), "handcrafted_per_series")
    if mode == "per_step":
        if X.shape[1] < 4:
            raise ValidationError("per_step mode needs rows of length >= 4")
        return SummaryVector(_stats(X.T).T.ravel(), "handcrafted_per_step")
    raise ValidationError(f"mode must be 'per_series' or 'per_step', got {mode!r}")


def handcrafted_batch(Xs, mode="per_series"):
    return np.stack([handcrafted(X, mode).values for X in Xs])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@njit(cache=True)
def _gru_forward(gi, Whh_T, bhh, H):
    T, B, _ = gi.shape
    hs = np.zeros((T + 1, B, H))
    rzs = np.empty((T, B, 2 * H))
    cs = np.empty((T, B, H))
    hcs = np.empty((T, B, H))
    for t in range(T):
        gh = np.dot(hs[t], Whh_T)
        for b in range(B):
            for k in range(2 * H):
                a = gi[t, b, k] + gh[b, k] + bhh[k]
                rzs[t, b, k] = 1.0 / (1.0 + np.exp(-a))
            for k in range(H):
                hc = gh[b, 2 * H + k] + bhh[2 * H + k]
                c = np.tanh(gi[t, b, 2 * H + k] + rzs[t, b, k] * hc)
                z = rzs[t, b, H + k]
                hcs[t, b, k] = hc
                cs[t, b, k] = c
                hs[t + 1, b, k] = c + z * (hs[t, b, k] - c)
    return hs, rzs, cs, hcs


@njit(cache=True)
def _gru_backward(dh_out, hs, rzs, cs, hcs, Whh, H):
    T, B, _ = rzs.shape
    dgi = np.empty((T, B, 3 * H))
    dgh = np.empty((T, B, 3 * H))
    dh = dh_out.copy()
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for k in range(H):
                r = rzs[t, b, k]
                z = rzs[t, b, H + k]
                c = cs[t, b, k]
                dac = dh[b, k] * (1.0 - z) * (1.0 - c * c)
                dar = dac * hcs[t, b, k] * r * (1.0 - r)
                daz = dh[b, k] * (hs[t, b, k] - c) * z * (1.0 - z)
                dgi[t, b, k] = dar
                dgi[t, b, H + k] = daz
                dgi[t, b, 2 * H + k] = dac
                dgh[t, b, k] = dar
                dgh[t, b, H + k] = daz
                dgh[t, b, 2 * H + k] = dac * r
                dh[b, k] = dh[b, k] * z
        dh += np.dot(dgh[t], Whh)
    return dgi, dgh


class RecurrentEmbedding:
    """Gated recurrent unit whose final hidden state is the summary.

    Gate order in the stacked weights is (reset, update, candidate)::

        r = sig(W_ir x + b_ir + W_hr h + b_hr)
        z = sig(W_iz x + b_iz + W_hz h + b_hz)
        c = tanh(W_ic x + b_ic + r * (W_hc h + b_hc))
        h' = (1 - z) * c + z * h
    """

    param_names = ("W_ih", "W_hh", "b_ih", "b_hh")

    def __init__(self, input_size, hidden_size=32, seed=None, params=None):
        self.input_size = int(input_size)
        self.hidden_size = H = int(hidden_size)
        if params is not None:
            self.params = {k: np.asarray(params[k], dtype=np.float64).copy() for k in self.param_names}
        else:
            gen = np.random.default_rng(seed)
            a = 1.0 / np.sqrt(H)
            self.params = {
                "W_ih": gen.uniform(-a, a, (3 * H, self.input_size)),
                "W_hh": gen.uniform(-a, a, (3 * H, H)),
                "b_ih": gen.uniform(-a, a, 3 * H),
                "b_hh": gen.uniform(-a, a, 3 * H),
            }
        shapes = {"W_ih": (3 * H, self.input_size), "W_hh": (3 * H, H), "b_ih": (3 * H,), "b_hh": (3 * H,)}
        for k, shp in shapes.items():
            if self.params[k].shape != shp:
                raise ValidationError(f"{k} must have shape {shp}, got {self.params[k].shape}")

    def chrono_init(self, t_max, seed=None):
        """Set update-gate biases to ``log U(1, t_max - 1)`` so units start with memory spans up to ``t_max``."""
        if t_max < 3:
            raise ValidationError("t_max must be >= 3")
        H = self.hidden_size
        gen = np.random.default_rng(seed)
        self.params["b_ih"][H:2 * H] = np.log(gen.uniform(1.0, t_max - 1.0, H))
        self.params["b_hh"][H:2 * H] = 0.0
        return self

    @classmethod
    def zeros(cls, input_size, hidden_size=32):
        H = hidden_size
        return cls(input_size, H, params={
            "W_ih": np.zeros((3 * H, input_size)), "W_hh": np.zeros((3 * H, H)),
            "b_ih": np.zeros(3 * H), "b_hh": np.zeros(3 * H),
        })

    def forward(self, X, cache=False):
        """Final hidden state for ``X`` of shape ``(T, I)`` or ``(B, T, I)``."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.input_size:
            raise ValidationError(f"expected input width {self.input_size}, got shape {X.shape}")
        p = self.params
        gi = np.ascontiguousarray((X @ p["W_ih"].T + p["b_ih"]).transpose(1, 0, 2))
        hs, rzs, cs, hcs = _gru_forward(gi, np.ascontiguousarray(p["W_hh"].T), p["b_hh"], self.hidden_size)
        h = hs[-1]
        out = h[0] if single else h
        if cache:
            return out, (X, hs, rzs, cs, hcs, single)
        return out

    def backward(self, cache, grad_out, input_grad=True):
        """Parameter gradients of ``sum(grad_out * output)`` and, optionally, the input gradient."""
        X, hs, rzs, cs, hcs, single = cache
        H = self.hidden_size
        grad_out = np.asarray(grad_out, dtype=np.float64)
        dh = np.ascontiguousarray(grad_out[None] if single else grad_out)
        dgi, dgh = _gru_backward(dh, hs, rzs, cs, hcs, np.ascontiguousarray(self.params["W_hh"]), H)
        flat_i = dgi.reshape(-1, 3 * H)
        flat_h = dgh.reshape(-1, 3 * H)
        xt = X.transpose(1, 0, 2).reshape(-1, X.shape[2])
        grads = {
            "W_ih": flat_i.T @ xt,
            "W_hh": flat_h.T @ hs[:-1].reshape(-1, H),
            "b_ih": flat_i.sum(axis=0),
            "b_hh": flat_h.sum(axis=0),
        }
        if not input_grad:
            return grads, None
        dX = (dgi @ self.params["W_ih"]).transpose(1, 0, 2)
        return grads, (dX[0] if single else dX)

    def copy(self):
        return RecurrentEmbedding(self.input_size, self.hidden_size, params=self.params)


def embed(emb: RecurrentEmbedding, X) -> SummaryVector:
    if isinstance(X, MacroTrajectory):
        X = X.data
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != emb.input_size:
        raise ValidationError(f"X must be T x {emb.input_size}, got shape {X.shape}")
    return SummaryVector(emb.forward(X), "learned")


def embed_backward(emb: RecurrentEmbedding, X, output_gradient):
    """Gradients of ``<output_gradient, embed(emb, X)>`` with respect to every GRU parameter."""
    if isinstance(X, MacroTrajectory):
        X = X.data
    _, cache = emb.forward(X, cache=True)
    grads, _ = emb.backward(cache, output_gradient)
    return grads

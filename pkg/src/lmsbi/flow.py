"""Conditional masked autoregressive flow in numpy with hand-written gradients.

Each layer maps ``x -> z = (x - mu(x_<i, c)) * exp(-alpha(x_<i, c))`` with
``mu`` and ``alpha`` produced by a masked MLP (MADE). Layers are chained
with the coordinate order reversed in between, and the last output is scored
under a standard normal. Inputs and contexts are z-scored by fitted
standardizers whose log-Jacobian enters the density.
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from lmsbi.errors import NumericError, ValidationError

LOG_2PI = np.log(2.0 * np.pi)
ALPHA_BOUND = 7.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 50
    validation_fraction: float = 0.1
    patience: int = 20
    max_epochs: int = 500
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValidationError("validation_fraction must lie in (0, 1)")
        for name in ("batch_size", "patience", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")


@dataclass(frozen=True)
class FlowArch:
    layers: int = 5
    hidden: int = 50
    depth: int = 2
    identity_init: bool = False


class Standardizer:
    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, X, floor=1e-12):
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        return cls(mean, np.where(std > floor, std, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X):
        return (X - self.mean) / self.std

    def inverse(self, Y):
        return Y * self.std + self.mean

    @property
    def log_scale(self):
        return float(np.log(self.std).sum())


def made_degrees(dim, hidden, depth):
    """Degrees for inputs (1..dim) and hidden units (cycling through 0..dim-1).

    Degree-0 hidden units see only the context, so every output, including
    the first coordinate's, can depend on the context.
    """
    d_in = np.arange(1, dim + 1)
    d_hid = [np.arange(hidden) % dim for _ in range(depth)]
    return d_in, d_hid


class MadeLayer:
    """Masked MLP emitting per-coordinate shift and log-scale."""

    def __init__(self, dim, context_dim, hidden=50, depth=2, gen=None, identity_init=False, params=None):
        self.dim = D = int(dim)
        self.context_dim = int(context_dim)
        self.hidden = int(hidden)
        self.depth = int(depth)
        d_in, d_hid = made_degrees(D, self.hidden, self.depth)
        self.masks = [(d_hid[0][:, None] >= d_in[None, :]).astype(np.float64)]
        for k in range(1, self.depth):
            self.masks.append((d_hid[k][:, None] >= d_hid[k - 1][None, :]).astype(np.float64))
        out_deg = np.concatenate([d_in, d_in])
        self.masks.append((out_deg[:, None] > d_hid[-1][None, :]).astype(np.float64))
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
            return
        gen = gen if gen is not None else np.random.default_rng(0)
        p = {}
        fan_in = D
        for k in range(self.depth):
            a = np.sqrt(6.0 / (fan_in + self.hidden + (self.context_dim if k == 0 else 0)))
            p[f"W{k}"] = gen.uniform(-a, a, (self.hidden, fan_in))
            p[f"b{k}"] = np.zeros(self.hidden)
            fan_in = self.hidden
        a = np.sqrt(6.0 / (self.hidden + self.context_dim))
        p["V"] = gen.uniform(-a, a, (self.hidden, self.context_dim))
        if identity_init:
            p["Wout"] = np.zeros((2 * D, self.hidden))
        else:
            p["Wout"] = gen.uniform(-1e-3, 1e-3, (2 * D, self.hidden))
        p["bout"] = np.zeros(2 * D)
        self.params = p

    def names(self):
        return [f"W{k}" for k in range(self.depth)] + [f"b{k}" for k in range(self.depth)] + ["V", "Wout", "bout"]

    def _weights(self):
        return [self.params[f"W{k}"] * self.masks[k] for k in range(self.depth)], self.params["Wout"] * self.masks[-1]

    def shift_logscale(self, x, c, cache=False):
        Ws, Wout = self._weights()
        hs = []
        a = x @ Ws[0].T + c @ self.params["V"].T + self.params["b0"]
        h = np.tanh(a)
        hs.append(h)
        for k in range(1, self.depth):
            h = np.tanh(h @ Ws[k].T + self.params[f"b{k}"])
            hs.append(h)
        out = h @ Wout.T + self.params["bout"]
        D = self.dim
        mu = out[:, :D]
        raw = out[:, D:]
        alpha = ALPHA_BOUND * np.tanh(raw / ALPHA_BOUND)
        if cache:
            return mu, alpha, (x, c, hs, alpha)
        return mu, alpha

    def forward(self, x, c, cache=False):
        """``z`` and per-row ``log|dz/dx| = -sum(alpha)``."""
        res = self.shift_logscale(x, c, cache=cache)
        mu, alpha = res[0], res[1]
        ea = np.exp(-alpha)
        z = (x - mu) * ea
        logdet = -alpha.sum(axis=1)
        if cache:
            return z, logdet, (res[2], z, ea)
        return z, logdet

    def inverse(self, z, c):
        """Invert coordinate by coordinate; ``mu_i, alpha_i`` depend only on ``x_<i``."""
        x = np.zeros_like(z)
        for i in range(self.dim):
            mu, alpha = self.shift_logscale(x, c)
            x[:, i] = z[:, i] * np.exp(alpha[:, i]) + mu[:, i]
        return x

    def backward(self, cache, g_z, g_logdet):
        """Gradients given upstream ``dL/dz`` and ``dL/dlogdet`` (per row)."""
        (x, c, hs, alpha), z, ea = cache
        D = self.dim
        g_mu = -g_z * ea
        g_alpha = -g_z * z - g_logdet[:, None]
        g_raw = g_alpha * (1.0 - (alpha / ALPHA_BOUND) ** 2)
        g_out = np.concatenate([g_mu, g_raw], axis=1)
        Ws, Wout = self._weights()
        grads = {"Wout": (g_out.T @ hs[-1]) * self.masks[-1], "bout": g_out.sum(axis=0)}
        g_h = g_out @ Wout
        for k in range(self.depth - 1, -1, -1):
            g_a = g_h * (1.0 - hs[k] ** 2)
            below = hs[k - 1] if k > 0 else x
            grads[f"W{k}"] = (g_a.T @ below) * self.masks[k]
            grads[f"b{k}"] = g_a.sum(axis=0)
            g_h = g_a @ Ws[k]
        grads["V"] = g_a.T @ c
        g_c = g_a @ self.params["V"]
        g_x = g_h + g_z * ea
        return grads, g_x, g_c


@dataclass
class TrainLog:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    seconds: float = 0.0

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_nll,val_nll\n")
            for k, (tr, va) in enumerate(zip(self.train_nll, self.val_nll)):
                fh.write(f"{k},{tr!r},{va!r}\n")


class MafStack:
    """Stack of MADE layers plus input and context standardizers."""

    def __init__(self, dim, context_dim, arch=FlowArch(), seed=0, theta_std=None, ctx_std=None, layers=None):
        self.dim = int(dim)
        self.context_dim = int(context_dim)
        self.arch = arch
        if layers is None:
            gen = np.random.default_rng(seed)
            layers = [
                MadeLayer(dim, context_dim, arch.hidden, arch.depth, gen=gen, identity_init=arch.identity_init)
                for _ in range(arch.layers)
            ]
        self.layers = layers
        self.theta_std = theta_std or Standardizer.identity(dim)
        self.ctx_std = ctx_std or Standardizer.identity(context_dim)

    # parameter plumbing -------------------------------------------------
    def param_list(self):
        return [(f"layer{k}.{name}", layer.params[name]) for k, layer in enumerate(self.layers) for name in layer.names()]

    def get_params(self):
        return {k: v.copy() for k, v in self.param_list()}

    def set_params(self, params):
        for k, layer in enumerate(self.layers):
            for name in layer.names():
                layer.params[name] = params[f"layer{k}.{name}"].copy()

    def copy(self):
        new = MafStack(self.dim, self.context_dim, self.arch,
                       theta_std=Standardizer(self.theta_std.mean.copy(), self.theta_std.std.copy()),
                       ctx_std=Standardizer(self.ctx_std.mean.copy(), self.ctx_std.std.copy()),
                       layers=[MadeLayer(l.dim, l.context_dim, l.hidden, l.depth, params=l.params) for l in self.layers])
        return new

    # density ------------------------------------------------------------
    def _prep(self, theta, context):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        if theta.shape[1] != self.dim:
            raise ValidationError(f"theta must have {self.dim} columns, got {theta.shape}")
        if context.shape[1] != self.context_dim:
            raise ValidationError(f"context must have {self.context_dim} columns, got {context.shape}")
        if context.shape[0] == 1 and theta.shape[0] > 1:
            context = np.broadcast_to(context, (theta.shape[0], self.context_dim))
        if context.shape[0] != theta.shape[0]:
            raise ValidationError("theta and context row counts differ")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(context))):
            raise NumericError("non-finite theta or context")
        return theta, context

    def transform(self, theta, context, cache=False):
        """Base-space image of ``theta`` and the total log-Jacobian (standardization included)."""
        theta, context = self._prep(theta, context)
        h = self.theta_std(theta)
        c = self.ctx_std(context)
        logdet = np.full(theta.shape[0], -self.theta_std.log_scale)
        caches = []
        for k, layer in enumerate(self.layers):
            if cache:
                z, ld, cc = layer.forward(h, c, cache=True)
                caches.append(cc)
            else:
                z, ld = layer.forward(h, c)
            logdet = logdet + ld
            h = z[:, ::-1] if k < len(self.layers) - 1 else z
        if cache:
            return h, logdet, (caches, c)
        return h, logdet

    def log_prob(self, theta, context):
        u, logdet = self.transform(theta, context)
        return -0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * LOG_2PI + logdet

    def sample(self, context, count, gen):
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        if context.shape != (1, self.context_dim):
            raise ValidationError(f"sample expects a single context of width {self.context_dim}")
        c = np.broadcast_to(self.ctx_std(context), (count, self.context_dim))
        u = gen.standard_normal((count, self.dim))
        return self.inverse(u, c, standardized_context=True), u

    def inverse(self, u, context, standardized_context=False):
        c = context if standardized_context else self.ctx_std(np.atleast_2d(context))
        if c.shape[0] != u.shape[0]:
            c = np.broadcast_to(c, (u.shape[0], self.context_dim))
        h = u
        for k in range(len(self.layers) - 1, -1, -1):
            x = self.layers[k].inverse(h, c)
            h = x[:, ::-1] if k > 0 else x
        return self.theta_std.inverse(h)

    # training -----------------------------------------------------------
    def loss_and_grads(self, theta, context):
        """Mean negative log-density and its gradients.

        Returns ``(loss, grads, g_context)`` where ``g_context`` is the
        gradient with respect to the raw (unstandardized) context rows.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[0] == 0:
            raise ValidationError("empty batch")
        u, logdet, (caches, _) = self.transform(theta, context, cache=True)
        B = theta.shape[0]
        lp = -0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * LOG_2PI + logdet
        loss = -lp.mean()
        g_h = u / B
        g_ld = np.full(B, -1.0 / B)
        g_c = np.zeros((B, self.context_dim))
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            g_z = g_h[:, ::-1] if k < len(self.layers) - 1 else g_h
            lg, g_h, gc = self.layers[k].backward(caches[k], g_z, g_ld)
            g_c += gc
            for name, g in lg.items():
                grads[f"layer{k}.{name}"] = g
        return loss, grads, g_c / self.ctx_std.std


def maf_log_prob(flow: MafStack, theta, context):
    theta = np.asarray(theta, dtype=np.float64)
    lp = flow.log_prob(theta, getattr(context, "values", context))
    return float(lp[0]) if theta.ndim == 1 else lp


def maf_sample(flow: MafStack, context, rng, count):
    samples, _ = flow.sample(getattr(context, "values", context), count, rng)
    return samples


def maf_backward(flow: MafStack, theta, context):
    loss, grads, _ = flow.loss_and_grads(theta, context)
    return loss, grads


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


class _FlowModel:
    """Flow, optionally composed with an embedding network that maps raw inputs to context."""

    def __init__(self, flow, embedding=None):
        self.flow = flow
        self.embedding = embedding

    def params(self):
        out = {k: v for k, v in self.flow.param_list()}
        if self.embedding is not None:
            out.update({f"emb.{k}": v for k, v in self.embedding.params.items()})
        return out

    def loss_and_grads(self, theta, ctx):
        if self.embedding is None:
            loss, grads, _ = self.flow.loss_and_grads(theta, ctx)
            return loss, grads
        h, cache = self.embedding.forward(ctx, cache=True)
        loss, grads, g_c = self.flow.loss_and_grads(theta, h)
        eg, _ = self.embedding.backward(cache, g_c, input_grad=False)
        grads.update({f"emb.{k}": v for k, v in eg.items()})
        return loss, grads

    def nll(self, theta, ctx, chunk=256):
        total = 0.0
        for s in range(0, theta.shape[0], chunk):
            c = ctx[s:s + chunk]
            if self.embedding is not None:
                c = self.embedding.forward(c)
            total -= self.flow.log_prob(theta[s:s + chunk], c).sum()
        return total / theta.shape[0]

    def snapshot(self):
        return {k: v.copy() for k, v in self.params().items()}

    def restore(self, snap):
        live = self.params()
        for k, v in snap.items():
            live[k][...] = v


def train(thetas, contexts, cfg: TrainConfig = TrainConfig(), arch: FlowArch = FlowArch(),
          embedding=None, fit_context_standardizer=True, progress=None):
    """Fit a conditional MAF by maximum likelihood with early stopping.

    ``contexts`` are summary vectors, or raw sequences when ``embedding`` is
    given (embedding and flow are then trained jointly). Returns the flow,
    the embedding (or ``None``) and the :class:`TrainLog`. Parameters come
    from the epoch with the lowest validation NLL; epoch 0 is the untrained
    model.
    """
    t0 = time.perf_counter()
    thetas = np.asarray(thetas, dtype=np.float64)
    contexts = np.asarray(contexts, dtype=np.float64)
    N = thetas.shape[0]
    if N < 50:
        raise ValidationError(f"training needs at least 50 pairs, got {N}")
    if contexts.shape[0] != N:
        raise ValidationError("thetas and contexts differ in length")
    if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(contexts))):
        raise NumericError("training data contains non-finite values")
    gen = np.random.default_rng(cfg.seed)
    perm = gen.permutation(N)
    n_val = max(1, int(round(cfg.validation_fraction * N)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    ctx_dim = embedding.hidden_size if embedding is not None else contexts.shape[1]
    theta_std = Standardizer.fit(thetas[tr_idx])
    if embedding is None and fit_context_standardizer:
        ctx_std = Standardizer.fit(contexts[tr_idx])
    else:
        ctx_std = Standardizer.identity(ctx_dim)
    flow = MafStack(thetas.shape[1], ctx_dim, arch, seed=int(gen.integers(2**63)),
                    theta_std=theta_std, ctx_std=ctx_std)
    model = _FlowModel(flow, embedding)
    params = model.params()
    opt = Adam(params, lr=cfg.learning_rate)
    log = TrainLog()

    Xv, Cv = thetas[val_idx], contexts[val_idx]
    best = model.nll(Xv, Cv)
    log.val_nll.append(best)
    log.train_nll.append(model.nll(thetas[tr_idx], contexts[tr_idx]))
    best_snap = model.snapshot()
    since = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr_idx[gen.permutation(tr_idx.size)]
        tot, cnt = 0.0, 0
        for s in range(0, order.size, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = model.loss_and_grads(thetas[idx], contexts[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite loss at epoch {epoch}; batch indices {idx.tolist()}")
            opt.step(params, _clip(grads, cfg.grad_clip))
            tot += loss * idx.size
            cnt += idx.size
        val = model.nll(Xv, Cv)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation NLL at epoch {epoch}")
        log.train_nll.append(tot / cnt)
        log.val_nll.append(val)
        log.epochs_run = epoch
        if progress:
            progress(epoch, tot / cnt, val)
        if val < best:
            best, best_snap, since = val, model.snapshot(), 0
            log.best_epoch = epoch
        else:
            since += 1
            if since >= cfg.patience:
                log.stopped_early = True
                break
    model.restore(best_snap)
    log.seconds = time.perf_counter() - t0
    return flow, embedding, log


# checkpoint -------------------------------------------------------------
CKPT_MAGIC = b"LMNF"
CKPT_VERSION = 1


def _write_arrays(fh, arrays):
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def _read_array(buf, pos):
    (ndim,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + 8 * count


def save_checkpoint(path, flow: MafStack, embedding=None, extra=None):
    """Binary checkpoint: header, standardizers, flow parameters, optional GRU parameters.

    ``extra`` is a dict of named float arrays (for example input standardizers
    of the embedding) stored after the parameters.
    """
    a = flow.arch
    extra = extra or {}
    H = embedding.hidden_size if embedding is not None else 0
    I = embedding.input_size if embedding is not None else 0
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HIIIIIBII", CKPT_VERSION, flow.dim, flow.context_dim, a.layers, a.hidden,
                             a.depth, int(embedding is not None), I, H))
        _write_arrays(fh, [flow.theta_std.mean, flow.theta_std.std, flow.ctx_std.mean, flow.ctx_std.std])
        _write_arrays(fh, [v for _, v in flow.param_list()])
        if embedding is not None:
            _write_arrays(fh, [embedding.params[k] for k in embedding.param_names])
        fh.write(struct.pack("<I", len(extra)))
        for name, arr in extra.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            _write_arrays(fh, [np.asarray(arr, dtype=np.float64)])


def load_checkpoint(path):
    """Returns ``(flow, embedding_or_None, extra)``."""
    from lmsbi.summaries import RecurrentEmbedding

    buf = open(path, "rb").read()
    if buf[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a flow checkpoint")
    head = struct.Struct("<HIIIIIBII")
    version, dim, cdim, layers, hidden, depth, has_emb, I, H = head.unpack_from(buf, 4)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + head.size
    std = []
    for _ in range(4):
        arr, pos = _read_array(buf, pos)
        std.append(arr)
    arch = FlowArch(layers=layers, hidden=hidden, depth=depth)
    flow = MafStack(dim, cdim, arch, theta_std=Standardizer(std[0], std[1]), ctx_std=Standardizer(std[2], std[3]))
    params = {}
    for name, _ in flow.param_list():
        params[name], pos = _read_array(buf, pos)
    flow.set_params(params)
    emb = None
    if has_emb:
        ep = {}
        for k in RecurrentEmbedding.param_names:
            ep[k], pos = _read_array(buf, pos)
        emb = RecurrentEmbedding(I, H, params=ep)
    (n_extra,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    extra = {}
    for _ in range(n_extra):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        extra[name], pos = _read_array(buf, pos)
    return flow, emb, extra

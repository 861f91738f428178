import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from lmsbi.errors import NumericError, ValidationError
from lmsbi.flow import (
    FlowArch,
    MadeLayer,
    MafStack,
    Standardizer,
    TrainConfig,
    load_checkpoint,
    maf_backward,
    maf_log_prob,
    maf_sample,
    save_checkpoint,
    train,
)
from lmsbi.summaries import RecurrentEmbedding, SummaryVector

IDENTITY = FlowArch(identity_init=True)


def random_flow(dim=3, ctx=2, seed=0, layers=3, hidden=8, scale=0.5):
    flow = MafStack(dim, ctx, FlowArch(layers=layers, hidden=hidden), seed=seed)
    gen = np.random.default_rng(seed + 100)
    for _, v in flow.param_list():
        v[...] = gen.normal(0, scale, v.shape)
    flow.theta_std = Standardizer(gen.normal(size=dim), gen.uniform(0.5, 2, dim))
    flow.ctx_std = Standardizer(gen.normal(size=ctx), gen.uniform(0.5, 2, ctx))
    return flow


def test_identity_log_prob():
    flow = MafStack(3, 4, IDENTITY)
    ctx = SummaryVector(np.ones(4), "learned")
    assert abs(maf_log_prob(flow, np.zeros(3), ctx) - (-1.5 * np.log(2 * np.pi))) < 1e-12
    assert maf_log_prob(flow, np.array([1.0, 0, 0]), ctx) == pytest.approx(-2.756815599614018 - 0.5, abs=1e-12)


def test_identity_samples_standard_normal():
    flow = MafStack(3, 2, IDENTITY)
    s = maf_sample(flow, np.zeros(2), np.random.default_rng(0), 100_000)
    assert np.all(np.abs(s.mean(axis=0)) < 0.02)
    a = maf_sample(flow, np.zeros(2), np.random.default_rng(1), 10)
    b = maf_sample(flow, np.zeros(2), np.random.default_rng(1), 10)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(seed):
    flow = random_flow(seed=seed)
    ctx = np.random.default_rng(seed).normal(size=2)
    x, u = flow.sample(ctx, 500, np.random.default_rng(seed))
    u2, _ = flow.transform(x, ctx)
    assert np.abs(u2 - u).max() < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_density_integrates_to_one(seed):
    flow = random_flow(dim=1, ctx=2, seed=seed)
    ctx = np.array([0.3, -0.2])
    grid = np.linspace(-2000, 2000, 4_000_001)
    dens = np.exp(flow.log_prob(grid[:, None], ctx))
    assert abs(integrate.trapezoid(dens, grid) - 1.0) < 1e-3


def test_autoregressive_masks():
    gen = np.random.default_rng(0)
    layer = MadeLayer(4, 3, hidden=12, gen=gen)
    for v in layer.params.values():
        v[...] = gen.normal(size=v.shape)
    x = gen.normal(size=(5, 4))
    c = gen.normal(size=(5, 3))
    mu, al = layer.shift_logscale(x, c)
    for j in range(4):
        xp = x.copy()
        xp[:, j] += 1.7
        mu2, al2 = layer.shift_logscale(xp, c)
        np.testing.assert_array_equal(mu2[:, : j + 1], mu[:, : j + 1])
        np.testing.assert_array_equal(al2[:, : j + 1], al[:, : j + 1])
    # the first coordinate still sees the context
    mu3, _ = layer.shift_logscale(x, c + 1.0)
    assert not np.allclose(mu3[:, 0], mu[:, 0])


def test_alpha_bounded():
    layer = MadeLayer(2, 1, hidden=4, gen=np.random.default_rng(0))
    layer.params["bout"][:] = 1e4
    _, al = layer.shift_logscale(np.zeros((1, 2)), np.zeros((1, 1)))
    assert np.all(np.abs(al) <= 7.0)


def _flat(flow):
    return {k: v for k, v in flow.param_list()}


@pytest.mark.parametrize("seed", range(3))
def test_maf_gradient_fd(seed):
    gen = np.random.default_rng(seed)
    flow = random_flow(seed=seed, scale=0.3)
    theta = gen.normal(size=(6, 3))
    ctx = gen.normal(size=(6, 2))
    _, grads = maf_backward(flow, theta, ctx)
    eps = 1e-6
    worst = 0.0
    for k, P in _flat(flow).items():
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + eps
            fp = -flow.log_prob(theta, ctx).mean()
            P[idx] = old - eps
            fm = -flow.log_prob(theta, ctx).mean()
            P[idx] = old
            num[idx] = (fp - fm) / (2 * eps)
        worst = max(worst, np.abs(num - grads[k]).max() / max(np.abs(num).max(), 1e-12))
    assert worst < 1e-5


def test_context_gradient_fd():
    gen = np.random.default_rng(4)
    flow = random_flow(seed=4, scale=0.3)
    theta = gen.normal(size=(4, 3))
    ctx = gen.normal(size=(4, 2))
    _, _, gc = flow.loss_and_grads(theta, ctx)
    eps = 1e-6
    num = np.zeros_like(ctx)
    for idx in np.ndindex(ctx.shape):
        cp, cm = ctx.copy(), ctx.copy()
        cp[idx] += eps
        cm[idx] -= eps
        num[idx] = (-flow.log_prob(theta, cp).mean() + flow.log_prob(theta, cm).mean()) / (2 * eps)
    np.testing.assert_allclose(gc, num, rtol=1e-6, atol=1e-9)


def test_gradient_mean_invariance_and_empty_batch():
    flow = random_flow(seed=1)
    gen = np.random.default_rng(1)
    theta, ctx = gen.normal(size=(5, 3)), gen.normal(size=(5, 2))
    _, g1 = maf_backward(flow, theta, ctx)
    _, g2 = maf_backward(flow, np.vstack([theta, theta]), np.vstack([ctx, ctx]))
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)
    with pytest.raises(ValidationError):
        maf_backward(flow, np.zeros((0, 3)), np.zeros((0, 2)))


def test_non_finite_input():
    flow = MafStack(2, 1, IDENTITY)
    with pytest.raises(NumericError):
        flow.log_prob(np.array([[np.nan, 0.0]]), np.zeros(1))


def test_entropy_consistency():
    flow = random_flow(seed=2, scale=0.2)
    ctx = np.array([0.1, 0.2])
    a, _ = flow.sample(ctx, 20_000, np.random.default_rng(0))
    b, _ = flow.sample(ctx, 20_000, np.random.default_rng(1))
    la, lb = flow.log_prob(a, ctx), flow.log_prob(b, ctx)
    se = np.sqrt(la.var() / la.size + lb.var() / lb.size)
    assert abs(la.mean() - lb.mean()) < 4 * se


def test_train_gaussian_1d():
    gen = np.random.default_rng(0)
    theta = gen.normal(2.0, 0.5, (5000, 1))
    ctx = np.ones((5000, 1))
    flow, _, log = train(theta, ctx, TrainConfig(seed=0, max_epochs=40), FlowArch(layers=2, hidden=16))
    s, _ = flow.sample(np.ones(1), 50_000, np.random.default_rng(1))
    assert abs(s.mean() - 2.0) < 0.05
    assert abs(s.std() - 0.5) < 0.05
    assert log.val_nll[log.best_epoch] <= log.val_nll[0]


def test_train_deterministic_and_early_stop():
    gen = np.random.default_rng(3)
    theta = gen.normal(size=(120, 2))
    ctx = theta + gen.normal(size=(120, 2))
    cfg = TrainConfig(seed=5, max_epochs=200, patience=3)
    f1, _, l1 = train(theta, ctx, cfg, FlowArch(layers=2, hidden=8))
    f2, _, l2 = train(theta, ctx, cfg, FlowArch(layers=2, hidden=8))
    for (k, a), (_, b) in zip(f1.param_list(), f2.param_list()):
        np.testing.assert_array_equal(a, b)
    assert l1.val_nll == l2.val_nll
    assert l1.stopped_early and l1.epochs_run < cfg.max_epochs
    assert min(l1.val_nll) == l1.val_nll[l1.best_epoch]


def test_train_with_embedding_runs():
    gen = np.random.default_rng(0)
    theta = gen.normal(size=(60, 1))
    X = theta[:, None, :] + gen.normal(0, 0.1, (60, 6, 1))
    emb = RecurrentEmbedding(1, 3, seed=0)
    flow, emb2, log = train(theta, X, TrainConfig(max_epochs=3), FlowArch(layers=1, hidden=8), embedding=emb)
    assert emb2 is emb and flow.context_dim == 3 and log.epochs_run == 3


def test_train_guards():
    with pytest.raises(ValidationError):
        train(np.zeros((49, 1)), np.zeros((49, 1)))
    bad = np.zeros((60, 1))
    bad[3] = np.inf
    with pytest.raises(NumericError):
        train(np.zeros((60, 1)), bad)
    with pytest.raises(ValidationError):
        TrainConfig(validation_fraction=1.0)


def test_checkpoint_round_trip(tmp_path):
    flow = random_flow(seed=7)
    emb = RecurrentEmbedding(4, 2, seed=1)
    path = tmp_path / "f.lmnf"
    save_checkpoint(path, flow, emb, {"note": np.arange(3.0)})
    assert path.read_bytes()[:4] == b"LMNF"
    f2, e2, extra = load_checkpoint(path)
    theta = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(flow.log_prob(theta, np.ones(2)), f2.log_prob(theta, np.ones(2)))
    for k in emb.param_names:
        np.testing.assert_array_equal(emb.params[k], e2.params[k])
    np.testing.assert_array_equal(extra["note"], np.arange(3.0))
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad")


@given(st.integers(0, 1000))
def test_standardizer_inverse(seed):
    X = np.random.default_rng(seed).normal(3, 2, (20, 3))
    s = Standardizer.fit(X)
    np.testing.assert_allclose(s.inverse(s(X)), X, rtol=1e-12, atol=1e-12)

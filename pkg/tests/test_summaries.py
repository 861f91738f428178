import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lmsbi.errors import NumericError, ValidationError
from lmsbi.market import BehaviouralParams, MacroTrajectory, SimulationConfig, simulate
from lmsbi.summaries import (
    RecurrentEmbedding,
    SummaryVector,
    embed,
    embed_backward,
    handcrafted,
    reshape_macro,
    stack_states,
    unreshape_macro,
)


def _sig(x):
    return 1 / (1 + np.exp(-x))


def test_reshape_shapes(market10):
    traj = simulate(market10, BehaviouralParams(0.016, 0.012, 0.55), SimulationConfig(T=600))
    assert reshape_macro(traj).shape == (600, 40)
    S = stack_states(traj)
    assert S.shape == (10, 2400)
    np.testing.assert_array_equal(reshape_macro(S), traj.data)
    assert reshape_macro(MacroTrajectory(np.arange(8.0).reshape(2, 4))).shape == (2, 4)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 100))
def test_reshape_roundtrip(n, T, seed):
    X = np.random.default_rng(seed).random((T, 4 * n))
    np.testing.assert_array_equal(reshape_macro(unreshape_macro(X, n)), X)


def test_reshape_errors():
    with pytest.raises(ValidationError):
        reshape_macro(np.zeros((3, 5)))
    with pytest.raises(ValidationError):
        unreshape_macro(np.zeros((3, 8)), 3)


def test_constant_column_stats():
    v = handcrafted(np.full((10, 4), 3.5)).values.reshape(4, 10)
    np.testing.assert_array_equal(v[0], [3.5, 3.5, 3.5, 0, 3.5, 3.5, 3.5, 0, 0, 0])


def test_series_1234():
    X = np.tile(np.array([1.0, 2, 3, 4])[:, None], (1, 4))
    s = handcrafted(X).values.reshape(4, 10)[0]
    assert s[7] == pytest.approx(0.25)
    assert s[5] == pytest.approx(2.5)
    assert s[3] == pytest.approx(1.25)
    # acf2 = ((-1.5)(0.5) + (-0.5)(1.5)) / 5, acf3 = (-1.5)(1.5) / 5
    assert s[8] == pytest.approx(-0.3)
    assert s[9] == pytest.approx(-0.45)


def test_lengths_and_kind():
    X = np.random.default_rng(0).random((30, 8))
    a = handcrafted(X, "per_series")
    b = handcrafted(X, "per_step")
    assert a.dim == 80 and a.kind == "handcrafted_per_series"
    assert b.dim == 300 and b.kind == "handcrafted_per_step"


def test_short_series_rejected():
    with pytest.raises(ValidationError, match="lag"):
        handcrafted(np.zeros((3, 4)))
    with pytest.raises(ValidationError):
        handcrafted(np.zeros((10, 4)), "per_column")
    with pytest.raises(NumericError):
        handcrafted(np.full((10, 4), np.nan))


@given(arrays(np.float64, st.tuples(st.integers(4, 30), st.just(4)), elements=st.floats(-1e3, 1e3)))
def test_stat_ordering(X):
    s = handcrafted(X).values.reshape(-1, 10)
    assert np.all(np.isfinite(s))
    assert np.all(s[:, 0] <= s[:, 4] + 1e-9)
    assert np.all(s[:, 4] <= s[:, 5] + 1e-9) and np.all(s[:, 5] <= s[:, 6] + 1e-9)
    assert np.all(s[:, 6] <= s[:, 1] + 1e-9)
    assert np.all(s[:, 3] >= 0)


def test_summary_vector_guards(tmp_path):
    with pytest.raises(NumericError):
        SummaryVector([1.0, np.inf], "learned")
    with pytest.raises(ValidationError):
        SummaryVector([1.0], "other")
    SummaryVector([1.0, 2.0], "learned").to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("# kind=learned dim=2")


def test_zero_embedding():
    emb = RecurrentEmbedding.zeros(8, 5)
    out = embed(emb, np.random.default_rng(0).random((7, 8)))
    assert out.kind == "learned"
    np.testing.assert_array_equal(out.values, np.zeros(5))


def test_embed_deterministic_and_checks():
    emb = RecurrentEmbedding(8, 4, seed=1)
    X = np.random.default_rng(1).random((12, 8))
    np.testing.assert_array_equal(embed(emb, X).values, embed(emb, X).values)
    with pytest.raises(ValidationError):
        embed(emb, np.zeros((12, 7)))


def test_hand_computed_single_step():
    H, I = 2, 4
    gen = np.random.default_rng(5)
    p = {"W_ih": gen.normal(size=(3 * H, I)), "W_hh": gen.normal(size=(3 * H, H)),
         "b_ih": gen.normal(size=3 * H), "b_hh": gen.normal(size=3 * H)}
    emb = RecurrentEmbedding(I, H, params=p)
    x = gen.normal(size=I)
    gi = p["W_ih"] @ x + p["b_ih"]
    gh = p["b_hh"]  # h0 = 0
    r = _sig(gi[:H] + gh[:H])
    z = _sig(gi[H:2 * H] + gh[H:2 * H])
    c = np.tanh(gi[2 * H:] + r * gh[2 * H:])
    expected = (1 - z) * c
    np.testing.assert_allclose(emb.forward(x[None]), expected, rtol=1e-13)


def test_batch_matches_single():
    emb = RecurrentEmbedding(4, 3, seed=2)
    X = np.random.default_rng(2).random((5, 9, 4))
    out = emb.forward(X)
    for b in range(5):
        np.testing.assert_allclose(out[b], emb.forward(X[b]), rtol=1e-13)


def _fd_check(emb, X, g, eps=1e-6):
    grads = embed_backward(emb, X, g)
    worst = 0.0
    for k in emb.param_names:
        P = emb.params[k]
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + eps
            fp = g @ emb.forward(X)
            P[idx] = old - eps
            fm = g @ emb.forward(X)
            P[idx] = old
            num[idx] = (fp - fm) / (2 * eps)
        worst = max(worst, np.abs(num - grads[k]).max() / max(np.abs(num).max(), 1e-12))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_embedding_gradient_fd(seed):
    gen = np.random.default_rng(seed)
    emb = RecurrentEmbedding(4, 2, seed=seed)
    X = gen.normal(size=(3, 4))
    g = gen.normal(size=2)
    assert _fd_check(emb, X, g) < 1e-5


def test_embedding_input_gradient():
    gen = np.random.default_rng(9)
    emb = RecurrentEmbedding(4, 3, seed=9)
    X = gen.normal(size=(5, 4))
    g = gen.normal(size=3)
    _, cache = emb.forward(X, cache=True)
    _, dX = emb.backward(cache, g)
    eps = 1e-6
    num = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += eps
        Xm[idx] -= eps
        num[idx] = (g @ emb.forward(Xp) - g @ emb.forward(Xm)) / (2 * eps)
    np.testing.assert_allclose(dX, num, rtol=1e-6, atol=1e-9)


def test_constant_loss_zero_grad_and_linearity():
    emb = RecurrentEmbedding(4, 3, seed=0)
    X = np.random.default_rng(0).normal(size=(6, 4))
    zero = embed_backward(emb, X, np.zeros(3))
    assert all(not v.any() for v in zero.values())
    g = np.array([0.3, -1.0, 2.0])
    a = embed_backward(emb, X, g)
    b = embed_backward(emb, X, 2.5 * g)
    for k in a:
        np.testing.assert_allclose(b[k], 2.5 * a[k], rtol=1e-12, atol=1e-14)


def test_chrono_init_sets_update_bias():
    emb = RecurrentEmbedding(4, 5, seed=0).chrono_init(100, seed=1)
    b = emb.params["b_ih"][5:10]
    assert np.all((b >= 0.0) & (b <= np.log(99.0)))
    assert not emb.params["b_hh"][5:10].any()
    with pytest.raises(ValidationError):
        emb.chrono_init(2)

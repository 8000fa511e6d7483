import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from excursionlab.nuisance import (Constant, Forest, KernelKNN, LinearLS, NuisanceWarning, PerTimeMean,
                                   Stack, Tree, fit_nuisance, fit_stack, predict_mu)
from excursionlab.panel import Panel
from excursionlab.simgen import ContinuousConfig, Form, generate

from conftest import make_panel


def panel_from(y, x, treat=None, T=1):
    n = len(y) // T
    y = np.asarray(y, float).reshape(n, T)
    x = np.asarray(x, float).reshape(n, T)
    treat = np.ones((n, T)) if treat is None else np.asarray(treat, float).reshape(n, T)
    hist = np.stack([np.broadcast_to(np.arange(1.0, T + 1), (n, T)), x], axis=-1)
    return Panel(np.ones((n, T)), np.full((n, T), 0.5), treat, y, hist, np.ones((n, T, 1)), ("t", "x"))


def test_hyperparameter_validation():
    for bad in (lambda: KernelKNN(0), lambda: Tree(0, 1), lambda: Tree(3, 0), lambda: Forest(n_trees=0),
                lambda: Forest(subsample=0.0), lambda: LinearLS(ridge=-1), lambda: Stack((LinearLS(),))):
        with pytest.raises(ValueError):
            bad()


def test_per_time_mean_constant_outcome():
    P = make_panel(n=30, T=3)
    P = Panel(P.avail, P.prob, P.treat, np.full((30, 3), 2.5), P.history, P.moderator, P.history_names)
    fit = fit_nuisance(P, PerTimeMean())
    mu1, mu0 = fit.predict_panel(P)
    assert np.all(mu1 == 2.5) and np.all(mu0 == 2.5)


def test_per_time_mean_is_arm_time_mean(small_panel):
    P = small_panel
    fit = fit_nuisance(P, PerTimeMean())
    for t in range(P.T):
        for a in (0, 1):
            rows = (P.treat[:, t] == a) & (P.avail[:, t] == 1)
            assert predict_mu(fit, t + 1, P.history[0, t], a) == pytest.approx(P.outcome[rows, t].mean())


def test_linear_ls_exact_line():
    x = np.linspace(-2, 3, 25)
    P = panel_from(1 + 2 * x, x)
    # arm a=0 needs data too; give it the same rows under control
    P = Panel(np.ones((50, 1)), np.full((50, 1), 0.5), np.r_[np.ones(25), np.zeros(25)][:, None],
              np.r_[1 + 2 * x, -x][:, None], np.concatenate([P.history, P.history]), np.ones((50, 1, 1)),
              ("t", "x"))
    fit = fit_nuisance(P, LinearLS(ridge=0), pooled=False, features=("x",))
    intercept = predict_mu(fit, 1, [1.0, 0.0], 1)
    slope = predict_mu(fit, 1, [1.0, 1.0], 1) - intercept
    assert abs(intercept - 1) < 1e-10 and abs(slope - 2) < 1e-10
    assert predict_mu(fit, 1, [1.0, 2.0], 0) == pytest.approx(-2.0, abs=1e-10)


def test_knn_with_k_equal_rows_is_arm_mean(small_panel):
    P = small_panel
    on1 = (P.treat == 1) & (P.avail == 1)
    fit = fit_nuisance(P, KernelKNN(k=10_000))
    mu1, _ = fit.predict_panel(P)
    np.testing.assert_allclose(mu1, P.outcome[on1].mean(), atol=1e-12)


def test_unbounded_tree_memorises_training_points():
    rng = np.random.default_rng(0)
    x = rng.normal(size=12)
    y = rng.normal(size=12)
    P = panel_from(y, x, treat=np.tile([0, 1], 6))
    fit = fit_nuisance(P, Tree(max_depth=None, min_leaf=1), pooled=False, features=("x",))
    for i in range(12):
        assert predict_mu(fit, 1, P.history[i, 0], int(P.treat[i, 0])) == pytest.approx(y[i], abs=1e-12)


def test_forest_beats_mean_on_step_form():
    P, _ = generate(ContinuousConfig(n=100, form=Form.STEP, lam1=2.0, seed=3))
    mse = {}
    for name, kind in (("forest", Forest(n_trees=100)), ("mean", PerTimeMean())):
        mu1, mu0 = fit_nuisance(P, kind).predict_panel(P)
        pred = np.where(P.treat == 1, mu1, mu0)
        mse[name] = np.mean((P.outcome - pred) ** 2)
    assert mse["forest"] < mse["mean"]


def test_forest_is_deterministic(small_panel):
    a = fit_nuisance(small_panel, Forest(n_trees=20, seed=4)).predict_panel(small_panel)
    b = fit_nuisance(small_panel, Forest(n_trees=20, seed=4)).predict_panel(small_panel)
    c = fit_nuisance(small_panel, Forest(n_trees=20, seed=5)).predict_panel(small_panel)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["tree", "forest", "mean"]))
def test_piecewise_constant_learners_stay_in_range(seed, kind):
    P = make_panel(n=25, T=2, seed=seed)
    learner = {"tree": Tree(4, 2), "forest": Forest(n_trees=5, seed=seed), "mean": PerTimeMean()}[kind]
    fit = fit_nuisance(P, learner)
    Q = make_panel(n=25, T=2, seed=seed + 1)
    for a, mu in zip((1, 0), fit.predict_panel(Q)):
        rows = (P.treat == a) & (P.avail == 1)
        assert mu.min() >= P.outcome[rows].min() - 1e-12
        assert mu.max() <= P.outcome[rows].max() + 1e-12


def test_subset_fit_never_reads_held_out_rows(small_panel):
    P = small_panel
    train = np.arange(0, P.n, 2)
    scrambled = Panel(P.avail, P.prob, P.treat, np.where(np.arange(P.n)[:, None] % 2 == 1, 1e6, P.outcome),
                      P.history, P.moderator, P.history_names)
    for kind in (LinearLS(spline_knots=5), Forest(n_trees=10), KernelKNN(3)):
        a = fit_nuisance(P, kind, subset=train).predict_panel(P)
        b = fit_nuisance(scrambled, kind, subset=train).predict_panel(P)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        fit_nuisance(P, PerTimeMean(), subset=[])


def test_empty_arm_at_some_t_falls_back_to_pooled():
    P = make_panel(n=30, T=3, seed=9)
    treat = P.treat.copy()
    treat[:, 1] = 0
    Q = Panel(P.avail, P.prob, treat, P.outcome, P.history, P.moderator, P.history_names)
    with pytest.warns(NuisanceWarning):
        fit = fit_nuisance(Q, LinearLS(), pooled=False)
    mu1, _ = fit.predict_panel(Q)
    assert np.all(np.isfinite(mu1))


def test_predict_mu_errors(small_panel):
    fit = fit_nuisance(small_panel, LinearLS())
    with pytest.raises(ValueError):
        predict_mu(fit, 0, small_panel.history[0, 0], 1)
    with pytest.raises(ValueError):
        predict_mu(fit, 1, [1.0], 1)


def test_constant_nuisance():
    P = make_panel(n=10, T=2)
    mu1, mu0 = fit_nuisance(P, Constant(0.0)).predict_panel(P)
    assert np.all(mu1 == 0) and np.all(mu0 == 0)


# -- stacking ---------------------------------------------------------------


def stack_data(seed=0, positive=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 2))
    y = rng.poisson(np.exp(0.5 + 0.4 * X[:, 0])).astype(float) if positive else 1 + X[:, 0] + rng.normal(size=200)
    return X, y


@pytest.mark.parametrize("link", ["identity", "log"])
def test_stack_identical_members_split_evenly(link):
    X, y = stack_data(positive=link == "log")
    st_ = fit_stack([LinearLS(), LinearLS()], X, y, link)
    np.testing.assert_allclose(st_.weights, [0.5, 0.5], atol=1e-8)


@pytest.mark.parametrize("link", ["identity", "log"])
def test_stack_prefers_exact_member(link):
    X, y = stack_data(1, positive=link == "log")
    st_ = fit_stack([Tree(max_depth=None, min_leaf=1), Constant(0.0)], X, y, link)
    assert st_.weights[0] >= 0.99
    assert abs(st_.weights.sum() - 1) < 1e-12


@pytest.mark.parametrize("link", ["identity", "log"])
def test_stack_of_constant_means_predicts_mean(link):
    X, y = stack_data(2, positive=link == "log")
    st_ = fit_stack([PerTimeMean(), PerTimeMean()], X, y, link)
    np.testing.assert_allclose(st_.predict(X), y.mean(), rtol=1e-10)


def test_log_stack_predictions_non_negative():
    X, y = stack_data(3, positive=True)
    st_ = fit_stack([LinearLS(), Forest(n_trees=10)], X, y, "log")
    Q = np.random.default_rng(4).normal(scale=5, size=(100, 2))
    assert np.all(st_.predict(Q) >= 0)
    P = make_panel(link="log", seed=5)
    fit = fit_nuisance(P, Stack((LinearLS(), Forest(n_trees=10)), "log"))
    assert all(np.all(m >= 0) for m in fit.predict_panel(P))

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_panel
from excursionlab import Emee, Oracle, TwoStage, TwoStageCF, Wcls, diagnose_wa2, estimate
from excursionlab.dweights import PerTimeEmpirical, Unit
from excursionlab.estimators import CeeSystem
from excursionlab.nuisance import Constant, LinearLS, PerTimeMean, fit_nuisance
from excursionlab.panel import Panel
from excursionlab.simgen import BinaryConfig, ContinuousConfig, TruthHandle, generate
from excursionlab.zestim import solve_z


def test_single_time_hand_solve():
    P = make_panel(n=60, T=1, seed=4)
    rep = estimate(P, TwoStage(Constant(0.0), Unit()), "identity")
    a, p, y = P.treat[:, 0], P.prob[:, 0], P.outcome[:, 0]
    w = (a - p) / (p * (1 - p))
    assert rep.beta[0] == pytest.approx(np.sum(w * y) / np.sum(w * (a + p - 1)), rel=1e-10)


@pytest.mark.filterwarnings("ignore:degenerate second moment")
@pytest.mark.parametrize("method", [Wcls(), TwoStage(LinearLS()), TwoStage(PerTimeMean(), PerTimeEmpirical())])
@pytest.mark.parametrize("c", [0.0, 1.3, -2.0])
def test_noise_free_effect_recovered(method, c):
    P = make_panel(n=50, T=3, seed=1)
    Q = Panel(P.avail, P.prob, P.treat, c * P.treat, P.history, P.moderator, P.history_names)
    rep = estimate(Q, method, "identity", ssc=False)
    assert rep.beta[0] == pytest.approx(c, abs=1e-8)


def test_emee_constant_outcome_gives_zero():
    P = make_panel(n=50, T=3, seed=2, link="log")
    Q = Panel(P.avail, P.prob, P.treat, np.ones((P.n, P.T)), P.history, P.moderator, P.history_names)
    rep = estimate(Q, Emee(), "log", ssc=False)
    assert abs(rep.beta[0]) < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_trajectory_order_does_not_matter(seed):
    P = make_panel(n=30, T=3, seed=seed % 7)
    perm = np.random.default_rng(seed).permutation(P.n)
    for method in (Wcls(), TwoStage(LinearLS())):
        a = estimate(P, method, ssc=False).beta
        b = estimate(P.subset(perm), method, ssc=False).beta
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("scale", [1e-3, 2.5, 40.0])
def test_scalar_weight_rescale_invariance(scale):
    P = make_panel(n=40, T=4, p=2, seed=6)
    mu1, mu0 = fit_nuisance(P, LinearLS()).predict_panel(P)
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 2.0, (P.n, P.T, 1, 1)) * np.eye(2)
    a = solve_z(CeeSystem(P, "identity", mu1, mu0, d)).theta
    b = solve_z(CeeSystem(P, "identity", mu1, mu0, scale * d)).theta
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_link_compatibility():
    P = make_panel(seed=1)
    L = make_panel(seed=1, link="log")
    with pytest.raises(ValueError, match="identity"):
        estimate(L, Wcls(), "log")
    with pytest.raises(ValueError, match="log"):
        estimate(P, Emee(), "identity")
    truth = generate(BinaryConfig(n=20, T=3))[1]
    with pytest.raises(ValueError, match="link"):
        estimate(P, Oracle(truth), "identity")


def test_report_contents():
    P = make_panel(n=40, T=4, p=2, seed=3)
    rep = estimate(P, TwoStage(LinearLS()), "identity")
    assert rep.beta.shape == (2,) and rep.ci.shape == (2, 2)
    assert rep.ci_family == "t"  # n < 50
    assert np.all(rep.ci[:, 0] < rep.beta) and np.all(rep.beta < rep.ci[:, 1])
    np.testing.assert_allclose(rep.se, np.sqrt(np.diag(rep.sigma_corrected)))
    assert np.all(np.diag(rep.sigma_corrected) >= np.diag(rep.sigma) - 1e-12)
    json.dumps(rep.to_dict())
    off = estimate(P, TwoStage(LinearLS()), "identity", ssc=False)
    assert off.sigma_corrected is None
    np.testing.assert_allclose(off.se, np.sqrt(np.diag(off.sigma)))
    np.testing.assert_allclose(off.beta, rep.beta)


def test_crossfit_reports_folds():
    P, _ = generate(ContinuousConfig(n=60, T=4, seed=3))
    rep = estimate(P, TwoStageCF(LinearLS(), K=3, seed=1), "identity")
    assert sorted(rep.diagnostics["fold_sizes"]) == [20, 20, 20]
    assert rep.diagnostics["correction_experimental"]
    assert abs(rep.beta[0] - 0.5) < 0.5
    with pytest.raises(ValueError):
        TwoStageCF(K=1)


def test_oracle_runs_near_truth():
    cfg = ContinuousConfig(n=400, T=5, seed=8)
    P, truth = generate(cfg)
    rep = estimate(P, Oracle(truth, mc_budget=20_000), "identity")
    assert abs(rep.beta[0] - 0.5) < 4 * rep.se[0]


def test_wa2_matrix():
    P = make_panel(n=80, T=5, seed=2)
    mu = fit_nuisance(P, LinearLS())
    m = diagnose_wa2(P, [0.5], mu)
    np.testing.assert_allclose(np.diag(m), 1.0)
    np.testing.assert_allclose(m, m.T)
    assert np.all(m[~np.isnan(m)] >= 0)
    one = make_panel(n=20, T=1)
    np.testing.assert_array_equal(diagnose_wa2(one, [0.0], fit_nuisance(one, LinearLS())), [[1.0]])

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssm import csmc
from ssm.csmc import (
    CriticalFrameSet,
    FeatureFrame,
    GmmParams,
    MemoryWindow,
    compress_to_states,
    e_step,
    fit_gmm,
    fit_gmm_batch,
    project,
    select_critical_frames,
    temporal_logit_bias,
)
from ssm.numerics import DimensionError, ParamStore, cross_attention


def identity_params(d, heads_dim=None):
    ps = ParamStore()
    ps.add("proj.weight", (d, d), value=np.eye(d))
    ps.add("proj.bias", (d,), init="zeros")
    for n in ("wq", "wk", "wv"):
        ps.add(f"twa.{n}", (d, d), value=np.eye(d))
    return ps


class TestProject:
    def test_identity(self):
        ps = identity_params(3)
        f = np.array([1.0, -2.0, 0.5])
        assert project(f, ps).detach().numpy().tolist() == f.tolist()

    def test_zero_weight_gives_bias(self):
        ps = ParamStore()
        ps.add("proj.weight", (2, 3), init="zeros")
        ps.add("proj.bias", (2,), value=[4.0, -1.0])
        assert project(np.random.randn(3), ps).detach().numpy().tolist() == [4.0, -1.0]

    def test_linear(self):
        ps = ParamStore()
        ps.add("proj.weight", (1, 2), value=[[1.0, 1.0]])
        ps.add("proj.bias", (1,), init="zeros")
        assert project([2.0, 3.0], ps).detach().numpy().tolist() == [5.0]

    def test_dimension_mismatch(self):
        ps = identity_params(3)
        with pytest.raises(DimensionError):
            project(np.zeros(4), ps)


def reference_em_1d(xs, mu, var, pi, iters=500):
    """Scalar-loop EM for 1-D data; independent of the vectorised fitter."""
    mu, var, pi = list(mu), list(var), list(pi)
    K = len(mu)
    for _ in range(iters):
        R = []
        for x in xs:
            p = [pi[k] / math.sqrt(2 * math.pi * var[k]) * math.exp(-((x - mu[k]) ** 2) / (2 * var[k])) for k in range(K)]
            s = sum(p)
            R.append([q / s for q in p])
        for k in range(K):
            nk = sum(r[k] for r in R)
            mu[k] = sum(r[k] * x for r, x in zip(R, xs)) / nk
            var[k] = max(sum(r[k] * (x - mu[k]) ** 2 for r, x in zip(R, xs)) / nk, 1e-6)
            pi[k] = nk / len(xs)
    return mu, var, pi


SEPARABLE = [-1.1, -1.0, 1.0, 1.1]


class TestFitGmm:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(30, 3)) * [1.0, 2.0, 0.5] + 1.0
        fit = fit_gmm(x, 1, seed=0)
        assert fit.params.weights.tolist() == [1.0]
        np.testing.assert_allclose(fit.params.means[0], x.mean(0), atol=1e-12)
        np.testing.assert_allclose(fit.params.variances[0], x.var(0), atol=1e-12)
        np.testing.assert_array_equal(fit.responsibilities, np.ones((30, 1)))

    def test_variance_floor(self):
        fit = fit_gmm(np.ones((5, 2)), 1)
        np.testing.assert_array_equal(fit.params.variances, np.full((1, 2), csmc.VAR_FLOOR))

    def test_equidistant_point_splits_evenly(self):
        gmm = GmmParams(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.ones((2, 2)))
        resp, _ = e_step(np.array([[0.0, 3.0]]), gmm)
        assert resp[0] == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_separable_1d_matches_reference_em(self):
        ref_mu, ref_var, ref_pi = reference_em_1d(SEPARABLE, [-1.0, 1.0], [1.0, 1.0], [0.5, 0.5])
        # frozen output of the scalar reference
        assert ref_mu == pytest.approx([-1.05, 1.05], abs=1e-12)
        assert ref_pi == pytest.approx([0.5, 0.5], abs=1e-12)
        for seed in range(5):
            fit = fit_gmm(np.array(SEPARABLE)[:, None], 2, seed=seed, tol=1e-12, max_iters=500)
            order = np.argsort(fit.params.means[:, 0])
            np.testing.assert_allclose(fit.params.means[order, 0], ref_mu, atol=1e-6)
            np.testing.assert_allclose(fit.params.weights[order], ref_pi, atol=1e-6)
            np.testing.assert_allclose(fit.params.variances[order, 0], ref_var, atol=1e-6)

    def test_responsibilities_normalised(self):
        rng = np.random.default_rng(5)
        fit = fit_gmm(rng.normal(size=(40, 4)), 3, seed=1)
        np.testing.assert_allclose(fit.responsibilities.sum(1), 1.0, atol=1e-9)
        assert abs(fit.params.weights.sum() - 1) < 1e-9
        assert (fit.params.weights >= csmc.WEIGHT_FLOOR).all()
        assert (fit.params.variances >= csmc.VAR_FLOOR).all()

    def test_k_larger_than_l(self):
        with pytest.raises(ValueError):
            fit_gmm(np.zeros((3, 2)), 4)

    def test_collapsed_component_is_reseeded(self):
        # component 1 sits far from all data, so it gets no mass after one E-step
        x = np.array([[0.0], [0.1], [0.2], [5.0], [5.1]])
        init = GmmParams(np.array([0.5, 0.5]), np.array([[0.1], [1e4]]), np.array([[1.0], [1e-6]]))
        fit = fit_gmm(x, 2, init=init, tol=1e-10)
        assert fit.reseeds
        assert (fit.params.weights > 0.1).all()
        np.testing.assert_allclose(fit.responsibilities.sum(1), 1.0, atol=1e-9)

    def test_warm_start_from_converged_is_stable(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(-3, 1, (20, 2)), rng.normal(3, 1, (20, 2))])
        first = fit_gmm(x, 2, seed=0, tol=1e-10, max_iters=500)
        again = fit_gmm(x, 2, init=first.params, tol=1e-10)
        np.testing.assert_allclose(again.params.means, first.params.means, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_log_likelihood_monotone(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(32, 4)) + rng.integers(-3, 4, size=(32, 1))
        fit = fit_gmm(x, 3, seed=seed, tol=1e-10, max_iters=60)
        h = np.array(fit.history)
        cut = set(fit.reseeds)
        for i in range(1, len(h)):
            if i not in cut:
                assert h[i] >= h[i - 1] - 1e-9

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 20, 2))
        inits = [csmc.kmeanspp_init(xb, 2, np.random.default_rng(b)) for b, xb in enumerate(x)]
        batch = fit_gmm_batch(x, 2, np.random.default_rng(0), tol=1e-8, init=inits)
        for b in range(3):
            single = fit_gmm(x[b], 2, init=inits[b], tol=1e-8)
            np.testing.assert_allclose(batch[b].params.means, single.params.means, atol=1e-12)
            assert batch[b].log_likelihood == pytest.approx(single.log_likelihood, abs=1e-9)


class TestSelectCriticalFrames:
    def test_exact_match_is_chosen(self):
        emb = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 0.0]])
        gmm = GmmParams(np.array([1.0]), np.array([[1.0, 1.0]]), np.ones((1, 2)))
        sel = select_critical_frames(emb, gmm)
        assert sel.indices == (-2, 0)
        assert sel.clusters == (0, -1)

    def test_tie_goes_to_most_recent(self):
        emb = np.array([[-1.0], [1.0], [5.0]])
        gmm = GmmParams(np.array([1.0]), np.array([[0.0]]), np.ones((1, 1)))
        assert select_critical_frames(emb, gmm).indices == (-2, 0)

    def test_separable_instance(self):
        # distance table from the scalar reference: both components have an
        # exact tie (0.05) between their two nearest frames
        gmm = GmmParams(np.array([0.5, 0.5]), np.array([[-1.05], [1.05]]), np.full((2, 1), 0.0025))
        sel = select_critical_frames(np.array(SEPARABLE)[:, None], gmm)
        assert sel.indices == (-3, -1, 0)
        assert sel.clusters == (0, 1, -1)

    def test_shared_nearest_frame_is_not_reused(self):
        emb = np.array([[0.0], [10.0], [0.1]])
        gmm = GmmParams(np.array([0.5, 0.5]), np.array([[0.0], [0.0]]), np.ones((2, 1)))
        sel = select_critical_frames(emb, gmm)
        assert sel.indices == (-3, -1, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_contains_current_and_unique(self, seed, K):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(12, 3)).round(1)
        fit = fit_gmm(emb, K, seed=seed)
        sel = select_critical_frames(emb, fit.params)
        assert sel.indices[-1] == 0
        assert len(set(sel.indices)) == K + 1
        assert list(sel.indices) == sorted(sel.indices)


class TestTemporalBias:
    def test_zero_gap(self):
        assert temporal_logit_bias(3, 3, 1.0) == 0.0

    def test_huge_delta(self):
        assert abs(temporal_logit_bias(0, -500, 1e9)) < 1e-12

    def test_worked_value(self):
        b = temporal_logit_bias(0, -2, 1.0)
        assert b == -2.0
        assert math.exp(b) == pytest.approx(0.1353352832366127, abs=1e-15)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            temporal_logit_bias(0, 1, 0.0)


def window(rows):
    return MemoryWindow.from_array(np.asarray(rows, dtype=np.float64))


class TestCompress:
    def test_single_frame(self):
        ps = ParamStore(seed=1)
        csmc.init_projection(ps, 3, 4)
        csmc.init_twa(ps, 4)
        w = window([[0.2, -0.3, 1.0]])
        out = compress_to_states(w, CriticalFrameSet((0,), (-1,)), ps, delta=8.0)
        expected = project(w.features(), ps) @ ps["twa.wv"].T
        assert torch.allclose(out, expected, atol=1e-15)

    def test_identical_frames(self):
        ps = ParamStore(seed=2)
        csmc.init_projection(ps, 2, 4)
        csmc.init_twa(ps, 4)
        w = window([[1.0, 2.0]] * 6)
        v = project(np.array([1.0, 2.0]), ps) @ ps["twa.wv"].T
        for delta in (0.5, 8.0, 1e9):
            out = compress_to_states(w, CriticalFrameSet((-4, -1, 0), (0, 1, -1)), ps, delta=delta, heads=2)
            assert torch.allclose(out, v.expand(3, 4), atol=1e-12)

    def test_three_frame_worked_example(self):
        ps = identity_params(2)
        w = window([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out = compress_to_states(w, CriticalFrameSet((-2, -1, 0), (0, 1, -1)), ps, delta=1.0)
        # independent scalar evaluation of the weighted attention sum
        assert out[1].detach().numpy() == pytest.approx([0.47522867836762106, 0.8430612175403365], abs=1e-9)

    def test_outside_window(self):
        ps = identity_params(2)
        with pytest.raises(ValueError):
            compress_to_states(window([[0.0, 1.0]] * 2), CriticalFrameSet((-5, 0), (0, -1)), ps, 1.0)

    def test_rows_sum_to_one(self):
        ps = ParamStore(seed=3)
        csmc.init_projection(ps, 5, 8)
        csmc.init_twa(ps, 8)
        w = window(np.random.default_rng(0).normal(size=(20, 5)))
        _, att = compress_to_states(
            w, CriticalFrameSet((-15, -7, 0), (0, 1, -1)), ps, 3.0, heads=4, return_weights=True
        )
        assert torch.allclose(att.sum(-1), torch.ones_like(att.sum(-1)), atol=1e-9, rtol=0)


def test_window_validation():
    with pytest.raises(ValueError):
        MemoryWindow([FeatureFrame(-2, np.zeros(2))], FeatureFrame(0, np.zeros(2)))
    with pytest.raises(DimensionError):
        MemoryWindow([FeatureFrame(-1, np.zeros(3))], FeatureFrame(0, np.zeros(2)))


def test_large_delta_reduces_to_plain_attention():
    ps = ParamStore(seed=4)
    csmc.init_projection(ps, 3, 4)
    csmc.init_twa(ps, 4)
    feats = np.random.default_rng(1).normal(size=(10, 3))
    w = window(feats)
    crit = CriticalFrameSet((-6, -2, 0), (0, 1, -1))
    out = compress_to_states(w, crit, ps, delta=1e9)
    emb = project(feats, ps)
    q = emb[[3, 7, 9]] @ ps["twa.wq"].T
    plain = cross_attention(q, emb @ ps["twa.wk"].T, emb @ ps["twa.wv"].T)
    assert torch.allclose(out, plain, atol=1e-6)

import json

import numpy as np
import pytest

from trustforge import nn, xai
from trustforge import tensor as T
from trustforge.errors import ContractError, ConvergenceError, SingularityError
from trustforge.tensor import Tensor


def _linear_scorer(w, b=0.0):
    w = np.asarray(w, float)
    return lambda xt: (xt * Tensor(w)).sum() + b


def _tiny_cnn(seed=0):
    layers = [{"type": "conv", "in": 1, "out": 4, "k": 3, "padding": "same"}, {"type": "relu"},
              {"type": "maxpool"}, {"type": "flatten"}, {"type": "linear", "in": 4 * 4 * 4, "out": 3}]
    return nn.Model(layers, (1, 8, 8), "softmax", seed=seed)


class TestSaliency:
    def test_linear_is_abs_weight(self):
        w = np.array([[0.5, -2.0], [3.0, 0.0]])
        s = xai.saliency(_linear_scorer(w), np.ones((2, 2)))
        np.testing.assert_array_equal(s.values, np.abs(w))

    def test_linear_model_object(self):
        W = np.array([[1.5], [-0.25], [0.0]])
        m = nn.Model([{"type": "linear", "in": 3, "out": 1}], (3,), "linear",
                     params={"0.W": W, "0.b": np.array([2.0])})
        s = xai.saliency(m, np.array([0.3, 0.1, 0.9]), target=0)
        np.testing.assert_array_equal(s.values, np.abs(W[:, 0]))

    def test_constant_model_zero(self):
        s = xai.saliency(lambda xt: Tensor(3.0) + 0 * xt.sum(), np.ones((3, 3)))
        np.testing.assert_array_equal(s.values, 0.0)

    def test_finite_difference_on_toy_net(self):
        m = nn.mlp([4, 8, 3], "tanh", seed=3)
        x = np.array([0.2, -0.4, 0.7, 0.1])
        s = xai.saliency(m, x, target=2)

        def score(v):
            return nn.logits(m, v[None]).numpy()[0, 2]

        h = 1e-6
        fd = np.array([(score(x + h * e) - score(x - h * e)) / (2 * h) for e in np.eye(4)])
        np.testing.assert_allclose(s.values, np.abs(fd), rtol=1e-4)

    def test_image_spatial_shape(self):
        s = xai.saliency(_tiny_cnn(), np.random.default_rng(0).random((1, 8, 8)), target=1)
        assert s.values.shape == (8, 8)
        assert s.values.min() >= 0


class TestGradCam:
    def test_hand_example(self):
        A = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(xai.grad_cam_from(A, np.ones_like(A)), A[0])

    def test_negative_gradient_clamped(self):
        A = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(xai.grad_cam_from(A, -np.ones_like(A)), 0.0)

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        A = rng.random((3, 4, 4))
        G = rng.normal(size=(3, 4, 4))
        s = np.array([2.0, 0.5, 7.0])[:, None, None]
        np.testing.assert_allclose(xai.grad_cam_from(A * s, G / s), xai.grad_cam_from(A, G), atol=1e-12)

    def test_nonnegative_on_random_inputs(self):
        m = _tiny_cnn(1)
        rng = np.random.default_rng(2)
        for _ in range(100):
            cam = xai.grad_cam(m, rng.random((1, 8, 8)), int(rng.integers(3)))
            assert cam.values.shape == (8, 8)
            assert cam.values.min() >= 0

    def test_matches_manual_pipeline(self):
        m = _tiny_cnn(4)
        x = np.random.default_rng(5).random((1, 8, 8))
        feats, z = nn.features_and_logits(m, x[None], 0)
        (g,) = T.grad(z[0, 2], [feats])
        want = np.maximum(np.einsum("k,khw->hw", g.data[0].mean(axis=(1, 2)), feats.data[0]), 0)
        np.testing.assert_allclose(xai.grad_cam(m, x, 2, layer=0).values, want, atol=1e-12)

    def test_non_spatial_layer(self):
        m = _tiny_cnn()
        with pytest.raises(ContractError):
            xai.grad_cam(m, np.zeros((1, 8, 8)), 0, layer=4)

    def test_bilinear_constant_and_range(self):
        np.testing.assert_allclose(xai.bilinear_resize(np.full((3, 3), 2.5), (7, 9)), 2.5)
        a = np.random.default_rng(0).random((4, 4))
        up = xai.bilinear_resize(a, (8, 8))
        assert a.min() <= up.min() and up.max() <= a.max()


class TestHybrid:
    def _maps(self):
        return xai.AttributionMap(np.array([[1.0, 0.0]]), "g"), xai.AttributionMap(np.array([[0.0, 1.0]]), "p")

    def test_endpoints(self):
        gc, pm = self._maps()
        np.testing.assert_array_equal(xai.hybrid_map(gc, pm, 1.0).values, gc.values)
        np.testing.assert_array_equal(xai.hybrid_map(gc, pm, 0.0).values, pm.values)

    def test_midpoint(self):
        gc, pm = self._maps()
        np.testing.assert_allclose(xai.hybrid_map(gc, pm, 0.5).values, [[0.5, 0.5]])

    def test_normalizes_scales(self):
        gc = xai.AttributionMap(np.array([[10.0, 5.0]]), "g")
        pm = xai.AttributionMap(np.array([[0.0, 0.02]]), "p")
        np.testing.assert_allclose(xai.hybrid_map(gc, pm, 0.5).values, [[0.5, 0.75]])

    def test_errors(self):
        gc, pm = self._maps()
        with pytest.raises(ContractError):
            xai.hybrid_map(gc, pm, 1.5)
        with pytest.raises(ContractError):
            xai.hybrid_map(gc, xai.AttributionMap(np.zeros((2, 2)), "p"), 0.5)


class TestPerturbationMap:
    def test_constant_model(self):
        f = lambda xb: np.full((len(xb), 2), 4.0)
        pm = xai.perturbation_map(f, np.ones((1, 8, 8)), 0, 4)
        np.testing.assert_array_equal(pm.values, 0.0)

    def test_single_pixel_model(self):
        f = lambda xb: np.asarray(xb)[:, 0, 0, 0][:, None]
        x = np.random.default_rng(0).uniform(0.5, 1.0, (1, 8, 8))
        pm = xai.perturbation_map(f, x, 0, 4)
        want = np.zeros((8, 8))
        want[:4, :4] = x[0, 0, 0]
        np.testing.assert_array_equal(pm.values, want)

    def test_nonnegative_with_real_model(self):
        pm = xai.perturbation_map(_tiny_cnn(2), np.random.default_rng(1).random((1, 8, 8)), 1, 2)
        assert pm.values.min() >= 0

    def test_patch_too_large(self):
        with pytest.raises(ContractError):
            xai.perturbation_map(_tiny_cnn(), np.zeros((1, 8, 8)), 0, 9)


class TestLime:
    @staticmethod
    def affine(Z):
        Z = np.asarray(Z)
        return 3 * Z[:, 0] - 2 * Z[:, 1] + 1

    def test_recovers_affine(self):
        ex = xai.lime_explain(self.affine, np.array([1.0, 1.0]), n_perturb=500, sigma=0.1, seed=0)
        cos = ex.beta @ [3, -2] / (np.linalg.norm(ex.beta) * np.sqrt(13))
        assert cos >= 0.99
        np.testing.assert_allclose(ex.phi, [0.6, 0.4], atol=1e-6)
        assert ex.fidelity >= 0.95
        np.testing.assert_allclose(ex.intercept, 1.0, atol=1e-5)

    def test_wls_oracle(self):
        # independent normal-equation solve of the same weighted problem
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 3))
        y = X @ [1.0, -0.5, 2.0] + 0.1 * rng.normal(size=50)
        w = rng.uniform(0.1, 1.0, 50)
        b0, beta = xai.weighted_lstsq(X, y, w, ridge=0.0)
        A = np.column_stack([np.ones(50), X])
        coef = np.linalg.solve(A.T @ (w[:, None] * A), A.T @ (w * y))
        np.testing.assert_allclose(np.r_[b0, beta], coef, rtol=1e-10)

    def test_kernel_at_zero(self):
        assert xai.kernel_weights([0.0], 0.3)[0] == 1.0

    def test_constant_blackbox(self):
        ex = xai.lime_explain(lambda Z: np.full(len(Z), 2.0), np.zeros(3), n_perturb=100)
        assert ex.degenerate
        assert ex.fidelity == 0.0
        np.testing.assert_allclose(ex.phi, 1 / 3)
        np.testing.assert_allclose(ex.beta, 0.0)

    def test_phi_sums_to_one(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            w = rng.normal(size=5)
            ex = xai.lime_explain(lambda Z: np.tanh(np.asarray(Z) @ w), rng.random(5), n_perturb=200, seed=seed)
            assert abs(ex.phi.sum() - 1) <= 1e-12
            assert np.all(ex.phi >= 0)

    def test_singular_design(self):
        with pytest.raises(SingularityError, match="n_perturb"):
            xai.lime_explain(self.affine, np.array([1.0, 1.0]), n_perturb=10, sigma=0.0, mask_prob=0.0)

    def test_too_few_perturbations(self):
        with pytest.raises(ContractError):
            xai.lime_explain(self.affine, np.array([1.0, 1.0]), n_perturb=3)

    def test_sharp_drops_noise_feature(self):
        rng = np.random.default_rng(7)

        def f(Z):
            Z = np.asarray(Z)
            return 5 * Z[:, 0] + rng.normal(0, 0.5, len(Z))

        ex = xai.lime_explain(f, np.array([0.5, 0.5]), n_perturb=60, sigma=0.1, mask_prob=0.0, sharp=True, seed=1)
        assert 0 not in ex.dropped
        assert ex.beta[0] != 0

    def test_json(self):
        ex = xai.lime_explain(self.affine, np.array([1.0, 1.0]), seed=0)
        d = json.loads(json.dumps(ex.to_json()))
        assert set(d) >= {"intercept", "beta", "phi", "fidelity"}

    def test_seeded(self):
        a = xai.lime_explain(self.affine, np.array([1.0, 2.0]), seed=4)
        b = xai.lime_explain(self.affine, np.array([1.0, 2.0]), seed=4)
        np.testing.assert_array_equal(a.beta, b.beta)


class TestLasso:
    def _data(self, n=200, p=6, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, p))
        w = rng.normal(size=p)
        return X, w

    def test_zero_lambda_is_ols(self):
        X, w = self._data()
        g = xai.sparse_global_surrogate(lambda A: A @ w + 0.7, X, 0.0)
        A = np.column_stack([np.ones(len(X)), X])
        ols = np.linalg.lstsq(A, X @ w + 0.7, rcond=None)[0]
        assert np.linalg.norm(g.w - ols[1:]) / np.linalg.norm(ols[1:]) < 1e-6
        assert g.fidelity > 1 - 1e-9

    def test_noisy_zero_lambda_is_ols(self):
        X, w = self._data(seed=1)
        y = X @ w + np.random.default_rng(9).normal(size=len(X))
        g = xai.sparse_global_surrogate(lambda A: y, X, 0.0)
        A = np.column_stack([np.ones(len(X)), X])
        ols = np.linalg.lstsq(A, y, rcond=None)[0]
        assert np.linalg.norm(g.w - ols[1:]) / np.linalg.norm(ols[1:]) < 1e-6

    def test_large_lambda_zero(self):
        X, w = self._data()
        g = xai.sparse_global_surrogate(lambda A: A @ w, X, 1e6)
        assert np.all(g.w == 0.0)

    def test_univariate_soft_threshold(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(80, 1))
        y = 1.3 * x[:, 0] + rng.normal(size=80)
        lam = 0.4
        w, b, _, _ = xai.lasso_cd(x, y, lam)
        xc = x[:, 0] - x[:, 0].mean()
        yc = y - y.mean()
        n = len(y)
        rho = (2 / n) * xc @ yc
        z = (2 / n) * xc @ xc
        want = np.sign(rho) * max(abs(rho) - lam, 0) / z
        np.testing.assert_allclose(w[0], want, rtol=1e-9)

    def test_objective_monotone(self):
        X, w = self._data(p=10, seed=3)
        X[:, 1] = X[:, 0] + 0.3 * X[:, 1]  # correlated columns
        _, _, hist, _ = xai.lasso_cd(X, X @ w, 0.05)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_sparsity_increases_with_lambda(self):
        X, w = self._data(p=8, seed=4)
        nz = [np.count_nonzero(xai.lasso_cd(X, X @ w, lam)[0]) for lam in (0.0, 0.1, 0.5, 2.0, 10.0)]
        assert nz == sorted(nz, reverse=True)

    def test_convergence_error(self):
        X, w = self._data(p=10, seed=5)
        X[:, 1] = X[:, 0] + 1e-3 * X[:, 1]
        with pytest.raises(ConvergenceError, match="duality gap proxy"):
            xai.lasso_cd(X, X @ w, 0.0, max_sweeps=2)

    def test_negative_lambda(self):
        X, w = self._data()
        with pytest.raises(ContractError):
            xai.lasso_cd(X, X @ w, -1.0)


class TestOutputs:
    def test_pgm_round_trip(self, tmp_path):
        a = np.random.default_rng(0).random((5, 7))
        m = xai.AttributionMap(a, "saliency")
        p = m.write_pgm(tmp_path / "m.pgm")
        assert p.read_bytes().startswith(b"P5\n7 5\n255\n")
        np.testing.assert_allclose(xai.read_pgm(p), m.normalized(), atol=0.5 / 255 + 1e-12)

    def test_normalized_range(self):
        m = xai.AttributionMap(np.array([[0.0, 2.0], [1.0, 4.0]]), "x")
        assert m.normalized().max() == 1.0
        np.testing.assert_array_equal(xai.AttributionMap(np.zeros((2, 2)), "x").normalized(), 0.0)

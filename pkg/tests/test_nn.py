import math

import numpy as np
import pytest

from trustforge import nn
from trustforge import tensor as T
from trustforge.data import LabeledDataset, SplitPair, stratified_split
from trustforge.errors import ContractError, DimensionError, FormatError
from trustforge.tensor import Tensor

from fd import numeric_grad, rel_err


def _affine(W, b, head="linear"):
    W = np.atleast_2d(np.asarray(W, float))
    layers = [{"type": "linear", "in": W.shape[0], "out": W.shape[1]}]
    return nn.Model(layers, (W.shape[0],), head, params={"0.W": W, "0.b": np.asarray(b, float)})


class TestForward:
    def test_line(self):
        m = _affine([[2.0]], [1.0])
        np.testing.assert_allclose(nn.forward(m, [[3.0]]).numpy(), [[7.0]])

    def test_sigmoid_head_at_zero(self):
        m = _affine([[0.0]], [0.0], head="sigmoid")
        np.testing.assert_allclose(nn.forward(m, [[5.0]]).numpy(), [[0.5]])

    def test_zero_dropout_modes_agree(self):
        m = nn.mlp([4, 6, 3], dropout=0.0, seed=1)
        m.layers.insert(1, {"type": "dropout", "p": 0.0})
        m2 = nn.Model(m.layers, (4,), "softmax", seed=1)
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(nn.forward(m2, x, "train", 3).numpy(), nn.forward(m2, x, "eval").numpy())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.forward(nn.dnn(), np.zeros((2, 784)))

    def test_incompatible_layers(self):
        with pytest.raises(DimensionError):
            nn.Model([{"type": "linear", "in": 3, "out": 4}, {"type": "linear", "in": 5, "out": 2}], (3,))

    def test_bad_dropout_rate(self):
        with pytest.raises(ContractError):
            nn.Model([{"type": "dropout", "p": 1.0}], (3,), "linear")

    def test_architecture_shapes(self):
        x = np.zeros((2, 1, 28, 28))
        assert nn.forward(nn.dnn(), x).shape == (2, 10)
        assert nn.forward(nn.cnn(), x).shape == (2, 10)
        assert nn.forward(nn.regression_net(), np.zeros((3, 1))).shape == (3, 1)
        assert nn.dnn().n_parameters() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10

    def test_softmax_rows_sum_to_one(self):
        p = nn.forward(nn.cnn(seed=2), np.random.default_rng(0).random((4, 1, 28, 28))).numpy()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_features_and_logits_consistent(self):
        m = nn.cnn(seed=3)
        x = np.random.default_rng(1).random((2, 1, 28, 28))
        feats, z = nn.features_and_logits(m, x, nn.last_conv_index(m))
        assert feats.shape == (2, 16, 11, 11)
        assert feats.numpy().min() >= 0
        np.testing.assert_allclose(z.numpy(), nn.logits(m, x).numpy(), atol=1e-12)


class TestDropout:
    def test_train_expectation_matches_eval(self):
        m = nn.mlp([3, 8, 2], head="linear", dropout=0.5, seed=4)
        x = np.array([[0.3, -1.2, 0.8]])
        rng = np.random.default_rng(0)
        draws = np.stack([nn.forward(m, x, "train", rng).numpy()[0] for _ in range(10000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
        ev = nn.forward(m, x, "eval").numpy()[0]
        assert np.all(np.abs(draws.mean(axis=0) - ev) <= 3 * se)

    def test_mask_is_binary_and_unscaled(self):
        m = nn.Model([{"type": "dropout", "p": 0.3}], (1000,), "linear")
        out = nn.forward(m, np.ones((1, 1000)), "train", 0).numpy()
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert abs(out.mean() - 0.7) < 0.05

    def test_seeded(self):
        m = nn.mlp([3, 8, 2], dropout=0.5, seed=4)
        x = np.ones((2, 3))
        np.testing.assert_array_equal(nn.forward(m, x, "train", 9).numpy(), nn.forward(m, x, "train", 9).numpy())


class TestLosses:
    def test_bce_perfect(self):
        assert nn.bce_loss(Tensor([1.0]), [1]).item() <= 1e-11

    def test_bce_symmetric(self):
        np.testing.assert_allclose(nn.bce_loss(Tensor([0.5, 0.5]), [1, 0]).item(), math.log(2), atol=1e-12)

    def test_bce_length_mismatch(self):
        with pytest.raises(ContractError):
            nn.bce_loss(Tensor([0.5, 0.5]), [1, 0, 1])

    def test_bce_logit_gradient(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=6)
        y = rng.integers(0, 2, 6).astype(float)
        zt = Tensor(z.copy(), requires_grad=True)
        nn.bce_loss(zt.sigmoid(), y).backward()
        sig = 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(zt.grad, (sig - y) / len(y), atol=1e-12)
        (fd,) = numeric_grad(lambda a: nn.bce_loss(Tensor(a).sigmoid(), y).item(), [z.copy()], h=1e-6)
        assert rel_err(zt.grad, fd) < 1e-6

    def test_bce_with_logits_matches(self):
        z = np.linspace(-4, 4, 9)
        y = (np.arange(9) % 2).astype(float)
        np.testing.assert_allclose(nn.bce_with_logits(Tensor(z), y).item(), nn.bce_loss(Tensor(z).sigmoid(), y).item(), atol=1e-12)

    def test_ce_uniform(self):
        for C in (2, 10, 37):
            assert abs(nn.ce_loss(Tensor(np.zeros((4, C))), [0, 1, 1, 0]).item() - math.log(C)) <= 1e-12

    def test_ce_dominant(self):
        z = np.full((3, 10), -50.0)
        z[np.arange(3), [2, 5, 7]] = 50.0
        assert nn.ce_loss(Tensor(z), [2, 5, 7]).item() < 1e-12

    def test_ce_out_of_range(self):
        with pytest.raises(ContractError):
            nn.ce_loss(Tensor(np.zeros((2, 3))), [0, 3])

    def test_ce_two_class_equals_bce(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=8)
        y = rng.integers(0, 2, 8)
        z2 = np.stack([np.zeros(8), s], axis=1)
        np.testing.assert_allclose(nn.ce_loss(Tensor(z2), y).item(), nn.bce_loss(Tensor(s).sigmoid(), y).item(), atol=1e-12)

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            z = rng.normal(size=(5, 4)) * 3
            y = rng.integers(0, 4, 5)
            assert nn.ce_loss(Tensor(z), y).item() >= 0
            assert nn.bce_loss(Tensor(rng.random(5)), rng.integers(0, 2, 5)).item() >= 0


class TestAdam:
    def test_hand_step(self):
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        st = nn.AdamState(lr=0.001)
        nn.adam_step(st, p, {"w": np.array([1.0])})
        delta = p["w"].data[0] - 0.5
        np.testing.assert_allclose(delta, -0.001 / (1 + 1e-8), rtol=1e-12)
        assert abs(delta + 0.000999999) < 1e-9
        assert st.t == 1

    def test_zero_grad_no_move(self):
        p = {"w": Tensor(np.array([0.5, -2.0]), requires_grad=True)}
        st = nn.AdamState(lr=0.1)
        nn.adam_step(st, p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [0.5, -2.0])

    def test_decoupled_decay(self):
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        st = nn.AdamState(lr=0.1, weight_decay=0.5)
        nn.adam_step(st, p, {"w": np.zeros(1)})
        np.testing.assert_allclose(p["w"].data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_two_steps_reference(self):
        # hand-rolled reference of the moment recursions
        g = [0.3, -0.7]
        b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
        m = v = 0.0
        th = 1.0
        for t, gt in enumerate(g, 1):
            m = b1 * m + (1 - b1) * gt
            v = b2 * v + (1 - b2) * gt * gt
            th -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        st = nn.AdamState(lr=lr)
        for gt in g:
            nn.adam_step(st, p, {"w": np.array([gt])})
        np.testing.assert_allclose(p["w"].data[0], th, rtol=1e-14)

    def test_overflow(self):
        st = nn.AdamState(t=2**53)
        with pytest.raises(ContractError):
            nn.adam_step(st, {}, {})

    def test_nonfinite(self):
        with pytest.raises(ContractError):
            nn.adam_step(nn.AdamState(), {"w": Tensor([1.0])}, {"w": np.array([np.nan])})

    def test_bad_beta(self):
        with pytest.raises(ContractError):
            nn.AdamState(beta1=1.0)

    def test_defaults(self):
        cfg = nn.TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.weight_decay, cfg.optimizer, cfg.schedule) == (1e-4, 32, 5e-5, "adamw", "cosine")

    def test_cosine(self):
        assert nn.cosine_lr(1.0, 0, 10) == 1.0
        assert abs(nn.cosine_lr(1.0, 5, 10) - 0.5) < 1e-15
        assert abs(nn.cosine_lr(1.0, 10, 10)) < 1e-15


def _xor():
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
    y = np.array([0, 1, 1, 0])
    return LabeledDataset(x, y, n_classes=2)


class TestTraining:
    def test_xor(self):
        ds = _xor()
        m = nn.mlp([2, 16, 1], "relu", "sigmoid", seed=7)
        cfg = nn.TrainConfig(epochs=2000, batch_size=4, lr=0.01, weight_decay=0.0, schedule="none",
                             val_fraction=0.0, seed=7, max_steps=2000)
        res = nn.train_classifier(m, ds, cfg)
        assert res.steps <= 2000
        assert nn.evaluate(m, ds) == 1.0

    def test_deterministic_history(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 5))
        y = (x[:, 0] + x[:, 1] > 0).astype(int)
        ds = LabeledDataset(x, y, n_classes=2)
        cfg = nn.TrainConfig(epochs=3, lr=1e-2, seed=5)
        h1 = nn.train_classifier(nn.mlp([5, 8, 2], seed=1), ds, cfg).history
        h2 = nn.train_classifier(nn.mlp([5, 8, 2], seed=1), ds, cfg).history
        assert h1 == h2
        assert {"train_loss", "val_loss", "val_acc", "lr"} <= set(h1[0])

    def test_early_stopping(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 3))
        y = rng.integers(0, 2, 100)  # pure noise: validation loss stops improving
        ds = LabeledDataset(x, y, n_classes=2)
        cfg = nn.TrainConfig(epochs=200, lr=0.05, patience=3, seed=0, schedule="none")
        res = nn.train_classifier(nn.mlp([3, 32, 2], seed=0), ds, cfg)
        assert res.stopped_early
        assert len(res.history) < 200

    def test_empty(self):
        ds = LabeledDataset(np.zeros((0, 2)), np.zeros(0, int), n_classes=2)
        with pytest.raises(ContractError):
            nn.train_classifier(nn.mlp([2, 2]), ds, nn.TrainConfig(val_fraction=0))

    def test_bad_epochs(self):
        with pytest.raises(ContractError):
            nn.train_classifier(nn.mlp([2, 2]), _xor(), nn.TrainConfig(epochs=0))

    def test_accepts_split_pair(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(60, 2))
        ds = LabeledDataset(x, (x[:, 0] > 0).astype(int), n_classes=2)
        sp = stratified_split(ds, 0.2, 0)
        res = nn.train_classifier(nn.mlp([2, 4, 2]), sp, nn.TrainConfig(epochs=2, val_fraction=0.0))
        assert res.steps == 2 * math.ceil(48 / 32)

    def test_regression_loss_decreases(self):
        from trustforge.data import synth_regression

        ds = synth_regression(256, noise_sd=0.1, seed=0)
        m = nn.regression_net(seed=0)
        res = nn.train_classifier(m, ds, nn.TrainConfig(epochs=30, lr=1e-2, seed=0, schedule="none"))
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]


class TestEvaluate:
    def _model(self):
        return _affine(np.eye(3), np.zeros(3), head="softmax")

    def test_all_correct_and_wrong(self):
        x = np.eye(3)
        m = self._model()
        assert nn.evaluate(m, LabeledDataset(x, np.array([0, 1, 2]), n_classes=3)) == 1.0
        assert nn.evaluate(m, LabeledDataset(x, np.array([1, 2, 0]), n_classes=3)) == 0.0

    def test_brute_force_count(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 3))
        y = rng.integers(0, 3, 100)
        got = nn.evaluate(self._model(), LabeledDataset(x, y, n_classes=3))
        count = 0
        for xi, yi in zip(x, y):
            best = 0
            for j in range(3):
                if xi[j] > xi[best]:
                    best = j
            count += best == yi
        assert got == count / 100

    def test_sigmoid_threshold(self):
        m = _affine([[1.0]], [0.0], head="sigmoid")
        ds = LabeledDataset(np.array([[-1.0], [2.0], [3.0]]), np.array([0, 1, 0]), n_classes=2)
        assert nn.evaluate(m, ds) == pytest.approx(2 / 3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = nn.cnn(dropout=0.3, seed=5)
        p = nn.save_model(tmp_path / "m.tfmd", m, {"lr": 1e-3}, [{"epoch": 1, "val_loss": 0.5}])
        m2 = nn.load_model(p)
        assert m2.spec() == m.spec()
        for k in m.params:
            np.testing.assert_array_equal(m2.params[k].data, m.params[k].data)
        side = nn.load_sidecar(p)
        assert side["config"] == {"lr": 1e-3}
        assert p.read_bytes()[:4] == b"TFMD"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            nn.load_model(p)

    def test_truncated(self, tmp_path):
        p = nn.save_model(tmp_path / "m", nn.mlp([2, 3, 2]))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            nn.load_model(p)


class TestAttention:
    def test_uniform_scores_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        out = nn.spatial_attention(Tensor(x), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.numpy(), x, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        arrays = [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=3)]
        proj = rng.normal(size=(2, 3, 3, 3))

        def f(*a):
            return float((nn.spatial_attention(*map(Tensor, a)).numpy() * proj).sum())

        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        (nn.spatial_attention(*ts) * Tensor(proj)).sum().backward()
        for t, g in zip(ts, numeric_grad(f, [a.copy() for a in arrays], h=1e-5)):
            assert rel_err(t.grad, g) < 1e-6

import threading

import numpy as np
import pytest

from trustforge import tensor as T
from trustforge.errors import ContractError, DimensionError
from trustforge.tensor import Tensor

from fd import numeric_grad, rel_err

N_POINTS = 20


def _away(rng, shape, margin=0.05):
    """Uniform in [-1, 1] with |x| >= margin (keeps kinks out of the FD stencil)."""
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    """Values on a shuffled grid with spacing 0.05 so no window has near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape)


# name -> (input generator, function of Tensors)
CASES = {
    "add_broadcast": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))], lambda a, b: a - b),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))], lambda a, b: a * b),
    "div": (lambda r: [r.normal(size=(3,)), r.uniform(0.5, 2.0, (3,))], lambda a, b: a / b),
    "neg": (lambda r: [r.normal(size=(4,))], lambda a: -a),
    "power": (lambda r: [r.uniform(0.5, 2.0, (5,))], lambda a: a**2.5),
    "exp": (lambda r: [r.normal(size=(2, 3))], lambda a: a.exp()),
    "log": (lambda r: [r.uniform(0.5, 3.0, (4,))], lambda a: a.log()),
    "sqrt": (lambda r: [r.uniform(0.5, 3.0, (4,))], lambda a: a.sqrt()),
    "tanh": (lambda r: [r.normal(size=(5,))], lambda a: a.tanh()),
    "sigmoid": (lambda r: [r.normal(size=(5,)) * 3], lambda a: a.sigmoid()),
    "relu": (lambda r: [_away(r, (6,))], T.relu),
    "leaky_relu": (lambda r: [_away(r, (6,))], lambda a: T.leaky_relu(a, 0.2)),
    "abs": (lambda r: [_away(r, (6,))], lambda a: a.abs()),
    "clip": (lambda r: [_away(r, (8,)) + r.choice([-1.0, 1.0], (8,))], lambda a: T.clip(a, -1.0, 1.0)),
    "sum_axis": (lambda r: [r.normal(size=(3, 4, 2))], lambda a: a.sum(axis=(0, 2))),
    "mean_keepdims": (lambda r: [r.normal(size=(3, 4))], lambda a: a.mean(axis=1, keepdims=True)),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: a.reshape(3, 4)),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: a.transpose(2, 0, 1)),
    "getitem_fancy": (lambda r: [r.normal(size=(4, 3))], lambda a: a[np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2])]),
    "getitem_slice": (lambda r: [r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: T.concat([a, b], axis=1)),
    "pad": (lambda r: [r.normal(size=(2, 3))], lambda a: T.pad(a, ((1, 0), (2, 1)))),
    "l2_norm": (lambda r: [r.normal(size=(3, 4))], lambda a: T.l2_norm(a, axis=1)),
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], T.matmul),
    "matmul_batched": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(4, 3, 2))], T.matmul),
    "softmax": (lambda r: [r.normal(size=(3, 5)) * 2], lambda a: T.softmax(a, axis=1)),
    "log_softmax": (lambda r: [r.normal(size=(3, 5)) * 2], lambda a: T.log_softmax(a, axis=-1)),
    "im2col": (lambda r: [r.normal(size=(1, 2, 4, 4))], lambda a: T.im2col(a, 3, 2)),
    "col2im": (lambda r: [r.normal(size=(1, 2 * 3 * 2, 2 * 3))], lambda a: T.col2im(a, (1, 2, 4, 4), 3, 2)),
    "conv2d_valid": (
        lambda r: [r.normal(size=(1, 5, 5)), r.normal(size=(2, 1, 3, 3))],
        lambda x, k: T.conv2d(x, k, padding="valid"),
    ),
    "conv2d_same_bias": (
        lambda r: [r.normal(size=(2, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
        lambda x, k, b: T.conv2d(x, k, b, padding="same"),
    ),
    "max_pool2d": (lambda r: [_distinct(r, (1, 2, 4, 5))], T.max_pool2d),
}


def _check_case(gen, fn, seed):
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in gen(rng)]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (fn(*leaves) * Tensor(proj)).sum().backward()
    num = numeric_grad(scalar, arrays, h=1e-4)
    return max(rel_err(l.grad, n) for l, n in zip(leaves, num))


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient_matches_finite_differences(name):
    gen, fn = CASES[name]
    errs = [_check_case(gen, fn, seed) for seed in range(N_POINTS)]
    assert max(errs) < 1e-5, (name, max(errs))


def _mlp_critic(rng, d=3, hidden=4):
    """Leaky-ReLU critic whose pre-activations stay away from the kink."""
    while True:
        W1 = rng.normal(size=(d, hidden))
        b1 = rng.normal(size=(hidden,))
        w2 = rng.normal(size=(hidden, 1))
        x = rng.normal(size=(3, d))
        if np.abs(x @ W1 + b1).min() > 0.05:
            return W1, b1, w2, x


def _gp_closed_form(W1, b1, w2, x):
    z = x @ W1 + b1
    slope = np.where(z > 0, 1.0, 0.2)
    g = (slope * w2[:, 0]) @ W1.T
    return float(((np.linalg.norm(g, axis=1) - 1.0) ** 2).mean())


def _gp_engine(W1, b1, w2, x):
    xt = Tensor(x, requires_grad=True)
    out = T.leaky_relu(xt @ W1 + b1) @ w2
    norms = T.grad_norm_node(xt, out.sum(), per_sample=True)
    return ((norms - 1.0) ** 2).mean()


def test_gradient_penalty_double_backprop_matches_finite_differences():
    errs = []
    for seed in range(N_POINTS):
        rng = np.random.default_rng(100 + seed)
        arrays = list(_mlp_critic(rng))
        params = [Tensor(a.copy(), requires_grad=True) for a in arrays[:3]]
        gp = _gp_engine(*params, arrays[3])
        assert gp.item() == pytest.approx(_gp_closed_form(*arrays), rel=1e-12)
        gp.backward()
        num = numeric_grad(lambda *a: _gp_closed_form(*a, arrays[3]), arrays[:3])
        # b1 only enters through the (constant) leaky-ReLU mask, so it may stay unreached
        got = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        errs.append(max(rel_err(g, n) for g, n in zip(got, num)))
    assert max(errs) < 1e-5


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def _conv_loop(x, k):
    """Direct 6-loop valid cross-correlation."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    out = np.zeros((o, h - kh + 1, w - kw + 1))
    for oc in range(o):
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            out[oc, i, j] += x[ic, i + a, j + b] * k[oc, ic, a, b]
    return out


class TestConv2d:
    def test_hand_example(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        assert T.conv2d(x, k).data.tolist() == [[[5.0]]]

    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((1, 6, 7))
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)

    def test_matches_loop_oracle_exactly(self):
        rng = np.random.default_rng(1)
        x, k = rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 1, 3, 3))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, _conv_loop(x, k), rtol=0, atol=1e-13)

    def test_same_padding_matches_padded_loop(self):
        rng = np.random.default_rng(2)
        x, k = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3))
        ref = _conv_loop(np.pad(x, ((0, 0), (1, 1), (1, 1))), k)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), padding="same").data, ref, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_log_ratios(self):
        out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            z = rng.normal(size=(4, 7)) * 10
            s = T.softmax(Tensor(z), axis=1).data
            assert np.all(s > 0) and np.all(s < 1)
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(T.softmax(Tensor(z + 123.4), axis=1).data, s, atol=1e-12)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_gives_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 0.0 + 5.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_accumulates_until_zeroed(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        for _ in range(2):
            (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y * y + y).sum().backward()
        assert x.grad[0] == pytest.approx(4 * 8 + 2 * 2)


class TestGradNorm:
    def test_linear_critic_norm_five(self):
        w = Tensor([3.0, 4.0], requires_grad=True)
        for x in ([0.0, 0.0], [1.0, -7.0]):
            xt = Tensor(x, requires_grad=True)
            assert T.grad_norm_node(xt, (w * xt).sum()).item() == pytest.approx(5.0)

    def test_first_coordinate_critic(self):
        w = Tensor([1.0, 0.0], requires_grad=True)
        xt = Tensor([0.3, 0.9], requires_grad=True)
        norm = T.grad_norm_node(xt, (w * xt).sum())
        assert norm.item() == pytest.approx(1.0)
        norm.backward()
        # d||w||/dw = w/||w|| ; FD on the closed form
        num = numeric_grad(lambda a: float(np.linalg.norm(a)), [np.array([1.0, 0.0])])[0]
        assert rel_err(w.grad, num) < 1e-8

    def test_constant_critic_norm_zero_and_zero_subgradient(self):
        w = Tensor([0.0, 0.0], requires_grad=True)
        xt = Tensor([1.0, 2.0], requires_grad=True)
        norm = T.grad_norm_node(xt, (w * xt).sum() + 3.0)
        assert norm.item() == 0.0
        norm.backward()
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])

    def test_double_backprop_closed_form(self):
        lam = 10.0
        rng = np.random.default_rng(4)
        for _ in range(20):
            wv = rng.normal(size=5)
            w = Tensor(wv, requires_grad=True)
            xt = Tensor(rng.normal(size=5), requires_grad=True)
            gp = lam * (T.grad_norm_node(xt, (w * xt).sum()) - 1.0) ** 2
            gp.backward()
            nw = np.linalg.norm(wv)
            expected = 2 * lam * (nw - 1.0) * wv / nw
            assert rel_err(w.grad, expected) < 1e-6


def _stochastic_run(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 6)))
    mask = Tensor(rng.random((4, 3)) > 0.5)
    loss = (T.relu(x @ w) * mask).sum()
    loss.backward()
    return loss.data.tobytes(), w.grad.tobytes()


def test_determinism_same_seed_bit_identical():
    assert _stochastic_run(7) == _stochastic_run(7)


def test_independent_graphs_in_threads():
    results = {}

    def work(k):
        results[k] = _stochastic_run(11)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len({v for v in results.values()}) == 1


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_values_stay_finite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(8, 8)) * 50)
    for op in (T.softmax, T.log_softmax, T.sigmoid, lambda a: a.tanh()):
        assert np.all(np.isfinite(op(x).data))

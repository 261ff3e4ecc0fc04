import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import check_gradient, numeric_gradient, tape_gradient
from meshadv import grad as G
from meshadv.errors import NonFiniteValue, NonScalarRoot, ShapeMismatch
from meshadv.grad import Adam, Tape, Tensor

SEEDS = range(10)


def away_from_kinks(rng, shape, margin=1e-3):
    """Random values with |x| >= margin (rejection sampling)."""
    x = rng.normal(size=shape)
    while (bad := np.abs(x) < margin).any():
        x[bad] = rng.normal(size=bad.sum())
    return x


class TestPrimitives:
    def test_relu_negative(self):
        v, g = tape_gradient(lambda t: G.relu(t).sum(), np.array([-1.5]))
        assert v == 0 and g[0] == 0

    def test_max_tie_lowest_index(self):
        v, g = tape_gradient(lambda t: G.max(t), np.array([3.0, 7.0, 7.0]))
        assert v == 7
        np.testing.assert_array_equal(g, [0, 1, 0])

    def test_max_axis_tie(self):
        x = np.array([[1.0, 5.0, 5.0], [2.0, 2.0, 0.0]])
        _, g = tape_gradient(lambda t: G.max(t, axis=1).sum(), x)
        np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])

    def test_sqrt_at_four(self):
        _, g = tape_gradient(lambda t: G.sqrt(t).sum(), np.array([4.0]))
        assert g[0] == pytest.approx(0.25, abs=1e-12)
        num = numeric_gradient(lambda v: np.sqrt(v).sum(), np.array([4.0]))
        assert abs(g[0] - num[0]) < 1e-6

    def test_sqrt_zero_guarded(self):
        _, g = tape_gradient(lambda t: G.sqrt(t).sum(), np.array([0.0]))
        assert np.isfinite(g).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            G.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(ShapeMismatch):
            G.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_non_finite_names_op(self):
        with pytest.raises(NonFiniteValue, match="log"):
            G.log(Tensor(np.array([0.0])))
        with pytest.raises(NonFiniteValue):
            Tensor(np.array([np.nan]))

    def test_concat_index_roundtrip(self):
        x = np.arange(6.0)
        _, g = tape_gradient(lambda t: (G.concat([t[:2], t[4:]]) * np.array([1.0, 2, 3, 4])).sum(), x)
        np.testing.assert_array_equal(g, [1, 2, 0, 0, 3, 4])

    def test_permute_rows(self):
        x = np.random.default_rng(0).normal(size=(2, 4, 3))
        order = np.array([[2, 0, 3, 1], [1, 3, 0, 2]])
        w = np.random.default_rng(1).normal(size=x.shape)
        out, g = tape_gradient(lambda t: (G.permute_rows(t, order) * w).sum(), x)
        assert out == pytest.approx((np.take_along_axis(x, order[..., None], axis=1) * w).sum())
        np.testing.assert_array_equal(np.take_along_axis(g, order[..., None], axis=1), w)

    def test_broadcast(self):
        _, g = tape_gradient(lambda t: G.broadcast_to(t, (4, 3)).sum(), np.ones(3))
        np.testing.assert_array_equal(g, [4, 4, 4])


class TestBackward:
    def test_quadratic(self):
        x = np.random.default_rng(0).normal(size=7)
        _, g = tape_gradient(lambda t: G.square(t).sum(), x)
        np.testing.assert_allclose(g, 2 * x, rtol=1e-15)

    def test_non_scalar_root(self):
        with Tape() as tape:
            t = Tensor(np.ones(3), requires_grad=True)
            with pytest.raises(NonScalarRoot):
                tape.backward(t * 2.0)

    def test_disconnected_leaf_exact_zero(self):
        with Tape() as tape:
            a = Tensor(np.ones(3), requires_grad=True)
            b = Tensor(np.ones((2, 2)), requires_grad=True)
            tape.backward(G.square(a).sum())
        assert np.all(b.grad == 0) and b.grad.shape == (2, 2)

    def test_shared_subexpression_accumulates(self):
        _, g = tape_gradient(lambda t: (t * t + t).sum(), np.array([3.0]))
        assert g[0] == 7.0

    def test_watch_existing_leaf(self):
        w = Tensor(np.array([2.0]))
        with Tape() as tape:
            tape.watch(w)
            tape.backward((w * w * w).sum())
        assert w.grad[0] == 12.0

    def test_composed_mesh_loss(self):
        # edge-length energy on a random 20-vertex cloud with a fixed edge list
        rng = np.random.default_rng(3)
        X0 = rng.normal(size=(20, 3))
        edges = np.array([(i, (i + 1) % 20) for i in range(20)] + [(i, (i + 7) % 20) for i in range(20)])

        def loss(t):
            d = t[edges[:, 0]] - t[edges[:, 1]]
            length = G.sqrt(G.square(d).sum(axis=1))
            return G.square(length - 1.0).mean() + G.relu(t).max()
        assert check_gradient(loss, X0) < 1e-4


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_mlp_with_relu_and_max(self, seed):
        rng = np.random.default_rng(seed)
        w1, b1 = rng.normal(size=(3, 8)), rng.normal(size=8)
        w2 = rng.normal(size=(8, 4))
        x = rng.normal(size=(6, 3))
        # reject points near relu kinks or max ties
        while True:
            z = x @ w1 + b1
            h = np.maximum(z, 0) @ w2
            srt = np.sort(h, axis=0)
            if np.abs(z).min() > 1e-3 and (srt[-1] - srt[-2]).min() > 1e-3:
                break
            x = rng.normal(size=(6, 3))

        def f(t):
            return G.max(G.matmul(G.relu(G.linear(t, w1, b1)), w2), axis=0).sum()
        assert check_gradient(f, x) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_smooth_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 2.0, size=(4, 3))
        c = rng.normal(size=(3, 4))

        def f(t):
            s = G.exp(G.matmul(t, c) * 0.3).mean() + G.log(t).sum() / G.sqrt(t).sum()
            return s - G.min(t * t, axis=0).sum() + G.abs(t - 3.0).sum()
        assert check_gradient(f, x) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sparse_matmul(self, seed):
        import scipy.sparse as sp
        rng = np.random.default_rng(seed)
        S = sp.random(10, 10, density=0.3, random_state=seed, format="csr")
        x = rng.normal(size=(10, 3))
        assert check_gradient(lambda t: G.square(G.spmatmul(S, t)).sum(), x) < 1e-4


class TestFused:
    @pytest.mark.parametrize("seed", range(5))
    def test_linear_relu_max_matches_unfused(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 50, 16))
        w, b = rng.normal(size=(16, 32)), rng.normal(size=32)
        up = rng.normal(size=(3, 32))

        def run(fused):
            with Tape() as tape:
                tx, tw, tb = (Tensor(a, requires_grad=True) for a in (x, w, b))
                if fused:
                    out = G.linear_relu_max(tx, tw, tb)
                else:
                    out = G.max(G.relu(G.linear(tx, tw, tb)), axis=1)
                tape.backward((out * up).sum())
            return out.value, tx.grad, tw.grad, tb.grad

        fused, plain = run(True), run(False)
        np.testing.assert_array_equal(fused[0], plain[0])
        for a, b_ in zip(fused[1:], plain[1:]):
            np.testing.assert_allclose(a, b_, rtol=1e-12, atol=1e-12)


class TestDeterminism:
    @given(st.integers(0, 2**32 - 1))
    def test_bitwise_repeat(self, seed):
        x = np.random.default_rng(seed).normal(size=(5, 4))
        f = lambda t: G.max(G.relu(t) * 2.0 + G.square(t), axis=1).sum()
        assert np.array_equal(tape_gradient(f, x)[1], tape_gradient(f, x)[1])


class TestAdam:
    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            with Tape() as tape:
                tape.watch(p)
                tape.backward(G.square(p).sum())
            opt.step()
        assert np.abs(p.value).max() < 1e-2

    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        with Tape() as tape:
            tape.watch(p)
            tape.backward((p * np.array([5.0, -0.1])).sum())
        opt.step()
        np.testing.assert_allclose(p.value, [0.99, -0.99], atol=1e-8)

    def test_state_roundtrip(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p])
        p.grad = np.ones(2)
        opt.step()
        other = Adam([Tensor(np.ones(2))])
        other.load_state(opt.state())
        assert other.t == 1
        np.testing.assert_array_equal(other.m[0], opt.m[0])

import numpy as np
import pytest

from jointlid import numerics as nx
from jointlid.numerics import Tensor, precision

CASES = 100


def numeric_vjp(fn, params, weights, name, step):
    """Weighted central differences, formed per output element before summing.

    Differencing the output vectors first keeps unaffected elements exactly
    zero, so rounding error scales with the perturbed outputs only.
    """
    arr = params[name]
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn({k: Tensor(v) for k, v in params.items()}).data.copy()
        flat[i] = orig - step
        fm = fn({k: Tensor(v) for k, v in params.items()}).data.copy()
        flat[i] = orig
        out[i] = np.sum(weights * (fp - fm)) / (2 * step)
    return out.reshape(arr.shape)


def run_cases(build, n_cases=CASES, seed=0, step=1e-5, tol=1e-6, floor=1e-5):
    """``build(rng)`` returns (fn, {name: array}); fn maps leaf dict -> Tensor."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        for _ in range(n_cases):
            fn, params = build(rng)
            params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            out = fn(leaves)
            weights = rng.normal(size=out.shape)
            grads = nx.backward(nx.sum(nx.mul(out, Tensor(weights))))
            for name in params:
                numeric = numeric_vjp(fn, params, weights, name, step)
                analytic = grads.get(name, np.zeros_like(params[name]))
                err = nx.relative_error(analytic, numeric, floor)
                worst = max(worst, float(err.max(initial=0.0)))
    assert worst < tol, f"max relative error {worst:.3e}"


def rand_shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi, size=ndim))


class TestPrimitiveGradients:
    def test_add_sub_mul(self):
        def build(rng):
            s = rand_shape(rng, rng.integers(1, 4))
            a, b, c = (rng.normal(size=s) for _ in range(3))
            return lambda p: nx.mul(nx.sub(nx.add(p["a"], p["b"]), p["c"]), p["b"]), {"a": a, "b": b, "c": c}
        run_cases(build)

    def test_scale(self):
        def build(rng):
            c = float(rng.normal())
            return lambda p: nx.mul(p["a"], c), {"a": rng.normal(size=rand_shape(rng))}
        run_cases(build)

    def test_exp_log(self):
        def build(rng):
            s = rand_shape(rng)
            return lambda p: nx.add(nx.exp(p["a"]), nx.log(p["b"])), {
                "a": rng.normal(size=s),
                "b": rng.uniform(0.5, 3.0, size=s),
            }
        run_cases(build)

    def test_sigmoid_swish(self):
        def build(rng):
            s = rand_shape(rng)
            return lambda p: nx.add(nx.sigmoid(p["a"]), nx.swish(p["b"])), {
                "a": rng.normal(scale=3, size=s),
                "b": rng.normal(scale=3, size=s),
            }
        run_cases(build)

    def test_relu(self):
        def build(rng):
            a = rng.normal(size=rand_shape(rng))
            a[np.abs(a) < 1e-2] = 0.5  # keep away from the kink
            return lambda p: nx.relu(p["a"]), {"a": a}
        run_cases(build)

    @pytest.mark.parametrize("op", ["sum", "mean"])
    def test_reductions(self, op):
        fn = getattr(nx, op)

        def build(rng):
            s = rand_shape(rng, rng.integers(1, 4))
            axis = None if rng.random() < 0.25 else int(rng.integers(-len(s), len(s)))
            keep = bool(rng.random() < 0.5)
            if axis is None:
                return lambda p: fn(p["a"]), {"a": rng.normal(size=s)}
            return lambda p: fn(p["a"], axis, keep), {"a": rng.normal(size=s)}
        run_cases(build)

    @pytest.mark.parametrize("op", ["softmax", "log_softmax"])
    def test_softmaxes(self, op):
        fn = getattr(nx, op)

        def build(rng):
            s = rand_shape(rng, rng.integers(1, 4), lo=2)
            axis = int(rng.integers(0, len(s)))
            return lambda p: fn(p["a"], axis), {"a": rng.normal(scale=2, size=s)}
        run_cases(build)

    def test_layer_norm(self):
        def build(rng):
            # width 2 normalizes to +-1 exactly, leaving only FD noise
            s = rand_shape(rng, rng.integers(1, 4), lo=3, hi=7)
            c = s[-1]
            return lambda p: nx.layer_norm(p["x"], p["g"], p["b"]), {
                "x": rng.normal(size=s),
                "g": rng.normal(size=c),
                "b": rng.normal(size=c),
            }
        run_cases(build)

    def test_matmul(self):
        def build(rng):
            lead = rand_shape(rng, rng.integers(0, 3))
            n, k, m = rand_shape(rng, 3)
            return lambda p: nx.matmul(p["a"], p["b"]), {
                "a": rng.normal(size=lead + (n, k)),
                "b": rng.normal(size=lead + (k, m)),
            }
        run_cases(build)

    def test_affine(self):
        def build(rng):
            r, i, o = rand_shape(rng, 3)
            return lambda p: nx.affine(p["x"], p["w"], p["b"]), {
                "x": rng.normal(size=(r, i)),
                "w": rng.normal(size=(i, o)),
                "b": rng.normal(size=o),
            }
        run_cases(build)

    def test_layout_ops(self):
        def build(rng):
            s = rand_shape(rng, 3, lo=2)
            perm = tuple(int(v) for v in rng.permutation(3))
            ax = int(rng.integers(0, 3))
            lo = int(rng.integers(0, s[ax]))
            hi = int(rng.integers(lo + 1, s[ax] + 1))

            def fn(p):
                t = nx.transpose(p["a"], perm)
                t = nx.reshape(t, (int(np.prod(t.shape)),))
                t = nx.reshape(t, s)
                return nx.concat([nx.slice(t, ax, lo, hi), p["b"]], axis=ax)

            bshape = list(s)
            bshape[ax] = int(rng.integers(1, 3))
            return fn, {"a": rng.normal(size=s), "b": rng.normal(size=bshape)}
        run_cases(build)

    def test_expand(self):
        def build(rng):
            s = rand_shape(rng, 3)
            small = tuple(1 if rng.random() < 0.5 else d for d in s)
            return lambda p: nx.expand(p["a"], s), {"a": rng.normal(size=small)}
        run_cases(build)

    def test_gather_and_masked_select(self):
        def build(rng):
            r, c = rand_shape(rng, 2, lo=2)
            idx = rng.integers(0, r, size=int(rng.integers(1, 6)))
            mask = rng.random(r) < 0.5
            return lambda p: nx.concat(
                [nx.gather_rows(p["t"], idx), nx.masked_select(p["t"], mask)], axis=0
            ), {"t": rng.normal(size=(r, c))}
        run_cases(build)

    def test_conv1d(self):
        def build(rng):
            B, cin, cout = rand_shape(rng, 3, hi=4)
            K = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 3))
            T = int(rng.integers(max(K - 2 * pad, 1), 9))
            return lambda p: nx.conv1d(p["x"], p["w"], stride, pad), {
                "x": rng.normal(size=(B, T, cin)),
                "w": rng.normal(size=(K, cin, cout)),
            }
        run_cases(build)

    def test_depthwise_conv1d(self):
        def build(rng):
            B, T, C = rand_shape(rng, 3, hi=6)
            K = int(rng.choice([1, 3, 5, 7]))
            return lambda p: nx.depthwise_conv1d(p["x"], p["w"]), {
                "x": rng.normal(size=(B, T, C)),
                "w": rng.normal(size=(K, C)),
            }
        run_cases(build)


class TestForwardValues:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_log_softmax_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(scale=3, size=(20, 7)))
        np.testing.assert_allclose(
            nx.log_softmax(x, 1).data, np.log(nx.softmax(x, 1).data), atol=1e-6
        )

    def test_softmax_is_distribution(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = Tensor(rng.normal(scale=10, size=(4, 9)))
            p = nx.softmax(x, 1).data
            assert (p >= 0).all()
            np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)

    def test_matmul_identity(self):
        m = np.random.default_rng(3).normal(size=(3, 3))
        out = nx.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_allclose(out.data, m.astype(np.float32))

    def test_conv1d_matches_direct_sum(self):
        rng = np.random.default_rng(4)
        with precision("float64"):
            x = rng.normal(size=(2, 9, 3))
            w = rng.normal(size=(3, 3, 5))
            out = nx.conv1d(Tensor(x), Tensor(w), stride=2, padding=1).data
            xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
            tout = (9 + 2 - 3) // 2 + 1
            ref = np.zeros((2, tout, 5))
            for t in range(tout):
                for k in range(3):
                    ref[:, t] += xp[:, 2 * t + k] @ w[k]
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_default_precision_is_32_bit(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True, name="x")
        grads = nx.backward(nx.sum(x))
        np.testing.assert_array_equal(grads["x"], [1, 1, 1, 1])

    def test_mean_of_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True, name="x")
        grads = nx.backward(nx.mean(nx.mul(x, x)))
        np.testing.assert_allclose(grads["x"], [1.0, 2.0])

    def test_shared_parameter_accumulates(self):
        x = Tensor([3.0], requires_grad=True, name="x")
        y = nx.add(nx.mul(x, 2.0), nx.mul(x, x))
        grads = nx.backward(nx.sum(y))
        np.testing.assert_allclose(grads["x"], [2.0 + 6.0])

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(nx.ShapeError):
            nx.backward(x)

    def test_topological_order_is_reverse_valid(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = nx.matmul(a, a)
        c = nx.add(b, a)
        d = nx.sum(nx.mul(c, b))
        order = nx.topological_order(d)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_quadratic_finite_difference(self):
        with precision("float64"):
            rep = nx.finite_difference_check(
                lambda p: nx.sum(nx.mul(p["w"], p["w"])), {"w": np.array([3.0])}
            )
        assert rep.passed
        assert rep.params[0].analytic == pytest.approx(6.0)
        assert rep.params[0].numeric == pytest.approx(6.0, abs=1e-8)

    def test_gradcheck_requires_float64(self):
        with pytest.raises(RuntimeError):
            nx.finite_difference_check(lambda p: nx.sum(p["w"]), {"w": np.ones(2)})

    def test_repeatable(self):
        def run():
            rng = np.random.default_rng(9)
            a = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="a")
            w = Tensor(rng.normal(size=(5, 3)), requires_grad=True, name="w")
            out = nx.sum(nx.log_softmax(nx.matmul(a, w), 1))
            g = nx.backward(out)
            return out.data.tobytes(), g["a"].tobytes(), g["w"].tobytes()

        assert run() == run()


class TestShapeErrors:
    @pytest.mark.parametrize(
        "call",
        [
            lambda: nx.add(Tensor(np.ones(3)), Tensor(np.ones(4))),
            lambda: nx.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
            lambda: nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
            lambda: nx.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 2)))),
            lambda: nx.expand(Tensor(np.ones((2, 1))), (3, 4)),
            lambda: nx.reshape(Tensor(np.ones(6)), (4, 2)),
            lambda: nx.conv1d(Tensor(np.ones((1, 5, 3))), Tensor(np.ones((3, 2, 4)))),
        ],
    )
    def test_raises_with_op_name(self, call):
        with pytest.raises(nx.ShapeError) as err:
            call()
        assert err.value.op in str(err.value)
        assert err.value.shapes

"""Engine-level tests: forward examples, backward rules, optimizer, checkpoints."""

import numpy as np
import pytest

import hsiseg.autodiff as ad
from hsiseg.autodiff import (
    SGD,
    Parameter,
    Tensor,
    grad_check,
    load_checkpoint,
    poly_lr,
    save_checkpoint,
)
from hsiseg.errors import ConfigError, ContractError, FormatError, SizeError


class TestForwardExamples:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor(np.array([0.0, 0.0])), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5))
        out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_conv_1x1_doubling(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 4))
        w = np.full((1, 1, 1, 1), 2.0)
        out = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=0)
        np.testing.assert_allclose(out.data, 2.0 * x)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ContractError) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_mean_gradient(self):
        x = Tensor(np.arange(6, dtype=np.float64), requires_grad=True)
        x.mean().backward()
        np.testing.assert_allclose(x.grad, np.full(6, 1 / 6))

    def test_accumulation_until_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 4 * np.ones(3))
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_composite_graph_matches_fd(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.standard_normal((2, 1, 3, 3)))
        target = Tensor(np.eye(2)[rng.integers(0, 2, 9)].reshape(-1))

        def f(x):
            h = ad.relu(ad.conv2d(x, w, stride=1, pad=1))
            tokens = ad.transpose(ad.reshape(h, (2, 9)))
            lp = ad.log_softmax(tokens, axis=-1)
            return -(lp.reshape((-1,)) * target).sum() * (1 / 9)

        err = grad_check(f, Tensor(rng.standard_normal((1, 3, 3))))
        assert err < 1e-6

    def test_diamond_graph_visits_nodes_once(self):
        """Shared subexpressions contribute once per use: z = y + y with
        y = x*x gives dz/dx = 4x, not 8x."""
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = x * x
        z = (y + y).sum()
        z.backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.array([[[1.0, 1.0], [0.0, 0.0]]]), requires_grad=True)
        ad.maxpool2d(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


class TestInvariants:
    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(2)
        out = ad.softmax(Tensor(rng.standard_normal((7, 9)) * 5), axis=-1)
        assert out.data.min() > 0
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_layernorm_statistics(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((6, 16)) * 3 + 1)
        gamma = Tensor(np.ones(16))
        beta = Tensor(np.zeros(16))
        out = ad.layernorm(x, gamma, beta).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-5

    def test_bilinear_preserves_constants_exactly(self):
        x = Tensor(np.full((2, 5, 7), 3.1415926))
        out = ad.bilinear_upsample(x, 4)
        assert out.shape == (2, 20, 28)
        np.testing.assert_array_equal(out.data, np.full((2, 20, 28), 3.1415926))

    def test_scatter_then_gather_reproduces_group_means(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((10, 3)))
        index = rng.integers(0, 4, 10)
        means = ad.scatter_mean(x, index, 4)
        back = ad.gather_rows(means, index)
        for i in range(10):
            np.testing.assert_allclose(back.data[i], x.data[index == index[i]].mean(axis=0))

    def test_forward_determinism(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))

        def run():
            return ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data.tobytes()

        assert run() == run()


class TestSgd:
    def test_plain_gradient_step(self):
        p = Parameter(np.array([1.0, 2.0]), group="backbone")
        p.grad = np.array([0.5, -0.5])
        opt = SGD([p], momentum=0.0, weight_decay=0.0)
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_head_group_runs_ten_times_faster(self):
        pb = Parameter(np.array([1.0]), group="backbone")
        ph = Parameter(np.array([1.0]), group="head")
        for p in (pb, ph):
            p.grad = np.array([1.0])
        SGD([pb, ph], momentum=0.0, weight_decay=0.0, head_lr_multiplier=10.0).step(0.001)
        np.testing.assert_allclose(pb.data, [1.0 - 0.001])
        np.testing.assert_allclose(ph.data, [1.0 - 0.01])

    def test_two_momentum_steps_match_scalar_simulation(self):
        """Constant grad g, momentum 0.9: total update lr * (1 + 1.9) * g."""
        g, lr = 0.37, 0.01
        p = Parameter(np.array([5.0]))
        opt = SGD([p], momentum=0.9, weight_decay=0.0, head_lr_multiplier=1.0)
        for _ in range(2):
            p.grad = np.array([g])
            opt.step(lr)
        # independent scalar simulation of the stated update rule
        w, v = 5.0, 0.0
        for _ in range(2):
            v = 0.9 * v + g
            w = w - lr * v
        np.testing.assert_allclose(p.data, [w])
        np.testing.assert_allclose(p.data, [5.0 - lr * (1 + 1.9) * g])

    def test_reference_hyperparameters_accepted(self):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([1.0])
        opt = SGD([p], momentum=0.9, weight_decay=0.0001, head_lr_multiplier=1.0)
        opt.step(0.001)
        # v = g + wd * w = 1.0001; w <- 1 - 0.001 * 1.0001
        np.testing.assert_allclose(p.data, [1.0 - 0.001 * 1.0001])

    def test_missing_grad_rejected(self):
        p = Parameter(np.zeros(2))
        with pytest.raises(ContractError):
            SGD([p]).step(0.1)


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0.001, 0, 100) == 0.001
        assert poly_lr(0.001, 100, 100) == 0.0

    def test_midpoint_value(self):
        np.testing.assert_allclose(poly_lr(0.001, 50, 100), 0.001 * 0.5 ** 0.9)
        np.testing.assert_allclose(poly_lr(0.001, 50, 100), 5.358867e-4, rtol=1e-6)

    def test_zero_max_iter_rejected(self):
        with pytest.raises(ConfigError):
            poly_lr(0.001, 0, 0)

    def test_monotone_non_increasing(self):
        values = [poly_lr(0.01, i, 500) for i in range(501)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestGradCheckHarness:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((4, 4)))

        def f(x):
            return (ad.matmul(ad.matmul(ad.transpose(x), a.data + a.data.T), x)).sum()

        err = grad_check(f, Tensor(rng.standard_normal((4, 1))))
        assert err < 1e-8

    def test_eps_domain(self):
        with pytest.raises(ConfigError):
            grad_check(lambda x: x.sum(), Tensor(np.ones(2)), eps=0.5)

    def test_float32_rejected(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: x.sum(), Tensor(np.ones(2, np.float32)))

    def test_non_finite_names_op(self):
        from hsiseg.errors import GradCheckError

        def f(x):
            return ad.log(x).sum()

        with np.errstate(invalid="ignore"):
            with pytest.raises(GradCheckError) as exc:
                grad_check(f, Tensor(np.array([-1.0, 1.0])))
        assert "log" in str(exc.value)


class TestPrimitiveGradients:
    def test_every_primitive_at_ten_random_points(self):
        """Tape gradients match central differences for all primitives,
        resampled at ten seeds (inputs drawn away from relu/maxpool kinks)."""
        from hsiseg.gradcheck import primitive_programs

        for seed in range(10):
            rng = np.random.default_rng(1000 + seed)
            for name, f, xs in primitive_programs(rng):
                err = grad_check(f, xs)
                assert err < 1e-4, f"{name} at seed {seed}: error {err:.2e}"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        named = [("a.weight", Tensor(rng.standard_normal((3, 2)).astype(np.float32))),
                 ("b.bias", Tensor(rng.standard_normal(4).astype(np.float32)))]
        path = tmp_path / "m.ckpt"
        save_checkpoint(named, path)
        loaded = load_checkpoint(path)
        assert list(loaded) == ["a.weight", "b.bias"]
        for name, t in named:
            np.testing.assert_array_equal(loaded[name], t.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE....")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint([("w", Tensor(np.ones(5, np.float32)))], path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(SizeError):
            load_checkpoint(path)


class TestNoGrad:
    def test_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y._parents == ()

    def test_thread_local_recording(self):
        """Concurrent no_grad blocks must not disable the tape for other threads."""
        from concurrent.futures import ThreadPoolExecutor

        def worker(_):
            x = Tensor(np.ones(4), requires_grad=True)
            with ad.no_grad():
                (x * x).sum()
            return True

        with ThreadPoolExecutor(max_workers=4) as pool:
            list(pool.map(worker, range(32)))
        x = Tensor(np.ones(4), requires_grad=True)
        y = (x * x).sum()
        assert y.requires_grad, "tape left disabled after threaded no_grad use"

    def test_param_groups_are_fixed(self):
        with pytest.raises(ConfigError):
            Parameter(np.ones(1), group="something")

"""Gradient, adjoint and serialization checks for the tensor layers.

Every layer's backward pass is verified against central finite differences
computed straight from forward passes, and every jvp against the inner
product identity <jvp(v), u> == <v, vjp(u)>. Optimizer updates are checked
against hand-evaluated update formulas.
"""

import numpy as np
import pytest

from egospan.exceptions import DataError
from egospan.nn import (
    SGD,
    Adam,
    BilinearUpsample2d,
    Conv2d,
    Conv3d,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    Sigmoid,
    concat_backward,
    concat_forward,
    gradient_check,
    load_weights,
    save_weights,
)


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def _fd_grads(fn, arrays, h=1e-5):
    """Central differences of the scalar fn() over every array coordinate."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lo_plus = fn()
            flat[i] = orig - h
            lo_minus = fn()
            flat[i] = orig
            gf[i] = (lo_plus - lo_minus) / (2.0 * h)
        out.append(g)
    return out


def _check_layer_grads(layer, x, tol=1e-4):
    rng = np.random.default_rng(99)
    y = layer.forward(x)
    gy = rng.standard_normal(y.shape)

    def loss():
        return float((layer.forward(x) * gy).sum())

    gx, grads = layer.backward(x, gy)
    names = sorted(layer.params())
    arrays = [x] + [layer.params()[k] for k in names]
    fd = _fd_grads(loss, arrays)
    assert _rel_err(gx, fd[0]).max() <= tol
    for name, g_fd in zip(names, fd[1:]):
        assert _rel_err(grads[name], g_fd).max() <= tol


def _check_adjoint(layer, x, tol=1e-9):
    rng = np.random.default_rng(5)
    v = rng.standard_normal(x.shape)
    y = layer.forward(x)
    u = rng.standard_normal(y.shape)
    lhs = float((layer.jvp(x, v) * u).sum())
    gx, _ = layer.backward(x, u)
    rhs = float((v * gx).sum())
    assert abs(lhs - rhs) <= tol * max(1.0, abs(lhs), abs(rhs))


class TestLinear:
    def test_forward_matches_matmul(self):
        rng = np.random.default_rng(0)
        lin = Linear(3, 4, rng)
        x = rng.standard_normal((2, 3))
        assert np.allclose(lin.forward(x), x @ lin.w.T + lin.b)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        lin = Linear(3, 4, rng)
        x = rng.standard_normal((2, 3))
        _check_layer_grads(lin, x)

    def test_adjoint(self):
        rng = np.random.default_rng(2)
        lin = Linear(5, 3, rng)
        _check_adjoint(lin, rng.standard_normal((4, 5)))

    def test_he_init_bound(self):
        rng = np.random.default_rng(3)
        lin = Linear(100, 50, rng)
        bound = np.sqrt(6.0 / 100)
        assert np.abs(lin.w).max() <= bound
        assert np.abs(lin.w).max() > 0.5 * bound
        assert np.all(lin.b == 0.0)

    def test_zero_init(self):
        rng = np.random.default_rng(4)
        lin = Linear(6, 2, rng, zero_init=True)
        assert np.all(lin.w == 0.0)
        x = rng.standard_normal((3, 6))
        assert np.all(lin.forward(x) == 0.0)

    def test_feature_mismatch_raises(self):
        rng = np.random.default_rng(5)
        lin = Linear(3, 4, rng)
        with pytest.raises(DataError):
            lin.forward(np.zeros((2, 5)))


class TestConv2d:
    def test_identity_kernel_passes_input_through(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(2, 2, 1, rng)
        conv.w[...] = 0.0
        conv.w[0, 0, 0, 0] = 1.0
        conv.w[1, 1, 0, 0] = 1.0
        conv.b[...] = 0.0
        x = rng.standard_normal((3, 2, 4, 5))
        assert np.allclose(conv.forward(x), x)

    def test_sum_kernel_hand_value(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(1, 1, 2, rng)
        conv.w[...] = 1.0
        conv.b[...] = 0.0
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = conv.forward(x)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 10.0

    def test_stride_pad_output_shape(self):
        rng = np.random.default_rng(1)
        conv = Conv2d(2, 3, 3, rng, stride=2, pad=1)
        y = conv.forward(np.zeros((4, 2, 5, 6)))
        assert y.shape == (4, 3, 3, 3)

    def test_gradients_plain(self):
        rng = np.random.default_rng(2)
        conv = Conv2d(2, 3, 3, rng)
        x = rng.standard_normal((2, 2, 5, 4))
        _check_layer_grads(conv, x)

    def test_gradients_stride_pad(self):
        rng = np.random.default_rng(3)
        conv = Conv2d(2, 2, 3, rng, stride=2, pad=1)
        x = rng.standard_normal((2, 2, 6, 5))
        _check_layer_grads(conv, x)

    def test_adjoint(self):
        rng = np.random.default_rng(4)
        conv = Conv2d(3, 2, 3, rng, stride=2, pad=1)
        _check_adjoint(conv, rng.standard_normal((2, 3, 7, 6)))

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(5)
        conv = Conv2d(2, 3, 3, rng)
        with pytest.raises(DataError):
            conv.forward(np.zeros((1, 4, 8, 8)))

    def test_ndim_mismatch_raises(self):
        rng = np.random.default_rng(6)
        conv = Conv2d(2, 3, 3, rng)
        with pytest.raises(DataError):
            conv.forward(np.zeros((2, 8, 8)))


class TestConv3d:
    def test_gradients(self):
        rng = np.random.default_rng(0)
        conv = Conv3d(1, 2, 2, rng)
        x = rng.standard_normal((1, 1, 3, 3, 3))
        _check_layer_grads(conv, x)

    def test_gradients_stride_pad(self):
        rng = np.random.default_rng(1)
        conv = Conv3d(1, 1, 2, rng, stride=2, pad=1)
        x = rng.standard_normal((1, 1, 4, 3, 4))
        _check_layer_grads(conv, x)

    def test_adjoint(self):
        rng = np.random.default_rng(2)
        conv = Conv3d(2, 2, 2, rng, stride=2)
        _check_adjoint(conv, rng.standard_normal((1, 2, 4, 4, 4)))

    def test_stride_output_shape(self):
        rng = np.random.default_rng(3)
        conv = Conv3d(1, 4, 3, rng, stride=2, pad=1)
        y = conv.forward(np.zeros((2, 1, 9, 9, 9)))
        assert y.shape == (2, 4, 5, 5, 5)


class TestActivations:
    def test_relu_values(self):
        relu = ReLU()
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 3.0]])
        assert np.array_equal(relu.forward(x), [[0.0, 0.0, 0.0, 0.5, 3.0]])

    def test_relu_gradients_away_from_kink(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.2, 1.0, (3, 7)) * rng.choice([-1.0, 1.0], (3, 7))
        _check_layer_grads(ReLU(), x)

    def test_relu_adjoint(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.2, 1.0, (2, 5)) * rng.choice([-1.0, 1.0], (2, 5))
        _check_adjoint(ReLU(), x)

    def test_sigmoid_midpoint_and_symmetry(self):
        sig = Sigmoid()
        assert sig.forward(np.array([0.0]))[0] == 0.5
        x = np.array([-3.0, -1.0, 1.0, 3.0])
        y = sig.forward(x)
        assert np.allclose(y + y[::-1], 1.0)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        sig = Sigmoid()
        y = sig.forward(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(y))
        assert y[0] == pytest.approx(0.0, abs=1e-12)
        assert y[1] == pytest.approx(1.0, abs=1e-12)

    def test_sigmoid_gradients(self):
        rng = np.random.default_rng(2)
        _check_layer_grads(Sigmoid(), rng.standard_normal((3, 6)))

    def test_sigmoid_adjoint(self):
        rng = np.random.default_rng(3)
        _check_adjoint(Sigmoid(), rng.standard_normal((2, 4)))


class TestMaxPool2d:
    def test_four_pixel_example(self):
        pool = MaxPool2d(2, 2)
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = pool.forward(x)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 4.0

    def test_backward_routes_to_argmax(self):
        pool = MaxPool2d(2, 2)
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        gx, grads = pool.backward(x, np.array([[[[7.0]]]]))
        assert grads == {}
        assert np.array_equal(gx, [[[[0.0, 0.0], [0.0, 7.0]]]])

    def test_partial_windows_dropped(self):
        pool = MaxPool2d(2, 2)
        y = pool.forward(np.zeros((1, 1, 5, 7)))
        assert y.shape == (1, 1, 2, 3)

    def test_gradients_distinct_values(self):
        rng = np.random.default_rng(0)
        vals = rng.permutation(32).astype(np.float64).reshape(1, 2, 4, 4)
        _check_layer_grads(MaxPool2d(2), vals)

    def test_adjoint(self):
        rng = np.random.default_rng(1)
        vals = rng.permutation(36).astype(np.float64).reshape(1, 1, 6, 6)
        _check_adjoint(MaxPool2d(2), vals)


class TestBilinearUpsample2d:
    @staticmethod
    def _oracle(x):
        """Direct half-pixel sampling with coordinate clamping."""
        B, C, H, W = x.shape
        out = np.zeros((B, C, 2 * H, 2 * W))
        for r in range(2 * H):
            for c in range(2 * W):
                sr = min(max(r / 2.0 - 0.25, 0.0), H - 1.0)
                sc = min(max(c / 2.0 - 0.25, 0.0), W - 1.0)
                r0, c0 = int(np.floor(sr)), int(np.floor(sc))
                r1, c1 = min(r0 + 1, H - 1), min(c0 + 1, W - 1)
                fr, fc = sr - r0, sc - c0
                out[:, :, r, c] = (
                    (1 - fr) * (1 - fc) * x[:, :, r0, c0]
                    + (1 - fr) * fc * x[:, :, r0, c1]
                    + fr * (1 - fc) * x[:, :, r1, c0]
                    + fr * fc * x[:, :, r1, c1])
        return out

    def test_matches_sampling_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 4, 5))
        up = BilinearUpsample2d()
        assert np.allclose(up.forward(x), self._oracle(x), atol=1e-12)

    def test_single_pixel_replicates(self):
        up = BilinearUpsample2d()
        y = up.forward(np.full((1, 1, 1, 1), 3.5))
        assert y.shape == (1, 1, 2, 2)
        assert np.all(y == 3.5)

    def test_constant_stays_constant(self):
        up = BilinearUpsample2d()
        y = up.forward(np.full((1, 2, 3, 3), 1.25))
        assert np.allclose(y, 1.25)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        _check_layer_grads(BilinearUpsample2d(),
                           rng.standard_normal((1, 2, 3, 3)))

    def test_adjoint(self):
        rng = np.random.default_rng(2)
        _check_adjoint(BilinearUpsample2d(), rng.standard_normal((2, 2, 4, 3)))


class TestFlattenConcat:
    def test_flatten_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 4))
        flat = Flatten()
        y = flat.forward(x)
        assert y.shape == (2, 12)
        gx, _ = flat.backward(x, y)
        assert np.array_equal(gx, x)

    def test_concat_round_trip(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 5))
        y = concat_forward([a, b])
        assert y.shape == (2, 8)
        ga, gb = concat_backward(y, [a.shape, b.shape])
        assert np.array_equal(ga, a)
        assert np.array_equal(gb, b)


class TestSequential:
    @staticmethod
    def _mlp(rng):
        return Sequential([
            ("fc1", Linear(5, 4, rng)),
            ("act1", ReLU()),
            ("fc2", Linear(4, 2, rng)),
        ])

    def test_param_names_are_scoped(self):
        net = self._mlp(np.random.default_rng(0))
        assert set(net.params()) == {"fc1.w", "fc1.b", "fc2.w", "fc2.b"}
        assert net.param_count() == 5 * 4 + 4 + 4 * 2 + 2

    def test_gradient_check_exhaustive(self):
        net = self._mlp(np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((3, 5))

        def loss_fn(out):
            return 0.5 * float((out**2).sum()), out

        assert gradient_check(net, (x,), loss_fn) <= 1e-4

    def test_gradient_check_sampled(self):
        net = self._mlp(np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((3, 5))

        def loss_fn(out):
            return 0.5 * float((out**2).sum()), out

        err = gradient_check(net, (x,), loss_fn, samples=20,
                             rng=np.random.default_rng(5), exhaustive_limit=1)
        assert err <= 1e-4

    def test_gradient_check_small_convnet(self):
        rng = np.random.default_rng(6)
        net = Sequential([
            ("conv1", Conv2d(1, 2, 3, rng, pad=1)),
            ("act1", ReLU()),
            ("pool1", MaxPool2d(2)),
            ("flat", Flatten()),
            ("fc", Linear(2 * 3 * 3, 3, rng)),
        ])
        x = np.random.default_rng(7).standard_normal((2, 1, 6, 6))

        def loss_fn(out):
            return 0.5 * float((out**2).sum()), out

        assert gradient_check(net, (x,), loss_fn) <= 1e-4

    def test_jvp_matches_backward_adjoint(self):
        rng = np.random.default_rng(8)
        net = self._mlp(rng)
        x = rng.standard_normal((2, 5))
        v = rng.standard_normal((2, 5))
        y = net.forward(x)
        u = np.random.default_rng(9).standard_normal(y.shape)
        lhs = float((net.jvp(x, v) * u).sum())
        net.forward(x)
        gy, _ = net.backward(u)
        rhs = float((v * gy).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs), abs(rhs))

    def test_backward_before_forward_raises(self):
        net = self._mlp(np.random.default_rng(10))
        with pytest.raises(DataError):
            net.backward(np.zeros((1, 2)))

    def test_duplicate_layer_name_raises(self):
        with pytest.raises(DataError):
            Sequential([
                ("fc", Linear(2, 2, np.random.default_rng(0))),
                ("fc", ReLU()),
            ])

    def test_load_params_rejects_mismatches(self):
        net = self._mlp(np.random.default_rng(11))
        good = {k: v.copy() for k, v in net.params().items()}
        bad_missing = dict(good)
        del bad_missing["fc1.w"]
        with pytest.raises(DataError):
            net.load_params(bad_missing)
        bad_shape = dict(good)
        bad_shape["fc1.w"] = np.zeros((9, 9))
        with pytest.raises(DataError):
            net.load_params(bad_shape)


class TestOptimizers:
    def test_sgd_basic_step(self):
        p = {"w": np.array([1.0])}
        SGD(lr=0.1).step(p, {"w": np.array([0.5])})
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)

    def test_sgd_momentum_two_steps(self):
        p = {"w": np.array([1.0])}
        opt = SGD(lr=0.1, momentum=0.9)
        opt.step(p, {"w": np.array([0.5])})
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)
        opt.step(p, {"w": np.array([0.5])})
        # velocity = 0.9 * 0.5 + 0.5 = 0.95, so the step is 0.095
        assert p["w"][0] == pytest.approx(0.855, abs=1e-15)

    def test_adam_first_step_formula(self):
        p = {"w": np.array([1.0])}
        opt = Adam(lr=0.001)
        opt.step(p, {"w": np.array([0.5])})
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        expected = 1.0 - 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, abs=1e-15)

    def test_adam_three_steps_match_scalar_recurrence(self):
        p = {"w": np.array([2.0])}
        opt = Adam(lr=0.01, beta1=0.8, beta2=0.9, eps=1e-8)
        grads = [0.3, -0.7, 1.1]
        w, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            opt.step(p, {"w": np.array([g])})
            m = 0.8 * m + 0.2 * g
            v = 0.9 * v + 0.1 * g * g
            w -= 0.01 * (m / (1 - 0.8**t)) / (
                np.sqrt(v / (1 - 0.9**t)) + 1e-8)
            assert p["w"][0] == pytest.approx(w, abs=1e-14)

    def test_zero_gradients_leave_params_unchanged(self):
        rng = np.random.default_rng(0)
        net = Sequential([("fc", Linear(3, 2, rng))])
        before = {k: v.copy() for k, v in net.params().items()}
        zeros = net.zero_grads()
        SGD(lr=0.5, momentum=0.9).step(net.params(), zeros)
        Adam(lr=0.5).step(net.params(), zeros)
        for name, arr in net.params().items():
            assert np.array_equal(arr, before[name])

    def test_name_mismatch_raises(self):
        with pytest.raises(DataError):
            SGD().step({"a": np.zeros(2)}, {"b": np.zeros(2)})

    def test_shape_mismatch_raises(self):
        with pytest.raises(DataError):
            Adam().step({"a": np.zeros(2)}, {"a": np.zeros(3)})


class TestWeightFiles:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {
            "enc.w": rng.standard_normal((3, 2, 3, 3)),
            "enc.b": rng.standard_normal(3),
            "head.w": rng.standard_normal((4, 7)),
            "scale": np.array(2.75),
        }
        path = tmp_path / "weights.ego"
        save_weights(params, path)
        loaded = load_weights(path)
        assert list(loaded) == list(params)
        for name, arr in params.items():
            assert loaded[name].shape == arr.shape
            assert loaded[name].tobytes() == np.asarray(arr).tobytes()

    def test_restored_network_reproduces_outputs(self, tmp_path):
        rng = np.random.default_rng(1)
        net = Sequential([
            ("fc1", Linear(4, 5, rng)),
            ("act", ReLU()),
            ("fc2", Linear(5, 2, rng)),
        ])
        x = rng.standard_normal((3, 4))
        y_ref = net.forward(x)
        path = tmp_path / "net.ego"
        save_weights(net.params(), path)

        other = Sequential([
            ("fc1", Linear(4, 5, np.random.default_rng(99))),
            ("act", ReLU()),
            ("fc2", Linear(5, 2, np.random.default_rng(99))),
        ])
        other.load_params(load_weights(path))
        assert np.array_equal(other.forward(x), y_ref)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        save_weights({"a": np.zeros(2)}, path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError):
            load_weights(path)

    def test_truncated_payload_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        save_weights({"a": np.arange(4.0)}, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(DataError):
            load_weights(path)

    def test_missing_end_marker_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        path.write_bytes(b"tensorfile v1\nendian little\ndtype float64\n")
        with pytest.raises(DataError):
            load_weights(path)

    def test_bad_shape_token_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        path.write_bytes(
            b"tensorfile v1\nendian little\ndtype float64\n"
            b"tensor a 2 x\nend\n" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_weights(path)

    def test_unknown_header_line_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        path.write_bytes(
            b"tensorfile v1\nendian little\ndtype float64\n"
            b"bogus line here\nend\n")
        with pytest.raises(DataError):
            load_weights(path)

    def test_wrong_dtype_raises(self, tmp_path):
        path = tmp_path / "w.ego"
        path.write_bytes(
            b"tensorfile v1\nendian little\ndtype float32\nend\n")
        with pytest.raises(DataError):
            load_weights(path)

    def test_space_in_name_raises(self, tmp_path):
        with pytest.raises(DataError):
            save_weights({"bad name": np.zeros(1)}, tmp_path / "w.ego")

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_weights(tmp_path / "nope.ego")

"""Layer kernels over shares against plaintext fixed-point oracles, plus
model and dataset serialization."""

import json

import numpy as np
import pytest

from conftest import make_sessions
from ringmpc import ring, sharing, transport
from ringmpc.cli import run_local_forward
from ringmpc.errors import ConfigError, DataFormatError
from ringmpc.nn import (
    AvgPool,
    Conv2d,
    Flatten,
    Linear,
    ModelSpec,
    Relu,
    ReluConfig,
    avgpool_forward,
    conv2d_forward,
    gen_synthetic,
    im2col,
    linear_forward,
    load_idx,
    load_model,
    plain_fixed_forward,
    save_idx,
    save_model,
    triple_requirements,
    truncate_local,
)
from ringmpc.ring import BitWindow, FixedPointConfig
from ringmpc.sharing import reconstruct_arith, share_arith

CFG = FixedPointConfig(64, 16)
D = CFG.scale


def shared(x_f, rng):
    return share_arith(ring.encode_array(np.asarray(x_f, dtype=np.float64), CFG), 64, rng)


def decode(s0, s1):
    return ring.decode_array(reconstruct_arith(s0, s1), CFG)


class TestTruncate:
    def test_shares_d_and_zero(self):
        s0 = sharing.ArithShareTensor(0, 64, np.array([D], dtype=np.uint64))
        s1 = sharing.ArithShareTensor(1, 64, np.array([0], dtype=np.uint64))
        out = reconstruct_arith(truncate_local(s0, CFG), truncate_local(s1, CFG))
        assert int(out[0]) == 1

    def test_shares_of_zero_small_delta(self):
        rng = np.random.default_rng(0)
        s0, s1 = share_arith(np.zeros(1000, dtype=np.uint64), 64, rng)
        out = ring.to_signed(
            reconstruct_arith(truncate_local(s0, CFG), truncate_local(s1, CFG)), 64
        )
        assert np.all((out >= 0) & (out <= 1))

    def test_statistical_contract_100k(self):
        rng = np.random.default_rng(1)
        x = rng.integers(-(2**40), 2**40, size=100_000)
        s0, s1 = share_arith(ring.to_unsigned(x, 64), 64, rng)
        got = ring.to_signed(
            reconstruct_arith(truncate_local(s0, CFG), truncate_local(s1, CFG)), 64
        )
        want = np.floor_divide(x, D)
        delta = got - want
        assert delta.min() >= 0 and delta.max() <= 1  # no wrap error observed


class TestLinear:
    def test_identity_weight(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-3, 3, size=(5, 8))
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        w = np.eye(8, dtype=np.float32)
        b = np.zeros(8, dtype=np.float32)
        r0, r1 = transport.run_parties(
            lambda: linear_forward(sess0, s0, w, b),
            lambda: linear_forward(sess1, s1, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        # x * D / D is exact up to the one-ulp truncation jitter
        assert np.max(np.abs(got - x)) <= 2.0 / D
        assert eps[0].meter.total_bytes() == 0  # no communication

    def test_zero_weight_gives_bias(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-3, 3, size=(4, 6))
        b = rng.uniform(-2, 2, size=3).astype(np.float32)
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        w = np.zeros((3, 6), dtype=np.float32)
        r0, r1 = transport.run_parties(
            lambda: linear_forward(sess0, s0, w, b),
            lambda: linear_forward(sess1, s1, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        assert np.max(np.abs(got - b[None, :])) <= 2.0 / D

    def test_random_against_fixed_point_oracle(self):
        rng = np.random.default_rng(4)
        fan_in = 32
        x = rng.uniform(-2, 2, size=(16, fan_in))
        w = rng.normal(0, 0.5, size=(10, fan_in)).astype(np.float32)
        b = rng.normal(0, 0.5, size=10).astype(np.float32)
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        r0, r1 = transport.run_parties(
            lambda: linear_forward(sess0, s0, w, b),
            lambda: linear_forward(sess1, s1, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        model = ModelSpec(CFG, (fan_in,), [Linear(fan_in, 10, "w", "b")], {"w": w, "b": b})
        oracle = plain_fixed_forward(model, x)
        # encoding error << one truncation ulp each; allow the stated slack
        tol = 2.0 ** -16 * (1 + fan_in * 2.0**-16) + 2.0 / D
        assert np.max(np.abs(got - oracle)) <= tol

    def test_shape_mismatch(self):
        rng = np.random.default_rng(5)
        s0, s1 = shared(np.zeros((2, 7)), rng)
        sess0, _, _ = make_sessions()
        with pytest.raises(ConfigError):
            linear_forward(sess0, s0, np.zeros((3, 6), dtype=np.float32), np.zeros(3, dtype=np.float32))


class TestConv:
    def test_1x1_kernel_equals_linear(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, size=(3, 4, 5, 5))
        w = rng.normal(0, 0.5, size=(2, 4, 1, 1)).astype(np.float32)
        b = rng.normal(0, 0.1, size=2).astype(np.float32)
        layer = Conv2d(4, 2, 1, 1, stride=1, pad=0, weight="w", bias="b")
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        r0, r1 = transport.run_parties(
            lambda: conv2d_forward(sess0, s0, layer, w, b),
            lambda: conv2d_forward(sess1, s1, layer, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        # same math as a linear layer at each pixel
        xs = x.transpose(0, 2, 3, 1).reshape(-1, 4)
        t0, t1 = shared(xs, np.random.default_rng(6 + 100))
        q0, q1 = transport.run_parties(
            lambda: linear_forward(sess0, t0, w.reshape(2, 4), b),
            lambda: linear_forward(sess1, t1, w.reshape(2, 4), b),
        )
        lin = decode(q0, q1).reshape(3, 5, 5, 2).transpose(0, 3, 1, 2)
        assert np.max(np.abs(got - lin)) <= 4.0 / D

    def test_identity_kernel_passthrough(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=(2, 3, 6, 6))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        b = np.zeros(3, dtype=np.float32)
        layer = Conv2d(3, 3, 3, 3, stride=1, pad=1, weight="w", bias="b")
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        r0, r1 = transport.run_parties(
            lambda: conv2d_forward(sess0, s0, layer, w, b),
            lambda: conv2d_forward(sess1, s1, layer, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        assert np.max(np.abs(got - x)) <= 2.0 / D

    def test_random_against_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, size=(2, 3, 8, 8))
        w = rng.normal(0, 0.3, size=(5, 3, 3, 3)).astype(np.float32)
        b = rng.normal(0, 0.1, size=5).astype(np.float32)
        layer = Conv2d(3, 5, 3, 3, stride=2, pad=1, weight="w", bias="b")
        model = ModelSpec(CFG, (3, 8, 8), [layer], {"w": w, "b": b})
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        r0, r1 = transport.run_parties(
            lambda: conv2d_forward(sess0, s0, layer, w, b),
            lambda: conv2d_forward(sess1, s1, layer, w, b),
            endpoints=eps,
        )
        got = decode(r0, r1)
        oracle = plain_fixed_forward(model, x)
        assert got.shape == oracle.shape
        assert np.max(np.abs(got - oracle)) <= 4.0 / D


class TestAvgPool:
    def test_constant_input_invariance(self):
        rng = np.random.default_rng(9)
        x = np.full((2, 3, 4, 4), 0.625)
        s0, s1 = shared(x, rng)
        sess0, sess1, eps = make_sessions()
        layer = AvgPool(2, 2, stride=2)
        r0, r1 = transport.run_parties(
            lambda: avgpool_forward(sess0, s0, layer),
            lambda: avgpool_forward(sess1, s1, layer),
            endpoints=eps,
        )
        got = decode(r0, r1)
        assert got.shape == (2, 3, 2, 2)
        assert np.max(np.abs(got - 0.625)) <= 4.0 / D

    def test_1x1_pool_identity(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=(2, 2, 3, 3))
        s0, s1 = shared(x, rng)
        sess0, sess1, _ = make_sessions()
        layer = AvgPool(1, 1, stride=1)
        r0, r1 = transport.run_parties(
            lambda: avgpool_forward(sess0, s0, layer),
            lambda: avgpool_forward(sess1, s1, layer),
        )
        got = decode(r0, r1)
        assert np.max(np.abs(got - x)) <= 2.0 / D

    def test_random_against_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, size=(3, 4, 6, 6))
        layer = AvgPool(3, 3, stride=3)
        model = ModelSpec(CFG, (4, 6, 6), [layer], {})
        s0, s1 = shared(x, rng)
        sess0, sess1, _ = make_sessions()
        r0, r1 = transport.run_parties(
            lambda: avgpool_forward(sess0, s0, layer),
            lambda: avgpool_forward(sess1, s1, layer),
        )
        got = decode(r0, r1)
        oracle = plain_fixed_forward(model, x)
        assert np.max(np.abs(got - oracle)) <= 4.0 / D


class TestModelForward:
    def test_full_window_tracks_fixed_point_oracle_per_layer(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:16])
        logits, meters, layer_logs, _ = run_local_forward(model, ReluConfig.full(model), x, seed=3)
        oracle = plain_fixed_forward(model, x)
        assert np.max(np.abs(logits - oracle)) <= 1e-2
        # linear-only layers moved zero bytes
        for entry in layer_logs[0]:
            kind = entry["layer"].split(":")[1]
            if kind in ("linear", "conv2d", "avgpool", "flatten"):
                assert entry["bytes"] == 0 and entry["rounds"] == 0
            elif kind == "relu":
                assert entry["bytes"] > 0

    def test_full_window_per_layer_error_within_two_ulp(self, cnn_bundle):
        # compare each layer against the integer oracle given the same
        # reconstructed input: truncation jitter stays within 2 encoded units
        from conftest import make_sessions, stocked_sessions_for_relu
        from ringmpc import models, transport
        from ringmpc.nn import model_forward

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:8])
        rng = np.random.default_rng(31)
        cur0, cur1 = shared(x, rng)
        shapes = model.activation_shapes()
        for i, layer in enumerate(model.layers):
            single = ModelSpec(
                CFG,
                shapes[i],
                [Relu(0) if layer.kind == "relu" else layer],
                dict(model.weights),
            )
            cfg = ReluConfig([BitWindow(64, 0)] * single.n_groups)
            if layer.kind == "relu":
                count = int(np.prod(shapes[i])) * 8
                sess0, sess1, _ = stocked_sessions_for_relu(count, 64, 64, seed=i)
            else:
                sess0, sess1, _ = make_sessions()
            out0, out1 = transport.run_parties(
                lambda: model_forward(sess0, cur0, single, cfg),
                lambda: model_forward(sess1, cur1, single, cfg),
            )
            recon_in = ring.decode_array(reconstruct_arith(cur0, cur1), CFG)
            oracle = plain_fixed_forward(single, recon_in)
            got = ring.decode_array(reconstruct_arith(out0, out1), CFG)
            err_units = np.max(np.abs(got - oracle)) * D
            assert err_units <= 2, f"layer {i}:{layer.kind} off by {err_units} units"
            cur0, cur1 = out0, out1

    def test_identity_group_skips_protocol(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:4])
        cfg = ReluConfig([None, None])
        logits, meters, _, _ = run_local_forward(model, cfg, x, seed=4)
        assert meters[0].total_bytes() == 0
        oracle = plain_fixed_forward(model, x, cfg)
        assert np.max(np.abs(logits - oracle)) <= 1e-2

    def test_group_count_mismatch(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:2])
        with pytest.raises(ConfigError):
            run_local_forward(model, ReluConfig([BitWindow(64, 0)]), x, seed=0)


class TestTripleRequirements:
    def test_accounts_every_group(self, cnn_bundle):
        model, _, _ = cnn_bundle
        cfg = ReluConfig([BitWindow(18, 10), None])
        need = triple_requirements(model, cfg, batch=3)
        sizes = model.relu_group_sizes()
        # group 1 is identity; only group 0 consumes
        assert need[("bool", 8)] == sizes[0] * 3 * (1 + 2 * 3)
        assert need[("arith", 64)] == sizes[0] * 3 * 2


class TestModelIO:
    def test_save_load_roundtrip(self, tmp_path, mlp_bundle):
        model, _, _ = mlp_bundle
        save_model(model, tmp_path)
        loaded = load_model(tmp_path)
        assert loaded.input_shape == model.input_shape
        assert [l.kind for l in loaded.layers] == [l.kind for l in model.layers]
        for name, arr in model.weights.items():
            assert np.array_equal(loaded.weights[name], arr)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DataFormatError):
            load_model(tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps({"fixed_point": {}}))
        with pytest.raises(DataFormatError):
            load_model(tmp_path)

    def test_missing_blob(self, tmp_path, mlp_bundle):
        model, _, _ = mlp_bundle
        save_model(model, tmp_path)
        (tmp_path / "fc1_w.bin").unlink()
        with pytest.raises(DataFormatError):
            load_model(tmp_path)

    def test_blob_size_mismatch(self, tmp_path, mlp_bundle):
        model, _, _ = mlp_bundle
        save_model(model, tmp_path)
        blob = (tmp_path / "fc1_w.bin").read_bytes()
        (tmp_path / "fc1_w.bin").write_bytes(blob[:-4])
        with pytest.raises(DataFormatError):
            load_model(tmp_path)


class TestIdx:
    def test_roundtrip(self, tmp_path):
        images, labels = gen_synthetic(5, 100)
        save_idx(tmp_path / "im.idx", images)
        save_idx(tmp_path / "lb.idx", labels)
        assert np.array_equal(load_idx(tmp_path / "im.idx"), images)
        assert np.array_equal(load_idx(tmp_path / "lb.idx"), labels)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"\x00\x00\x0c\x01" + b"\x00" * 16)
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "x.idx")

    def test_truncated(self, tmp_path):
        images, _ = gen_synthetic(6, 10)
        save_idx(tmp_path / "im.idx", images)
        blob = (tmp_path / "im.idx").read_bytes()
        (tmp_path / "im.idx").write_bytes(blob[:-10])
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "im.idx")


def test_gen_synthetic_deterministic():
    a = gen_synthetic(7, 64)
    b = gen_synthetic(7, 64)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = gen_synthetic(8, 64)
    assert not np.array_equal(a[0], c[0])


def test_im2col_matches_naive():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 3, 5, 7))
    patches, oh, ow = im2col(x, 3, 2, stride=2, pad=1)
    assert patches.shape == (2, oh * ow, 3 * 3 * 2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for b in range(2):
        idx = 0
        for i in range(oh):
            for j in range(ow):
                window = xp[b, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 2]
                assert np.allclose(patches[b, idx], window.reshape(-1))
                idx += 1

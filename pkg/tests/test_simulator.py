"""Simulator fidelity: equivalence with the interactive protocol under
shared randomness, exact full-window behavior, and the pruning statistics
of dropped low bits."""

import numpy as np
import pytest

from conftest import stocked_sessions_for_relu
from ringmpc import ring, sharing, simulator, transport
from ringmpc.errors import EncodeRangeError
from ringmpc.protocol import relu
from ringmpc.ring import BitWindow, FixedPointConfig
from ringmpc.sharing import reconstruct_arith
from ringmpc.simulator import (
    SimConfig,
    collect_activation_ranges,
    drelu_from_shares,
    plain_forward,
    sim_forward,
    sim_relu,
)

CFG = FixedPointConfig(64, 16)


class TestSimRelu:
    def test_full_window_is_exact_relu(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.uniform(-100, 100, 5000), [0.0, -0.5 / CFG.scale]])
        out = sim_relu(x, BitWindow(64, 0), CFG, np.random.default_rng(1))
        e = ring.to_signed(ring.encode_array(x, CFG), 64)
        want = np.where(e >= 0, x, 0.0)
        assert np.array_equal(out, want)

    def test_large_negative_always_zero(self):
        x = np.full(200, -87.5)
        for window in (BitWindow(64, 0), BitWindow(30, 10), BitWindow(24, 2)):
            out = sim_relu(x, window, CFG, np.random.default_rng(2))
            assert not out.any()

    def test_borrow_probability_matches_enumeration(self):
        # secrets strictly below 2^m: the zeroing probability is the chance
        # the dropped low bits of the random share exceed the secret's,
        # i.e. (2^m - 1 - x) / 2^m; cross-checked by exhaustive enumeration
        # of the dropped bits
        cfg = FixedPointConfig(10, 3)
        m = 4
        window = BitWindow(10, m)
        rng = np.random.default_rng(3)
        n = 10_000
        for x_int in (1, 5, 11, 15):
            x_f = x_int / cfg.scale
            out = sim_relu(np.full(n, x_f), window, cfg, rng)
            zero_frac = float(np.mean(out == 0.0))
            lows = np.arange(2**m)
            s0_low = (x_int - lows) % 2**m
            p_zero = float(np.mean(s0_low + lows >= 2**m))
            assert abs(p_zero - (2**m - 1 - x_int) / 2**m) < 1e-12
            sigma = float(np.sqrt(p_zero * (1 - p_zero) / n))
            assert abs(zero_frac - p_zero) <= 3 * sigma + 1e-12
        # x = 0 never survives the product even when the sign bit keeps it
        assert not sim_relu(np.zeros(1000), window, cfg, rng).any()

    def test_encode_overflow_surfaces(self):
        with pytest.raises(EncodeRangeError):
            sim_relu(np.array([2.0**50]), BitWindow(64, 0), CFG, np.random.default_rng(4))


class TestProtocolAgreement:
    def test_same_randomness_same_answers_10k(self):
        # feed identical share splits to the simulator arithmetic and the
        # interactive protocol; decisions must agree element for element
        rng = np.random.default_rng(5)
        n = 10_000
        width = 64
        window = BitWindow(21, 7)
        x_f = rng.uniform(-20, 20, n)
        e = ring.encode_array(x_f, CFG)
        s0, s1 = sharing.share_arith(e, width, rng)

        sim_keep = drelu_from_shares(s0.data, s1.data, width, window)
        sess0, sess1, eps = stocked_sessions_for_relu(n, window.width, width)
        r0, r1 = transport.run_parties(
            lambda: relu(sess0, s0, window), lambda: relu(sess1, s1, window), endpoints=eps
        )
        got = reconstruct_arith(r0, r1)
        want = ring.mul_mod(e, sim_keep, width)  # x times the decision, on the ring
        assert np.array_equal(got, want)

    def test_sim_relu_uses_share_convention(self):
        # sim_relu(x, rng) must equal the decision derived from share_arith
        # with the same generator state
        x_f = np.linspace(-5, 5, 101)
        out = sim_relu(x_f, BitWindow(20, 6), CFG, np.random.default_rng(6))
        e = ring.encode_array(x_f, CFG)
        s0, s1 = sharing.share_arith(e, 64, np.random.default_rng(6))
        keep = drelu_from_shares(s0.data, s1.data, 64, BitWindow(20, 6))
        assert np.array_equal(out != 0.0, (keep == 1) & (x_f != 0.0))


class TestSimForward:
    def test_full_windows_equal_plain_forward_bitwise(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:64])
        cfg = SimConfig(model.fixed_point, [BitWindow(64, 0)] * model.n_groups, seed=9)
        logits, _ = sim_forward(model, x, None, cfg)
        plain = plain_forward(model, x)
        assert np.array_equal(logits, plain)

    def test_deterministic_given_seed(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:64])
        cfg = SimConfig(model.fixed_point, [BitWindow(18, 9), BitWindow(19, 8)], seed=10)
        a = sim_forward(model, x, val_set[1][:64], cfg)
        b = sim_forward(model, x, val_set[1][:64], cfg)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_identity_group(self, mlp_bundle):
        from ringmpc import models

        model, _, val_set = mlp_bundle
        x = models.model_input(model, val_set[0][:32])
        cfg = SimConfig(model.fixed_point, [None], seed=11)
        logits, _ = sim_forward(model, x, None, cfg)
        # identity relu passes negatives; different from plain forward
        w2 = model.weights["fc2.w"].astype(np.float64)
        b2 = model.weights["fc2.b"].astype(np.float64)
        w1 = model.weights["fc1.w"].astype(np.float64)
        b1 = model.weights["fc1.b"].astype(np.float64)
        want = (x @ w1.T + b1) @ w2.T + b2
        assert np.allclose(logits, want)


class TestActivationRanges:
    def test_bound_is_tight(self, cnn_bundle):
        from ringmpc import models

        model, _, val_set = cnn_bundle
        x = models.model_input(model, val_set[0][:256])
        ranges = collect_activation_ranges(model, x)
        assert set(ranges) == {0, 1}

        # recompute the extremes independently and check minimality
        captured = {}

        def hook(i, g, act):
            e = ring.to_signed(ring.encode_array(act, model.fixed_point), 64)
            captured.setdefault(g, []).append((int(e.min()), int(e.max())))
            return simulator.exact_relu(act, model.fixed_point)

        simulator._float_forward(model, x, hook)
        for g, k in ranges.items():
            lo = min(v[0] for v in captured[g])
            hi = max(v[1] for v in captured[g])
            assert -(2 ** (k - 1)) <= lo and hi < 2 ** (k - 1)
            assert k == 2 or not (-(2 ** (k - 2)) <= lo and hi < 2 ** (k - 2))

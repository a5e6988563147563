"""Single-process plaintext inference that emulates only the windowed
ReLU sign decision, for use by the offline window search.

All layers except ReLU run ordinary float math.  At each ReLU the
simulator encodes the activations onto the ring, draws a fresh random
share split, slices the configured bit window from both shares, and reads
the sign of their sum on the reduced ring, exactly as the interactive
protocol would.  No communication, no triples, so evaluating a candidate
window assignment costs one vanilla forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ring, sharing
from .nn import AvgPool, Conv2d, Flatten, Linear, ModelSpec, Relu, im2col
from .errors import ConfigError
from .ring import BitWindow, FixedPointConfig


@dataclass
class SimConfig:
    """Same validity rules as the runtime ReLU config, plus a seed."""

    fxp: FixedPointConfig
    windows: list[BitWindow | None]
    seed: int = 0


def drelu_from_shares(s0: np.ndarray, s1: np.ndarray, width: int, window: BitWindow) -> np.ndarray:
    """Sign decision (1 = keep) computed from an explicit share split.

    This is the arithmetic the interactive protocol evaluates under
    encryption; keeping it callable on plain shares lets tests drive both
    paths with identical randomness.
    """
    window.check_fits(width)
    t = ring.add_mod(
        ring.slice_mod(s0, width, window), ring.slice_mod(s1, width, window), window.width
    )
    return np.uint64(1) - ring.msb(t, window.width)


def sim_relu(
    x_f: np.ndarray, window: BitWindow, cfg: FixedPointConfig, rng: np.random.Generator
) -> np.ndarray:
    """Windowed ReLU on floats: encode, split, slice, keep-or-zero."""
    e = ring.encode_array(x_f, cfg)
    s0, s1 = sharing.share_arith(e, cfg.ring_bits, rng)
    keep = drelu_from_shares(s0.data, s1.data, cfg.ring_bits, window)
    return np.asarray(x_f, dtype=np.float64) * keep.astype(np.float64)


def _float_forward(model: ModelSpec, x_f: np.ndarray, relu_hook) -> np.ndarray:
    """Float pipeline; relu_hook(layer_index, group_id, pre_activation) -> post."""
    cur = np.asarray(x_f, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            w = model.weights[layer.weight].astype(np.float64)
            b = model.weights[layer.bias].astype(np.float64)
            cur = cur @ w.T + b[None, :]
        elif isinstance(layer, Conv2d):
            w = model.weights[layer.weight].astype(np.float64)
            b = model.weights[layer.bias].astype(np.float64)
            patches, oh, ow = im2col(cur, layer.kh, layer.kw, layer.stride, layer.pad)
            out = patches @ w.reshape(layer.out_channels, -1).T + b[None, None, :]
            cur = out.transpose(0, 2, 1).reshape(cur.shape[0], layer.out_channels, oh, ow)
        elif isinstance(layer, AvgPool):
            bsz, c, h, w_ = cur.shape
            merged = cur.reshape(bsz * c, 1, h, w_)
            patches, oh, ow = im2col(merged, layer.kh, layer.kw, layer.stride, pad=0)
            cur = patches.mean(axis=2).reshape(bsz, c, oh, ow)
        elif isinstance(layer, Relu):
            cur = relu_hook(i, layer.group_id, cur)
        elif isinstance(layer, Flatten):
            cur = cur.reshape(cur.shape[0], -1)
        else:
            raise ConfigError(f"unknown layer kind {layer!r}")
    return cur


def exact_relu(x_f: np.ndarray, cfg: FixedPointConfig) -> np.ndarray:
    """Keep x where its ring encoding is non-negative (sign of encode(x)).

    Zero encodes as non-negative, so values rounding to zero pass through;
    this is the decision a full-window evaluation makes.
    """
    e = ring.encode_array(x_f, cfg)
    keep = np.uint64(1) - ring.msb(e, cfg.ring_bits)
    return np.asarray(x_f, dtype=np.float64) * keep.astype(np.float64)


def plain_forward(model: ModelSpec, x_f: np.ndarray) -> np.ndarray:
    """Float forward pass with exact (full-window) ReLU decisions."""
    return _float_forward(model, x_f, lambda i, g, a: exact_relu(a, model.fixed_point))


def sim_forward(
    model: ModelSpec, x_f: np.ndarray, labels: np.ndarray | None, cfg: SimConfig
) -> tuple[np.ndarray, float]:
    """Forward pass with windowed ReLU decisions; returns (logits, accuracy).

    Share randomness is resampled per call, seeded by (cfg.seed, layer
    index), so a given configuration always sees the same splits no matter
    when it is evaluated.
    """
    if len(cfg.windows) != model.n_groups:
        raise ConfigError(f"sim config has {len(cfg.windows)} windows, model needs {model.n_groups}")

    def hook(layer_index: int, group_id: int, act: np.ndarray) -> np.ndarray:
        window = cfg.windows[group_id]
        if window is None:
            return act
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, layer_index]))
        return sim_relu(act, window, cfg.fxp, rng)

    logits = _float_forward(model, x_f, hook)
    accuracy = float("nan")
    if labels is not None:
        accuracy = float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
    return logits, accuracy


def collect_drelu_decisions(
    model: ModelSpec, x_f: np.ndarray, cfg: SimConfig
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Like sim_forward but also returns each ReLU layer's keep mask."""
    masks: list[np.ndarray] = []

    def hook(layer_index: int, group_id: int, act: np.ndarray) -> np.ndarray:
        window = cfg.windows[group_id]
        if window is None:
            masks.append(np.ones_like(act, dtype=bool))
            return act
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, layer_index]))
        out = sim_relu(act, window, cfg.fxp, rng)
        masks.append(out != 0.0)
        return out

    logits = _float_forward(model, x_f, hook)
    return logits, masks


def collect_activation_ranges(
    model: ModelSpec, x_f: np.ndarray, cfg: FixedPointConfig | None = None
) -> dict[int, int]:
    """Smallest k per ReLU group with -2^(k-1) <= encode(x) < 2^(k-1) for
    every pre-activation value seen on the given data."""
    cfg = cfg or model.fixed_point
    extremes: dict[int, tuple[int, int]] = {}

    def hook(layer_index: int, group_id: int, act: np.ndarray) -> np.ndarray:
        e = ring.to_signed(ring.encode_array(act, cfg), cfg.ring_bits)
        lo, hi = int(e.min()), int(e.max())
        if group_id in extremes:
            plo, phi = extremes[group_id]
            extremes[group_id] = (min(lo, plo), max(hi, phi))
        else:
            extremes[group_id] = (lo, hi)
        return exact_relu(act, cfg)

    _float_forward(model, x_f, hook)

    def bits_for(value: int) -> int:
        return value.bit_length() + 1 if value >= 0 else (-value - 1).bit_length() + 1

    ranges = {}
    for group_id, (lo, hi) in extremes.items():
        k = max(2, bits_for(lo), bits_for(hi))
        ranges[group_id] = min(k, cfg.ring_bits)
    return ranges

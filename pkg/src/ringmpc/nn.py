"""Fixed-point neural layers over shares with public weights, plus the
on-disk model and dataset formats.

Linear, convolution, and pooling act on additive shares without any
communication: weights are public, so each party transforms its own share
and rescales with a local probabilistic truncation.  Only ReLU layers talk
to the peer, through the protocol kernels.

Model manifest: JSON {fixed_point, input_shape, layers, blobs}; weight
blobs are raw little-endian float32, row-major.  Datasets use the IDX
format (big-endian dims, ubyte payload).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol, ring
from .errors import ConfigError, DataFormatError
from .protocol import ProtocolSession
from .ring import BitWindow, FixedPointConfig
from .sharing import ArithShareTensor, add_public, mul_public

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    weight: str
    bias: str
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int
    pad: int
    weight: str
    bias: str
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class AvgPool:
    kh: int
    kw: int
    stride: int
    kind: str = field(default="avgpool", init=False)


@dataclass(frozen=True)
class Relu:
    group_id: int
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


Layer = Linear | Conv2d | AvgPool | Relu | Flatten


@dataclass
class ModelSpec:
    fixed_point: FixedPointConfig
    input_shape: tuple[int, ...]
    layers: list[Layer]
    weights: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        groups = [l.group_id for l in self.layers if isinstance(l, Relu)]
        if sorted(set(groups)) != list(range(len(set(groups)))):
            raise ConfigError(f"relu group ids must cover 0..G-1, got {groups}")
        self._check_shapes()

    @property
    def n_groups(self) -> int:
        return len({l.group_id for l in self.layers if isinstance(l, Relu)})

    def _check_shapes(self) -> None:
        for layer in self.layers:
            if isinstance(layer, Linear):
                self._expect(layer.weight, (layer.out_features, layer.in_features))
                self._expect(layer.bias, (layer.out_features,))
            elif isinstance(layer, Conv2d):
                self._expect(layer.weight, (layer.out_channels, layer.in_channels, layer.kh, layer.kw))
                self._expect(layer.bias, (layer.out_channels,))
        self.activation_shapes()  # raises on inconsistent layer chaining

    def _expect(self, name: str, shape: tuple[int, ...]) -> None:
        if name not in self.weights:
            raise ConfigError(f"missing weight blob {name!r}")
        if self.weights[name].shape != shape:
            raise ConfigError(f"blob {name!r} has shape {self.weights[name].shape}, expected {shape}")

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shape entering each layer, plus the output shape last."""
        shapes = [tuple(self.input_shape)]
        cur = tuple(self.input_shape)
        for layer in self.layers:
            if isinstance(layer, Linear):
                if cur != (layer.in_features,):
                    raise ConfigError(f"linear layer expects ({layer.in_features},), got {cur}")
                cur = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(cur) != 3 or cur[0] != layer.in_channels:
                    raise ConfigError(f"conv layer expects ({layer.in_channels}, H, W), got {cur}")
                _, h, w = cur
                oh = (h + 2 * layer.pad - layer.kh) // layer.stride + 1
                ow = (w + 2 * layer.pad - layer.kw) // layer.stride + 1
                cur = (layer.out_channels, oh, ow)
            elif isinstance(layer, AvgPool):
                if len(cur) != 3:
                    raise ConfigError(f"avgpool expects (C, H, W), got {cur}")
                c, h, w = cur
                oh = (h - layer.kh) // layer.stride + 1
                ow = (w - layer.kw) // layer.stride + 1
                cur = (c, oh, ow)
            elif isinstance(layer, Flatten):
                cur = (int(np.prod(cur)),)
            shapes.append(cur)
        return shapes

    def relu_group_sizes(self) -> dict[int, int]:
        """Per-sample element count of each ReLU group."""
        sizes: dict[int, int] = {}
        shapes = self.activation_shapes()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Relu):
                sizes[layer.group_id] = sizes.get(layer.group_id, 0) + int(np.prod(shapes[i]))
        return sizes


@dataclass
class ReluConfig:
    """Per-group window assignment; None means the group is an identity."""

    windows: list[BitWindow | None]

    @classmethod
    def full(cls, model: ModelSpec) -> "ReluConfig":
        n = model.fixed_point.ring_bits
        return cls([BitWindow(n, 0)] * model.n_groups)

    def window_for(self, group_id: int) -> BitWindow | None:
        if not 0 <= group_id < len(self.windows):
            raise ConfigError(f"no window configured for relu group {group_id}")
        return self.windows[group_id]

    def to_json(self) -> dict:
        return {
            "groups": [w.to_json() if w is not None else "identity" for w in self.windows],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReluConfig":
        windows = []
        for entry in obj["groups"]:
            windows.append(None if entry == "identity" else BitWindow.from_json(entry))
        return cls(windows)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Extract conv patches: [B, C, H, W] -> [B, oh*ow, C*kh*kw].

    Works for any dtype; zero padding is a share of zero, so the same
    routine serves both plaintext and share tensors.
    """
    b, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if pad:
        xp = np.zeros((b, c, hp, wp), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    ii = (stride * np.repeat(np.arange(oh), ow))[:, None] + np.repeat(np.arange(kh), kw)[None, :]
    jj = (stride * np.tile(np.arange(ow), oh))[:, None] + np.tile(np.arange(kw), kh)[None, :]
    patches = xp[:, :, ii, jj]  # [B, C, oh*ow, kh*kw]
    return patches.transpose(0, 2, 1, 3).reshape(b, oh * ow, c * kh * kw), oh, ow


def truncate_local(x: ArithShareTensor, cfg: FixedPointConfig) -> ArithShareTensor:
    """Divide a shared fixed-point value by the scale, each party locally.

    Party 0 shifts its share down; party 1 negates, shifts, and negates
    back.  The reconstruction lands on floor(x / D) + {0, 1}; a large wrap
    error occurs with probability about |x| / 2^(N-1), which the encoding
    headroom keeps negligible for sane activations.
    """
    shift = np.uint64(cfg.frac_bits)
    if x.party == 0:
        data = x.data >> shift
    else:
        data = ring.neg_mod(ring.neg_mod(x.data, x.width) >> shift, x.width)
    return ArithShareTensor(x.party, x.width, data)


def linear_forward(
    session: ProtocolSession, x: ArithShareTensor, weight: np.ndarray, bias: np.ndarray
) -> ArithShareTensor:
    """x @ W^T + b with public fixed-point weights; zero communication."""
    cfg = session.fxp
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear expects [batch, {weight.shape[1]}], got {x.shape}")
    w_enc = ring.encode_array(weight, cfg)
    prod = (x.data @ w_enc.T) & ring.mask_of(x.width)
    out = truncate_local(ArithShareTensor(x.party, x.width, prod), cfg)
    return add_public(out, ring.encode_array(bias, cfg)[None, :])


def conv2d_forward(
    session: ProtocolSession,
    x: ArithShareTensor,
    layer: Conv2d,
    weight: np.ndarray,
    bias: np.ndarray,
) -> ArithShareTensor:
    """Convolution lowered to im2col plus the linear kernel."""
    if x.data.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ConfigError(f"conv expects [batch, {layer.in_channels}, H, W], got {x.shape}")
    patches, oh, ow = im2col(x.data, layer.kh, layer.kw, layer.stride, layer.pad)
    b = x.shape[0]
    flat = ArithShareTensor(x.party, x.width, patches.reshape(b * oh * ow, -1))
    w2 = weight.reshape(layer.out_channels, -1)
    out = linear_forward(session, flat, w2, bias)
    data = out.data.reshape(b, oh * ow, layer.out_channels).transpose(0, 2, 1)
    return ArithShareTensor(x.party, x.width, data.reshape(b, layer.out_channels, oh, ow))


def avgpool_forward(
    session: ProtocolSession, x: ArithShareTensor, layer: AvgPool
) -> ArithShareTensor:
    """Window sum, public multiply by encode(1/count), then truncation."""
    cfg = session.fxp
    if x.data.ndim != 4:
        raise ConfigError(f"avgpool expects [batch, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    merged = x.data.reshape(b * c, 1, h, w)
    patches, oh, ow = im2col(merged, layer.kh, layer.kw, layer.stride, pad=0)
    sums = patches.sum(axis=2, dtype=np.uint64) & ring.mask_of(x.width)
    summed = ArithShareTensor(x.party, x.width, sums.reshape(b, c, oh, ow))
    inv = ring.encode_fixed(1.0 / (layer.kh * layer.kw), cfg).value
    return truncate_local(mul_public(summed, inv), cfg)


def relu_forward(
    session: ProtocolSession, x: ArithShareTensor, window: BitWindow | None
) -> ArithShareTensor:
    """Windowed ReLU; a None window skips the protocol entirely."""
    if window is None:
        return x
    return protocol.relu(session, x, window)


def model_forward(
    session: ProtocolSession,
    x: ArithShareTensor,
    model: ModelSpec,
    relu_cfg: ReluConfig,
    layer_meter: list | None = None,
) -> ArithShareTensor:
    """Run all layers in order; optionally append per-layer meter deltas."""
    if len(relu_cfg.windows) != model.n_groups:
        raise ConfigError(
            f"relu config has {len(relu_cfg.windows)} groups, model needs {model.n_groups}"
        )
    cur = x
    for i, layer in enumerate(model.layers):
        before = session.endpoint.meter.snapshot()
        if isinstance(layer, Linear):
            cur = linear_forward(session, cur, model.weights[layer.weight], model.weights[layer.bias])
        elif isinstance(layer, Conv2d):
            cur = conv2d_forward(session, cur, layer, model.weights[layer.weight], model.weights[layer.bias])
        elif isinstance(layer, AvgPool):
            cur = avgpool_forward(session, cur, layer)
        elif isinstance(layer, Relu):
            cur = relu_forward(session, cur, relu_cfg.window_for(layer.group_id))
        elif isinstance(layer, Flatten):
            cur = ArithShareTensor(cur.party, cur.width, cur.data.reshape(cur.shape[0], -1))
        else:
            raise ConfigError(f"unknown layer kind {layer!r}")
        if layer_meter is not None:
            after = session.endpoint.meter.snapshot()
            layer_meter.append(
                {
                    "layer": f"{i}:{layer.kind}",
                    "bytes": sum(after[t][0] - before[t][0] for t in after),
                    "rounds": sum(after[t][1] - before[t][1] for t in after),
                }
            )
    return cur


def triple_requirements(
    model: ModelSpec, relu_cfg: ReluConfig, batch: int
) -> dict[tuple[str, int], int]:
    """Correlated randomness one forward pass consumes, by (kind, width)."""
    need: dict[tuple[str, int], int] = {}
    shapes = model.activation_shapes()
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, Relu):
            continue
        window = relu_cfg.window_for(layer.group_id)
        if window is None:
            continue
        count = int(np.prod(shapes[i])) * batch
        for key, num in protocol.relu_triple_cost(count, window.width, model.fixed_point.ring_bits).items():
            need[key] = need.get(key, 0) + num
    return need


def plain_fixed_forward(
    model: ModelSpec, x_f: np.ndarray, relu_cfg: ReluConfig | None = None
) -> np.ndarray:
    """Reference fixed-point pipeline on plain signed integers.

    Mirrors the share pipeline operation by operation (encode, multiply,
    floor-truncate) but without shares, wrap, or truncation jitter; ReLU
    is exact sign gating.  Returns decoded float logits.
    """
    cfg = model.fixed_point

    def enc(arr: np.ndarray) -> np.ndarray:
        return ring.to_signed(ring.encode_array(arr, cfg), cfg.ring_bits)

    cur = enc(np.asarray(x_f, dtype=np.float64))
    scale = np.int64(cfg.scale)
    for layer in model.layers:
        if isinstance(layer, Linear):
            w = enc(model.weights[layer.weight])
            b = enc(model.weights[layer.bias])
            cur = np.floor_divide(cur @ w.T, scale) + b[None, :]
        elif isinstance(layer, Conv2d):
            w = enc(model.weights[layer.weight])
            b = enc(model.weights[layer.bias])
            patches, oh, ow = im2col(cur, layer.kh, layer.kw, layer.stride, layer.pad)
            w2 = w.reshape(layer.out_channels, -1)
            out = np.floor_divide(patches @ w2.T, scale) + b[None, None, :]
            cur = out.transpose(0, 2, 1).reshape(cur.shape[0], layer.out_channels, oh, ow)
        elif isinstance(layer, AvgPool):
            bsz, c, h, w_ = cur.shape
            merged = cur.reshape(bsz * c, 1, h, w_)
            patches, oh, ow = im2col(merged, layer.kh, layer.kw, layer.stride, pad=0)
            sums = patches.sum(axis=2)
            inv = ring.encode_fixed(1.0 / (layer.kh * layer.kw), cfg).value
            cur = np.floor_divide(sums * np.int64(inv), scale).reshape(bsz, c, oh, ow)
        elif isinstance(layer, Relu):
            window = relu_cfg.window_for(layer.group_id) if relu_cfg is not None else None
            if relu_cfg is None or window is not None:
                cur = np.where(cur >= 0, cur, 0)
        elif isinstance(layer, Flatten):
            cur = cur.reshape(cur.shape[0], -1)
    return cur.astype(np.float64) / cfg.scale


def save_model(model: ModelSpec, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, arr in model.weights.items():
        fname = name.replace(".", "_") + ".bin"
        (out / fname).write_bytes(arr.astype("<f4").tobytes())
        blobs[name] = fname
    manifest = {
        "fixed_point": model.fixed_point.to_json(),
        "input_shape": list(model.input_shape),
        "layers": [_layer_to_json(l) for l in model.layers],
        "blobs": blobs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_model(path: str | Path) -> ModelSpec:
    """Read a manifest (or its directory) and all referenced blobs."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        manifest = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{p}: unreadable manifest: {exc}") from exc
    try:
        fxp = FixedPointConfig.from_json(manifest["fixed_point"])
        input_shape = tuple(int(v) for v in manifest["input_shape"])
        layers = [_layer_from_json(obj) for obj in manifest["layers"]]
        blob_map = manifest["blobs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{p}: malformed manifest: {exc}") from exc
    weights = {}
    for name, fname in blob_map.items():
        blob_path = p.parent / fname
        if not blob_path.exists():
            raise DataFormatError(f"{p}: missing blob file {fname}")
        raw = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
        weights[name] = raw
    shaped = _shape_blobs(layers, weights)
    try:
        return ModelSpec(fxp, input_shape, layers, shaped)
    except ConfigError as exc:
        raise DataFormatError(f"{p}: {exc}") from exc


def _shape_blobs(layers: list[Layer], flat: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    shaped: dict[str, np.ndarray] = {}
    for layer in layers:
        expect: list[tuple[str, tuple[int, ...]]] = []
        if isinstance(layer, Linear):
            expect = [(layer.weight, (layer.out_features, layer.in_features)), (layer.bias, (layer.out_features,))]
        elif isinstance(layer, Conv2d):
            expect = [
                (layer.weight, (layer.out_channels, layer.in_channels, layer.kh, layer.kw)),
                (layer.bias, (layer.out_channels,)),
            ]
        for name, shape in expect:
            if name not in flat:
                raise DataFormatError(f"manifest references missing blob {name!r}")
            arr = flat[name]
            if arr.size != int(np.prod(shape)):
                raise DataFormatError(f"blob {name!r} holds {arr.size} floats, expected {np.prod(shape)}")
            shaped[name] = arr.reshape(shape).astype(np.float32)
    return shaped


def _layer_to_json(layer: Layer) -> dict:
    out = {"kind": layer.kind}
    for key, val in layer.__dict__.items():
        if key != "kind":
            out[key] = val
    return out


def _layer_from_json(obj: dict) -> Layer:
    kinds = {"linear": Linear, "conv2d": Conv2d, "avgpool": AvgPool, "relu": Relu, "flatten": Flatten}
    try:
        cls = kinds[obj["kind"]]
        kwargs = {k: v for k, v in obj.items() if k != "kind"}
        return cls(**kwargs)
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"bad layer entry {obj!r}: {exc}") from exc


def save_idx(path: str | Path, arr: np.ndarray) -> None:
    """Write a ubyte IDX file; 1-D arrays become label files, 3-D images."""
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 1:
        magic = IDX_MAGIC_LABELS
    elif arr.ndim == 3:
        magic = IDX_MAGIC_IMAGES
    else:
        raise ConfigError(f"idx arrays must be 1-D labels or 3-D images, got ndim={arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for dim in arr.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(arr.tobytes())


def load_idx(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read idx file: {exc}") from exc
    if len(blob) < 4:
        raise DataFormatError(f"{path}: too short for an idx header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise DataFormatError(f"{path}: bad idx magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated idx dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims).copy()


def gen_synthetic(
    seed: int, n_samples: int, n_classes: int = 10, side: int = 8, noise: float = 0.16
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic Gaussian-blob image classification set.

    Each class gets a random mean image; samples are the mean plus pixel
    noise, quantized to ubyte.  Returns (images [n, side, side], labels).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D2]))
    centers = rng.uniform(0.2, 0.8, size=(n_classes, side * side))
    labels = rng.integers(0, n_classes, size=n_samples)
    x = centers[labels] + rng.normal(0.0, noise, size=(n_samples, side * side))
    images = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8).reshape(n_samples, side, side)
    return images, labels.astype(np.uint8)

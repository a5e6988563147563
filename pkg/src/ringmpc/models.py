"""Desk-scale reference models and their training fixture.

These stand in for production CNNs: an MLP (64-32-10) and a small
conv net (conv3x3x8 -> pool2 -> conv3x3x16 -> pool2 -> linear) over 8x8
synthetic images.  Weights are fitted here with a plain numpy SGD so that
accuracy comparisons in the search and acceptance suites are meaningful;
the secure engine itself never trains anything.
"""

from __future__ import annotations

import numpy as np

from .nn import AvgPool, Conv2d, Flatten, Linear, ModelSpec, Relu, gen_synthetic, im2col
from .ring import FixedPointConfig

N_CLASSES = 10
IMG_SIDE = 8


def make_dataset(seed: int, n_train: int = 2048, n_val: int = 1024):
    """Synthetic blobs split into train/val; images ubyte, floats on demand."""
    images, labels = gen_synthetic(seed, n_train + n_val, N_CLASSES, IMG_SIDE)
    return (images[:n_train], labels[:n_train]), (images[n_train:], labels[n_train:])


def to_float(images: np.ndarray, flat: bool) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    n = x.shape[0]
    return x.reshape(n, -1) if flat else x.reshape(n, 1, IMG_SIDE, IMG_SIDE)


def build_mlp(seed: int, fxp: FixedPointConfig | None = None) -> ModelSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x31]))
    d_in, d_hidden = IMG_SIDE * IMG_SIDE, 32
    weights = {
        "fc1.w": (rng.normal(0, np.sqrt(2.0 / d_in), (d_hidden, d_in))).astype(np.float32),
        "fc1.b": np.zeros(d_hidden, dtype=np.float32),
        "fc2.w": (rng.normal(0, np.sqrt(2.0 / d_hidden), (N_CLASSES, d_hidden))).astype(np.float32),
        "fc2.b": np.zeros(N_CLASSES, dtype=np.float32),
    }
    layers = [
        Linear(d_in, d_hidden, "fc1.w", "fc1.b"),
        Relu(0),
        Linear(d_hidden, N_CLASSES, "fc2.w", "fc2.b"),
    ]
    return ModelSpec(fxp or FixedPointConfig(), (d_in,), layers, weights)


def build_cnn(seed: int, fxp: FixedPointConfig | None = None) -> ModelSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x32]))
    c1, c2 = 8, 16
    d_fc = c2 * 2 * 2
    weights = {
        "conv1.w": rng.normal(0, np.sqrt(2.0 / 9), (c1, 1, 3, 3)).astype(np.float32),
        "conv1.b": np.zeros(c1, dtype=np.float32),
        "conv2.w": rng.normal(0, np.sqrt(2.0 / (9 * c1)), (c2, c1, 3, 3)).astype(np.float32),
        "conv2.b": np.zeros(c2, dtype=np.float32),
        "fc.w": rng.normal(0, np.sqrt(2.0 / d_fc), (N_CLASSES, d_fc)).astype(np.float32),
        "fc.b": np.zeros(N_CLASSES, dtype=np.float32),
    }
    layers = [
        Conv2d(1, c1, 3, 3, stride=1, pad=1, weight="conv1.w", bias="conv1.b"),
        Relu(0),
        AvgPool(2, 2, stride=2),
        Conv2d(c1, c2, 3, 3, stride=1, pad=1, weight="conv2.w", bias="conv2.b"),
        Relu(1),
        AvgPool(2, 2, stride=2),
        Flatten(),
        Linear(d_fc, N_CLASSES, "fc.w", "fc.b"),
    ]
    return ModelSpec(fxp or FixedPointConfig(), (1, IMG_SIDE, IMG_SIDE), layers, weights)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_mlp(model: ModelSpec, images: np.ndarray, labels: np.ndarray,
              epochs: int = 30, lr: float = 0.3, batch: int = 128, seed: int = 0) -> None:
    """Two-layer SGD fit, updating the weight blobs in place."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x41]))
    x_all = to_float(images, flat=True)
    y_all = labels.astype(np.int64)
    w1 = model.weights["fc1.w"].astype(np.float64)
    b1 = model.weights["fc1.b"].astype(np.float64)
    w2 = model.weights["fc2.w"].astype(np.float64)
    b2 = model.weights["fc2.b"].astype(np.float64)
    n = x_all.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            x, y = x_all[idx], y_all[idx]
            h_pre = x @ w1.T + b1
            h = np.maximum(h_pre, 0.0)
            logits = h @ w2.T + b2
            g = _softmax(logits)
            g[np.arange(len(y)), y] -= 1.0
            g /= len(y)
            gw2 = g.T @ h
            gb2 = g.sum(axis=0)
            gh = (g @ w2) * (h_pre > 0)
            gw1 = gh.T @ x
            gb1 = gh.sum(axis=0)
            w2 -= lr * gw2
            b2 -= lr * gb2
            w1 -= lr * gw1
            b1 -= lr * gb1
    model.weights["fc1.w"] = w1.astype(np.float32)
    model.weights["fc1.b"] = b1.astype(np.float32)
    model.weights["fc2.w"] = w2.astype(np.float32)
    model.weights["fc2.b"] = b2.astype(np.float32)


def _col2im(gpatches: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch gradients back to image layout; inverse of im2col."""
    b, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    gx = np.zeros((b, c, hp, wp), dtype=np.float64)
    ii = (stride * np.repeat(np.arange(oh), ow))[:, None] + np.repeat(np.arange(kh), kw)[None, :]
    jj = (stride * np.tile(np.arange(ow), oh))[:, None] + np.tile(np.arange(kw), kh)[None, :]
    gp = gpatches.reshape(b, oh * ow, c, kh * kw).transpose(0, 2, 1, 3)
    np.add.at(gx, (slice(None), slice(None), ii, jj), gp)
    return gx[:, :, pad : pad + h, pad : pad + w]


def train_cnn(model: ModelSpec, images: np.ndarray, labels: np.ndarray,
              epochs: int = 40, lr: float = 0.2, batch: int = 128, seed: int = 0) -> None:
    """Full SGD fit of both convolutions and the head."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x42]))
    x_all = to_float(images, flat=False)
    y_all = labels.astype(np.int64)
    w1 = model.weights["conv1.w"].astype(np.float64)
    b1 = model.weights["conv1.b"].astype(np.float64)
    w2 = model.weights["conv2.w"].astype(np.float64)
    b2 = model.weights["conv2.b"].astype(np.float64)
    wf = model.weights["fc.w"].astype(np.float64)
    bf = model.weights["fc.b"].astype(np.float64)
    c1, c2 = w1.shape[0], w2.shape[0]

    def pool2(x):
        b_, c, h, w = x.shape
        return x.reshape(b_, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def unpool2(g):
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0

    n = x_all.shape[0]
    for epoch in range(epochs):
        step = lr * (0.5 if epoch >= epochs // 2 else 1.0)
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            x, y = x_all[idx], y_all[idx]
            bsz = x.shape[0]
            p1, oh1, ow1 = im2col(x, 3, 3, 1, 1)
            a1 = (p1 @ w1.reshape(c1, -1).T + b1[None, None, :]).transpose(0, 2, 1)
            a1 = a1.reshape(bsz, c1, oh1, ow1)
            r1 = np.maximum(a1, 0.0)
            q1 = pool2(r1)
            p2, oh2, ow2 = im2col(q1, 3, 3, 1, 1)
            a2 = (p2 @ w2.reshape(c2, -1).T + b2[None, None, :]).transpose(0, 2, 1)
            a2 = a2.reshape(bsz, c2, oh2, ow2)
            r2 = np.maximum(a2, 0.0)
            q2 = pool2(r2)
            flat = q2.reshape(bsz, -1)
            logits = flat @ wf.T + bf
            g = _softmax(logits)
            g[np.arange(len(y)), y] -= 1.0
            g /= len(y)
            gwf = g.T @ flat
            gbf = g.sum(axis=0)
            gq2 = (g @ wf).reshape(q2.shape)
            gr2 = unpool2(gq2) * (a2 > 0)
            gmat2 = gr2.reshape(bsz, c2, -1).transpose(0, 2, 1)  # [B, P, c2]
            gw2 = np.einsum("bpo,bpk->ok", gmat2, p2)
            gb2 = gmat2.sum(axis=(0, 1))
            gp2 = gmat2 @ w2.reshape(c2, -1)
            gq1 = _col2im(gp2, q1.shape, 3, 3, 1, 1)
            gr1 = unpool2(gq1) * (a1 > 0)
            gmat1 = gr1.reshape(bsz, c1, -1).transpose(0, 2, 1)
            gw1 = np.einsum("bpo,bpk->ok", gmat1, p1)
            gb1 = gmat1.sum(axis=(0, 1))
            wf -= step * gwf
            bf -= step * gbf
            w2 -= step * gw2.reshape(w2.shape)
            b2 -= step * gb2
            w1 -= step * gw1.reshape(w1.shape)
            b1 -= step * gb1
    model.weights["conv1.w"] = w1.astype(np.float32)
    model.weights["conv1.b"] = b1.astype(np.float32)
    model.weights["conv2.w"] = w2.astype(np.float32)
    model.weights["conv2.b"] = b2.astype(np.float32)
    model.weights["fc.w"] = wf.astype(np.float32)
    model.weights["fc.b"] = bf.astype(np.float32)


def reference_model(arch: str, seed: int):
    """Build, fit, and return (model, (train imgs, labels), (val imgs, labels))."""
    train_set, val_set = make_dataset(seed)
    if arch == "mlp":
        model = build_mlp(seed)
        train_mlp(model, *train_set, seed=seed)
    elif arch == "cnn":
        model = build_cnn(seed)
        train_cnn(model, *train_set, seed=seed)
    else:
        raise ValueError(f"unknown arch {arch!r}; expected 'mlp' or 'cnn'")
    return model, train_set, val_set


def model_input(model: ModelSpec, images: np.ndarray) -> np.ndarray:
    """Float inputs shaped for the model (flat for MLPs, NCHW for convs)."""
    return to_float(images, flat=len(model.input_shape) == 1)

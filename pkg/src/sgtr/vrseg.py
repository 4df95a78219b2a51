"""Tiny segmentation-based visual recognizer.

Produces the per-pixel class distribution, the order-attention maps, the
attended tensor and the coarse sequence prediction. Everything is batched
over a leading sample axis: images are (B, H, W, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DiffValue

SEG_CHANNELS = (16, 32, 32)
ORDER_HIDDEN = 16
ORDER_SIGMA = 2.0
LEN_THRESHOLD = 0.05
MASS_EPS = 1e-12


@dataclass
class SegmentationMap:
    logits: DiffValue  # (B, H, W, C)
    probs: DiffValue  # (B, H, W, C)
    features: list = field(default_factory=list)  # backbone activations, one per conv stage


@dataclass
class OrderAttention:
    maps: DiffValue  # (B, H, W, T), channel t is the t-th character's map
    code: np.ndarray  # (B, H, W, T) column-run indicator fed to the head


@dataclass
class SequenceLogits:
    scores: DiffValue  # (B, T, C)
    length: np.ndarray  # (B,)

    def predict(self) -> list[list[int]]:
        """Class ids per sample: non-background argmax of the first ``length`` rows."""
        s = self.scores.data
        out = []
        for b in range(s.shape[0]):
            n = int(self.length[b])
            out.append([int(np.argmax(s[b, t, 1:])) + 1 for t in range(n)])
        return out


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(rng: np.random.Generator, num_classes: int, max_len: int) -> dict[str, DiffValue]:
    p = {}
    cin = 3
    for k, cout in enumerate(SEG_CHANNELS, start=1):
        p[f"seg.conv{k}.w"] = nx.parameter(_he(rng, (3, 3, cin, cout), 9 * cin))
        p[f"seg.conv{k}.b"] = nx.parameter(np.zeros(cout))
        cin = cout
    p["seg.head.w"] = nx.parameter(_he(rng, (1, 1, cin, num_classes), cin))
    p["seg.head.b"] = nx.parameter(np.zeros(num_classes))
    oin = num_classes + max_len
    p["order.conv1.w"] = nx.parameter(_he(rng, (3, 3, oin, ORDER_HIDDEN), 9 * oin))
    p["order.conv1.b"] = nx.parameter(np.zeros(ORDER_HIDDEN))
    p["order.conv2.w"] = nx.parameter(_he(rng, (3, 3, ORDER_HIDDEN, max_len), 9 * ORDER_HIDDEN) * 0.5)
    p["order.conv2.b"] = nx.parameter(np.zeros(max_len))
    return p


def _batched(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[-1] != 3:
        raise ValueError(f"expected image of shape (H, W, 3) or (B, H, W, 3), got {img.shape}")
    return img


def vr_forward(params, image) -> SegmentationMap:
    x = nx.constant(_batched(image))
    feats = []
    for k in range(1, len(SEG_CHANNELS) + 1):
        x = nx.relu(nx.conv2d(x, params[f"seg.conv{k}.w"], params[f"seg.conv{k}.b"]))
        feats.append(x)
    logits = nx.conv2d(x, params["seg.head.w"], params["seg.head.b"])
    b, h, w, c = logits.shape
    probs = nx.reshape(nx.softmax_rows(nx.reshape(logits, (b * h * w, c))), (b, h, w, c))
    return SegmentationMap(logits, probs, feats)


def column_runs(fg: np.ndarray, max_gap: int = 0, min_width: int = 2, min_pixels: int = 3) -> list[tuple[int, int]]:
    """Left-to-right [x0, x1] spans of foreground columns.

    Runs separated by at most ``max_gap`` empty columns are merged; runs that
    are narrower than ``min_width`` or hold fewer than ``min_pixels`` are noise.
    """
    counts = fg.sum(axis=0)
    occupied = np.flatnonzero(counts > 0)
    if occupied.size == 0:
        return []
    runs = []
    start = prev = int(occupied[0])
    for x in occupied[1:]:
        x = int(x)
        if x - prev - 1 > max_gap:
            runs.append((start, prev))
            start = x
        prev = x
    runs.append((start, prev))
    return [(a, b) for a, b in runs if b - a + 1 >= min_width and counts[a:b + 1].sum() >= min_pixels]


def order_code(probs: np.ndarray, max_len: int) -> np.ndarray:
    """(B, H, W, T) indicator of the t-th column run of predicted foreground."""
    b, h, w, _ = probs.shape
    code = np.zeros((b, h, w, max_len))
    fg = probs.argmax(axis=-1) != 0
    for i in range(b):
        for t, (x0, x1) in enumerate(column_runs(fg[i])[:max_len]):
            code[i, :, x0:x1 + 1, t] = 1.0
    return code


def feature_order(params, seg: SegmentationMap, code: np.ndarray | None = None) -> OrderAttention:
    """Order-attention maps from the segmentation map.

    The head sees the class probabilities plus the column-run code; map t is masked to run t, so maps for missing characters are exactly
    zero. A precomputed ``code`` is used as given.
    """
    t = params["order.conv2.b"].shape[0]
    if code is None:
        code = order_code(seg.probs.data, t)
    x = nx.concat([seg.probs, nx.constant(code)], axis=-1)
    x = nx.relu(nx.conv2d(x, params["order.conv1.w"], params["order.conv1.b"]))
    z = nx.conv2d(x, params["order.conv2.w"], params["order.conv2.b"])
    maps = nx.mul(nx.sigmoid(z), nx.constant(code))
    return OrderAttention(maps, code)


def order_targets(centers_list, length_list, h: int, w: int, max_len: int, sigma: float = ORDER_SIGMA) -> np.ndarray:
    """Gaussian bumps on character centroids; zero maps for t >= length."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((len(centers_list), h, w, max_len))
    for i, (centers, n) in enumerate(zip(centers_list, length_list)):
        for t in range(min(int(n), max_len)):
            cx, cy = centers[t]
            out[i, :, :, t] = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return out


def attend(probs: DiffValue, maps: DiffValue) -> DiffValue:
    """V[b, h, w, t, c] = probs[b, h, w, c] * maps[b, h, w, t]."""
    b, h, w, c = probs.shape
    t = maps.shape[-1]
    return nx.broadcast_mul(nx.reshape(probs, (b, h, w, 1, c)), nx.reshape(maps, (b, h, w, t, 1)))


def decode_sequence(v: DiffValue, length: np.ndarray | None = None) -> SequenceLogits:
    """Per-class attended mass, log-scaled; length from non-background mass unless given."""
    mass = nx.tensor.sum(v, axis=(1, 2))  # (B, T, C)
    scores = nx.log(nx.add_const(mass, MASS_EPS))
    if length is not None:
        return SequenceLogits(scores, np.asarray(length, dtype=np.int64))
    fg_mass = mass.data[:, :, 1:].sum(axis=-1)
    top = fg_mass.max(axis=1, keepdims=True)
    length = ((fg_mass > LEN_THRESHOLD * top) & (top > 0)).sum(axis=1)
    return SequenceLogits(scores, length.astype(np.int64))

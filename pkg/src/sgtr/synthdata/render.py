from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .font import FONT_CHARS, GLYPH_H, GLYPH_W, glyph

MAX_LAYOUT_RETRIES = 10


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    charset: str = "abcdefghij"
    H: int = 32
    W: int = 128
    T: int = 8
    min_len: int = 3
    max_len: int = 8
    scale: int = 1
    blur_sigma: float = 0.0
    rotation_deg: float = 0.0
    noise_std: float = 0.0
    occlusion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.charset:
            raise ValueError("charset must be non-empty")
        if len(set(self.charset)) != len(self.charset):
            raise ValueError(f"charset has repeated symbols: {self.charset!r}")
        missing = [c for c in self.charset if c not in FONT_CHARS]
        if missing:
            raise ValueError(f"characters without glyphs: {''.join(missing)!r}")
        if not 1 <= self.min_len <= self.max_len <= self.T:
            raise ValueError(f"need 1 <= min_len <= max_len <= T, got {self.min_len}, {self.max_len}, {self.T}")
        for name in ("blur_sigma", "rotation_deg", "noise_std", "occlusion_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.occlusion_prob > 1:
            raise ValueError("occlusion_prob must be <= 1")
        # vertical room: glyph, 2px margins and a +-2*scale baseline jitter
        if self.scale < 1 or self.H < (GLYPH_H + 4) * self.scale + 4:
            raise ValueError(f"image height {self.H} too small for glyph scale {self.scale}")

    @property
    def num_classes(self) -> int:
        return len(self.charset) + 1

    @classmethod
    def at_level(cls, level: float, **kw) -> "CorpusConfig":
        """Config whose corruption maxima scale linearly with ``level`` in [0, 1]."""
        if level < 0:
            raise ValueError("corruption level must be non-negative")
        return cls(blur_sigma=1.0 * level, rotation_deg=10.0 * level, noise_std=0.1 * level,
                   occlusion_prob=0.3 * level, **kw)

    @classmethod
    def large_scale(cls, **kw) -> "CorpusConfig":
        """64 x 256 images, T = 25, 62 symbols (digits, lower, upper)."""
        digits = "".join(c for c in FONT_CHARS if c.isdigit())
        lower = "".join(c for c in FONT_CHARS if c.islower())
        upper = "".join(c for c in FONT_CHARS if c.isupper())
        settings = dict(charset=digits + lower + upper, H=64, W=256, T=25, max_len=25, scale=2)
        settings.update(kw)
        return cls(**settings)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegSample:
    image: np.ndarray  # H x W x 3, values k/255
    class_map: np.ndarray  # H x W int, 0 = background
    order_centers: np.ndarray  # (n, 2) float (x, y)
    label: str
    length: int = field(init=False)

    def __post_init__(self):
        self.length = len(self.label)

    def __eq__(self, other):
        return (
            isinstance(other, SegSample)
            and self.label == other.label
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.class_map, other.class_map)
            and np.array_equal(self.order_centers, other.order_centers)
        )


def sample_rngs(cfg: CorpusConfig, index: int, stream: int = 0):
    """Layout and corruption generators derived from (seed, stream, index)."""
    ss = np.random.SeedSequence([cfg.seed, stream, index])
    lay, cor = ss.spawn(2)
    return np.random.default_rng(lay), np.random.default_rng(cor)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _paint_rotated(img, bm, x0, y0, color, theta):
    gh, gw = bm.shape
    if theta == 0.0:
        img[y0:y0 + gh, x0:x0 + gw][bm] = color
        return
    h, w = img.shape[:2]
    cy, cx = y0 + (gh - 1) / 2.0, x0 + (gw - 1) / 2.0
    m = int(math.ceil(max(gh, gw) * abs(math.sin(theta)))) + 1
    ys = np.arange(max(0, y0 - m), min(h, y0 + gh + m))
    xs = np.arange(max(0, x0 - m), min(w, x0 + gw + m))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    u = c * (xx - cx) + s * (yy - cy) + (gw - 1) / 2.0
    v = -s * (xx - cx) + c * (yy - cy) + (gh - 1) / 2.0
    ui, vi = np.rint(u).astype(int), np.rint(v).astype(int)
    inside = (ui >= 0) & (ui < gw) & (vi >= 0) & (vi < gh)
    hit = np.zeros_like(inside)
    hit[inside] = bm[vi[inside], ui[inside]]
    img[yy[hit], xx[hit]] = color


def _layout(cfg: CorpusConfig, rng: np.random.Generator):
    gw, gh = GLYPH_W * cfg.scale, GLYPH_H * cfg.scale
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    for _ in range(MAX_LAYOUT_RETRIES + 1):
        label = "".join(cfg.charset[i] for i in rng.integers(0, len(cfg.charset), size=n))
        gaps = rng.integers(2 * cfg.scale, 3 * cfg.scale + 1, size=max(n - 1, 0))
        total = n * gw + int(gaps.sum())
        if total <= cfg.W - 4:
            break
        if n <= 1:
            raise RenderError(f"a single glyph does not fit in width {cfg.W}")
        n = int(rng.integers(max(1, min(cfg.min_len, n - 1)), n))
    else:
        raise RenderError(f"text did not fit in width {cfg.W} after {MAX_LAYOUT_RETRIES} retries")
    x = int(rng.integers(2, cfg.W - total - 1))
    jitter = 2 * cfg.scale
    base = int(rng.integers(2 + jitter, cfg.H - gh - 2 - jitter + 1))
    boxes = []
    for k, ch in enumerate(label):
        y = base + int(rng.integers(-jitter, jitter + 1))
        boxes.append((ch, x, y))
        x += gw + (int(gaps[k]) if k < n - 1 else 0)
    a, b = rng.uniform(0.0, 0.35), rng.uniform(0.65, 1.0)
    bg, fg = (a, b) if rng.random() < 0.5 else (b, a)
    bg_rgb = np.clip(bg + rng.uniform(-0.08, 0.08, 3), 0, 1)
    fg_rgb = np.clip(fg + rng.uniform(-0.08, 0.08, 3), 0, 1)
    return label, boxes, bg_rgb, fg_rgb


def render_clean(cfg: CorpusConfig, index: int, stream: int = 0) -> SegSample:
    lay, _ = sample_rngs(cfg, index, stream)
    return _render(cfg, lay, None)


def render_sample(cfg: CorpusConfig, index: int, stream: int = 0) -> SegSample:
    """Render sample ``index`` of ``stream``; a pure function of (cfg, stream, index)."""
    lay, cor = sample_rngs(cfg, index, stream)
    return _render(cfg, lay, cor)


def _render(cfg, lay, cor) -> SegSample:
    label, boxes, bg_rgb, fg_rgb = _layout(cfg, lay)
    img = np.empty((cfg.H, cfg.W, 3))
    img[:] = bg_rgb
    class_map = np.zeros((cfg.H, cfg.W), dtype=np.int64)
    centers = []
    for ch, x0, y0 in boxes:
        bm = glyph(ch, cfg.scale)
        class_map[y0:y0 + bm.shape[0], x0:x0 + bm.shape[1]][bm] = cfg.charset.index(ch) + 1
        ys, xs = np.nonzero(bm)
        centers.append((x0 + xs.mean(), y0 + ys.mean()))
    corrupt = cor is not None and (cfg.rotation_deg > 0 or cfg.blur_sigma > 0 or cfg.noise_std > 0
                                   or cfg.occlusion_prob > 0)
    for ch, x0, y0 in boxes:
        theta = 0.0
        if corrupt and cfg.rotation_deg > 0:
            theta = math.radians(cor.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        _paint_rotated(img, glyph(ch, cfg.scale), x0, y0, fg_rgb, theta)
    if corrupt:
        if cfg.blur_sigma > 0:
            sigma = cor.uniform(0.0, cfg.blur_sigma)
            img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
        if cfg.noise_std > 0:
            std = cor.uniform(0.0, cfg.noise_std)
            img = img + cor.normal(0.0, std, size=img.shape)
        if cfg.occlusion_prob > 0 and cor.random() < cfg.occlusion_prob:
            oh = int(cor.integers(2, 5)) * cfg.scale
            ow = int(cor.integers(2, 4)) * cfg.scale
            _, bx, by = boxes[int(cor.integers(0, len(boxes)))]
            oy = int(np.clip(by + cor.integers(0, GLYPH_H * cfg.scale), 0, cfg.H - oh))
            ox = int(np.clip(bx + cor.integers(0, GLYPH_W * cfg.scale), 0, cfg.W - ow))
            img[oy:oy + oh, ox:ox + ow] = cor.uniform(0.0, 1.0)
    return SegSample(_quantize(img), class_map, np.array(centers, dtype=np.float64).reshape(-1, 2), label)


def generate_corpus(cfg: CorpusConfig, n: int, stream: int = 0, start: int = 0) -> list[SegSample]:
    return [render_sample(cfg, start + i, stream) for i in range(n)]

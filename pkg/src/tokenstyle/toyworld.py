"""Procedural toy scenes, captions, style transforms and independent oracles.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
function here is a pure function of its inputs (and of the RNG passed in).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

IMAGE_SIDE = 64

# Closed under inversion, so inverted scenes stay inside the palette.
PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
COLORS = tuple(PALETTE)
SHAPES = ("circle", "square", "triangle")
STYLES = ("pixelate", "warm", "sketch", "pastel", "invert")
ORACLE_STYLES = ("pixelate", "warm", "sketch", "pastel")

MIN_SIZE = 10
MAX_SIZE = 20
# keeps outlines off the image border so sketch contours stay closed
MARGIN = 2

_WARM_TARGET = np.array([1.0, 0.5, 0.0])
_WARM_MIX = 0.75
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    background_color: str
    shape: str
    shape_color: str
    center: tuple[int, int]  # (x, y) in pixels
    size: int  # half-extent in pixels
    side: int = IMAGE_SIDE

    def validate(self) -> None:
        if self.background_color not in PALETTE or self.shape_color not in PALETTE:
            raise ConfigError(f"unknown color in {self}")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.shape_color == self.background_color:
            raise ConfigError("shape color equals background color")
        x, y = self.center
        r = self.size
        lo, hi = r + MARGIN, self.side - r - MARGIN
        if not (lo <= x <= hi and lo <= y <= hi):
            raise ConfigError(f"shape leaves the image: {self}")


@dataclass(frozen=True)
class StyleId:
    name: str

    def __post_init__(self):
        if self.name not in STYLES:
            raise ConfigError(f"unknown style {self.name!r}; expected one of {STYLES}")


def _style_name(style) -> str:
    name = style.name if isinstance(style, StyleId) else str(style)
    if name not in STYLES:
        raise ConfigError(f"unknown style {name!r}; expected one of {STYLES}")
    return name


def sample_scene(rng: np.random.Generator, side: int = IMAGE_SIDE) -> SceneSpec:
    bg, fg = rng.choice(len(COLORS), size=2, replace=False)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
    lo, hi = size + MARGIN, side - size - MARGIN
    x = int(rng.integers(lo, hi + 1))
    y = int(rng.integers(lo, hi + 1))
    return SceneSpec(COLORS[bg], shape, COLORS[fg], (x, y), size, side)


def shape_mask(scene: SceneSpec) -> np.ndarray:
    """Boolean (H, W) mask of the pixels covered by the scene's shape."""
    n = scene.side
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    cx, cy = scene.center
    r = scene.size
    if scene.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if scene.shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    # apex at top, base along the bottom of the bounding box
    t = (ys - (cy - r)) / (2.0 * r)
    return (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= t * r)


def render(scene: SceneSpec) -> np.ndarray:
    n = scene.side
    img = np.empty((n, n, 3))
    img[:] = PALETTE[scene.background_color]
    img[shape_mask(scene)] = PALETTE[scene.shape_color]
    return img


def caption(scene: SceneSpec) -> str:
    return f"a {scene.shape_color} {scene.shape} on a {scene.background_color} background"


def caption_vocabulary() -> list[str]:
    words = {"a", "on", "background", *SHAPES, *COLORS}
    return sorted(words)


# -- style transforms -------------------------------------------------------

def _luma(img):
    return img @ _LUMA


def _sobel_max(img):
    """Per-channel Sobel magnitude, max over channels."""
    mags = [np.hypot(ndimage.sobel(img[..., c], 0, mode="nearest"),
                     ndimage.sobel(img[..., c], 1, mode="nearest"))
            for c in range(img.shape[-1])]
    return np.max(mags, axis=0)


def block_mean(img: np.ndarray, block: int) -> np.ndarray:
    h, w, c = img.shape
    if h % block or w % block:
        raise ConfigError(f"image {h}x{w} not divisible by block {block}")
    return img.reshape(h // block, block, w // block, block, c).mean(axis=(1, 3))


def apply_style(image: np.ndarray, style) -> np.ndarray:
    name = _style_name(style)
    img = np.asarray(image, dtype=np.float64)
    if name == "pixelate":
        out = np.repeat(np.repeat(block_mean(img, 8), 8, axis=0), 8, axis=1)
    elif name == "warm":
        out = (1 - _WARM_MIX) * img + _WARM_MIX * _WARM_TARGET
    elif name == "sketch":
        edge = np.clip(_sobel_max(img) / 2.0, 0.0, 1.0)
        out = np.repeat((1.0 - edge)[..., None], 3, axis=2)
    elif name == "pastel":
        gray = _luma(img)[..., None]
        out = 0.5 + 0.45 * (0.5 * img + 0.5 * gray)
    else:
        out = 1.0 - img
    return np.clip(out, 0.0, 1.0)


# -- oracles ----------------------------------------------------------------

PIXELATE_STD_SCALE = 0.1
WARM_RADIUS = 0.75
SKETCH_INK_FLOOR = 0.1
FOREGROUND_FRACTION = 0.35
CLOSING_ITERATIONS = 2


def _sat_val(img):
    val = img.max(axis=-1)
    delta = val - img.min(axis=-1)
    sat = np.where(val > 0, delta / np.where(val > 0, val, 1), 0.0)
    return sat, val


def style_oracle(image: np.ndarray, style) -> float:
    """Deterministic stylization detector with output in [0, 1]."""
    name = _style_name(style)
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if name == "pixelate":
        h, w, c = img.shape
        blocks = img.reshape(h // 8, 8, w // 8, 8, c)
        std = blocks.std(axis=(1, 3)).mean()
        return float(1.0 - min(1.0, std / PIXELATE_STD_SCALE))
    if name == "warm":
        dist = np.linalg.norm(img - _WARM_TARGET, axis=-1)
        return float(np.clip(1.0 - dist / WARM_RADIUS, 0.0, 1.0).mean())
    if name == "sketch":
        grayness = 1.0 - (img.max(axis=-1) - img.min(axis=-1)).mean()
        ink = np.clip((1.0 - _luma(img) - SKETCH_INK_FLOOR) / (1 - SKETCH_INK_FLOOR), 0, 1)
        band = ndimage.binary_dilation(_sobel_max(img) > 0.5)
        total = ink.sum()
        on_edges = (ink * band).sum() / total if total > 0 else 0.0
        return float(np.clip(grayness * on_edges, 0.0, 1.0))
    if name == "pastel":
        sat, val = _sat_val(img)
        # light but not pure white, and washed out
        bright = np.clip((val - 0.4) / 0.1, 0, 1) * np.clip((1.0 - val) / 0.03, 0, 1)
        desat = np.clip(1.0 - sat / 0.6, 0, 1)
        return float((bright * desat).mean())
    raise ConfigError(f"style {name!r} has no oracle")


def foreground_region(image: np.ndarray) -> np.ndarray:
    """Hole-filled connected region most dissimilar from the border background."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    bg = np.median(border, axis=0)
    dist = np.abs(img - bg).max(axis=-1)
    peak = dist.max()
    if peak < 0.1:
        return np.zeros(dist.shape, dtype=bool)
    # closing bridges the small gaps decoding leaves in thin outlines (sketch)
    mask = ndimage.binary_closing(dist > FOREGROUND_FRACTION * peak, structure=np.ones((3, 3)),
                                  iterations=CLOSING_ITERATIONS)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    mass = ndimage.sum(dist, labels, index=np.arange(1, count + 1))
    region = labels == (int(np.argmax(mass)) + 1)
    return ndimage.binary_fill_holes(region)


def content_oracle(image: np.ndarray, scene: SceneSpec) -> float:
    """IoU between the true shape mask and the dominant foreground region."""
    region = foreground_region(image)
    truth = shape_mask(scene)
    union = np.logical_or(region, truth).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(region, truth).sum() / union)

"""Synthetic aligned face/glasses dataset and image-folder ingestion.

Scenes are a two-colour linear gradient with an anti-aliased face disc.  The
object is a glasses sprite (two lenses and a bridge) always drawn at the same
eye line, so the with/without sets are aligned by construction and every
with-object image differs from its object-free counterfactual only under the
sprite.

Sampling order for :func:`make_dataset` with :class:`~genegan.rng.SplitMix64`
seeded by ``seed``: first the ``n_with`` samples, each drawing scene fields
(bg_hue, gradient_angle, face_cx, face_cy, face_radius, skin_tone) then
object fields (style index, width, darkness, tint); then the ``n_without``
samples, each drawing scene fields only.  Every field is ``low + (high - low)
* u`` for a uniform draw ``u``; style is ``floor(3 * u)``.
"""
from __future__ import annotations

import colorsys
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ppm import ImageFormatError, load_image
from .rng import SplitMix64

SIZES = (16, 32, 64)
STYLES = ("round", "square", "shaded")

EYE_LINE = 0.42
LENS_OFFSET = 0.17
LENS_RADIUS = 0.09
SUPERSAMPLE = 4

SKIN_LIGHT = np.array([0.96, 0.80, 0.69])
SKIN_DARK = np.array([0.45, 0.30, 0.20])
RIM_WARM = np.array([0.90, 0.30, 0.10])
RIM_COOL = np.array([0.10, 0.40, 0.95])

WIDTH_RANGE = (0.05, 0.12)
DARKNESS_RANGE = (0.2, 1.0)


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    bg_hue: float
    gradient_angle: float
    face_cx: float
    face_cy: float
    face_radius: float
    skin_tone: float


@dataclass(frozen=True)
class ObjectSpec:
    present: bool
    style: str = "round"
    width: float = 0.08
    darkness: float = 0.6
    tint: float = 0.5


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: int
    scene: SceneSpec | None = None
    object: ObjectSpec | None = None
    source: str = field(default="")


# ---------------------------------------------------------------------------
# rendering

@functools.lru_cache(maxsize=8)
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled coordinates in [0, 1]: arrays of shape (size, size, s*s)."""
    s = SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    base = np.arange(size)
    ys = ((base[:, None] + offs[None, :]) / size).reshape(-1)
    xs = ys.copy()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy = yy.reshape(size, s, size, s).transpose(0, 2, 1, 3).reshape(size, size, s * s)
    xx = xx.reshape(size, s, size, s).transpose(0, 2, 1, 3).reshape(size, size, s * s)
    return xx, yy


def _check_size(size: int) -> None:
    if size not in SIZES:
        raise ValueError(f"unsupported image size {size}; choose one of {SIZES}")


def render_scene(spec: SceneSpec, size: int) -> np.ndarray:
    """Background gradient plus face disc, float32 3 x size x size in [0, 1]."""
    _check_size(size)
    xx, yy = _grid(size)
    c1 = np.array(colorsys.hsv_to_rgb(spec.bg_hue % 1.0, 0.55, 0.92))
    c2 = np.array(colorsys.hsv_to_rgb(spec.bg_hue % 1.0, 0.55, 0.35))
    px = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(px, px, indexing="xy")
    t = 0.5 + ((gx - 0.5) * math.cos(spec.gradient_angle) + (gy - 0.5) * math.sin(spec.gradient_angle)) / math.sqrt(2)
    bg = c1[:, None, None] * (1 - t) + c2[:, None, None] * t

    cov = _face_coverage(spec, size)
    skin = SKIN_LIGHT * (1 - spec.skin_tone) + SKIN_DARK * spec.skin_tone
    img = bg * (1 - cov) + skin[:, None, None] * cov
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _face_coverage(spec: SceneSpec, size: int) -> np.ndarray:
    xx, yy = _grid(size)
    d2 = (xx - 0.5 - spec.face_cx) ** 2 + (yy - 0.5 - spec.face_cy) ** 2
    return (d2 <= spec.face_radius ** 2).mean(axis=2)


@functools.lru_cache(maxsize=512)
def sprite_coverage(style: str, width: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Anti-aliased (rim, lens-interior) coverage maps of the glasses sprite."""
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    xx, yy = _grid(size)
    outer = LENS_RADIUS + width / 2
    inner = LENS_RADIUS - width / 2
    rim = np.zeros(xx.shape, dtype=bool)
    lens = np.zeros(xx.shape, dtype=bool)
    for cx in (0.5 - LENS_OFFSET, 0.5 + LENS_OFFSET):
        dx, dy = np.abs(xx - cx), np.abs(yy - EYE_LINE)
        d = np.maximum(dx, dy) if style == "square" else np.hypot(dx, dy)
        rim |= (d <= outer) & (d > inner)
        lens |= d <= inner
    half = width / 4
    bridge = ((np.abs(yy - EYE_LINE) <= half)
              & (np.abs(xx - 0.5) <= LENS_OFFSET - LENS_RADIUS))
    rim |= bridge & ~lens
    rim_cov = rim.mean(axis=2)
    lens_cov = lens.mean(axis=2)
    rim_cov.flags.writeable = False
    lens_cov.flags.writeable = False
    return rim_cov, lens_cov


def rim_color(tint: float, darkness: float) -> np.ndarray:
    """Linear blend from a warm to a cool frame colour, dimmed by darkness."""
    return (RIM_WARM * (1 - tint) + RIM_COOL * tint) * (1.0 - 0.6 * darkness)


def lens_alpha(style: str, darkness: float) -> float:
    return 0.3 + 0.65 * darkness if style == "shaded" else 0.25 * darkness


def composite_object(base: np.ndarray, spec: ObjectSpec) -> np.ndarray:
    """Alpha-composite the glasses sprite onto ``base``.

    Pixels the sprite does not touch are copied from ``base`` unchanged.
    """
    if not spec.present:
        raise ValueError("composite_object called with an absent object")
    size = base.shape[-1]
    rim_cov, lens_cov = sprite_coverage(spec.style, float(spec.width), size)
    rc = rim_color(spec.tint, spec.darkness)[:, None, None]
    a_lens = lens_cov * lens_alpha(spec.style, spec.darkness)
    out = base * (1 - a_lens) + 0.25 * rc * a_lens
    out = out * (1 - rim_cov) + rc * rim_cov
    mask = (rim_cov > 0) | (lens_cov > 0)
    return np.where(mask[None], np.clip(out, 0, 1), base).astype(base.dtype)


def sprite_mask(spec: ObjectSpec, size: int) -> np.ndarray:
    rim_cov, lens_cov = sprite_coverage(spec.style, float(spec.width), size)
    return (rim_cov > 0) | (lens_cov > 0)


def render_sample(scene: SceneSpec, obj: ObjectSpec | None, size: int) -> np.ndarray:
    img = render_scene(scene, size)
    if obj is not None and obj.present:
        img = composite_object(img, obj)
    return img


# ---------------------------------------------------------------------------
# sampling

def draw_scene(rng: SplitMix64) -> SceneSpec:
    return SceneSpec(
        bg_hue=rng.random(),
        gradient_angle=rng.uniform(0.0, 2 * math.pi),
        face_cx=rng.uniform(-0.05, 0.05),
        face_cy=rng.uniform(-0.05, 0.05),
        face_radius=rng.uniform(0.3, 0.4),
        skin_tone=rng.random(),
    )


def draw_object(rng: SplitMix64) -> ObjectSpec:
    return ObjectSpec(
        present=True,
        style=STYLES[rng.integers(3)],
        width=rng.uniform(*WIDTH_RANGE),
        darkness=rng.uniform(*DARKNESS_RANGE),
        tint=rng.random(),
    )


def make_dataset(n_with: int, n_without: int, size: int, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Two unpaired sets: label-1 images with glasses, label-0 images without."""
    if n_with <= 0 or n_without <= 0:
        raise ValueError("sample counts must be positive")
    _check_size(size)
    rng = SplitMix64(seed)
    with_set, without_set = [], []
    for i in range(n_with):
        scene = draw_scene(rng)
        obj = draw_object(rng)
        with_set.append(Sample(render_sample(scene, obj, size), 1, scene, obj, f"synthetic/with/{i}"))
    for i in range(n_without):
        scene = draw_scene(rng)
        without_set.append(Sample(render_scene(scene, size), 0, scene, ObjectSpec(False),
                                  f"synthetic/without/{i}"))
    return with_set, without_set


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# folders

def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop to a square, then bilinear-resize (half-pixel centres) to ``size``."""
    _, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[:, top:top + side, left:left + side]
    if side == size:
        return np.ascontiguousarray(img, dtype=np.float32)
    coords = (np.arange(size) + 0.5) * side / size - 0.5
    coords = np.clip(coords, 0, side - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, side - 1)
    f = coords - i0
    rows = img[:, i0, :] * (1 - f)[None, :, None] + img[:, i1, :] * f[None, :, None]
    out = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]
    return out.astype(np.float32)


def _ingest_dir(path: Path, label: int, size: int) -> list[Sample]:
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise DataError(f"no .ppm/.pgm files in {path}")
    out = []
    for f in files:
        try:
            img = load_image(f)
        except (OSError, ImageFormatError) as exc:
            raise DataError(f"cannot read image {f}: {exc}") from exc
        out.append(Sample(center_crop_resize(img, size), label, source=str(f)))
    return out


def ingest_folder(path_with, path_without, size: int) -> tuple[list[Sample], list[Sample]]:
    """Load ``path_with`` (label 1) and ``path_without`` (label 0) in lexicographic order."""
    return _ingest_dir(Path(path_with), 1, size), _ingest_dir(Path(path_without), 0, size)

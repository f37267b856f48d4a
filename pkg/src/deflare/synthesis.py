"""Paired flare / clean data synthesis.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Scene
and flare assets are display-encoded; they are linearized with an inverse
gamma, augmented and composited additively in linear light, then
re-encoded for storage.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .metrics import luminance

REFERENCE_SIZE = 512

# closed intervals each sampled field must fall in
PARAM_RANGES = {
    "gamma": (1.8, 2.2),
    "rotation": (0.0, 2 * math.pi),
    "translation": (-300.0, 300.0),
    "shear": (-math.pi / 9, math.pi / 9),
    "scale": (0.8, 1.5),
    "blur": (0.1, 3.0),
    "color_shift": (-0.02, 0.02),
    "bg_rgb_scale": (0.5, 1.2),
}

LIGHT_THRESHOLD = 0.5
STREAK_THRESHOLD = 0.3
STREAK_ASPECT = 3.0
GLARE_THRESHOLD = 0.05


@dataclass
class AugmentParams:
    gamma: float = 2.2
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)  # (x, y) px at 512x512
    shear: float = 0.0
    scale: float = 1.0
    blur: float = 0.0  # gaussian sigma in px at 512x512; 0 disables
    flip: bool = False
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bg_rgb_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_var: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        d = dict(d)
        for k in ("translation", "color_shift", "bg_rgb_scale"):
            d[k] = tuple(d[k])
        return cls(**d)

    def out_of_range(self) -> list[str]:
        """Names of fields outside their sampling interval."""
        bad = []
        for name, (lo, hi) in PARAM_RANGES.items():
            vals = np.atleast_1d(getattr(self, name))
            if np.any(vals < lo) or np.any(vals > hi):
                bad.append(name)
        if self.noise_var < 0:
            bad.append("noise_var")
        return bad


def sample_augment_params(rng, chi2_df: int = 1) -> AugmentParams:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    u = rng.uniform
    r = PARAM_RANGES
    return AugmentParams(
        gamma=float(u(*r["gamma"])),
        rotation=float(u(*r["rotation"])),
        translation=tuple(float(v) for v in u(*r["translation"], size=2)),
        shear=float(u(*r["shear"])),
        scale=float(u(*r["scale"])),
        blur=float(u(*r["blur"])),
        flip=bool(rng.random() < 0.5),
        color_shift=tuple(float(v) for v in u(*r["color_shift"], size=3)),
        bg_rgb_scale=tuple(float(v) for v in u(*r["bg_rgb_scale"], size=3)),
        noise_var=float(0.01 * rng.chisquare(chi2_df)),
    )


@dataclass
class FlareAsset:
    flare: np.ndarray
    light_source: np.ndarray
    kind: str = "scattering"

    def __post_init__(self):
        if self.flare.shape != self.light_source.shape:
            raise ValueError(
                f"flare {self.flare.shape} and light source {self.light_source.shape} differ in shape"
            )
        if self.kind not in ("scattering", "reflective"):
            raise ValueError(f"unknown flare kind {self.kind!r}")


@dataclass
class CompositeSample:
    input: np.ndarray
    reference: np.ndarray
    flare: np.ndarray
    light_source: np.ndarray
    masks: dict[str, np.ndarray]
    seed: int
    params: AugmentParams
    kind: str = "scattering"
    linear: dict[str, np.ndarray] = field(default_factory=dict)  # input/reference/flare before re-gamma


def inverse_gamma(image, gamma: float):
    """Linearize display-encoded values: x ** gamma."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return np.power(np.clip(image, 0.0, 1.0), gamma)


def apply_gamma(image, gamma: float):
    """Re-encode linear values: x ** (1 / gamma)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return np.power(np.clip(image, 0.0, 1.0), 1.0 / gamma)


def affine_matrix(p: AugmentParams, shape) -> np.ndarray:
    """3x3 homogeneous map from source to destination pixel coords, (x, y) order.

    Rotation, shear, scale and flip act about the image centre; the
    translation is rescaled from the 512 px reference to this image size.
    """
    h, w = shape[:2]
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    cos, sin = math.cos(p.rotation), math.sin(p.rotation)
    rot = np.array([[cos, -sin], [sin, cos]])
    shear = np.array([[1.0, math.tan(p.shear)], [0.0, 1.0]])
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0])
    m = rot @ shear @ (p.scale * flip)
    t = np.array([p.translation[0] * w / REFERENCE_SIZE, p.translation[1] * h / REFERENCE_SIZE])
    out = np.eye(3)
    out[:2, :2] = m
    out[:2, 2] = c + t - m @ c
    return out


def warp(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a forward (x, y) affine map with bilinear sampling and zero fill."""
    inv = np.linalg.inv(matrix)
    # scipy wants the destination -> source map in (row, col) order
    swap = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    inv_rc = swap @ inv @ swap
    if image.ndim == 2:
        return ndimage.affine_transform(image, inv_rc[:2, :2], inv_rc[:2, 2], order=1, mode="constant")
    return np.stack(
        [
            ndimage.affine_transform(image[..., k], inv_rc[:2, :2], inv_rc[:2, 2], order=1, mode="constant")
            for k in range(image.shape[-1])
        ],
        axis=-1,
    )


def _blur(image, sigma):
    if sigma <= 0:
        return image
    sig = (sigma, sigma) + (0,) * (image.ndim - 2)
    return ndimage.gaussian_filter(image, sig, mode="constant")


def augment_flare(asset: FlareAsset, p: AugmentParams | None = None, seed: int = 0) -> FlareAsset:
    """Shared affine + blur on flare and light source, colour shift on the flare.

    Translation and blur width are given at 512 px and rescaled to the
    asset size. ``p`` is sampled from ``seed`` when not given.
    """
    if p is None:
        p = sample_augment_params(seed)
    placed = _place(asset, p)
    flare = np.clip(placed.flare + np.asarray(p.color_shift), 0.0, 1.0)
    return FlareAsset(flare, placed.light_source, asset.kind)


def _place(asset: FlareAsset, p: AugmentParams) -> FlareAsset:
    m = affine_matrix(p, asset.flare.shape)
    sigma = p.blur * asset.flare.shape[0] / REFERENCE_SIZE
    flare = _blur(warp(asset.flare, m), sigma)
    light = _blur(warp(asset.light_source, m), sigma)
    return FlareAsset(np.clip(flare, 0.0, 1.0), np.clip(light, 0.0, 1.0), asset.kind)


def augment_background(image: np.ndarray, p: AugmentParams | None = None, seed: int = 0) -> np.ndarray:
    """Per-channel gain and additive gaussian noise of variance ``p.noise_var``."""
    rng = np.random.default_rng(seed)
    if p is None:
        p = sample_augment_params(rng)
    out = image * np.asarray(p.bg_rgb_scale)
    if p.noise_var > 0:
        out = out + rng.normal(0.0, math.sqrt(p.noise_var), size=out.shape)
    return np.clip(out, 0.0, 1.0)


def composite(background: np.ndarray, flare_layer: np.ndarray) -> dict:
    if background.shape != flare_layer.shape:
        raise ValueError(f"background {background.shape} and flare {flare_layer.shape} differ in shape")
    return {
        "input": np.clip(background + flare_layer, 0.0, 1.0),
        "reference": background,
        "flare": flare_layer,
    }


def _elongation(rows: np.ndarray, cols: np.ndarray) -> float:
    """Ratio of principal axis lengths of a pixel set."""
    if len(rows) < 2:
        return 1.0
    cov = np.cov(np.stack([rows, cols]).astype(float)) + np.eye(2) / 12.0
    ev = np.linalg.eigvalsh(cov)
    return float(math.sqrt(ev[1] / ev[0]))


def derive_masks(flare_layer: np.ndarray, light_source_layer: np.ndarray) -> dict[str, np.ndarray]:
    """Disjoint light-source / streak / glare masks from the flare and light layers."""
    light = luminance(light_source_layer) > LIGHT_THRESHOLD
    lum = luminance(flare_layer)

    bright = (lum > STREAK_THRESHOLD) & ~light
    labels, n = ndimage.label(bright, structure=np.ones((3, 3)))
    streak = np.zeros_like(light)
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == k
        rows, cols = np.nonzero(comp)
        if _elongation(rows, cols) > STREAK_ASPECT:
            streak[sl] |= comp

    glare = (lum > GLARE_THRESHOLD) & ~light & ~streak
    return {"glare": glare, "streak": streak, "light_source": light}


# ---------------------------------------------------------------------------
# procedural assets


@dataclass
class FlareParams:
    kind: str = "scattering"
    core_radius: float = 0.045  # fractions of the canvas size
    core_color: tuple = (1.0, 1.0, 1.0)
    glow_sigma: float = 0.18
    glow_amp: float = 0.22
    glow_color: tuple = (1.0, 0.85, 0.6)
    streak_angles: tuple = ()
    streak_width: float = 0.6  # px
    streak_length: float = 0.4
    streak_amp: float = 0.8
    ring_radius: float = 0.28
    ring_width: float = 1.2  # px
    ring_amp: float = 0.0
    ghosts: tuple = ()  # (distance, angle, radius, amp, (r, g, b)) fractions of size


def sample_flare_params(rng, kind: str | None = None) -> FlareParams:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if kind is None:
        kind = "scattering" if rng.random() < 0.5 else "reflective"
    n = int(rng.integers(4, 9))
    base = rng.uniform(0, 2 * math.pi)
    angles = tuple(float((base + 2 * math.pi * i / n + rng.normal(0, 0.15)) % (2 * math.pi)) for i in range(n))
    warm = rng.uniform(0.5, 1.0)
    params = FlareParams(
        kind=kind,
        core_radius=float(rng.uniform(0.03, 0.06)),
        glow_sigma=float(rng.uniform(0.1, 0.25)),
        glow_amp=float(rng.uniform(0.15, 0.28)),
        glow_color=(1.0, float(0.6 + 0.4 * warm), float(0.3 + 0.6 * warm)),
        streak_angles=angles,
        streak_width=float(rng.uniform(0.45, 1.0)),
        streak_length=float(rng.uniform(0.25, 0.5)),
        streak_amp=float(rng.uniform(0.5, 0.9)),
        ring_radius=float(rng.uniform(0.2, 0.35)),
        ring_amp=float(rng.uniform(0.08, 0.2)),
    )
    if kind == "reflective":
        direction = rng.uniform(0, 2 * math.pi)
        params.streak_amp *= 0.7
        params.ghosts = tuple(
            (
                float(rng.uniform(0.1, 0.45)) * (1 if rng.random() < 0.5 else -1),
                float(direction),
                float(rng.uniform(0.015, 0.06)),
                float(rng.uniform(0.06, 0.2)),
                tuple(float(v) for v in rng.uniform(0.3, 1.0, size=3)),
            )
            for _ in range(int(rng.integers(3, 6)))
        )
    return params


def render_flare(fp: FlareParams, size: int) -> FlareAsset:
    """Rasterize a flare centred on a ``size x size`` canvas."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - c, yy - c
    r = np.hypot(dx, dy)
    flare = np.zeros((size, size, 3))

    glow = fp.glow_amp * np.exp(-(r**2) / (2 * (fp.glow_sigma * size) ** 2))
    flare += glow[..., None] * np.asarray(fp.glow_color)

    length = fp.streak_length * size
    for a in fp.streak_angles:
        along = dx * math.cos(a) + dy * math.sin(a)
        across = -dx * math.sin(a) + dy * math.cos(a)
        ray = np.exp(-(across**2) / (2 * fp.streak_width**2)) * np.exp(-np.maximum(along, 0) / length)
        ray[along < 0] = 0.0
        flare += fp.streak_amp * ray[..., None] * np.asarray(fp.glow_color)

    if fp.ring_amp > 0:
        for k, shift in enumerate((-0.6, 0.0, 0.6)):
            ring = np.exp(-((r - fp.ring_radius * size - shift) ** 2) / (2 * fp.ring_width**2))
            flare[..., k] += fp.ring_amp * ring

    for dist, ang, rad, amp, color in fp.ghosts:
        gx, gy = dist * size * math.cos(ang), dist * size * math.sin(ang)
        d = np.hypot(dx - gx, dy - gy)
        disk = np.clip(rad * size + 0.5 - d, 0.0, 1.0)
        flare += amp * disk[..., None] * np.asarray(color)

    core = np.clip(fp.core_radius * size + 0.5 - r, 0.0, 1.0)
    light = core[..., None] * np.asarray(fp.core_color)
    flare = np.maximum(flare, light)
    return FlareAsset(np.clip(flare, 0.0, 1.0), np.clip(light, 0.0, 1.0), fp.kind)


def procedural_flare(seed: int, size: int = 64, kind: str | None = None) -> FlareAsset:
    """Glow, 4-8 streaks, a chromatic ring and a saturated core; reflective
    flares also carry a chain of ghost disks."""
    return render_flare(sample_flare_params(np.random.default_rng(seed), kind), size)


def procedural_scene(seed: int, size: int = 64) -> np.ndarray:
    """A synthetic night street: dark sky gradient, buildings, lit windows, road texture."""
    rng = np.random.default_rng(seed)
    yy = np.linspace(0, 1, size)[:, None, None]
    top = rng.uniform(0.0, 0.08, 3)
    horizon = rng.uniform(0.08, 0.25, 3)
    img = np.broadcast_to(top + (horizon - top) * yy, (size, size, 3)).copy()

    ground = int(size * rng.uniform(0.65, 0.85))
    for _ in range(int(rng.integers(4, 10))):
        w = int(rng.integers(size // 10, size // 3))
        h = int(rng.integers(size // 6, int(size * 0.6)))
        x0 = int(rng.integers(-w // 2, size - w // 2))
        y0 = max(0, ground - h)
        tone = rng.uniform(0.05, 0.3) * rng.uniform(0.7, 1.0, 3)
        img[y0:ground, max(x0, 0) : x0 + w] = tone
        step = max(2, size // 16)
        for wy in range(y0 + 1, ground - 1, step):
            for wx in range(max(x0, 0) + 1, min(x0 + w, size) - 1, step):
                if rng.random() < 0.35:
                    lit = rng.uniform(0.4, 0.95) * np.array([1.0, rng.uniform(0.7, 0.95), rng.uniform(0.3, 0.7)])
                    img[wy : wy + max(1, step // 2), wx : wx + max(1, step // 2)] = lit

    road = rng.uniform(0.05, 0.2) + 0.05 * rng.standard_normal((size - ground, size, 1))
    img[ground:] = np.clip(road, 0, 1) * np.array([1.0, 0.95, 0.9])
    img += 0.015 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def fit_square(image: np.ndarray, size: int) -> np.ndarray:
    """Resize an (H, W, 3) array to size x size with bilinear zoom."""
    if image.shape[:2] == (size, size):
        return image
    zoom = (size / image.shape[0], size / image.shape[1], 1)
    return np.clip(ndimage.zoom(image, zoom, order=1), 0.0, 1.0)[:size, :size]


def make_sample(scene: np.ndarray, asset: FlareAsset, seed: int) -> CompositeSample:
    """Full pipeline for one pair, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    p = sample_augment_params(rng)
    noise_seed = int(rng.integers(2**32))

    size = scene.shape[0]
    if scene.shape[:2] != (size, size):
        raise ValueError(f"scene must be square, got {scene.shape[:2]}")
    asset = FlareAsset(fit_square(asset.flare, size), fit_square(asset.light_source, size), asset.kind)

    lin_scene = inverse_gamma(scene, p.gamma)
    lin_asset = FlareAsset(inverse_gamma(asset.flare, p.gamma), inverse_gamma(asset.light_source, p.gamma), asset.kind)
    aug = augment_flare(lin_asset, p)
    placed = _place(lin_asset, p)
    background = augment_background(lin_scene, p, noise_seed)
    parts = composite(background, aug.flare)

    out = {k: apply_gamma(v, p.gamma) for k, v in parts.items()}
    return CompositeSample(
        input=out["input"],
        reference=out["reference"],
        flare=out["flare"],
        light_source=apply_gamma(aug.light_source, p.gamma),
        # masks follow the flare's structure, so the scene-wide colour shift is left out
        masks=derive_masks(apply_gamma(placed.flare, p.gamma), apply_gamma(placed.light_source, p.gamma)),
        seed=seed,
        params=p,
        kind=asset.kind,
        linear=parts,
    )

"""Paired rainy/clean light-field synthesis.

The rainy view is ``I = clip(B + alpha * Mb(R) + (1 - alpha) * A0 * A, 0, 1)``
with fog ``A = 1 - exp(-beta * D)``.  Streaks are anti-aliased line segments
placed in a shared 3D population: each streak carries a disparity, and its
centre in view ``(u, v)`` is offset by ``disparity * (u - uc, v - vc)``
pixels from the central view, so one streak shows up at consistent,
shifted positions across the sub-view grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError, ShapeError
from .lightfield import LightField, read_lfi, write_lfi


@dataclass
class SynthParams:
    alpha: float = 0.6
    beta: float = 1.8
    a0: float = 1.0
    streak_count: int = 60
    length_min: float = 6.0
    length_max: float = 16.0
    width_min: float = 0.6
    width_max: float = 1.6
    angle_min: float = -0.35  # radians from vertical
    angle_max: float = 0.35
    opacity_min: float = 0.35
    opacity_max: float = 0.9
    disparity_min: float = -1.5  # pixels per angular step
    disparity_max: float = 1.5
    blur_length: int = 5
    blur_angle: float = float(np.pi / 2)  # radians from the x axis; pi/2 is vertical
    rng_seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.beta <= 0:
            raise DomainError(f"beta must be positive, got {self.beta}")
        if not 0.0 < self.a0 <= 1.0:
            raise DomainError(f"a0 must lie in (0,1], got {self.a0}")
        if self.streak_count < 0:
            raise DomainError("streak_count must be non-negative")
        if self.blur_length < 1:
            raise DomainError("blur_length must be at least 1")
        for lo, hi, name in [(self.length_min, self.length_max, "length"),
                             (self.width_min, self.width_max, "width"),
                             (self.angle_min, self.angle_max, "angle"),
                             (self.opacity_min, self.opacity_max, "opacity"),
                             (self.disparity_min, self.disparity_max, "disparity")]:
            if not lo < hi:
                raise DomainError(f"{name} range [{lo}, {hi}] is degenerate")

    def to_manifest(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_manifest(cls, text: str) -> "SynthParams":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise FormatError(f"unknown synthesis key {key!r}")
            vals[key] = int(raw) if kinds[key] in ("int", int) else float(raw)
        return cls(**vals)


@dataclass
class Streak:
    cy: float  # centre in the central view, pixels
    cx: float
    length: float
    width: float
    angle: float
    opacity: float
    disparity: float


@dataclass
class RainScene:
    clean: LightField
    static_streaks: LightField
    streaks: LightField
    depth: LightField
    transmission: LightField
    fog: LightField
    rainy: LightField
    params: SynthParams

    def rain_target(self) -> np.ndarray:
        """Additive rain contribution ``alpha * Mb(R)`` on 3 channels, ``[U,V,3,H,W]``."""
        return np.repeat(self.params.alpha * self.streaks.data, 3, axis=2)


def sample_streaks(params: SynthParams, H: int, W: int, rng: np.random.Generator) -> list[Streak]:
    out = []
    for _ in range(params.streak_count):
        out.append(Streak(
            cy=rng.uniform(-0.1 * H, 1.1 * H), cx=rng.uniform(-0.1 * W, 1.1 * W),
            length=rng.uniform(params.length_min, params.length_max),
            width=rng.uniform(params.width_min, params.width_max),
            angle=rng.uniform(params.angle_min, params.angle_max),
            opacity=rng.uniform(params.opacity_min, params.opacity_max),
            disparity=rng.uniform(params.disparity_min, params.disparity_max),
        ))
    return out


def streak_center(s: Streak, du: float, dv: float) -> tuple[float, float]:
    """Centre of a streak in the view offset ``(du, dv)`` from the central one."""
    return s.cy + s.disparity * du, s.cx + s.disparity * dv


def draw_segment(canvas: np.ndarray, cy: float, cx: float, length: float, width: float,
                 angle: float, opacity: float) -> None:
    """Max-composite one anti-aliased segment onto a 2D canvas in place."""
    H, W = canvas.shape
    dy, dx = np.cos(angle), np.sin(angle)  # angle measured from vertical
    half = length / 2.0
    reach = half + width + 1.0
    y0, y1 = int(np.floor(cy - reach)), int(np.ceil(cy + reach)) + 1
    x0, x1 = int(np.floor(cx - reach)), int(np.ceil(cx + reach)) + 1
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, H), min(x1, W)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    ry, rx = yy - cy, xx - cx
    t = np.clip(ry * dy + rx * dx, -half, half)
    dist = np.hypot(ry - t * dy, rx - t * dx)
    cover = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1, x0:x1], opacity * cover, out=canvas[y0:y1, x0:x1])


def rasterize_streaks(params: SynthParams, angular: tuple[int, int], spatial: tuple[int, int],
                      streaks: list[Streak] | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Static streak layer ``[U, V, 1, H, W]`` for a shared streak population."""
    U, V = angular
    H, W = spatial
    if streaks is None:
        rng = np.random.default_rng(params.rng_seed) if rng is None else rng
        streaks = sample_streaks(params, H, W, rng)
    layer = np.zeros((U, V, 1, H, W))
    uc, vc = U // 2, V // 2
    for u in range(U):
        for v in range(V):
            canvas = layer[u, v, 0]
            for s in streaks:
                cy, cx = streak_center(s, u - uc, v - vc)
                draw_segment(canvas, cy, cx, s.length, s.width, s.angle, s.opacity)
    return layer


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised motion-blur kernel: ``length`` samples along ``angle`` (from the x axis)."""
    if length < 1:
        raise DomainError("blur length must be at least 1")
    if length == 1:
        return np.ones((1, 1))
    half = (length - 1) / 2.0
    r = int(np.ceil(half))
    k = np.zeros((2 * r + 1, 2 * r + 1))
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    for i in range(length):
        t = i - half
        y, x = r - t * sin_a, r + t * cos_a  # image rows grow downward
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                if wy * wx > 0:
                    k[y0 + oy, x0 + ox] += wy * wx
    return k / k.sum()


def motion_blur(layer: np.ndarray, blur_length: int, blur_angle: float) -> np.ndarray:
    """Blur every 2D image in ``layer[..., H, W]`` with a line kernel."""
    k = line_kernel(blur_length, blur_angle)
    if k.shape == (1, 1):
        return layer.copy()
    flat = layer.reshape((-1,) + layer.shape[-2:])
    out = np.stack([ndimage.convolve(img, k, mode="constant", cval=0.0) for img in flat])
    return out.reshape(layer.shape)


def depth_to_fog(depth: np.ndarray, beta: float = 1.8) -> tuple[np.ndarray, np.ndarray]:
    """Transmission ``T = exp(-beta D)`` and fog ``A = 1 - T``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise DomainError("depth must be non-negative")
    t = np.exp(-beta * depth)
    return t, 1.0 - t


def compose(clean: np.ndarray, streaks: np.ndarray, fog: np.ndarray, params: SynthParams,
            clip: bool = True) -> np.ndarray:
    """Rainy image from clean background, blurred streaks and fog.

    ``streaks`` and ``fog`` may be single-channel; they broadcast over colour.
    """
    clean = np.asarray(clean, dtype=np.float64)
    try:
        out = clean + params.alpha * streaks + (1.0 - params.alpha) * params.a0 * fog
    except ValueError:
        raise ShapeError(f"cannot compose {np.shape(clean)}, {np.shape(streaks)}, {np.shape(fog)}") from None
    if out.shape != clean.shape:
        raise ShapeError(f"rain/fog layers {np.shape(streaks)}, {np.shape(fog)} do not fit {clean.shape}")
    return np.clip(out, 0.0, 1.0) if clip else out


def synth_scene(params: SynthParams, clean: LightField, depth: LightField) -> RainScene:
    params.validate()
    if clean.angular != depth.angular or clean.spatial != depth.spatial:
        raise ShapeError("clean and depth light fields are not aligned")
    if depth.channels != 1:
        raise ShapeError("depth must be single-channel")
    rng = np.random.default_rng(params.rng_seed)
    static = rasterize_streaks(params, clean.angular, clean.spatial, rng=rng)
    blurred = np.clip(motion_blur(static, params.blur_length, params.blur_angle), 0.0, 1.0)
    t, a = depth_to_fog(depth.data, params.beta)
    rainy = compose(clean.data, blurred, a, params)
    return RainScene(clean=clean, static_streaks=LightField(static), streaks=LightField(blurred),
                     depth=depth, transmission=LightField(t), fog=LightField(a),
                     rainy=LightField(rainy, clean.name), params=params)


# ---------------------------------------------------------------------------
# procedural clean light fields

def procedural_lightfield(angular: tuple[int, int], spatial: tuple[int, int], seed: int,
                          max_disparity: float = 1.0) -> tuple[LightField, LightField]:
    """Textured clean light field and its normalised depth, both seed-deterministic.

    Depth is a vertical ramp (far at the top) plus low-frequency noise.
    Every view samples one analytic texture at coordinates shifted by a
    depth-dependent disparity, so nearer content moves more between views.
    """
    rng = np.random.default_rng(seed)
    U, V = angular
    H, W = spatial
    n_waves = 6
    freq = rng.uniform(0.02, 0.18, size=(3, n_waves, 2)) * rng.choice([-1, 1], size=(3, n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amp = rng.uniform(0.04, 0.12, size=(3, n_waves))
    base = rng.uniform(0.3, 0.55, size=3)
    blobs = [(rng.uniform(0, H), rng.uniform(0, W), rng.uniform(3, 0.25 * min(H, W)),
              rng.uniform(-0.2, 0.2, size=3)) for _ in range(4)]
    dn_freq = rng.uniform(0.01, 0.05, size=(3, 2))
    dn_phase = rng.uniform(0, 2 * np.pi, size=3)

    def texture(y, x):
        out = np.empty((3,) + y.shape)
        for c in range(3):
            val = np.full(y.shape, base[c])
            for i in range(n_waves):
                val += amp[c, i] * np.sin(2 * np.pi * (freq[c, i, 0] * y + freq[c, i, 1] * x) + phase[c, i])
            for by, bx, br, col in blobs:
                val += col[c] / (1.0 + np.exp(np.hypot(y - by, x - bx) - br))
            out[c] = val
        return np.clip(out, 0.0, 1.0)

    def depth_fn(y, x):
        ramp = 1.0 - y / max(H - 1, 1)
        noise = sum(0.06 * np.sin(2 * np.pi * (f[0] * y + f[1] * x) + p) for f, p in zip(dn_freq, dn_phase))
        return np.clip(0.1 + 0.8 * ramp + noise, 0.0, 1.0)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    d_center = depth_fn(yy, xx)
    disp = max_disparity * (1.0 - d_center)
    clean = np.empty((U, V, 3, H, W))
    depth = np.empty((U, V, 1, H, W))
    uc, vc = U // 2, V // 2
    for u in range(U):
        for v in range(V):
            sy, sx = yy + disp * (u - uc), xx + disp * (v - vc)
            clean[u, v] = texture(sy, sx)
            depth[u, v, 0] = depth_fn(sy, sx)
    return LightField(clean, f"scene{seed}"), LightField(depth, f"scene{seed}-depth")


# ---------------------------------------------------------------------------
# bundle persistence

def write_scene(scene: RainScene, directory: str | Path) -> None:
    d = Path(directory)
    write_lfi(scene.rainy, d / "input")
    write_lfi(scene.clean, d / "gt")
    write_lfi(scene.streaks, d / "rain")
    write_lfi(scene.depth, d / "depth")
    write_lfi(scene.fog, d / "fog")
    (d / "synth.txt").write_text(scene.params.to_manifest())


@dataclass
class SceneData:
    """A scene read back from disk; ``clean``/``rain``/``depth`` are absent for real captures."""

    name: str
    rainy: LightField
    clean: LightField | None = None
    rain: LightField | None = None
    depth: LightField | None = None
    alpha: float = 0.6

    def rain_target(self) -> np.ndarray | None:
        if self.rain is None:
            return None
        return np.repeat(self.alpha * self.rain.data, 3, axis=2)

    @classmethod
    def from_scene(cls, scene: RainScene, name: str = "") -> "SceneData":
        return cls(name or scene.rainy.name, scene.rainy, scene.clean, scene.streaks,
                   scene.depth, scene.params.alpha)


def read_scene(directory: str | Path) -> SceneData:
    d = Path(directory)
    if not (d / "input").is_dir():
        raise FormatError(f"{d}: scene has no input/ directory")
    alpha = SynthParams().alpha
    if (d / "synth.txt").exists():
        alpha = SynthParams.from_manifest((d / "synth.txt").read_text()).alpha
    opt = {k: read_lfi(d / k) if (d / k).is_dir() else None for k in ("gt", "rain", "depth")}
    return SceneData(d.name, read_lfi(d / "input"), opt["gt"], opt["rain"], opt["depth"], alpha)


def scene_digest(scene: RainScene) -> str:
    return hashlib.sha256(scene.rainy.data.tobytes()).hexdigest()

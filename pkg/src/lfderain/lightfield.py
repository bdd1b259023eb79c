"""Light-field containers, 3D-EPI unit assembly, image metrics and disk I/O.

A light field is stored as ``[U, V, C, H, W]``: ``U`` angular rows, ``V``
angular columns, ``C`` channels.  The networks consume 3D-EPI unit stacks
``[S, C, V, h, w]`` where unit ``s`` gathers every sub-view of angular row
``s`` over one spatial crop.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import BoundsError, ContractError, DomainError, FormatError, ShapeError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
_GRAY = np.array([0.299, 0.587, 0.114])
_VIEW_RE = re.compile(r"^view_(\d+)_(\d+)\.png$")


@dataclass
class LightField:
    """Sub-view grid with values in [0, 1]."""

    data: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 5:
            raise ShapeError(f"light field must be [U,V,C,H,W], got shape {self.data.shape}")
        if self.data.shape[2] not in (1, 3):
            raise ShapeError(f"light field needs 1 or 3 channels, got {self.data.shape[2]}")
        if self.data.size == 0:
            raise ShapeError("empty light field")
        if self.data.min() < -1e-12 or self.data.max() > 1 + 1e-12:
            raise DomainError("light field values must lie in [0, 1]")

    @property
    def angular(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[3], self.data.shape[4]

    def view(self, u: int, v: int) -> np.ndarray:
        return self.data[u, v]

    def center_view(self) -> np.ndarray:
        U, V = self.angular
        return self.data[U // 2, V // 2]


@dataclass(frozen=True)
class PatchSpec:
    y: int
    x: int
    h: int
    w: int

    def check(self, H: int, W: int) -> None:
        if self.h < 1 or self.w < 1:
            raise BoundsError(f"patch size must be positive, got {self.h}x{self.w}")
        if self.y < 0 or self.x < 0 or self.y + self.h > H or self.x + self.w > W:
            raise BoundsError(f"patch {self} exceeds the {H}x{W} view")


@dataclass
class EpiUnitStack:
    """``[S, C, V, h, w]`` network input plus where it was cut from."""

    data: np.ndarray
    patch: PatchSpec
    source_shape: tuple[int, ...]
    source_name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def units(self) -> int:
        return self.data.shape[0]


def to_epi_units(lf: LightField, patch: PatchSpec) -> EpiUnitStack:
    """Cut ``patch`` from every sub-view and group the crops by angular row."""
    H, W = lf.spatial
    patch.check(H, W)
    crop = lf.data[:, :, :, patch.y:patch.y + patch.h, patch.x:patch.x + patch.w]
    # [U, V, C, h, w] -> [U, C, V, h, w]
    stack = np.ascontiguousarray(crop.transpose(0, 2, 1, 3, 4))
    return EpiUnitStack(stack, patch, lf.data.shape, lf.name)


def from_epi_units(stack: EpiUnitStack) -> LightField:
    """Inverse of :func:`to_epi_units`: the cropped light field."""
    U, V, C = stack.source_shape[:3]
    expect = (U, C, V, stack.patch.h, stack.patch.w)
    if stack.data.shape != expect:
        raise ContractError(f"stack shape {stack.data.shape} disagrees with provenance {expect}")
    return LightField(stack.data.transpose(0, 2, 1, 3, 4), stack.source_name)


def random_patch(rng: np.random.Generator, H: int, W: int, size: int) -> PatchSpec:
    """Uniformly placed square patch inside an ``H x W`` view."""
    if size > H or size > W:
        raise BoundsError(f"patch {size} larger than view {H}x{W}")
    return PatchSpec(int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1)), size, size)


def tile_patches(H: int, W: int, h: int, w: int) -> list[PatchSpec]:
    """Patches covering an ``H x W`` view; the last row/column is shifted inward."""
    if h > H or w > W:
        raise BoundsError(f"tile {h}x{w} larger than view {H}x{W}")
    ys = list(range(0, H - h + 1, h))
    xs = list(range(0, W - w + 1, w))
    if ys[-1] + h < H:
        ys.append(H - h)
    if xs[-1] + w < W:
        xs.append(W - w)
    return [PatchSpec(y, x, h, w) for y in ys for x in xs]


# ---------------------------------------------------------------------------
# metrics

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr operands differ in shape: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(_GRAY, img, axes=(0, 0))
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise ShapeError(f"expected [H,W], [1,H,W] or [3,H,W] image, got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` uniform windows (stride 1).

    Three-channel inputs are converted to luma first.  Variances use the
    population (1/N) normalisation.
    """
    x, y = _to_gray(a), _to_gray(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise DomainError(f"image {x.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cov = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def view_metrics(scene: str, output: LightField, reference: LightField) -> list[dict]:
    """Per-view PSNR/SSIM rows for one scene."""
    if output.data.shape != reference.data.shape:
        raise ShapeError(f"{scene}: output {output.data.shape} vs reference {reference.data.shape}")
    rows = []
    U, V = output.angular
    for u in range(U):
        for v in range(V):
            rows.append({
                "scene": scene, "view_u": u, "view_v": v,
                "psnr_db": psnr(output.data[u, v], reference.data[u, v]),
                "ssim": ssim(output.data[u, v], reference.data[u, v]),
            })
    return rows


# ---------------------------------------------------------------------------
# disk format: <dir>/view_{u}_{v}.png, 8-bit RGB or grayscale

def write_lfi(lf: LightField, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    q = np.round(np.clip(lf.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    U, V = lf.angular
    for u in range(U):
        for v in range(V):
            img = q[u, v]
            if lf.channels == 1:
                Image.fromarray(img[0], mode="L").save(d / f"view_{u}_{v}.png")
            else:
                Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(d / f"view_{u}_{v}.png")


def read_lfi(directory: str | Path, name: str = "") -> LightField:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    found = {}
    for p in d.iterdir():
        m = _VIEW_RE.match(p.name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = p
    if not found:
        raise FormatError(f"{d}: no view_<u>_<v>.png files")
    U = max(u for u, _ in found) + 1
    V = max(v for _, v in found) + 1
    views = []
    shape = mode = None
    for u in range(U):
        for v in range(V):
            p = found.get((u, v))
            if p is None:
                raise FormatError(f"{d}: missing view_{u}_{v}.png")
            with Image.open(p) as im:
                if im.mode not in ("L", "RGB"):
                    raise FormatError(f"{p}: expected 8-bit L or RGB, got mode {im.mode}")
                arr = np.asarray(im, dtype=np.uint8)
                m_ = im.mode
            if shape is None:
                shape, mode = arr.shape, m_
            elif arr.shape != shape or m_ != mode:
                raise FormatError(f"{p}: size/mode {arr.shape}/{m_} differs from {shape}/{mode}")
            chw = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            views.append(chw.astype(np.float64) / 255.0)
    data = np.stack(views).reshape((U, V) + views[0].shape)
    return LightField(data, name or d.name)

"""Dynamic high-resolution tiling plans.

Two modes are supported:

* ``CATTY`` resizes the image proportionally so its short side matches the
  short side of the closest reference grid, then covers it with evenly spaced
  (possibly overlapping) fixed-size windows.
* ``BASELINE`` resizes the image straight to the reference grid, distorting
  the aspect ratio, and cuts a non-overlapping grid.

Everything here is integer or exact-rational arithmetic so plans are
reproducible bit-for-bit across machines.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np


class TileMode(str, Enum):
    CATTY = "catty"
    BASELINE = "baseline"


@dataclass(frozen=True)
class TileConfig:
    max_tiles: int = 8
    tile_h: int = 336
    tile_w: int = 336
    include_thumbnail: bool = True
    max_aspect_ratio: int | Fraction = 8

    def __post_init__(self):
        if int(self.max_tiles) != self.max_tiles or self.max_tiles < 1:
            raise ValueError(f"max_tiles must be a positive integer, got {self.max_tiles!r}")
        if self.tile_h < 1 or self.tile_w < 1:
            raise ValueError(f"tile size must be positive, got {self.tile_h}x{self.tile_w}")
        if self.max_aspect_ratio < 1:
            raise ValueError(f"max_aspect_ratio must be >= 1, got {self.max_aspect_ratio!r}")


@dataclass(frozen=True)
class RatioEntry:
    cols: int
    rows: int
    ref_w: int
    ref_h: int

    @property
    def ratio(self) -> float:
        return self.ref_w / self.ref_h

    @property
    def exact_ratio(self) -> Fraction:
        return Fraction(self.ref_w, self.ref_h)

    @property
    def n_tiles(self) -> int:
        return self.cols * self.rows

    @property
    def tile_h(self) -> int:
        return self.ref_h // self.rows

    @property
    def tile_w(self) -> int:
        return self.ref_w // self.cols


@dataclass(frozen=True)
class TargetSize:
    target_h: int
    target_w: int


@dataclass(frozen=True)
class Strides:
    stride_h: float
    stride_w: float


@dataclass(frozen=True)
class TilePlan:
    entry: RatioEntry
    target: TargetSize
    origins: tuple[tuple[int, int], ...]
    has_thumbnail: bool
    mode: TileMode
    source_h: int
    source_w: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "source": {"h": self.source_h, "w": self.source_w},
            "target": {"h": self.target.target_h, "w": self.target.target_w},
            "grid": {"rows": self.entry.rows, "cols": self.entry.cols},
            "tile": {"h": self.entry.tile_h, "w": self.entry.tile_w},
            "origins": [[y, x] for y, x in self.origins],
            "thumbnail": self.has_thumbnail,
        }


def _round_half_up(num: int, den: int) -> int:
    # num, den >= 0
    return (2 * num + den) // (2 * den)


def build_ratio_table(config: TileConfig) -> list[RatioEntry]:
    """All grids with at most ``max_tiles`` tiles, sorted by (ratio, tile count)."""
    entries = [
        RatioEntry(cols, rows, cols * config.tile_w, rows * config.tile_h)
        for cols in range(1, config.max_tiles + 1)
        for rows in range(1, config.max_tiles // cols + 1)
    ]
    entries.sort(key=lambda e: (e.exact_ratio, e.n_tiles))
    return entries


def select_entry(table: list[RatioEntry], h: int, w: int, config: TileConfig | None = None) -> RatioEntry:
    """Closest entry by aspect ratio; exact ties go to the grid with more tiles."""
    if not table:
        raise ValueError("ratio table is empty")
    aspect = Fraction(w, h)
    return min(table, key=lambda e: (abs(aspect - e.exact_ratio), -e.n_tiles))


def clamp_aspect(h: int, w: int, config: TileConfig) -> tuple[int, int]:
    limit = Fraction(config.max_aspect_ratio)
    if w > h and Fraction(w, h) > limit:
        return h, int(h * limit)
    if h > w and Fraction(h, w) > limit:
        return int(w * limit), w
    return h, w


def compute_resize(h: int, w: int, entry: RatioEntry) -> TargetSize:
    """Scale (h, w) so its short side lands on the reference grid's short side.

    Rounding is half-up on exact rationals. A dimension that rounds below the
    tile size is raised to it, so strides are never negative.
    """
    ref_min = min(entry.ref_h, entry.ref_w)
    img_min = min(h, w)
    target_h = max(_round_half_up(ref_min * h, img_min), entry.tile_h)
    target_w = max(_round_half_up(ref_min * w, img_min), entry.tile_w)
    return TargetSize(target_h, target_w)


def compute_strides(target: TargetSize, entry: RatioEntry, config: TileConfig | None = None) -> Strides:
    tile_h = config.tile_h if config else entry.tile_h
    tile_w = config.tile_w if config else entry.tile_w
    stride_h = (target.target_h - tile_h) / (entry.rows - 1) if entry.rows > 1 else 0.0
    stride_w = (target.target_w - tile_w) / (entry.cols - 1) if entry.cols > 1 else 0.0
    return Strides(stride_h, stride_w)


def _window_starts(total: int, tile: int, n: int) -> list[int]:
    if n == 1:
        return [0]
    span = total - tile
    starts = [_round_half_up(i * span, n - 1) for i in range(n)]
    starts[-1] = span
    return starts


def plan_tiles(h: int, w: int, config: TileConfig | None = None, mode: TileMode | str = TileMode.CATTY,
               table: list[RatioEntry] | None = None) -> TilePlan:
    if h < 1 or w < 1:
        raise ValueError(f"image dimensions must be positive, got {h}x{w}")
    config = config or TileConfig()
    mode = TileMode(mode)
    table = table if table is not None else build_ratio_table(config)

    ch, cw = clamp_aspect(h, w, config)
    entry = select_entry(table, ch, cw, config)

    if mode is TileMode.CATTY:
        target = compute_resize(ch, cw, entry)
    else:
        target = TargetSize(entry.ref_h, entry.ref_w)

    ys = _window_starts(target.target_h, config.tile_h, entry.rows)
    xs = _window_starts(target.target_w, config.tile_w, entry.cols)
    origins = tuple((y, x) for y in ys for x in xs)
    return TilePlan(entry, target, origins, config.include_thumbnail, mode, h, w)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping, no antialiasing.

    Integer images are rounded and clipped back to their dtype.
    """
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    src = image.astype(np.float64)
    extra = (1,) * (src.ndim - 2)

    top, bot = src[y0], src[y1]
    rows = top + (bot - top) * fy.reshape((-1, 1) + extra)
    left, right = rows[:, x0], rows[:, x1]
    out = left + (right - left) * fx.reshape((1, -1) + extra)

    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(image.dtype)


def extract_tiles(image: np.ndarray, plan: TilePlan, config: TileConfig | None = None
                  ) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Cut the planned windows out of ``image``; returns (tiles, thumbnail)."""
    if image.ndim < 2 or image.shape[:2] != (plan.source_h, plan.source_w):
        raise ValueError(
            f"image is {'x'.join(map(str, image.shape[:2]))} but plan was built for "
            f"{plan.source_h}x{plan.source_w}"
        )
    tile_h = config.tile_h if config else plan.entry.tile_h
    tile_w = config.tile_w if config else plan.entry.tile_w

    resized = resize_bilinear(image, plan.target.target_h, plan.target.target_w)
    tiles = [resized[y:y + tile_h, x:x + tile_w].copy() for y, x in plan.origins]
    thumb = resize_bilinear(image, tile_h, tile_w) if plan.has_thumbnail else None
    return tiles, thumb

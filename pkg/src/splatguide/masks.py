"""Random brush-stroke masks with coverage control.

Convention everywhere in this package: mask value 1 marks a *missing* pixel.

Randomness comes from numpy's PCG64 bit generator (128-bit LCG state with an
XSL-RR output permutation), which produces identical streams on every
platform for a given seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ConfigError, DimensionError, GenerationError
from .tensor import as_image, as_mask

STAMP_BUDGET = 10_000


@dataclass(frozen=True)
class MaskConfig:
    target_coverage: float = 0.20
    coverage_tolerance: float = 0.05
    stroke_count_range: tuple[int, int] = (4, 12)
    width_range: tuple[int, int] = (2, 6)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_coverage < 1.0:
            raise ConfigError("target_coverage must lie in (0, 1)")
        if self.coverage_tolerance < 0:
            raise ConfigError("coverage_tolerance must be >= 0")
        lo, hi = self.width_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad width_range {self.width_range}")
        slo, shi = self.stroke_count_range
        if slo < 1 or shi < slo:
            raise ConfigError(f"bad stroke_count_range {self.stroke_count_range}")


def coverage(mask: np.ndarray) -> float:
    m = as_mask(mask)
    return float(m.sum()) / m.size


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the missing pixels in every channel: ``I * (1 - M)``."""
    img = as_image(image)
    m = as_mask(mask)
    if m.shape != img.shape[:2]:
        raise DimensionError(f"mask {m.shape} vs image {img.shape[:2]}")
    return img * (1.0 - m)[:, :, None]


def _disk(height, width, cy, cx, radius):
    y0, y1 = max(0, int(math.floor(cy - radius))), min(height, int(math.ceil(cy + radius)) + 1)
    x0, x1 = max(0, int(math.floor(cx - radius))), min(width, int(math.ceil(cx + radius)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    return yy[inside], xx[inside]


def generate_brush_mask(height: int, width: int, config: MaskConfig = MaskConfig()) -> np.ndarray:
    """Stamp disks along random polyline strokes until coverage reaches the target band.

    Each stroke starts at a uniform random point and walks ``stroke_count_range``
    segments with uniform angle and length uniform in [W/8, W/3]; every segment
    gets a disk diameter drawn from ``width_range`` and is stamped at unit
    spacing.  Stamping stops at the first stamp whose coverage reaches the target;
    whichever of that state and the previous one lies in the tolerance band and
    nearer the target is kept.  If a stamp jumps past the band, the stroke's most
    recent disks are eroded until the mask is back under the upper bound.
    """
    if height < 8 or width < 8:
        raise DimensionError("masks need height and width >= 8")
    cfg = config
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    total = height * width
    lo = max(cfg.target_coverage - cfg.coverage_tolerance, 1.0 / total)
    hi = min(cfg.target_coverage + cfg.coverage_tolerance, (total - 1.0) / total)
    if lo > hi:
        raise GenerationError("coverage band is empty at this resolution")

    # per-pixel stamp counts allow exact erosion of individual disks
    counts = np.zeros((height, width), dtype=np.int32)
    stamps = 0
    while stamps < STAMP_BUDGET:
        stroke = []
        y = rng.uniform(0, height - 1)
        x = rng.uniform(0, width - 1)
        n_seg = int(rng.integers(cfg.stroke_count_range[0], cfg.stroke_count_range[1] + 1))
        for _ in range(n_seg):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            length = rng.uniform(width / 8.0, width / 3.0)
            radius = rng.uniform(cfg.width_range[0], cfg.width_range[1]) / 2.0
            ny = min(max(y + length * math.sin(angle), 0.0), height - 1.0)
            nx = min(max(x + length * math.cos(angle), 0.0), width - 1.0)
            n_pts = max(1, int(math.ceil(math.hypot(ny - y, nx - x))))
            for k in range(n_pts + 1):
                f = k / n_pts
                cy, cx = y + f * (ny - y), x + f * (nx - x)
                before = np.count_nonzero(counts) / total
                disk = _disk(height, width, cy, cx, radius)
                counts[disk] += 1
                stroke.append(disk)
                stamps += 1
                cov = np.count_nonzero(counts) / total
                if cov > hi:
                    while stroke and np.count_nonzero(counts) / total > hi:
                        counts[stroke.pop()] -= 1
                    cov = np.count_nonzero(counts) / total
                    if cov >= lo:
                        return (counts > 0).astype(np.float32)
                    break
                if cov >= cfg.target_coverage:
                    if lo <= before <= hi and abs(before - cfg.target_coverage) < abs(cov - cfg.target_coverage):
                        counts[stroke.pop()] -= 1
                    return (counts > 0).astype(np.float32)
                if stamps >= STAMP_BUDGET:
                    break
            else:
                y, x = ny, nx
                continue
            break
    raise GenerationError(
        f"coverage band [{lo:.3f}, {hi:.3f}] not reached within {STAMP_BUDGET} stamps"
    )

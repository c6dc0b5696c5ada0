"""MSE, PSNR and SSIM for single pairs and for matched result directories."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ConfigError, DimensionError, DomainError
from .tensor import load_ppm

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
IMAGE_SUFFIXES = (".ppm", ".pgm")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(i_hat, image, mask=None) -> float:
    """Mean squared error over all pixels and channels, or only where ``mask`` == 1."""
    a, b = _pair(i_hat, image)
    d = (a - b) ** 2
    if mask is None:
        return float(d.mean())
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise DomainError("mask selects no pixels")
    return float(d[m].mean())


def psnr(i_hat, image, i_max: float = 1.0, mask=None) -> float:
    """20 log10(i_max / sqrt(MSE)); ``inf`` for identical inputs."""
    return psnr_from_mse(mse(i_hat, image, mask), i_max)


def psnr_from_mse(err: float, i_max: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 20.0 * math.log10(i_max / math.sqrt(err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(plane, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window of a single plane."""
    x, y = _pair(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise DomainError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(i_hat, image, data_range: float = 1.0) -> float:
    """Mean local SSIM; multi-channel images average the per-channel values."""
    a, b = _pair(i_hat, image)
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c], data_range).mean() for c in range(a.shape[-1])]))


# ---------------------------------------------------------------- directories

@dataclass
class ImageMetrics:
    name: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    rows: list[ImageMetrics]
    skipped: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([r.mse for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        # inf if any pair is identical; flagged as such in the outputs
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "mse", "psnr", "ssim"])
            for r in self.rows:
                w.writerow([r.name, repr(r.mse), _fmt_psnr(r.psnr), repr(r.ssim)])
            w.writerow(["MEAN", repr(self.mean_mse), _fmt_psnr(self.mean_psnr), repr(self.mean_ssim)])
            for name in self.skipped:
                w.writerow([f"SKIPPED:{name}", "", "", ""])

    def format_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [len("image"), len("MEAN")])
        lines = [f"{'image':<{width}}  {'MSE':>12}  {'PSNR (dB)':>10}  {'SSIM':>8}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.mse:>12.6e}  {_fmt_psnr(r.psnr, 3):>10}  {r.ssim:>8.5f}")
        lines.append(f"{'MEAN':<{width}}  {self.mean_mse:>12.6e}  {_fmt_psnr(self.mean_psnr, 3):>10}  "
                     f"{self.mean_ssim:>8.5f}")
        lines.append(f"{self.count} image(s) evaluated")
        if self.skipped:
            lines.append("skipped (no counterpart): " + ", ".join(self.skipped))
        return "\n".join(lines)


def _fmt_psnr(v: float, digits: int | None = None) -> str:
    if math.isinf(v):
        return "inf"
    return repr(v) if digits is None else f"{v:.{digits}f}"


def _image_names(d: Path) -> set[str]:
    return {p.name for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def _evaluate_pair(results: Path, truth: Path, name: str) -> ImageMetrics:
    a, b = load_ppm(results / name), load_ppm(truth / name)
    err = mse(a, b)
    return ImageMetrics(name, err, psnr_from_mse(err), ssim(a, b))


def worker_count() -> int:
    """Thread cap from SPLATGUIDE_THREADS, else the machine's CPU count."""
    raw = os.environ.get("SPLATGUIDE_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"SPLATGUIDE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("SPLATGUIDE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def evaluate_dir(results, truth, workers: int | None = None) -> MetricsReport:
    """Per-image metrics over filenames present in both directories, plus their means.

    Files lacking a counterpart are listed in ``skipped``.  Aggregates are
    means of the per-image values, in sorted filename order.
    """
    results, truth = Path(results), Path(truth)
    rn, tn = _image_names(results), _image_names(truth)
    common = sorted(rn & tn)
    if not common:
        raise DomainError(f"no matching image filenames between {results} and {truth}")
    skipped = sorted(rn ^ tn)
    workers = worker_count() if workers is None else max(1, workers)
    # map() keeps input order, so aggregation order is fixed regardless of workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda n: _evaluate_pair(results, truth, n), common))
    return MetricsReport(rows, skipped)

"""Anisotropic Gaussian splat guidance maps.

Pipeline per neighbourhood radius r: Sobel gradients of the gray incomplete
image -> windowed structure tensor J -> covariance (J + eps I)^-1 with an
eigenvalue cap -> amplitude-weighted Gaussian per missing pixel, summed.
Maps from several radii are averaged and min-max normalised jointly.

All geometry here uses (x, y) = (column, row).  Internals run in float64;
exported maps are float32 :class:`FieldMap` instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ConfigError, DimensionError, DomainError, NumericError
from .gradients import GradientField, edge_magnitude, sobel_gradients
from .masks import apply_mask
from .tensor import FieldMap, as_image, as_mask, to_grayscale

PSD_TOL = 1e-6
BOX_SLACK = 1e-6


@dataclass(frozen=True)
class SplatConfig:
    epsilon: float = 1e-5
    beta: float = 0.1
    scales: tuple[int, ...] = (1, 2, 4)
    truncation: float = 3.0
    sigma_max: float | None = None  # None -> max(H, W) / 4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        scales = tuple(int(s) for s in self.scales)
        if not scales or scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be non-empty, >= 1 and strictly increasing: {self.scales}")
        object.__setattr__(self, "scales", scales)
        if self.truncation <= 0:
            raise ConfigError("truncation must be > 0")
        if self.sigma_max is not None and not self.sigma_max > 0:
            raise ConfigError("sigma_max must be > 0")

    def sigma_cap(self, height: int, width: int) -> float:
        return max(height, width) / 4.0 if self.sigma_max is None else float(self.sigma_max)


@dataclass(frozen=True)
class StructureTensorField:
    jxx: np.ndarray
    jxy: np.ndarray
    jyy: np.ndarray
    radius: int = 1


@dataclass(frozen=True)
class CovarianceField:
    """Per-pixel covariance (sxx, sxy, syy) and the matching precision matrix.

    ``clamped`` marks pixels whose covariance hit the eigenvalue cap.
    """
    sxx: np.ndarray
    sxy: np.ndarray
    syy: np.ndarray
    pxx: np.ndarray
    pxy: np.ndarray
    pyy: np.ndarray
    clamped: np.ndarray
    epsilon: float
    sigma_max: float = math.inf


# ---------------------------------------------------------------- structure tensor

def _box_sum(field: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window with replicate padding, via an integral image."""
    h, w = field.shape
    p = np.pad(field, radius, mode="edge")
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.float64)
    c[1:, 1:] = p.cumsum(0).cumsum(1)
    k = 2 * radius + 1
    return c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]


def structure_tensor(grad: GradientField, radius: int) -> StructureTensorField:
    if radius < 1:
        raise ConfigError("structure tensor radius must be >= 1")
    gx = grad.gx.astype(np.float64)
    gy = grad.gy.astype(np.float64)
    # replicate-padding the products equals padding gx, gy first
    return StructureTensorField(
        _box_sum(gx * gx, radius), _box_sum(gx * gy, radius), _box_sum(gy * gy, radius), radius
    )


# ---------------------------------------------------------------- covariance

def covariance_field(J: StructureTensorField, epsilon: float = 1e-5,
                     sigma_max: float = math.inf) -> CovarianceField:
    """Sigma = (J + eps I)^-1, eigenvalues capped at sigma_max^2."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0")
    jxx, jxy, jyy = (np.asarray(a, dtype=np.float64) for a in (J.jxx, J.jxy, J.jyy))
    scale = 1.0 + np.abs(jxx * jyy)
    if np.any(jxx < -PSD_TOL) or np.any(jyy < -PSD_TOL) or np.any(jxy * jxy - jxx * jyy > PSD_TOL * scale):
        raise NumericError("structure tensor is not positive semidefinite")

    a = jxx + epsilon
    b = jxy
    c = jyy + epsilon
    det = a * c - b * b
    if np.any(det <= 0):
        raise NumericError("regularised structure tensor is singular")
    sxx, sxy, syy = c / det, -b / det, a / det
    pxx, pxy, pyy = a.copy(), b.copy(), c.copy()

    # smallest eigenvalue of J + eps I <-> largest eigenvalue of Sigma
    half_tr = 0.5 * (a + c)
    lam_min = half_tr - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    floor = 0.0 if math.isinf(sigma_max) else 1.0 / (sigma_max * sigma_max)
    clamped = lam_min < floor
    if np.any(clamped):
        mats = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)[clamped]
        vals, vecs = np.linalg.eigh(mats)
        pvals = np.maximum(vals, floor)
        prec = np.einsum("nij,nj,nkj->nik", vecs, pvals, vecs)
        cov = np.einsum("nij,nj,nkj->nik", vecs, 1.0 / pvals, vecs)
        pxx[clamped], pxy[clamped], pyy[clamped] = prec[:, 0, 0], prec[:, 0, 1], prec[:, 1, 1]
        sxx[clamped], sxy[clamped], syy[clamped] = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    return CovarianceField(sxx, sxy, syy, pxx, pxy, pyy, clamped, epsilon, sigma_max)


# ---------------------------------------------------------------- distance transform

def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: d[q] = min_p (q - p)^2 + f[p]; inf entries are skipped."""
    n = len(f)
    out = np.full(n, np.inf)
    sites = [p for p in range(n) if f[p] != np.inf]
    if not sites:
        return out
    v = [sites[0]]
    z = [-np.inf, np.inf]
    for q in sites[1:]:
        fq = f[q] + q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            # z[0] = -inf, so the first site is never popped
            if s > z[-2]:
                break
            v.pop()
            z.pop()
        z[-1] = s
        v.append(q)
        z.append(np.inf)
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (integer-valued float64) to the nearest known pixel."""
    m = as_mask(mask)
    if not np.any(m == 0):
        raise DomainError("distance transform needs at least one known pixel")
    f = np.where(m == 0, 0.0, np.inf)
    cols = np.empty_like(f)
    for j in range(f.shape[1]):
        cols[:, j] = _edt_1d(f[:, j])
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        out[i, :] = _edt_1d(cols[i, :])
    return out


def distance_transform(mask: np.ndarray) -> FieldMap:
    return FieldMap(np.sqrt(squared_distance_transform(mask)), "distance")


def amplitude_map(dist: FieldMap, beta: float, mask: np.ndarray) -> FieldMap:
    """exp(-beta d) on missing pixels, 0 on known pixels."""
    d = np.asarray(dist.data if isinstance(dist, FieldMap) else dist, dtype=np.float64)
    if np.any(d < 0):
        raise DomainError("distances must be non-negative")
    m = as_mask(mask, d.shape)
    return FieldMap(np.where(m == 1, np.exp(-beta * d), 0.0), "amplitude")


# ---------------------------------------------------------------- rasteriser

def splat_accumulate(mask: np.ndarray, cov: CovarianceField, amp, truncation: float = 3.0) -> np.ndarray:
    """Raw splat map S(u, v) = sum over missing (x, y) of A * G, truncated at Mahalanobis ``truncation``.

    Each Gaussian is evaluated over the axis-aligned bounding box of its
    truncation ellipse, whose half-extents are truncation * sqrt(Sigma_xx) and
    truncation * sqrt(Sigma_yy).  Returns a float64 array; contributions are
    added in row-major order of the missing pixels.
    """
    m = as_mask(mask)
    h, w = m.shape
    a = np.asarray(amp.data if isinstance(amp, FieldMap) else amp, dtype=np.float64)
    if a.shape != m.shape or cov.sxx.shape != m.shape:
        raise DimensionError("mask, covariance and amplitude shapes disagree")
    if truncation <= 0:
        raise ConfigError("truncation must be > 0")
    out = np.zeros((h, w), dtype=np.float64)
    cut2 = truncation * truncation
    for y, x in zip(*np.nonzero(m)):
        pxx, pxy, pyy = cov.pxx[y, x], cov.pxy[y, x], cov.pyy[y, x]
        if pxx * pyy - pxy * pxy <= 0:
            raise NumericError(f"singular covariance at missing pixel ({y}, {x})")
        # slack keeps boundary offsets when t*sigma lands on an integer after rounding
        hx = int(math.floor(truncation * math.sqrt(cov.sxx[y, x]) + BOX_SLACK))
        hy = int(math.floor(truncation * math.sqrt(cov.syy[y, x]) + BOX_SLACK))
        x0, x1 = max(0, x - hx), min(w, x + hx + 1)
        y0, y1 = max(0, y - hy), min(h, y + hy + 1)
        dx = np.arange(x0, x1, dtype=np.float64) - x
        dy = (np.arange(y0, y1, dtype=np.float64) - y)[:, None]
        q = pxx * dx * dx + 2.0 * pxy * dx * dy + pyy * dy * dy
        g = np.where(q <= cut2, np.exp(-0.5 * q), 0.0)
        out[y0:y1, x0:x1] += a[y, x] * g
    return out


def normalize_joint(maps: list[np.ndarray]) -> np.ndarray:
    """Average the maps, then min-max scale with extrema taken over all of them."""
    stack = np.stack(maps)
    combined = stack.mean(axis=0)
    lo, hi = float(stack.min()), float(stack.max())
    if hi == lo:
        return np.zeros_like(combined)
    return np.clip((combined - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class SplatResult:
    """Everything :func:`multiscale_splat` computed on the way to the normalised map."""
    splat: FieldMap
    edge: FieldMap
    distance: FieldMap
    amplitude: FieldMap
    raw: list[np.ndarray] = field(default_factory=list)


def splat_guidance(image: np.ndarray, mask: np.ndarray, config: SplatConfig = SplatConfig()) -> SplatResult:
    img = as_image(image)
    m = as_mask(mask, img.shape)
    gray = to_grayscale(apply_mask(img, m))
    grad = sobel_gradients(gray)
    edge = edge_magnitude(grad)
    dist = distance_transform(m)
    amp = amplitude_map(dist, config.beta, m)
    cap = config.sigma_cap(*m.shape)
    raw = []
    for r in config.scales:
        cov = covariance_field(structure_tensor(grad, r), config.epsilon, cap)
        raw.append(splat_accumulate(m, cov, amp, config.truncation))
    splat = FieldMap(normalize_joint(raw), "splat")
    return SplatResult(splat, edge, dist, amp, raw)


def multiscale_splat(image: np.ndarray, mask: np.ndarray, config: SplatConfig = SplatConfig()) -> FieldMap:
    """Normalised multi-scale splat map in [0, 1] for an image and its mask."""
    return splat_guidance(image, mask, config).splat

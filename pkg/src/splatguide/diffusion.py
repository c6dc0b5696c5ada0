"""Noise schedule, forward noising, x0 estimation and the inpainting sampler.

Diffusion runs in [-1, 1] space (x = 2I - 1).  Timesteps are 1-based:
``t`` in [1, T], with alpha_bar_0 = 1 meaning "clean".
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ConfigError, DimensionError, NumericError
from .splat import SplatConfig, splat_guidance
from .masks import apply_mask
from .tensor import FieldMap, as_image, as_mask


class NoiseSchedule:
    """Linear beta schedule with alpha = 1 - beta and cumulative alpha_bar."""

    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ConfigError("T must be >= 1")
        if not 0 < beta_start < 1 or not 0 < beta_end < 1:
            raise ConfigError("betas must lie in (0, 1)")
        self.T = T
        self.beta_start, self.beta_end = beta_start, beta_end
        self.beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        sched = cls.__new__(cls)
        sched.beta = np.asarray(betas, dtype=np.float64)
        sched.T = len(sched.beta)
        sched.beta_start, sched.beta_end = float(sched.beta[0]), float(sched.beta[-1])
        sched.alpha = 1.0 - sched.beta
        sched.alpha_bar = np.cumprod(sched.alpha)
        return sched

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def _check(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        if not (0 if allow_zero else 1) <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        t = self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check(t) - 1])


def _abar_of(t, schedule: NoiseSchedule, ndim: int):
    """alpha_bar for a scalar t, or a (B, 1, 1, ...) column for per-sample timesteps."""
    if np.ndim(t) == 0:
        return schedule.abar(schedule._check(t))
    ab = np.array([schedule.abar(schedule._check(tt)) for tt in np.ravel(t)])
    return ab.reshape((-1,) + (1,) * (ndim - 1))


def forward_diffuse(x0, t, noise, schedule: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.  ``t`` may be a per-sample array."""
    ab = _abar_of(t, schedule, np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def x0_estimate(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Invert :func:`forward_diffuse` given a noise estimate (unclamped)."""
    ab = _abar_of(t, schedule, np.ndim(x_t))
    if np.any(np.asarray(ab) <= 0):
        raise NumericError("alpha_bar must be positive for x0 estimation")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, z):
    """Ancestral DDPM update with sigma_t^2 = beta_t; ``z`` is ignored at t = 1."""
    t = int(t)
    if t < 1:
        raise IndexError("reverse_step needs t >= 1")
    beta, alpha, ab = schedule.beta_at(t), schedule.alpha_at(t), schedule.abar(t)
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * z


# ---------------------------------------------------------------- guidance

@dataclass(frozen=True)
class GuidanceStack:
    incomplete: np.ndarray  # HxWxC, missing pixels zeroed
    mask: np.ndarray        # HxW, 1 = missing
    splat: FieldMap         # normalised
    edge: FieldMap

    def __post_init__(self):
        hw = self.incomplete.shape[:2]
        if self.mask.shape != hw or self.splat.shape != hw or self.edge.shape != hw:
            raise DimensionError("guidance fields must share the image's height and width")
        s = self.splat.data
        if s.min() < 0 or s.max() > 1:
            raise DimensionError("splat map must be normalised to [0, 1]")

    def cond(self) -> np.ndarray:
        """Channel stack [incomplete, mask, splat, edge] as a 1xCxHxW array."""
        planes = [self.incomplete.transpose(2, 0, 1), self.mask[None], self.splat.data[None], self.edge.data[None]]
        return np.concatenate(planes, axis=0)[None].astype(np.float32)


def build_guidance(image, mask, config: SplatConfig = SplatConfig()) -> GuidanceStack:
    """Guidance from the incomplete image only; ``image`` content under the mask is never read."""
    img = as_image(image)
    m = as_mask(mask, img.shape)
    incomplete = apply_mask(img, m)
    res = splat_guidance(incomplete, m, config)
    return GuidanceStack(incomplete, m, res.splat, res.edge)


# ---------------------------------------------------------------- sampler

def to_diffusion(image):
    return 2.0 * image - 1.0


def from_diffusion(x):
    return (x + 1.0) / 2.0


def inpaint(incomplete, mask, guidance: GuidanceStack, net, schedule: NoiseSchedule, seed: int = 0,
            snapshot: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Fill the missing region by ancestral sampling with known-region recomposition.

    After every reverse step the known pixels are replaced with the original
    content noised to level t-1 (exactly the original at t-1 = 0).  The
    result is clamped to [0, 1] and its known pixels equal ``incomplete``'s.
    ``snapshot(t, image)`` is called after each step when given.
    """
    img = as_image(incomplete)
    m = as_mask(mask, img.shape)
    for name, value in net.params.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite parameter {name}")
    rng = np.random.Generator(np.random.PCG64(seed))
    known = (1.0 - m)[None, None]
    x0_known = to_diffusion(img.transpose(2, 0, 1)[None].astype(np.float64))
    cond = guidance.cond()
    shape = x0_known.shape
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        eps_hat = net.forward(x.astype(np.float32), cond, np.array([t])).astype(np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"denoiser produced non-finite output at t={t}")
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        x = reverse_step(x, eps_hat, t, schedule, z)
        if t - 1 > 0:
            noised = forward_diffuse(x0_known, t - 1, rng.standard_normal(shape), schedule)
        else:
            noised = x0_known
        x = known * noised + (1.0 - known) * x
        if snapshot is not None:
            snapshot(t, np.clip(from_diffusion(x[0].transpose(1, 2, 0)), 0.0, 1.0).astype(np.float32))
    out = np.clip(from_diffusion(x[0].transpose(1, 2, 0)), 0.0, 1.0).astype(np.float32)
    out[m == 0] = img[m == 0]
    return out

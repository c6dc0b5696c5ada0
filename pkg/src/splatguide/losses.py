"""Training losses: masked noise MSE, masked L1 reconstruction, perceptual, style, TV.

Inputs are NCHW batches in [0, 1] image space (noise tensors excepted); masks
are ``(B, 1, H, W)`` with 1 = missing.  Every loss is the mean of per-sample
values over the batch.  Each ``*_loss`` has a ``*_grad`` partner returning
the gradient with respect to its first argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import DimensionError, DomainError
from .nn import conv2d_backward, conv2d_forward, kaiming_uniform

TERMS = ("noise", "rec", "perc", "style", "tv")


@dataclass(frozen=True)
class LossWeights:
    noise: float = 1.0
    rec: float = 5.0
    perc: float = 0.5
    style: float = 1.0
    tv: float = 0.05

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERMS}


def _check(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def _mask_norm(mask: np.ndarray, channels: int) -> np.ndarray:
    """Per-sample normaliser (missing pixels x channels) broadcastable against NCHW."""
    k = mask.reshape(mask.shape[0], -1).sum(axis=1)
    if np.any(k == 0):
        raise DomainError("masked loss needs at least one missing pixel per sample")
    return (k * channels)[:, None, None, None]


def noise_loss(eps_hat, eps, mask) -> float:
    _check(eps_hat, eps)
    norm = _mask_norm(mask, eps.shape[1])
    d = eps_hat.astype(np.float64) - eps
    return float(np.sum(d * d * mask / norm) / eps.shape[0])


def noise_loss_grad(eps_hat, eps, mask) -> np.ndarray:
    norm = _mask_norm(mask, eps.shape[1])
    return 2.0 * (eps_hat.astype(np.float64) - eps) * mask / (norm * eps.shape[0])


def rec_loss(i_hat, image, mask) -> float:
    _check(i_hat, image)
    norm = _mask_norm(mask, image.shape[1])
    return float(np.sum(np.abs(i_hat.astype(np.float64) - image) * mask / norm) / image.shape[0])


def rec_loss_grad(i_hat, image, mask) -> np.ndarray:
    norm = _mask_norm(mask, image.shape[1])
    return np.sign(i_hat.astype(np.float64) - image) * mask / (norm * image.shape[0])


def tv_loss(i_hat) -> float:
    x = i_hat.astype(np.float64)
    dy = x[:, :, 1:, :] - x[:, :, :-1, :]
    dx = x[:, :, :, 1:] - x[:, :, :, :-1]
    per_pixel = x[0].size
    return float((np.sum(dy * dy) + np.sum(dx * dx)) / per_pixel / x.shape[0])


def tv_loss_grad(i_hat) -> np.ndarray:
    x = i_hat.astype(np.float64)
    scale = 2.0 / (x[0].size * x.shape[0])
    g = np.zeros_like(x)
    dy = x[:, :, 1:, :] - x[:, :, :-1, :]
    dx = x[:, :, :, 1:] - x[:, :, :, :-1]
    g[:, :, 1:, :] += dy
    g[:, :, :-1, :] -= dy
    g[:, :, :, 1:] += dx
    g[:, :, :, :-1] -= dx
    return g * scale


# ---------------------------------------------------------------- features

class FeatureExtractor:
    """Fixed conv -> relu -> 2x average-pool stages standing in for a pretrained backbone.

    Weights are drawn once from a seeded generator (or supplied as a list of
    (weight, bias) pairs) and never trained.
    """

    def __init__(self, in_channels: int = 3, widths=(8, 16, 32), seed: int = 1234, weights=None):
        if weights is None:
            rng = np.random.Generator(np.random.PCG64(seed))
            weights = []
            c = in_channels
            for wd in widths:
                w = kaiming_uniform(rng, (wd, c, 3, 3), c * 9, np.float64)
                b = rng.uniform(-0.1, 0.1, size=wd)
                weights.append((w, b))
                c = wd
        self.weights = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)) for w, b in weights]
        for w, _ in self.weights:
            w.setflags(write=False)
        if self.weights[0][0].shape[1] != in_channels:
            raise DimensionError("first feature stage does not match the image channel count")
        self.in_channels = in_channels

    @property
    def depth(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """Return (list of per-stage features, tape for :meth:`backward`)."""
        feats, tape = [], []
        h = x.astype(np.float64)
        for w, b in self.weights:
            z, cache = conv2d_forward(h, w, b, 1)
            a = np.maximum(z, 0.0)
            bs, c, hh, ww = a.shape
            if hh % 2 or ww % 2:
                raise DimensionError("feature stages need spatial dims divisible by 2 per stage")
            h = a.reshape(bs, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))
            feats.append(h)
            tape.append((cache, z > 0))
        return feats, tape

    def features(self, x: np.ndarray) -> list[np.ndarray]:
        return self.forward(x)[0]

    def backward(self, grads: list[np.ndarray | None], tape) -> np.ndarray:
        """Gradient w.r.t. the input given gradients on each stage output."""
        g = None
        for (w, _), (cache, active), gl in zip(reversed(self.weights), reversed(tape), reversed(grads)):
            if gl is not None:
                g = gl if g is None else g + gl
            if g is None:
                continue
            g = (g / 4.0).repeat(2, axis=2).repeat(2, axis=3)
            g = np.where(active, g, 0.0)
            g, _, _ = conv2d_backward(g, cache, w)
        if g is None:
            raise ValueError("no feature gradients supplied")
        return g


def gram(features: np.ndarray) -> np.ndarray:
    """Normalised Gram matrix of ``[C, H, W]`` (or batched ``[B, C, H, W]``) features."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 3:
        c, h, w = f.shape
        flat = f.reshape(c, h * w)
        return flat @ flat.T / (c * h * w)
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    return flat @ flat.transpose(0, 2, 1) / (c * h * w)


def perceptual_loss(i_hat, image, fx: FeatureExtractor) -> float:
    _check(i_hat, image)
    return float(sum(np.mean(np.abs(a - b)) for a, b in zip(fx.features(i_hat), fx.features(image))))


def style_loss(i_hat, image, fx: FeatureExtractor) -> float:
    _check(i_hat, image)
    return float(sum(np.mean(np.abs(gram(a) - gram(b))) for a, b in zip(fx.features(i_hat), fx.features(image))))


def feature_losses_and_grad(i_hat, image, fx: FeatureExtractor):
    """Perceptual and style losses together with their gradients w.r.t. ``i_hat``.

    Returns (perc, style, grad_perc, grad_style).
    """
    f_hat, tape = fx.forward(i_hat)
    f_ref = fx.features(image)
    perc = style = 0.0
    gp, gs = [], []
    for a, b in zip(f_hat, f_ref):
        d = a - b
        perc += np.mean(np.abs(d))
        gp.append(np.sign(d) / d.size)
        ga, gb = gram(a), gram(b)
        dg = ga - gb
        style += np.mean(np.abs(dg))
        bs, c, h, w = a.shape
        s = np.sign(dg) / dg.size
        flat = a.reshape(bs, c, h * w)
        gflat = (s + s.transpose(0, 2, 1)) @ flat / (c * h * w)
        gs.append(gflat.reshape(a.shape))
    return float(perc), float(style), fx.backward(gp, tape), fx.backward(gs, tape)


def total_loss(terms: dict[str, float], weights: LossWeights = LossWeights()) -> tuple[float, dict[str, float]]:
    """Weighted sum of loss terms; returns (total, breakdown including 'total')."""
    w = weights.as_dict()
    total = float(sum(w[k] * terms.get(k, 0.0) for k in TERMS))
    breakdown = {k: float(terms.get(k, 0.0)) for k in TERMS}
    breakdown["total"] = total
    return total, breakdown


def evaluate(eps_hat, eps, i_hat, image, mask, fx: FeatureExtractor, weights: LossWeights = LossWeights()):
    """All five terms, the weighted total and gradients.

    Returns (breakdown, grad wrt eps_hat, grad wrt i_hat).  Terms with zero
    weight are still reported but skipped in the gradient.
    """
    w = weights.as_dict()
    terms = {
        "noise": noise_loss(eps_hat, eps, mask),
        "rec": rec_loss(i_hat, image, mask),
        "tv": tv_loss(i_hat),
    }
    perc, style, gp, gs = feature_losses_and_grad(i_hat, image, fx)
    terms["perc"], terms["style"] = perc, style
    _, breakdown = total_loss(terms, weights)
    g_eps = w["noise"] * noise_loss_grad(eps_hat, eps, mask)
    g_img = (w["rec"] * rec_loss_grad(i_hat, image, mask) + w["tv"] * tv_loss_grad(i_hat)
             + w["perc"] * gp + w["style"] * gs)
    return breakdown, g_eps, g_img

"""Sobel gradients and edge magnitude."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import DimensionError
from .tensor import FieldMap, as_image

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        if self.gx.shape != self.gy.shape or self.gx.ndim != 2:
            raise DimensionError("gx and gy must be 2-D arrays of equal shape")

    @property
    def shape(self):
        return self.gx.shape


def correlate3x3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with replicate-edge padding."""
    h, w = plane.shape
    p = np.pad(plane.astype(np.float64), 1, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for a in range(3):
        for b in range(3):
            if kernel[a, b]:
                out += kernel[a, b] * p[a:a + h, b:b + w]
    return out


def sobel_gradients(gray: np.ndarray) -> GradientField:
    """Horizontal (column-direction) and vertical Sobel responses of a gray image.

    Positive ``gx`` means intensity increases with column index.
    """
    img = as_image(gray)
    if img.shape[2] != 1:
        raise DimensionError("sobel_gradients expects a single-channel image")
    plane = img[:, :, 0]
    gx = correlate3x3(plane, SOBEL_X).astype(np.float32)
    gy = correlate3x3(plane, SOBEL_Y).astype(np.float32)
    return GradientField(gx, gy)


def edge_magnitude(grad: GradientField) -> FieldMap:
    gx = grad.gx.astype(np.float64)
    gy = grad.gy.astype(np.float64)
    return FieldMap(np.sqrt(gx * gx + gy * gy), "edge")

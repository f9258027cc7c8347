"""Socio-demographic feature maps and the socially-aware convolution (SAC).

The feature map is a per-cell scalar ``f = sum_p w_p * Z^p``. Each cell then
gets a V x V adapting kernel ``K(f[neighbour], f[centre])`` with the Gaussian
similarity ``exp(-(f1 - f2)**2 / 2)``, which multiplies the shared convolution
weights before they are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    _check_conv_shapes,
    _check_kernel_size,
    as_tensor,
    conv2d_patches,
    matmul,
    mul,
    reshape,
    unfold,
)


@dataclass(frozen=True)
class SocioDemographicGrid:
    """P named M x N rasters."""

    names: tuple[str, ...]
    values: np.ndarray  # (P, M, N)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != len(self.names):
            raise ValueError(f"expected {len(self.names)} rasters, got array {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("socio-demographic rasters contain missing values")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", values)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def standardized(self) -> "SocioDemographicGrid":
        """Per-variable z-score across cells; constant rasters map to zeros."""
        mean = self.values.mean(axis=(1, 2), keepdims=True)
        std = self.values.std(axis=(1, 2), keepdims=True)
        std = np.where(std > 0, std, 1.0)
        return SocioDemographicGrid(self.names, (self.values - mean) / std)


def initial_feature_weights(p: int) -> np.ndarray:
    return np.full(p, 1.0 / math.sqrt(p))


def build_feature_map(z: SocioDemographicGrid | np.ndarray, w) -> Tensor:
    """Weighted sum of the rasters, differentiable in ``w``."""
    values = z.values if isinstance(z, SocioDemographicGrid) else np.asarray(z, dtype=np.float64)
    w = as_tensor(w)
    p, m, n = values.shape
    if w.shape != (p,):
        raise ValueError(f"need {p} mixing weights, got shape {w.shape}")
    stacked = Tensor(values.reshape(p, m * n).T)
    return reshape(matmul(stacked, reshape(w, (p, 1))), (m, n))


def gaussian_kernel(f1: float, f2: float) -> float:
    d = f1 - f2
    return math.exp(-0.5 * d * d)


def _neighbour_offsets(m: int, n: int, v: int):
    """Padded feature index helpers shared by the field and its gradient."""
    r = v // 2
    inside = np.zeros((m + 2 * r, n + 2 * r), dtype=bool)
    inside[r:r + m, r:r + n] = True
    mask = np.lib.stride_tricks.sliding_window_view(inside, (v, v))  # (M, N, V, V)
    return r, np.ascontiguousarray(mask)


def build_adapting_field(f: Tensor, v: int) -> Tensor:
    """Gaussian adapting kernels, shape (M, N, V, V).

    ``k[p, q, i, j] = K(f[p + i - V//2, q + j - V//2], f[p, q])``; offsets that
    leave the grid are 0.
    """
    _check_kernel_size(v)
    f = as_tensor(f)
    if f.ndim != 2:
        raise ValueError(f"feature map must be M x N, got {f.shape}")
    m, n = f.shape
    r, inside = _neighbour_offsets(m, n, v)
    padded = np.pad(f.data, r)
    neighbours = np.lib.stride_tricks.sliding_window_view(padded, (v, v))
    diff = np.where(inside, neighbours - f.data[:, :, None, None], 0.0)
    k = np.where(inside, np.exp(-0.5 * diff * diff), 0.0)

    def rule(g):
        # dk/dneighbour = -diff * k, dk/dcentre = +diff * k
        local = g * diff * k
        grad = local.sum(axis=(2, 3))
        acc = np.zeros((m + 2 * r, n + 2 * r))
        for i in range(v):
            for j in range(v):
                acc[i:i + m, j:j + n] -= local[:, :, i, j]
        return grad + acc[r:r + m, r:r + n]

    return Tensor(k, _parents=((f, rule),))


def sac_patches(x: Tensor, k: Tensor) -> Tensor:
    """Unfolded (B, M, N, C, V, V) patches scaled by the adapting kernels."""
    v = k.shape[-1]
    patches = unfold(x, v)
    m, n = k.shape[:2]
    return mul(patches, reshape(k, (m, n, 1, v, v)))


def sac_conv2d(x: Tensor, w: Tensor, bias: Tensor, k: Tensor) -> Tensor:
    """Socially-aware convolution.

    ``Y[m,p,q] = sum_{i,j,n} k[p,q,i,j] * W[m,n,i,j] * X[n,p+i',q+j'] + bias[m]``
    with zero padding. Input is (I, M, N) or batched (B, I, M, N).
    """
    x, w, bias, k = as_tensor(x), as_tensor(w), as_tensor(bias), as_tensor(k)
    _check_conv_shapes(x, w, bias)
    v = w.shape[2]
    if k.ndim != 4 or k.shape[2:] != (v, v) or k.shape[:2] != x.shape[-2:]:
        raise ValueError(f"adapting field {k.shape} does not match input {x.shape} / kernel {w.shape}")
    if x.ndim == 3:
        y = sac_conv2d(reshape(x, (1,) + x.shape), w, bias, k)
        return reshape(y, y.shape[1:])
    return conv2d_patches(sac_patches(x, k), w, bias)

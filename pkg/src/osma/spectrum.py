"""Frequency-domain analysis of images.

Power spectra, azimuthally integrated spectrum profiles and the orthonormal
DCT used as the task model's input transform. The public functions operate
on numpy arrays; the ``*_torch`` variants are differentiable and are what the
spectral matching loss builds on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateSpectrumError, InvalidInputError, InvalidParameterError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_DCT_EPS = 1e-12


@dataclass(frozen=True)
class SpectrumProfile:
    """1D azimuthal profile of a 2D power spectrum."""

    values: np.ndarray
    normalized: bool = False
    # ring means of log power instead of power
    log_power: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidInputError("profile values must be one-dimensional")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "value"])
            for i, v in enumerate(self.values):
                writer.writerow([i, repr(float(v))])
        return path

    @classmethod
    def from_csv(cls, path, normalized=False, log_power=False):
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["value"]) for r in rows]), normalized, log_power)


@dataclass(frozen=True)
class FrequencyFeatureMap:
    coefficients: np.ndarray
    scale: float


def to_luminance(image) -> np.ndarray:
    """Collapse a channels-first RGB image to one luminance channel.

    Two-dimensional input is returned unchanged (as float64).
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        return a
    if a.ndim == 3 and a.shape[0] == 3:
        w = np.asarray(LUMA_WEIGHTS)
        return np.tensordot(w, a, axes=1)
    if a.ndim == 3 and a.shape[0] == 1:
        return a[0]
    raise InvalidInputError(f"expected HxW, 1xHxW or 3xHxW image, got shape {a.shape}")


def _square_grid(image) -> np.ndarray:
    a = to_luminance(image)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"grid must be square, got {a.shape}")
    if a.shape[0] < 2:
        raise InvalidInputError("grid side must be at least 2")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("grid contains non-finite entries")
    return a


def power_spectrum_2d(image) -> np.ndarray:
    """Squared DFT magnitude with the zero frequency moved to the centre.

    RGB input is converted to luminance first.
    """
    a = _square_grid(image)
    f = np.fft.fftshift(np.fft.fft2(a))
    return f.real**2 + f.imag**2


@lru_cache(maxsize=32)
def radius_bins(n: int) -> np.ndarray:
    """Integer radius of every pixel of an n x n centred grid.

    Rounds half away from zero. Pixels at radius >= n // 2 (the corners) are
    marked with -1.
    """
    c = n // 2
    u, v = np.indices((n, n))
    r = np.floor(np.hypot(u - c, v - c) + 0.5).astype(np.int64)
    r[r >= n // 2] = -1
    r.setflags(write=False)
    return r


def _ring_means(grid) -> np.ndarray:
    n = grid.shape[0]
    r = radius_bins(n)
    keep = r >= 0
    sums = np.bincount(r[keep], weights=grid[keep], minlength=n // 2)
    return sums / np.bincount(r[keep], minlength=n // 2)


def azimuthal_integration(power, normalize: bool = True) -> SpectrumProfile:
    """Mean power per integer-radius ring, rings 0 .. n//2 - 1."""
    p = np.asarray(power, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise InvalidInputError(f"power grid must be square 2D, got {p.shape}")
    if np.any(p < 0):
        raise InvalidInputError("power entries must be non-negative")
    values = _ring_means(p)
    if normalize:
        if values[0] == 0:
            raise DegenerateSpectrumError("DC bin is zero, cannot normalize")
        values = values / values[0]
    return SpectrumProfile(values, normalized=normalize)


def spectrum_profile(image, normalize: bool = True) -> SpectrumProfile:
    return azimuthal_integration(power_spectrum_2d(image), normalize=normalize)


LOG_FLOOR = 1e-12


def mean_profile(images, normalize: bool = True, log_power: bool = False) -> SpectrumProfile:
    """Profile of the mean power spectrum over a stack of images.

    With ``log_power`` the profile is the log of the ring means; normalizing
    then subtracts the DC value.
    """
    images = np.asarray(images)
    power = np.mean([power_spectrum_2d(im) for im in images], axis=0)
    if not log_power:
        return azimuthal_integration(power, normalize=normalize)
    v = np.log(_ring_means(power) + LOG_FLOOR)
    return SpectrumProfile(v - v[0] if normalize else v, normalized=normalize, log_power=True)


def profile_distance(a: SpectrumProfile, b: SpectrumProfile) -> float:
    if len(a) != len(b):
        raise InvalidInputError(f"profile lengths differ: {len(a)} vs {len(b)}")
    if a.normalized != b.normalized or a.log_power != b.log_power:
        raise InvalidInputError("profiles use different normalization or scale")
    return float(np.linalg.norm(a.values - b.values))


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis functions."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2(image) -> np.ndarray:
    """Per-channel orthonormal 2D DCT-II of a (C,)H,W array."""
    a = np.asarray(image, dtype=np.float64)
    h, w = a.shape[-2:]
    return dct_matrix(h) @ a @ dct_matrix(w).T


def idct2(coefficients) -> np.ndarray:
    c = np.asarray(coefficients, dtype=np.float64)
    h, w = c.shape[-2:]
    return dct_matrix(h).T @ c @ dct_matrix(w)


def dct_feature_transform(image, eps: float = DEFAULT_DCT_EPS) -> FrequencyFeatureMap:
    """log(|DCT2(image)| + eps), channel by channel."""
    if not eps > 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    a = np.asarray(image, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise InvalidInputError(f"expected (C,)H,W image, got shape {a.shape}")
    return FrequencyFeatureMap(np.log(np.abs(dct2(a)) + eps), eps)


# Differentiable counterparts -------------------------------------------------


def luminance_torch(x: torch.Tensor) -> torch.Tensor:
    """(B,3,H,W) -> (B,H,W); (B,1,H,W) and (B,H,W) pass through."""
    if x.dim() == 4 and x.shape[1] == 3:
        w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device)
        return torch.einsum("c,bchw->bhw", w, x)
    if x.dim() == 4 and x.shape[1] == 1:
        return x[:, 0]
    if x.dim() == 3:
        return x
    raise InvalidInputError(f"unsupported batch shape {tuple(x.shape)}")


def power_spectrum_torch(x: torch.Tensor) -> torch.Tensor:
    g = luminance_torch(x)
    f = torch.fft.fftshift(torch.fft.fft2(g), dim=(-2, -1))
    return f.real**2 + f.imag**2


def azimuthal_profile_torch(power: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """Ring means of a (..., n, n) power tensor, differentiable."""
    n = power.shape[-1]
    r = torch.from_numpy(radius_bins(n).copy())
    keep = r >= 0
    nbins = n // 2
    onehot = torch.zeros(n * n, nbins, dtype=power.dtype, device=power.device)
    idx = torch.nonzero(keep.flatten()).squeeze(1)
    onehot[idx, r.flatten()[idx]] = 1.0
    onehot = onehot / onehot.sum(0, keepdim=True)
    prof = power.reshape(*power.shape[:-2], n * n) @ onehot
    if normalize:
        prof = prof / prof[..., :1]
    return prof


def dct_matrix_torch(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.tensor(dct_matrix(n), dtype=dtype, device=device)

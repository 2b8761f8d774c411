"""Dense 2D grids and the convolution primitives used by every solver.

Grids are plain ``numpy`` float64 arrays of shape ``(rows, cols)``.  No
function in this module mutates its inputs.

Offset convention: a kernel of shape ``(m, n)`` has its center at
``(m // 2, n // 2)``.  For a kernel index ``(u, v)`` the offset is
``(u - m // 2, v - n // 2)``, so

    conv_same(I, K)[i, j] = sum_{u,v} K[u, v] * I[i - du, j - dv]

with out-of-range image indices wrapped (``CIRCULAR``) or read as zero
(``ZERO_PAD``).  Everything is direct summation over kernel offsets; each
offset contributes one shifted copy of the image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when grid shapes are incompatible."""


class BoundaryMode(enum.Enum):
    CIRCULAR = "circular"
    ZERO_PAD = "zeropad"

    @classmethod
    def parse(cls, value: "BoundaryMode | str") -> "BoundaryMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown boundary mode {value!r}; expected 'circular' or 'zeropad'"
            ) from None


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise: standard deviation and generator seed."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise ValueError(f"noise seed must be non-negative, got {self.seed}")


def as_grid(values, name: str = "grid") -> np.ndarray:
    """Validate and convert ``values`` to a finite 2D float64 array."""
    g = np.asarray(values, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2D grid, got shape {g.shape}")
    if not np.isfinite(g).all():
        raise ValueError(f"{name} contains non-finite values")
    return g


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_fits(kshape, ishape, what: str):
    m, n = kshape
    M, N = ishape
    if m < 1 or n < 1:
        raise DimensionError(f"{what}: kernel shape {kshape} must be positive")
    if m > M or n > N:
        raise DimensionError(f"{what}: kernel {kshape} larger than image {ishape}")


def kernel_center(kshape) -> tuple[int, int]:
    return kshape[0] // 2, kshape[1] // 2


def _offsets(kshape):
    cu, cv = kernel_center(kshape)
    for u in range(kshape[0]):
        for v in range(kshape[1]):
            yield u, v, u - cu, v - cv


class _Shifter:
    """Produces ``img[i - di, j - dj]`` for the whole grid under a boundary mode."""

    def __init__(self, img: np.ndarray, kshape, mode: BoundaryMode):
        self.img = img
        self.mode = mode
        if mode is BoundaryMode.ZERO_PAD:
            m, n = kshape
            self.pm, self.pn = m, n
            self.padded = np.pad(img, ((m, m), (n, n)))

    def __call__(self, di: int, dj: int) -> np.ndarray:
        if self.mode is BoundaryMode.CIRCULAR:
            return np.roll(self.img, (di, dj), axis=(0, 1))
        M, N = self.img.shape
        r0 = self.pm - di
        c0 = self.pn - dj
        return self.padded[r0:r0 + M, c0:c0 + N]


def flip180(g) -> np.ndarray:
    """Reverse both axes (180 degree rotation)."""
    g = as_grid(g)
    return g[::-1, ::-1].copy()


def conv_same(image, kernel, mode: BoundaryMode = BoundaryMode.ZERO_PAD) -> np.ndarray:
    """Same-size 2D convolution of ``image`` by ``kernel``."""
    image = as_grid(image, "image")
    kernel = as_grid(kernel, "kernel")
    mode = BoundaryMode.parse(mode)
    _check_fits(kernel.shape, image.shape, "conv_same")
    shift = _Shifter(image, kernel.shape, mode)
    out = np.zeros_like(image)
    for u, v, du, dv in _offsets(kernel.shape):
        w = kernel[u, v]
        if w != 0.0:
            out += w * shift(du, dv)
    return out


def corr_same(image, kernel, mode: BoundaryMode = BoundaryMode.ZERO_PAD) -> np.ndarray:
    """Same-size correlation: ``out[i, j] = sum K[u, v] * I[i + du, j + dv]``.

    This is the exact adjoint of :func:`conv_same` with respect to the image,
    for odd and even kernels alike.
    """
    image = as_grid(image, "image")
    kernel = as_grid(kernel, "kernel")
    mode = BoundaryMode.parse(mode)
    _check_fits(kernel.shape, image.shape, "corr_same")
    shift = _Shifter(image, kernel.shape, mode)
    out = np.zeros_like(image)
    for u, v, du, dv in _offsets(kernel.shape):
        w = kernel[u, v]
        if w != 0.0:
            out += w * shift(-du, -dv)
    return out


def corr_kernel_window(ratio, image, kshape, mode: BoundaryMode = BoundaryMode.ZERO_PAD) -> np.ndarray:
    """Correlate ``ratio`` with ``image`` over the kernel support.

    ``out[u, v] = sum_{i,j} ratio[i, j] * image[i - du, j - dv]``, the
    gradient of ``sum(ratio * conv_same(image, K))`` with respect to ``K``.
    """
    ratio = as_grid(ratio, "ratio")
    image = as_grid(image, "image")
    mode = BoundaryMode.parse(mode)
    _check_same_shape(ratio, image, "corr_kernel_window")
    kshape = (int(kshape[0]), int(kshape[1]))
    _check_fits(kshape, image.shape, "corr_kernel_window")
    shift = _Shifter(image, kshape, mode)
    out = np.empty(kshape)
    for u, v, du, dv in _offsets(kshape):
        out[u, v] = np.sum(ratio * shift(du, dv))
    return out


def safe_div(num, den, eps: float = 1e-8) -> np.ndarray:
    num = as_grid(num, "num")
    den = as_grid(den, "den")
    _check_same_shape(num, den, "safe_div")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return num / (den + eps)


def relu_map(g) -> np.ndarray:
    return np.maximum(as_grid(g), 0.0)


# Largest and smallest float64 values strictly inside (0, 1).
_SIG_HI = np.nextafter(1.0, 0.0)
_SIG_LO = np.finfo(np.float64).tiny


def sigmoid(values) -> np.ndarray:
    """Logistic function clipped to the open interval (0, 1) at float64 precision."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    pos = values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-values[pos]))
    ez = np.exp(values[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_map(g) -> np.ndarray:
    return sigmoid(as_grid(g))


def add_awgn(g, spec: NoiseSpec) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise drawn from a generator seeded by ``spec.seed``."""
    g = as_grid(g)
    if spec.sigma == 0:
        return g.copy()
    rng = np.random.default_rng(spec.seed)
    return g + rng.normal(0.0, spec.sigma, size=g.shape)

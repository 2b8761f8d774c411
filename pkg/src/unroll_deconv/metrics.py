"""Image and kernel quality metrics: SSIM, PSNR, ISNR and kernel RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import BoundaryMode, DimensionError, as_grid, conv_same


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    a = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(a ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


@dataclass(frozen=True)
class SsimParams:
    """SSIM constants: Gaussian window, stabilizers ``C1``/``C2``, dynamic range."""

    window: np.ndarray = field(default_factory=gaussian_window)
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window_for(self, shape) -> np.ndarray:
        """Window usable on a grid of ``shape``.

        Grids smaller than the window get a central crop whose sides are the
        largest odd lengths that fit, renormalized to unit sum.
        """
        wm, wn = self.window.shape
        m = min(wm, shape[0] if shape[0] % 2 else shape[0] - 1)
        n = min(wn, shape[1] if shape[1] % 2 else shape[1] - 1)
        if (m, n) == (wm, wn):
            return self.window
        r0, c0 = (wm - m) // 2, (wn - n) // 2
        w = self.window[r0:r0 + m, c0:c0 + n]
        return w / w.sum()


DEFAULT_SSIM = SsimParams()


def _windowed(g, w):
    return conv_same(g, w, BoundaryMode.ZERO_PAD)


def ssim_terms(a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> dict:
    """Local statistics and the SSIM map for ``a`` against ``b``."""
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    w = p.window_for(a.shape)
    mu_a = _windowed(a, w)
    mu_b = _windowed(b, w)
    var_a = _windowed(a * a, w) - mu_a * mu_a
    var_b = _windowed(b * b, w) - mu_b * mu_b
    cov = _windowed(a * b, w) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + p.c1
    a2 = 2.0 * cov + p.c2
    b1 = mu_a * mu_a + mu_b * mu_b + p.c1
    b2 = var_a + var_b + p.c2
    smap = (a1 * a2) / (b1 * b2)
    return dict(w=w, mu_a=mu_a, mu_b=mu_b, a1=a1, a2=a2, b1=b1, b2=b2, map=smap)


def ssim_backward(a, b, terms: dict, seed: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``seed * mean(ssim_map)`` with respect to ``a`` and ``b``."""
    w = terms["w"]
    mu_a, mu_b = terms["mu_a"], terms["mu_b"]
    a1, a2, b1, b2, s = terms["a1"], terms["a2"], terms["b1"], terms["b2"], terms["map"]
    scale = seed / s.size
    # Partials of the map with respect to the local statistics.
    d_cov = scale * 2.0 * a1 / (b1 * b2)
    d_var = -scale * s / b2  # same for var_a and var_b
    d_mu_a = scale * (2.0 * mu_b * a2 / (b1 * b2) - 2.0 * mu_a * s / b1)
    d_mu_b = scale * (2.0 * mu_a * a2 / (b1 * b2) - 2.0 * mu_b * s / b1)
    # var = W(x^2) - mu^2 and cov = W(ab) - mu_a mu_b also depend on the means.
    d_mu_a_tot = d_mu_a - 2.0 * mu_a * d_var - mu_b * d_cov
    d_mu_b_tot = d_mu_b - 2.0 * mu_b * d_var - mu_a * d_cov
    # The window is symmetric, so the windowing operator is self-adjoint.
    wt_var = _windowed(d_var, w)
    wt_cov = _windowed(d_cov, w)
    ga = _windowed(d_mu_a_tot, w) + 2.0 * a * wt_var + b * wt_cov
    gb = _windowed(d_mu_b_tot, w) + 2.0 * b * wt_var + a * wt_cov
    return ga, gb


def ssim(a, b, p: SsimParams = DEFAULT_SSIM) -> float:
    """Mean structural similarity between two equally shaped grids.

    Local statistics use the Gaussian window of ``p`` under zero padding.
    """
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    return float(np.mean(ssim_terms(a, b, p)["map"]))


def _sq_err(a, b) -> np.longdouble:
    # Extended precision keeps e.g. a constant 0.1 offset at exactly 20 dB.
    a = as_grid(a)
    b = as_grid(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.longdouble) - b.astype(np.longdouble)
    return np.mean(d * d)


def mse(a, b) -> float:
    return float(_sq_err(a, b))


def psnr(truth, estimate, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the grids are identical."""
    err = _sq_err(truth, estimate)
    if err == 0:
        return math.inf
    return float(10 * np.log10(np.longdouble(peak) ** 2 / err))


def isnr(truth, blurred, estimate) -> float:
    """Improvement in SNR of ``estimate`` over ``blurred``, in dB."""
    num = _sq_err(truth, blurred)
    den = _sq_err(truth, estimate)
    if den == 0:
        return math.inf
    if num == 0:
        return -math.inf
    return float(10 * np.log10(num / den))


def normalize_kernel(h) -> np.ndarray:
    h = as_grid(h, "kernel")
    total = h.sum()
    if total == 0.0:
        raise ValueError("cannot normalize a kernel with zero sum")
    return h / total


def kernel_rmse(h_true, h_est, align: bool = False) -> float:
    """RMSE between unit-sum normalized kernels.

    With ``align`` the estimate is circularly shifted over every offset and
    the smallest error is returned, absorbing the translation ambiguity of
    blind deconvolution.
    """
    t = normalize_kernel(h_true)
    e = normalize_kernel(h_est)
    if t.shape != e.shape:
        raise DimensionError(f"kernel_rmse: shape mismatch {t.shape} vs {e.shape}")
    best = math.sqrt(np.mean((t - e) ** 2))
    if align:
        m, n = e.shape
        for du in range(m):
            for dv in range(n):
                shifted = np.roll(e, (du, dv), axis=(0, 1))
                best = min(best, math.sqrt(np.mean((t - shifted) ** 2)))
    return best

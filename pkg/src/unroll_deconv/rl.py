"""Blind Richardson-Lucy deconvolution.

Each iteration first refines the kernel against the current image, then
refines the image against the new kernel:

    H' = corr_window(y / (x * H), x) . H
    x' = conv(y / (x * H'), flip(H')) . x

where ``*`` is same-size convolution and ``.`` the elementwise product.
Neither the kernel nor the image is renormalized or clipped between
iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    BoundaryMode,
    DimensionError,
    as_grid,
    conv_same,
    corr_kernel_window,
    flip180,
    safe_div,
)

DEFAULT_EPS = 1e-8


@dataclass
class RlState:
    x: np.ndarray
    H: np.ndarray
    iteration: int = 0


def uniform_init(rng: np.random.Generator, image_shape, kshape) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``x0`` then ``H0`` from U(0, 1).

    Shared by the RL and unrolled solvers so that equal seeds give equal
    starting points.
    """
    x0 = rng.uniform(0.0, 1.0, size=tuple(image_shape))
    h0 = rng.uniform(0.0, 1.0, size=tuple(kshape))
    return x0, h0


def _check(y, x, h):
    if y.shape != x.shape:
        raise DimensionError(f"observation {y.shape} and image {x.shape} differ in shape")
    if h.shape[0] > x.shape[0] or h.shape[1] > x.shape[1]:
        raise DimensionError(f"kernel {h.shape} larger than image {x.shape}")


def rl_update_kernel(y, state: RlState, mode=BoundaryMode.ZERO_PAD, eps: float = DEFAULT_EPS) -> np.ndarray:
    y = as_grid(y, "y")
    x = as_grid(state.x, "x")
    h = as_grid(state.H, "H")
    _check(y, x, h)
    ratio = safe_div(y, conv_same(x, h, mode), eps)
    return corr_kernel_window(ratio, x, h.shape, mode) * h


def rl_update_image(y, x, h_next, mode=BoundaryMode.ZERO_PAD, eps: float = DEFAULT_EPS) -> np.ndarray:
    y = as_grid(y, "y")
    x = as_grid(x, "x")
    h_next = as_grid(h_next, "H")
    _check(y, x, h_next)
    ratio = safe_div(y, conv_same(x, h_next, mode), eps)
    return conv_same(ratio, flip180(h_next), mode) * x


def data_fidelity(y, x, h, mode=BoundaryMode.ZERO_PAD) -> float:
    """Squared residual norm ``||y - x * H||^2``."""
    r = as_grid(y) - conv_same(x, h, mode)
    return float(np.sum(r * r))


def rl_blind(y, kshape, iters: int, seed: int = 0, mode=BoundaryMode.ZERO_PAD,
             eps: float = DEFAULT_EPS, x0=None, H0=None):
    """Run ``iters`` blind RL iterations from a U(0, 1) start.

    ``x0``/``H0`` override the seeded initialization when given.

    Returns
    -------
    x, H : numpy.ndarray
        Final image and kernel estimates.
    trace : list of float
        Data fidelity after each iteration.
    """
    if int(iters) != iters or iters < 1:
        raise ValueError(f"iters must be a positive integer, got {iters}")
    y = as_grid(y, "y")
    mode = BoundaryMode.parse(mode)
    rng = np.random.default_rng(seed)
    x_init, h_init = uniform_init(rng, y.shape, kshape)
    state = RlState(
        x=x_init if x0 is None else as_grid(x0, "x0"),
        H=h_init if H0 is None else as_grid(H0, "H0"),
    )
    trace = []
    for _ in range(int(iters)):
        h_next = rl_update_kernel(y, state, mode, eps)
        x_next = rl_update_image(y, state.x, h_next, mode, eps)
        state = RlState(x=x_next, H=h_next, iteration=state.iteration + 1)
        trace.append(data_fidelity(y, state.x, state.H, mode))
    return state.x, state.H, trace

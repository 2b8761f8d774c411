"""Unrolled Richardson-Lucy network with self-supervised training.

Layer ``k`` replaces the running kernel and image of one RL iteration by
trainable weights ``W_H[k]`` (kernel shaped) and ``W_x[k]`` (image shaped):

    H[k+1] = sigmoid(relu(corr_window(y / relu(x[k] * W_H[k]), x[k])) . W_H[k])
    x[k+1] = sigmoid(relu(conv(y / relu(W_x[k] * H[k+1]), flip(H[k+1]))) . W_x[k])

The weights are fitted to a single blurred observation (or a small batch
sharing one kernel) by minimizing ``-SSIM(x[L] * H[L], y) + lam * TV(x[L])``
with RMSprop.  After every epoch the network output is fed back as the
next epoch's ``x[0]``, detached from the graph.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autodiff import Tape, TapeError, backward
from .grid import BoundaryMode, DimensionError, as_grid
from .manifest import RunManifest
from .metrics import DEFAULT_SSIM, SsimParams
from .rl import uniform_init


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss, value or gradient."""

    def __init__(self, message: str, epoch: int, node_id: int | None = None):
        super().__init__(f"{message} (epoch {epoch}, node {node_id})")
        self.epoch = epoch
        self.node_id = node_id


@dataclass
class TrainConfig:
    kshape: tuple[int, int]
    layers: int = 2
    epochs: int = 5000
    lr0: float = 0.1
    decay_factor: float = 0.1
    decay_points: tuple[float, ...] = (0.4, 0.6)
    lam: float = 0.1
    batch_size: int = 1
    eps_div: float = 1e-8
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    mode: BoundaryMode = BoundaryMode.ZERO_PAD
    seed: int = 0

    def __post_init__(self):
        self.kshape = (int(self.kshape[0]), int(self.kshape[1]))
        self.decay_points = tuple(float(p) for p in self.decay_points)
        self.mode = BoundaryMode.parse(self.mode)
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if min(self.kshape) < 1:
            raise ValueError(f"kernel shape must be positive, got {self.kshape}")
        pts = self.decay_points
        if any(not 0 < p < 1 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"decay points must be strictly increasing in (0, 1), got {pts}")
        if not self.eps_div > 0:
            raise ValueError("eps_div must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["kshape"] = list(self.kshape)
        d["decay_points"] = list(self.decay_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["kshape"] = tuple(d["kshape"])
        d["decay_points"] = tuple(d["decay_points"])
        return cls(**d)


@dataclass
class LayerWeights:
    """Weights of one layer.

    ``W_x`` stacks one image-shaped grid per batch item, shape ``(B, M, N)``;
    ``W_H`` is shared by the batch.
    """

    W_x: np.ndarray
    W_H: np.ndarray


@dataclass
class ParameterSet:
    layers: list[LayerWeights]

    def __len__(self):
        return len(self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for lw in self.layers:
            out += [lw.W_x, lw.W_H]
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet([LayerWeights(lw.W_x.copy(), lw.W_H.copy()) for lw in self.layers])

    @classmethod
    def uniform(cls, rng: np.random.Generator, n_items: int, image_shape, kshape, layers: int):
        out = []
        for _ in range(layers):
            w_h = rng.uniform(0.0, 1.0, size=tuple(kshape))
            w_x = rng.uniform(0.0, 1.0, size=(n_items,) + tuple(image_shape))
            out.append(LayerWeights(W_x=w_x, W_H=w_h))
        return cls(out)


@dataclass
class TrainState:
    params: ParameterSet
    accumulators: ParameterSet
    x0: list[np.ndarray]
    H0: list[np.ndarray]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    tape_sizes: list[int] = field(default_factory=list)


@dataclass
class UnrolledPass:
    """Node ids of one forward pass recorded on ``tape``."""

    tape: Tape
    y: int
    x: int
    H: int
    weights: list[tuple[int, int]]
    layers: list[tuple[int, int]]


class TrainResult(NamedTuple):
    images: list[np.ndarray]
    kernels: list[np.ndarray]
    state: TrainState
    manifest: RunManifest


def forward_layer_kernel(tape: Tape, y: int, x_k: int, w_h: int, mode, eps: float) -> int:
    kshape = tape.value(w_h).shape
    den = tape.relu(tape.conv_same(x_k, w_h, mode))
    ratio = tape.safe_div(y, den, eps)
    corr = tape.relu(tape.corr_kernel_window(ratio, x_k, kshape, mode))
    return tape.sigmoid(tape.hadamard(corr, w_h))


def forward_layer_image(tape: Tape, y: int, h_next: int, w_x: int, mode, eps: float) -> int:
    # The previous image estimate does not appear here; W_x takes its place
    # in both the denominator and the final product.
    den = tape.relu(tape.conv_same(w_x, h_next, mode))
    ratio = tape.safe_div(y, den, eps)
    back = tape.relu(tape.conv_same(ratio, tape.flip180(h_next), mode))
    return tape.sigmoid(tape.hadamard(back, w_x))


def forward_unrolled(y, params: ParameterSet, x0, H0, cfg: TrainConfig, item: int = 0,
                     tape: Tape | None = None, trainable: bool = True) -> UnrolledPass:
    """Record all ``L`` layers for batch item ``item``.

    ``x0`` feeds the first kernel update only.  ``H0`` is accepted for
    symmetry with the RL initialization but no layer reads it: each kernel
    update is driven by ``W_H[k]`` rather than the previous kernel.
    """
    if len(params) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} layers of weights, got {len(params)}")
    y = as_grid(y, "y")
    x0 = as_grid(x0, "x0")
    if x0.shape != y.shape:
        raise DimensionError(f"x0 {x0.shape} and y {y.shape} differ in shape")
    tape = Tape() if tape is None else tape
    leaf = tape.param if trainable else tape.leaf
    y_id = tape.leaf(y)
    x = tape.leaf(x0)
    h = None
    weights, layers = [], []
    for lw in params.layers:
        w_x = lw.W_x[item] if lw.W_x.ndim == 3 else lw.W_x
        if w_x.shape != y.shape:
            raise DimensionError(f"W_x {w_x.shape} and y {y.shape} differ in shape")
        wx_id = leaf(w_x)
        wh_id = leaf(lw.W_H)
        weights.append((wx_id, wh_id))
        h = forward_layer_kernel(tape, y_id, x, wh_id, cfg.mode, cfg.eps_div)
        x = forward_layer_image(tape, y_id, h, wx_id, cfg.mode, cfg.eps_div)
        layers.append((h, x))
    return UnrolledPass(tape=tape, y=y_id, x=x, H=h, weights=weights, layers=layers)


def durl_loss(tape: Tape, x_L: int, H_L: int, y: int, lam: float, mode,
              ssim_params: SsimParams = DEFAULT_SSIM) -> int:
    """``-SSIM(x_L * H_L, y) + lam * TV(x_L)`` as a scalar tape node."""
    recon = tape.conv_same(x_L, H_L, mode)
    fit = tape.ssim_loss(recon, y, ssim_params)
    reg = tape.scalar_mul(lam, tape.tv_penalty(x_L))
    return tape.add(fit, reg)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule: multiply by ``decay_factor`` at each decay point.

    Epochs are 0-based; a decay point ``p`` takes effect from epoch
    ``ceil(p * N)``.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    # Exact rational arithmetic: 0.6 * 10 is 6.000000000000001 in floats.
    passed = sum(1 for p in cfg.decay_points if epoch >= math.ceil(Fraction(repr(p)) * cfg.epochs))
    # Likewise 0.1 * 0.1 ** 2 is not 0.001; evaluate the decimal values exactly, then round once.
    return float(Fraction(repr(cfg.lr0)) * Fraction(repr(cfg.decay_factor)) ** passed)


def rmsprop_step(param, grad, acc, lr: float, rho: float = 0.9, eps: float = 1e-8):
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    if not param.shape == grad.shape == acc.shape:
        raise DimensionError(f"rmsprop: shapes {param.shape}, {grad.shape}, {acc.shape} differ")
    acc_next = rho * acc + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(acc_next) + eps), acc_next


def _first_nonfinite(tape: Tape):
    for node in tape.nodes:
        if not np.isfinite(node.value).all():
            return node.id
    return None


def _item_step(y, params, x0, h0, cfg, item, epoch):
    """Forward and backward for one batch item; returns loss, grads and outputs."""
    tape = Tape()
    try:
        fp = forward_unrolled(y, params, x0, h0, cfg, item=item, tape=tape)
        loss_id = durl_loss(tape, fp.x, fp.H, fp.y, cfg.lam, cfg.mode)
    except (ValueError, TapeError) as exc:
        # Overflow surfaces as a rejected non-finite grid while recording node next_id.
        raise DivergenceError(f"forward pass failed: {exc}", epoch, tape.next_id) from exc
    loss = float(tape.value(loss_id))
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}", epoch, _first_nonfinite(tape) or loss_id)
    grads = backward(tape, loss_id)
    out = []
    for wx_id, wh_id in fp.weights:
        for nid in (wx_id, wh_id):
            if not np.isfinite(grads[nid]).all():
                raise DivergenceError("non-finite gradient", epoch, nid)
        out.append((grads[wx_id], grads[wh_id]))
    return loss, out, tape.value(fp.x), tape.value(fp.H), len(tape)


def train(y_batch: Sequence, cfg: TrainConfig,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit the unrolled network to ``y_batch``, blurred images sharing one kernel.

    The per-item losses are summed.  ``W_H`` is shared across the batch and
    ``W_x`` is per item.  Random draws from ``cfg.seed`` happen in this order:
    ``x0`` and ``H0`` per item, then ``W_H[k]`` and ``W_x[k]`` per layer.

    After the last update the returned estimates come from one extra forward
    pass with the final weights, so they are exactly what
    :func:`deblur_with_weights` yields for ``state.x0``.
    """
    t_start = time.perf_counter()
    ys = [as_grid(y, "y") for y in y_batch]
    if not 1 <= len(ys) <= cfg.batch_size:
        raise ValueError(f"batch holds {len(ys)} images, allowed 1..{cfg.batch_size}")
    shape = ys[0].shape
    if any(y.shape != shape for y in ys):
        raise DimensionError("all images in a batch must share one shape")
    if cfg.kshape[0] > shape[0] or cfg.kshape[1] > shape[1]:
        raise DimensionError(f"kernel {cfg.kshape} larger than image {shape}")

    rng = np.random.default_rng(cfg.seed)
    x0, h0 = zip(*(uniform_init(rng, shape, cfg.kshape) for _ in ys))
    params = ParameterSet.uniform(rng, len(ys), shape, cfg.kshape, cfg.layers)
    accs = ParameterSet([LayerWeights(np.zeros_like(lw.W_x), np.zeros_like(lw.W_H))
                         for lw in params.layers])
    state = TrainState(params=params, accumulators=accs, x0=list(x0), H0=list(h0))

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        g_x = [np.zeros_like(lw.W_x) for lw in params.layers]
        g_h = [np.zeros_like(lw.W_H) for lw in params.layers]
        total = 0.0
        outputs = []
        for b, y in enumerate(ys):
            loss, grads, x_l, h_l, n_nodes = _item_step(y, params, state.x0[b], state.H0[b], cfg, b, epoch)
            total += loss
            for k, (gx, gh) in enumerate(grads):
                g_x[k][b] += gx
                g_h[k] += gh
            outputs.append((x_l, h_l))
        state.tape_sizes.append(n_nodes)
        for k, lw in enumerate(params.layers):
            acc = accs.layers[k]
            lw.W_x, acc.W_x = rmsprop_step(lw.W_x, g_x[k], acc.W_x, lr, cfg.rmsprop_rho, cfg.rmsprop_eps)
            lw.W_H, acc.W_H = rmsprop_step(lw.W_H, g_h[k], acc.W_H, lr, cfg.rmsprop_rho, cfg.rmsprop_eps)
        # Warm restart: values only, the next tape starts from fresh leaves.
        state.x0 = [x.copy() for x, _ in outputs]
        state.H0 = [h.copy() for _, h in outputs]
        state.loss_history.append(total)
        state.epoch = epoch + 1
        if progress is not None:
            progress(epoch, total)

    images, kernels = [], []
    for b, y in enumerate(ys):
        x_hat, h_hat = deblur_with_weights(y, state, cfg, x0=state.x0[b], item=b)
        images.append(x_hat)
        kernels.append(h_hat)
    manifest = RunManifest(
        command="durl",
        config=cfg.to_dict(),
        seeds={"init": cfg.seed},
        loss_history=list(state.loss_history),
        seconds=time.perf_counter() - t_start,
    )
    return TrainResult(images, kernels, state, manifest)


def deblur_with_weights(y_new, state: TrainState, cfg: TrainConfig, seed: int | None = None,
                        x0=None, item: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One forward pass with frozen weights.

    The starting image is ``x0`` when given, otherwise U(0, 1) drawn from
    ``seed`` exactly as :func:`rl.rl_blind` would draw it.  ``item`` selects
    whose image weights to use when the state was trained on a batch.
    """
    y_new = as_grid(y_new, "y")
    if x0 is None:
        x0, h0 = uniform_init(np.random.default_rng(seed), y_new.shape, cfg.kshape)
    else:
        h0 = None
    fp = forward_unrolled(y_new, state.params, x0, h0, cfg, item=item, trainable=False)
    return fp.tape.value(fp.x).copy(), fp.tape.value(fp.H).copy()

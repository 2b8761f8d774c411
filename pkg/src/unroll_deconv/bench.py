"""Desk-scale benchmark: blind RL against the unrolled network on digits."""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import metrics as M
from .data_io import (
    DatasetItem,
    make_blurred_pair,
    pad_for_kernel,
    random_motion_kernel,
    synthetic_digit,
)
from .deep_url import TrainConfig, train
from .grid import BoundaryMode, NoiseSpec
from .rl import rl_blind

CSV_COLUMNS = ["id", "method", "layers", "epochs", "psnr_db", "isnr_db", "ssim",
               "rmse_raw", "rmse_aligned", "seconds"]
THREADS_ENV = "UNROLL_DECONV_THREADS"


def desk_suite(count: int, kshape=(5, 5), seed: int = 0, images=None, sigma: float = 0.0,
               mode=BoundaryMode.ZERO_PAD) -> list[DatasetItem]:
    """Blurred digit pairs, each with its own random motion kernel.

    ``images`` (e.g. from an MNIST IDX file) are sampled without replacement;
    without them the bundled synthetic digits are used.  Every image is
    zero-padded by the kernel half-width before blurring.
    """
    rng = np.random.default_rng(seed)
    if images is not None:
        picks = rng.choice(len(images), size=count, replace=False)
        sources = [(int(i), images[int(i)]) for i in picks]
    else:
        sources = [(i, synthetic_digit(i % 10, seed=seed * 100003 + i)) for i in range(count)]
    items = []
    for n, (src, img) in enumerate(sources):
        kernel = random_motion_kernel(kshape, rng)
        noise = NoiseSpec(sigma=sigma, seed=seed * 100003 + n)
        items.append(make_blurred_pair(pad_for_kernel(img, kshape), kernel, noise, mode,
                                       ids={"item": n, "source": src}))
    return items


def score(item: DatasetItem, x, h) -> dict:
    return {
        "psnr_db": M.psnr(item.truth, x),
        "isnr_db": M.isnr(item.truth, item.blurred, x),
        "ssim": M.ssim(x, item.truth),
        "rmse_raw": M.kernel_rmse(item.kernel, h, align=False),
        "rmse_aligned": M.kernel_rmse(item.kernel, h, align=True),
        "rmse_unnormalized": float(np.sqrt(np.mean((item.kernel - h) ** 2))),
    }


def run_item(item: DatasetItem, layers: int, epochs: int, seed: int = 0, lam: float = 0.1,
             lr: float = 0.1) -> list[dict]:
    """Score RL (``layers`` iterations) and the unrolled network on one item.

    Both start from the same seeded U(0, 1) draw.
    """
    kshape = item.kernel.shape
    rows = []
    t0 = time.perf_counter()
    x, h, _ = rl_blind(item.blurred, kshape, layers, seed=seed, mode=item.mode)
    rows.append(dict(id=item.ids.get("item", 0), method="rl", layers=layers, epochs=0,
                     **score(item, x, h), seconds=time.perf_counter() - t0))
    t0 = time.perf_counter()
    cfg = TrainConfig(kshape=kshape, layers=layers, epochs=epochs, lam=lam, lr0=lr,
                      mode=item.mode, seed=seed)
    result = train([item.blurred], cfg)
    rows.append(dict(id=item.ids.get("item", 0), method="durl", layers=layers, epochs=epochs,
                     **score(item, result.images[0], result.kernels[0]),
                     seconds=time.perf_counter() - t0))
    return rows


def _run_item_args(args):
    return run_item(*args)


def worker_count() -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def run_benchmark(items, layers: int, epochs: int, seed: int = 0, lam: float = 0.1,
                  lr: float = 0.1, workers: int | None = None) -> list[dict]:
    """Rows for every item, in item order, whatever the pool size."""
    workers = worker_count() if workers is None else workers
    jobs = [(item, layers, epochs, seed, lam, lr) for item in items]
    if workers <= 1 or len(jobs) <= 1:
        results = [_run_item_args(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_item_args, jobs))
    return [row for rows in results for row in rows]


def summarize(rows) -> dict:
    """Mean of every metric per method."""
    out = {}
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        out[method] = {k: float(np.mean([r[k] for r in sel]))
                       for k in ("psnr_db", "isnr_db", "ssim", "rmse_raw", "rmse_aligned")}
        out[method]["count"] = len(sel)
    return out


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def format_table(summary: dict) -> str:
    head = f"{'method':<8}{'n':>4}{'PSNR dB':>10}{'ISNR dB':>10}{'SSIM':>9}{'RMSE':>11}{'RMSE al.':>11}"
    lines = [head, "-" * len(head)]
    for method, s in summary.items():
        lines.append(f"{method:<8}{s['count']:>4}{s['psnr_db']:>10.4f}{s['isnr_db']:>10.4f}"
                     f"{s['ssim']:>9.4f}{s['rmse_raw']:>11.3e}{s['rmse_aligned']:>11.3e}")
    return "\n".join(lines)

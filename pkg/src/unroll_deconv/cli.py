"""Command-line interface.

Every subcommand writes ``manifest.json`` into ``--out``; ``replay``
re-executes a manifest and checks that its metrics come out identical.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 invalid
configuration, 5 malformed input file, 6 numerical divergence, 7 failed
check (gradient check above tolerance, replay mismatch).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import bench as B
from . import metrics as M
from .autodiff import grad_check
from .data_io import (
    FormatError,
    parse_idx_images,
    random_motion_kernel,
    read_kernel_text,
    read_pgm,
    write_kernel_text,
    write_pgm,
)
from .deep_url import (
    DivergenceError,
    LayerWeights,
    ParameterSet,
    TrainConfig,
    TrainState,
    deblur_with_weights,
    durl_loss,
    forward_unrolled,
    train,
)
from .grid import BoundaryMode, DimensionError, NoiseSpec, add_awgn, conv_same
from .manifest import RunManifest, blob_hash
from .rl import rl_blind

log = logging.getLogger("unroll_deconv")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_DIVERGED = 6
EXIT_CHECK = 7

GRADCHECK_TOL = 1e-4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Run:
    """Collects inputs and outputs of one invocation for the manifest."""

    def __init__(self, command: str, argv: list[str], out: Path):
        self.manifest = RunManifest(command=command, config={"argv": argv})
        self.out = out
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def read(self, name: str, path) -> bytes:
        path = Path(path)
        if not path.is_file():
            raise CliError(f"missing input file: {path}", EXIT_MISSING)
        data = path.read_bytes()
        self.manifest.inputs[name] = {"path": str(path.resolve()), "hash": blob_hash(data)}
        return data

    def write(self, name: str, data: bytes | str) -> Path:
        path = self.out / name
        if isinstance(data, str):
            data = data.encode()
        path.write_bytes(data)
        self.manifest.outputs[name] = blob_hash(data)
        return path

    def finish(self) -> Path:
        self.manifest.seconds = time.perf_counter() - self.t0
        return self.manifest.write(self.out / "manifest.json")


def _pgm(run: _Run, name: str, path) -> np.ndarray:
    try:
        return read_pgm(run.read(name, path))
    except FormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_FORMAT) from None


def _kernel(run: _Run, name: str, path) -> np.ndarray:
    try:
        return read_kernel_text(run.read(name, path).decode("utf-8", "replace"))
    except FormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_FORMAT) from None


def _metrics(truth, blurred, x, h_true, h_est) -> dict:
    out = {}
    if truth is not None:
        out.update(psnr=M.psnr(truth, x), ssim=M.ssim(x, truth))
        if blurred is not None:
            out["isnr"] = M.isnr(truth, blurred, x)
    if h_true is not None and h_est is not None:
        out.update(kernel_rmse_raw=M.kernel_rmse(h_true, h_est, align=False),
                   kernel_rmse_aligned=M.kernel_rmse(h_true, h_est, align=True),
                   kernel_rmse_unnormalized=float(np.sqrt(np.mean((h_true - h_est) ** 2))))
    return out


def cmd_blur(args, run: _Run):
    truth = _pgm(run, "image", args.image)
    if args.kernel:
        kernel = _kernel(run, "kernel", args.kernel)
    else:
        kernel = random_motion_kernel(tuple(args.kernel_size), np.random.default_rng(args.seed))
    noise = NoiseSpec(sigma=args.sigma, seed=args.seed)
    blurred = add_awgn(conv_same(truth, kernel, args.boundary), noise)
    run.manifest.seeds = {"noise": args.seed}
    run.write("blurred.pgm", write_pgm(blurred))
    run.write("kernel.txt", write_kernel_text(kernel))
    print(f"wrote {run.out / 'blurred.pgm'}")


def _optional_reference(args, run: _Run):
    truth = _pgm(run, "truth", args.truth) if args.truth else None
    h_true = _kernel(run, "kernel", args.kernel) if args.kernel else None
    return truth, h_true


def cmd_rl(args, run: _Run):
    y = _pgm(run, "image", args.image)
    truth, h_true = _optional_reference(args, run)
    x, h, trace = rl_blind(y, tuple(args.kernel_size), args.layers, seed=args.seed, mode=args.boundary)
    run.manifest.seeds = {"init": args.seed}
    run.manifest.loss_history = trace
    run.manifest.metrics = _metrics(truth, y, x, h_true, h)
    run.write("estimate.pgm", write_pgm(x))
    run.write("kernel_est.txt", write_kernel_text(h))
    _print_metrics(run.manifest.metrics)


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(kshape=tuple(args.kernel_size), layers=args.layers, epochs=args.epochs,
                           lr0=args.lr, lam=args.lam, batch_size=args.batch, mode=args.boundary,
                           seed=args.seed)
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from None


def _save_weights(run: _Run, state: TrainState, cfg: TrainConfig):
    arrays = {"config": np.array(json.dumps(cfg.to_dict()))}
    for k, lw in enumerate(state.params.layers):
        arrays[f"W_x_{k}"] = lw.W_x
        arrays[f"W_H_{k}"] = lw.W_H
    for b, x0 in enumerate(state.x0):
        arrays[f"x0_{b}"] = x0
    path = run.out / "weights.npz"
    np.savez(path, **arrays)
    run.manifest.outputs["weights.npz"] = blob_hash(path.read_bytes())


def _load_weights(run: _Run, path) -> tuple[TrainState, TrainConfig]:
    run.read("weights", path)
    try:
        with np.load(path) as f:
            cfg = TrainConfig.from_dict(json.loads(str(f["config"])))
            layers = [LayerWeights(f[f"W_x_{k}"], f[f"W_H_{k}"]) for k in range(cfg.layers)]
            x0 = [f[name] for name in sorted(n for n in f.files if n.startswith("x0_"))]
    except (KeyError, ValueError, OSError) as exc:
        raise CliError(f"{path}: not a weights file ({exc})", EXIT_FORMAT) from None
    params = ParameterSet(layers)
    return TrainState(params=params, accumulators=params.copy(), x0=x0, H0=[]), cfg


def cmd_durl(args, run: _Run):
    ys = [_pgm(run, f"image_{b}" if b else "image", p) for b, p in enumerate(args.image)]
    truth, h_true = _optional_reference(args, run)
    cfg = _train_config(args)
    try:
        result = train(ys, cfg)
    except DimensionError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from None
    run.manifest.config["train"] = cfg.to_dict()
    run.manifest.seeds = dict(result.manifest.seeds)
    run.manifest.loss_history = list(result.state.loss_history)
    for b, (x, h) in enumerate(zip(result.images, result.kernels)):
        suffix = f"_{b}" if len(ys) > 1 else ""
        run.write(f"estimate{suffix}.pgm", write_pgm(x))
        run.write(f"kernel_est{suffix}.txt", write_kernel_text(h))
    run.manifest.metrics = _metrics(truth, ys[0], result.images[0], h_true, result.kernels[0])
    _save_weights(run, result.state, cfg)
    _print_metrics(run.manifest.metrics)


def cmd_transfer(args, run: _Run):
    state, cfg = _load_weights(run, args.weights)
    y = _pgm(run, "image", args.image)
    truth, h_true = _optional_reference(args, run)
    try:
        x, h = deblur_with_weights(y, state, cfg, seed=args.seed)
    except DimensionError as exc:
        raise CliError(f"image does not match the trained weights: {exc}", EXIT_CONFIG) from None
    run.manifest.seeds = {"init": args.seed}
    run.manifest.config["train"] = cfg.to_dict()
    run.manifest.metrics = _metrics(truth, y, x, h_true, h)
    run.write("estimate.pgm", write_pgm(x))
    run.write("kernel_est.txt", write_kernel_text(h))
    _print_metrics(run.manifest.metrics)


def cmd_eval(args, run: _Run):
    truth = _pgm(run, "truth", args.truth)
    x = _pgm(run, "image", args.image)
    blurred = _pgm(run, "blurred", args.blurred) if args.blurred else None
    h_true = _kernel(run, "kernel", args.kernel) if args.kernel else None
    h_est = _kernel(run, "kernel_est", args.kernel_est) if args.kernel_est else None
    try:
        run.manifest.metrics = _metrics(truth, blurred, x, h_true, h_est)
    except (DimensionError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    _print_metrics(run.manifest.metrics)


def gradcheck_error(layers: int, image: int, kernel: int, seed: int = 0,
                    mode=BoundaryMode.ZERO_PAD, step: float = 1e-4) -> float:
    """Worst finite-difference mismatch of the full training loss on a random instance."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(kshape=(kernel, kernel), layers=layers, epochs=1, mode=mode, seed=seed)
    y = rng.uniform(0.0, 1.0, size=(image, image))
    x0 = rng.uniform(0.0, 1.0, size=(image, image))
    params = []
    for _ in range(layers):
        params += [rng.uniform(0.0, 1.0, size=(image, image)), rng.uniform(0.0, 1.0, size=(kernel, kernel))]

    def builder(ps):
        layers_w = [LayerWeights(ps[2 * k], ps[2 * k + 1]) for k in range(layers)]
        fp = forward_unrolled(y, ParameterSet(layers_w), x0, None, cfg)
        return fp.tape, durl_loss(fp.tape, fp.x, fp.H, fp.y, cfg.lam, cfg.mode)

    return grad_check(builder, params, step)


def cmd_gradcheck(args, run: _Run):
    err = gradcheck_error(args.layers, args.image, args.kernel, args.seed, args.boundary)
    run.manifest.seeds = {"instance": args.seed}
    run.manifest.metrics = {"max_relative_error": err}
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    if not ok:
        raise CliError("gradient check above tolerance", EXIT_CHECK)


def cmd_bench(args, run: _Run):
    images = None
    if args.image:
        try:
            images = parse_idx_images(run.read("images", args.image))
        except FormatError as exc:
            raise CliError(f"{args.image}: {exc}", EXIT_FORMAT) from None
        if args.count > len(images):
            raise CliError(f"--count {args.count} exceeds {len(images)} images", EXIT_CONFIG)
    items = B.desk_suite(args.count, tuple(args.kernel_size), seed=args.seed, images=images,
                         sigma=args.sigma, mode=args.boundary)
    rows = B.run_benchmark(items, args.layers, args.epochs, seed=args.seed, lam=args.lam, lr=args.lr)
    summary = B.summarize(rows)
    table = B.format_table(summary)
    run.manifest.seeds = {"suite": args.seed, "init": args.seed}
    run.manifest.rows = [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    run.manifest.metrics = summary
    run.write("metrics.csv", B.to_csv(rows))
    run.write("table.txt", table + "\n")
    print(table)


def _comparable(m: RunManifest) -> dict:
    return {"metrics": m.metrics, "rows": m.rows, "loss_history": m.loss_history}


def cmd_replay(args, out: Path) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise CliError(f"missing manifest: {path}", EXIT_MISSING)
    try:
        old = RunManifest.read(path)
    except (ValueError, TypeError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_FORMAT) from None
    for name, rec in old.inputs.items():
        p = Path(rec["path"])
        if not p.is_file():
            raise CliError(f"replay input {name} missing: {p}", EXIT_MISSING)
        if blob_hash(p.read_bytes()) != rec["hash"]:
            raise CliError(f"replay input {name} changed since the run: {p}", EXIT_CHECK)
    argv = list(old.config["argv"])
    with tempfile.TemporaryDirectory(dir=out if out.exists() else None) as tmp:
        code = run(argv + ["--out", tmp])
        if code != EXIT_OK:
            return code
        new = RunManifest.read(Path(tmp) / "manifest.json")
    if _comparable(new) != _comparable(old):
        raise CliError("replay produced different metrics", EXIT_CHECK)
    print(f"replay of {path} reproduced {len(old.metrics)} metric entries exactly")
    return EXIT_OK


def _print_metrics(metrics: dict):
    for k, v in metrics.items():
        print(f"{k}: {v!r}")


def _common(p, *, seed=True, boundary=True, out=True):
    if seed:
        p.add_argument("--seed", type=int, default=0)
    if boundary:
        p.add_argument("--boundary", type=BoundaryMode.parse, default=BoundaryMode.ZERO_PAD,
                       choices=list(BoundaryMode), metavar="{circular,zeropad}")
    if out:
        p.add_argument("--out", type=Path, default=Path("."))


def _training(p, layers=2):
    p.add_argument("--kernel-size", type=int, nargs=2, metavar=("M", "N"), default=[5, 5])
    p.add_argument("--layers", type=int, default=layers)
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unroll-deconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("blur", help="synthesize a blurred observation")
    p.add_argument("--image", required=True, help="sharp PGM image")
    p.add_argument("--kernel", help="kernel text file (default: random motion kernel)")
    p.add_argument("--kernel-size", type=int, nargs=2, metavar=("M", "N"), default=[5, 5])
    p.add_argument("--sigma", type=float, default=0.0)
    _common(p)

    p = sub.add_parser("rl", help="blind Richardson-Lucy")
    p.add_argument("--image", required=True, help="blurred PGM image")
    p.add_argument("--kernel-size", type=int, nargs=2, metavar=("M", "N"), default=[5, 5])
    p.add_argument("--layers", type=int, default=5, help="number of iterations")
    p.add_argument("--truth", help="sharp PGM for metrics")
    p.add_argument("--kernel", help="true kernel for metrics")
    _common(p)

    p = sub.add_parser("durl", help="train the unrolled network on blurred images")
    p.add_argument("--image", required=True, action="append", help="blurred PGM (repeat for a batch)")
    _training(p)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--truth", help="sharp PGM of the first image, for metrics")
    p.add_argument("--kernel", help="true kernel for metrics")
    _common(p)

    p = sub.add_parser("transfer", help="deblur a new image with trained weights")
    p.add_argument("--weights", required=True, help="weights.npz written by durl")
    p.add_argument("--image", required=True)
    p.add_argument("--truth")
    p.add_argument("--kernel")
    _common(p, boundary=False)

    p = sub.add_parser("eval", help="score an estimate against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--image", required=True, help="estimated PGM")
    p.add_argument("--blurred")
    p.add_argument("--kernel", help="true kernel")
    p.add_argument("--kernel-est", help="estimated kernel")
    _common(p, seed=False, boundary=False)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--image", type=int, default=8, help="image side length")
    p.add_argument("--kernel", type=int, default=3, help="kernel side length")
    _common(p)

    p = sub.add_parser("bench", help="RL versus the unrolled network on digits")
    p.add_argument("dataset", choices=["mnist"])
    p.add_argument("--image", help="MNIST IDX image file (default: bundled synthetic digits)")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.0)
    _training(p)
    _common(p)

    p = sub.add_parser("replay", help="re-run a manifest and compare metrics")
    p.add_argument("manifest")
    p.add_argument("--out", type=Path, default=Path("."))
    return parser


COMMANDS = {
    "blur": cmd_blur,
    "rl": cmd_rl,
    "durl": cmd_durl,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def _strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "batch", False) is None:
        args.batch = len(args.image)
    try:
        if args.command == "replay":
            return cmd_replay(args, args.out)
        record = _strip_out(argv)
        r = _Run(args.command, record, args.out)
        COMMANDS[args.command](args, r)
        r.finish()
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Dataset and file I/O: MNIST IDX, binary PGM, plain-text kernels.

Also generates motion-blur kernels and digit-like test images, and
synthesizes blurred observations from them.
"""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import BoundaryMode, NoiseSpec, add_awgn, as_grid, conv_same

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# Refuse headers that claim more than this many payload bytes.
IDX_MAX_PAYLOAD = 1 << 31


class FormatError(ValueError):
    """Malformed input file."""


class IdxMagicError(FormatError):
    pass


class IdxTruncatedError(FormatError):
    pass


class IdxDimensionError(FormatError):
    pass


class PgmFormatError(FormatError):
    pass


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(data)
        except (EOFError, OSError, zlib.error) as exc:
            raise IdxTruncatedError(f"corrupt or truncated gzip stream: {exc}") from None
    return data


def _parse_idx(data: bytes, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    data = _maybe_gunzip(bytes(data))
    if len(data) < 4:
        raise IdxTruncatedError(f"IDX header truncated: {len(data)} of 4 magic bytes")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxMagicError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndims
    if len(data) < header:
        raise IdxTruncatedError(f"IDX header truncated: {len(data)} of {header} bytes")
    dims = struct.unpack(">" + "I" * ndims, data[4:header])
    payload = math.prod(dims)
    if payload > IDX_MAX_PAYLOAD or any(d == 0 for d in dims[1:]):
        raise IdxDimensionError(f"IDX dimensions {dims} overflow or are degenerate")
    body = data[header:]
    if len(body) < payload:
        raise IdxTruncatedError(f"IDX payload truncated: {len(body)} of {payload} bytes")
    if len(body) > payload:
        raise FormatError(f"IDX payload has {len(body) - payload} trailing bytes")
    return dims, body


def parse_idx_images(data: bytes) -> list[np.ndarray]:
    """Images of an IDX3 (``0x00000803``) file scaled to [0, 1].

    Gzip-compressed input is accepted transparently.
    """
    (count, rows, cols), body = _parse_idx(data, IDX_IMAGES_MAGIC, 3)
    arr = np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)
    return [a.astype(np.float64) / 255.0 for a in arr]


def parse_idx_labels(data: bytes) -> np.ndarray:
    (count,), body = _parse_idx(data, IDX_LABELS_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8).copy()


def load_idx_images(path) -> list[np.ndarray]:
    return parse_idx_images(Path(path).read_bytes())


def _pgm_tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise PgmFormatError(f"PGM header ended after {len(tokens)} tokens")
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j].decode("latin-1"))
        i = j
    return tokens, i


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval 255 into a [0, 1] grid."""
    tokens, end = _pgm_tokens(data, 4)
    magic, width, height, maxval = tokens
    if magic != "P5":
        raise PgmFormatError(f"unsupported PGM magic {magic!r}, expected 'P5'")
    try:
        w, h, mx = int(width), int(height), int(maxval)
    except ValueError:
        bad = next(t for t in (width, height, maxval) if not t.isdigit())
        raise PgmFormatError(f"non-numeric PGM header token {bad!r}") from None
    if w < 1 or h < 1:
        raise PgmFormatError(f"bad PGM size token {width!r} x {height!r}")
    if mx != 255:
        raise PgmFormatError(f"unsupported PGM maxval {maxval!r}, expected '255'")
    start = end + 1  # exactly one whitespace byte before the raster
    raster = data[start:start + w * h]
    if len(raster) < w * h:
        raise PgmFormatError(f"PGM raster truncated: {len(raster)} of {w * h} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_pgm(g) -> bytes:
    g = as_grid(g)
    q = np.rint(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = q.shape
    return b"P5\n%d %d\n255\n" % (cols, rows) + q.tobytes()


def read_kernel_text(text: str) -> np.ndarray:
    """Parse a kernel file: a ``"m n"`` line, then ``m`` rows of ``n`` decimals."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty kernel file")
    head = lines[0].split()
    if len(head) != 2 or not all(t.isdigit() for t in head):
        raise FormatError(f"kernel header must be 'm n', got {lines[0]!r}")
    m, n = int(head[0]), int(head[1])
    rows = lines[1:]
    if len(rows) != m:
        raise FormatError(f"kernel declares {m} rows, found {len(rows)}")
    out = np.empty((m, n))
    for r, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != n:
            raise FormatError(f"kernel row {r} has {len(vals)} values, expected {n}")
        try:
            out[r] = [float(v) for v in vals]
        except ValueError as exc:
            raise FormatError(f"kernel row {r}: {exc}") from None
    return as_grid(out, "kernel")


def write_kernel_text(h) -> str:
    h = as_grid(h, "kernel")
    lines = [f"{h.shape[0]} {h.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in h]
    return "\n".join(lines) + "\n"


def delta_kernel(size) -> np.ndarray:
    m, n = size
    k = np.zeros((m, n))
    k[m // 2, n // 2] = 1.0
    return k


def gen_motion_kernel(size, length: float, angle: float, seed: int | None = None) -> np.ndarray:
    """Rasterize a straight motion path through the kernel center.

    The segment of ``length`` pixels at ``angle`` radians (counter-clockwise
    from the column axis) is sampled densely and each sample is splatted
    bilinearly.  A ``seed`` jitters both endpoints by up to a quarter pixel.
    The result has unit sum.
    """
    m, n = int(size[0]), int(size[1])
    if length < 0 or length > min(m, n):
        raise ValueError(f"motion length {length} outside [0, {min(m, n)}]")
    if length == 0:
        return delta_kernel((m, n))
    cr, cc = m // 2, n // 2
    dr, dc = -0.5 * length * math.sin(angle), 0.5 * length * math.cos(angle)
    p0 = np.array([cr - dr, cc - dc])
    p1 = np.array([cr + dr, cc + dc])
    if seed is not None:
        rng = np.random.default_rng(seed)
        jitter = 0.25 * min(1.0, length)
        p0 = p0 + rng.uniform(-jitter, jitter, 2)
        p1 = p1 + rng.uniform(-jitter, jitter, 2)
    hi = np.array([m - 1, n - 1], dtype=np.float64)
    p0 = np.clip(p0, 0.0, hi)
    p1 = np.clip(p1, 0.0, hi)
    samples = max(2, int(math.ceil(64 * length)))
    t = (np.arange(samples) + 0.5) / samples
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    k = np.zeros((m, n))
    r0 = np.floor(pts[:, 0]).astype(int)
    c0 = np.floor(pts[:, 1]).astype(int)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    for dr_, dc_, w in ((0, 0, (1 - fr) * (1 - fc)), (1, 0, fr * (1 - fc)),
                        (0, 1, (1 - fr) * fc), (1, 1, fr * fc)):
        rr = np.minimum(r0 + dr_, m - 1)
        cc_ = np.minimum(c0 + dc_, n - 1)
        np.add.at(k, (rr, cc_), w)
    return k / k.sum()


def random_motion_kernel(size, rng: np.random.Generator) -> np.ndarray:
    """Motion kernel with random length in ``[1, min(size)]`` and angle."""
    length = rng.uniform(1.0, min(size))
    angle = rng.uniform(0.0, math.pi)
    return gen_motion_kernel(size, length, angle, seed=int(rng.integers(2 ** 32)))


def _arc(cx, cy, rx, ry, t0, t1, n=24):
    t = np.linspace(t0, t1, n)
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Digit strokes as polylines in a unit box, (x right, y down).
_DIGITS = {
    0: [_arc(0.5, 0.5, 0.3, 0.45, 0, 2 * math.pi, 40)],
    1: [[(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)]],
    2: [_arc(0.5, 0.3, 0.3, 0.25, math.pi, 2.2 * math.pi) + [(0.2, 0.95), (0.85, 0.95)]],
    3: [_arc(0.5, 0.27, 0.28, 0.22, -0.8 * math.pi, 0.5 * math.pi),
        _arc(0.5, 0.72, 0.32, 0.23, -0.5 * math.pi, 0.8 * math.pi)],
    4: [[(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.85, 0.65)]],
    5: [[(0.8, 0.05), (0.3, 0.05), (0.25, 0.45)],
        _arc(0.5, 0.66, 0.3, 0.28, -0.75 * math.pi, 0.85 * math.pi)],
    6: [_arc(0.75, 0.5, 0.5, 0.45, -0.6 * math.pi, -1.02 * math.pi),
        _arc(0.5, 0.7, 0.27, 0.24, 0, 2 * math.pi, 32)],
    7: [[(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]],
    8: [_arc(0.5, 0.27, 0.24, 0.22, 0, 2 * math.pi, 32), _arc(0.5, 0.72, 0.29, 0.24, 0, 2 * math.pi, 32)],
    9: [_arc(0.5, 0.3, 0.27, 0.24, 0, 2 * math.pi, 32), [(0.77, 0.3), (0.7, 0.95)]],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / denom, 0.0, 1.0) if denom else 0.0
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def synthetic_digit(digit: int, seed: int, size: int = 28) -> np.ndarray:
    """Render a handwritten-looking digit: bright strokes on a black background.

    The glyph occupies a 20x20 box centered in a ``size`` x ``size`` frame,
    as in MNIST, with seeded jitter in slant, scale, offset and stroke width.
    """
    rng = np.random.default_rng(seed)
    box = 20.0 * rng.uniform(0.85, 1.05)
    slant = rng.uniform(-0.25, 0.25)
    off = rng.uniform(-1.0, 1.0, 2) + (size - box) / 2.0
    width = rng.uniform(0.5, 1.1)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dist = np.full((size, size), np.inf)
    for stroke in _DIGITS[int(digit) % 10]:
        pts = [(off[0] + box * (x + slant * (0.5 - y)), off[1] + box * y) for x, y in stroke]
        for a, b in zip(pts, pts[1:]):
            dist = np.minimum(dist, _segment_distance(cols, rows, a, b))
    return np.clip(1.0 + width - dist, 0.0, 1.0) * (dist < width + 1.0)


def pad_for_kernel(img, kshape) -> np.ndarray:
    """Zero-pad by the kernel half-widths so blur does not leave the frame."""
    m, n = kshape
    return np.pad(as_grid(img), ((m // 2, m // 2), (n // 2, n // 2)))


@dataclass
class DatasetItem:
    truth: np.ndarray
    kernel: np.ndarray
    blurred: np.ndarray
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mode: BoundaryMode = BoundaryMode.ZERO_PAD
    ids: dict = field(default_factory=dict)


def make_blurred_pair(truth, kernel, noise: NoiseSpec = NoiseSpec(), mode=BoundaryMode.ZERO_PAD,
                      ids: dict | None = None) -> DatasetItem:
    truth = as_grid(truth, "truth")
    kernel = as_grid(kernel, "kernel")
    if truth.min() < 0 or truth.max() > 1:
        raise ValueError("truth image must lie in [0, 1]")
    if kernel.min() < 0:
        raise ValueError("kernel must be nonnegative")
    mode = BoundaryMode.parse(mode)
    blurred = add_awgn(conv_same(truth, kernel, mode), noise)
    return DatasetItem(truth=truth, kernel=kernel, blurred=blurred, noise=noise, mode=mode,
                       ids=dict(ids or {}))

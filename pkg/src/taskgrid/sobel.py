"""Sobel edge detection over 8-bit grayscale rasters, plus binary PGM I/O.

Two executors produce byte-identical output for every input:

* :func:`sobel_sequential` — scalar reference, pixels computed one at a
  time in row-major order.
* :func:`sobel_parallel` — the per-pixel work split into ``lane_count``
  contiguous index ranges; each lane is evaluated with vectorized
  integer arithmetic, and large images run their lanes in spawned
  helper processes.

Fixed rules (both executors and any oracle must agree on these):
out-of-bounds neighbors replicate the nearest edge pixel, and the
gradient magnitude is rounded half-up before clamping to [0, 255].
"""

from __future__ import annotations

import math
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np

# Horizontal / vertical derivative kernels, applied elementwise to the
# 3x3 neighborhood and summed.
KERNEL_X = ((-1, -2, -1), (0, 0, 0), (1, 2, 1))
KERNEL_Y = ((1, 0, -1), (2, 0, -2), (1, 0, -1))

# Below this pixel count the process-pool lanes cost more than they
# save; lanes then run inline in the calling process.
_PROCESS_LANES_MIN_PIXELS = 1 << 18

_WHITESPACE = b" \t\n\r\x0b\x0c"


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster: ``pixels[y * width + x]`` is row-major."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if len(self.pixels) != self.width * self.height:
            raise ValueError(
                f"raster length {len(self.pixels)} does not match {self.width}x{self.height}"
            )

    def at(self, x: int, y: int) -> int:
        return self.pixels[y * self.width + x]


class PgmError(ValueError):
    """PGM parse failure; ``code`` distinguishes the failure class."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Whitespace and '#'-to-end-of-line comments separate header tokens.
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in _WHITESPACE:
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            pos = n if nl < 0 else nl + 1
        else:
            break
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def _int_token(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, pos = _next_token(data, pos)
    try:
        value = int(token)
    except ValueError:
        raise PgmError("BAD_HEADER", f"expected integer {what}, got {token!r}") from None
    return value, pos


def parse_pgm(data: bytes) -> GrayImage:
    """Parse a binary ("P5") PGM with maxval 255."""
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise PgmError("UNSUPPORTED_FORMAT", f"expected P5 magic, got {magic!r}")
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    if width <= 0 or height <= 0:
        raise PgmError("BAD_HEADER", f"non-positive dimensions {width}x{height}")
    maxval, pos = _int_token(data, pos, "maxval")
    if maxval != 255:
        raise PgmError("BAD_MAXVAL", f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise PgmError("BAD_HEADER", "missing whitespace after maxval")
    pos += 1
    raster = data[pos : pos + width * height]
    if len(raster) < width * height:
        raise PgmError(
            "SHORT_RASTER",
            f"raster has {len(raster)} bytes, need {width * height}",
        )
    return GrayImage(width, height, raster)


def write_pgm(img: GrayImage) -> bytes:
    """Canonical binary PGM bytes; inverse of :func:`parse_pgm`."""
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels


def neighborhood(img: GrayImage, x: int, y: int) -> list[list[int]]:
    """3x3 intensity matrix around (x, y); edges replicate outward.

    ``m[r][c]`` is the pixel at (x + c - 1, y + r - 1), clamped into the
    image.
    """
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise ValueError(f"pixel ({x}, {y}) outside {img.width}x{img.height} image")
    w, h, px = img.width, img.height, img.pixels
    rows = []
    for dy in (-1, 0, 1):
        yy = min(max(y + dy, 0), h - 1)
        base = yy * w
        row = []
        for dx in (-1, 0, 1):
            xx = min(max(x + dx, 0), w - 1)
            row.append(px[base + xx])
        rows.append(row)
    return rows


def _round_half_up_sqrt(s: int) -> int:
    # round(sqrt(s)) with halves up, in exact integer arithmetic:
    # sqrt(s) >= r + 0.5  <=>  s >= r^2 + r + 0.25  <=>  s - r^2 > r.
    r = math.isqrt(s)
    return r + 1 if s - r * r > r else r


def sobel_pixel(m: list[list[int]]) -> int:
    """Gradient magnitude of one 3x3 neighborhood, clamped to [0, 255]."""
    sx = 0
    sy = 0
    for r in range(3):
        for c in range(3):
            v = m[r][c]
            sx += KERNEL_X[r][c] * v
            sy += KERNEL_Y[r][c] * v
    p = _round_half_up_sqrt(sx * sx + sy * sy)
    return 255 if p > 255 else p


def sobel_sequential(img: GrayImage) -> GrayImage:
    """Scalar reference filter; every pixel in row-major order."""
    w, h, px = img.width, img.height, img.pixels
    out = bytearray(w * h)
    isqrt = math.isqrt

    # Border rows/columns take the general clamped path.
    border_ys = {0, h - 1}
    for y in range(h):
        if y in border_ys:
            xs = range(w)
        else:
            xs = (0, w - 1) if w > 1 else (0,)
        for x in xs:
            out[y * w + x] = sobel_pixel(neighborhood(img, x, y))

    # Interior pixels: direct reads, no clamping needed.
    for y in range(1, h - 1):
        o0 = (y - 1) * w
        o1 = y * w
        o2 = (y + 1) * w
        for x in range(1, w - 1):
            a = px[o0 + x - 1]
            b = px[o0 + x]
            c = px[o0 + x + 1]
            d = px[o1 + x - 1]
            f = px[o1 + x + 1]
            g = px[o2 + x - 1]
            hh = px[o2 + x]
            i = px[o2 + x + 1]
            sx = (g + 2 * hh + i) - (a + 2 * b + c)
            sy = (a - c) + 2 * (d - f) + (g - i)
            s = sx * sx + sy * sy
            r = isqrt(s)
            if s - r * r > r:
                r += 1
            out[o1 + x] = 255 if r > 255 else r
    return GrayImage(w, h, bytes(out))


def lane_bounds(total: int, lane_count: int) -> list[tuple[int, int]]:
    """Contiguous index ranges: lane j owns [j*K//L, (j+1)*K//L)."""
    return [
        ((j * total) // lane_count, ((j + 1) * total) // lane_count)
        for j in range(lane_count)
    ]


def _lane_rows(sub: np.ndarray, width: int) -> np.ndarray:
    """Filter a row block; ``sub`` carries one halo row above and below.

    Returns uint8 output for the ``sub.shape[0] - 2`` interior rows.
    Row chunking bounds the temporaries for large blocks.
    """
    h = sub.shape[0] - 2
    m = width
    out = np.empty((h, m), dtype=np.uint8)
    chunk = max(1, (1 << 18) // m)
    padded = np.pad(sub, ((0, 0), (1, 1)), mode="edge").astype(np.int16)
    for y0 in range(0, h, chunk):
        y1 = min(y0 + chunk, h)
        p = padded[y0 : y1 + 2]
        n = y1 - y0
        top = p[0:n, 0:m] + 2 * p[0:n, 1 : m + 1] + p[0:n, 2 : m + 2]
        bottom = p[2 : n + 2, 0:m] + 2 * p[2 : n + 2, 1 : m + 1] + p[2 : n + 2, 2 : m + 2]
        sx = (bottom - top).astype(np.int32)
        left = p[0:n, 0:m] + 2 * p[1 : n + 1, 0:m] + p[2 : n + 2, 0:m]
        right = p[0:n, 2 : m + 2] + 2 * p[1 : n + 1, 2 : m + 2] + p[2 : n + 2, 2 : m + 2]
        sy = (left - right).astype(np.int32)
        s2 = sx * sx + sy * sy
        # floor(sqrt + 0.5) is exact here: s2 <= 2*1020^2, far below any
        # double-rounding hazard, and sqrt of an integer never lands on .5.
        out[y0:y1] = np.minimum(np.floor(np.sqrt(s2) + 0.5), 255).astype(np.uint8)
    return out


def _run_lane(job: tuple[np.ndarray, int]) -> np.ndarray:
    sub, width = job
    return _lane_rows(sub, width)


def sobel_parallel(img: GrayImage, lane_count: int) -> GrayImage:
    """Data-parallel filter: K = width*height pixel computations split
    across ``lane_count`` lanes.

    Byte-identical to :func:`sobel_sequential` for every input and lane
    count. Lanes of large images run in a spawned process pool; small
    images run them inline.
    """
    if lane_count < 1:
        raise ValueError(f"lane_count must be >= 1, got {lane_count}")
    w, h = img.width, img.height
    total = w * h
    arr = np.frombuffer(img.pixels, dtype=np.uint8).reshape(h, w)

    jobs: list[tuple[np.ndarray, int]] = []
    metas: list[tuple[int, int, int]] = []
    for start, end in lane_bounds(total, lane_count):
        if start >= end:
            continue
        r0 = start // w
        r1 = (end - 1) // w
        halo_rows = np.clip(np.arange(r0 - 1, r1 + 2), 0, h - 1)
        jobs.append((arr[halo_rows], w))
        metas.append((start, end, r0))

    if total >= _PROCESS_LANES_MIN_PIXELS and len(jobs) > 1:
        pool_size = min(len(jobs), max(2, os.cpu_count() or 2))
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=pool_size) as pool:
            blocks = pool.map(_run_lane, jobs)
    else:
        blocks = [_run_lane(job) for job in jobs]

    out = np.empty(total, dtype=np.uint8)
    for (start, end, r0), block in zip(metas, blocks):
        flat = block.reshape(-1)
        out[start:end] = flat[start - r0 * w : end - r0 * w]
    return GrayImage(w, h, out.tobytes())

"""Image metrics, PNG / raw-float I/O, and Poisson blending.

Images are float arrays in [0, 1], shape (H, W, 3) or (H, W). PSNR uses peak
1.0 and is capped at 99 dB so identical images compare cleanly. SSIM follows
the standard Gaussian-window formulation (11x11 window, sigma 1.5, K1=0.01,
K2=0.03, population statistics) averaged per channel after cropping the
half-window border.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import cg

from .errors import DimensionError, ParseError

PSNR_CAP = 99.0
RAW_MAGIC = b"H360RAWF"


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    value = 10.0 * np.log10(peak * peak / mse)
    return float(min(value, PSNR_CAP))


def _gaussian_kernel(sigma: float = 1.5, radius: int = 5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_mean(img, kernel):
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean structural similarity. Requires both sides at least 11x11."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    radius = int(3.5 * sigma + 0.5)
    if min(a.shape[0], a.shape[1]) < 2 * radius + 1:
        raise DimensionError(f"images must be at least {2 * radius + 1} pixels per side")
    kernel = _gaussian_kernel(sigma, radius)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        ux = _window_mean(x, kernel)
        uy = _window_mean(y, kernel)
        uxx = _window_mean(x * x, kernel)
        uyy = _window_mean(y * y, kernel)
        uxy = _window_mean(x * y, kernel)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        cxy = uxy - ux * uy
        num = (2 * ux * uy + c1) * (2 * cxy + c2)
        den = (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2)
        s = num / den
        scores.append(np.mean(s[radius:-radius, radius:-radius]))
    return float(np.mean(scores))


def to_uint8(img) -> np.ndarray:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def png_bytes(img, alpha=None) -> bytes:
    """Encode to PNG bytes; float input is clipped to [0, 1] and quantized to
    8 bit. Same pixels give identical bytes, so digests are comparable."""
    arr = to_uint8(img)
    if arr.ndim == 2:
        pil = Image.fromarray(arr, mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        if alpha is not None:
            arr = np.dstack([arr, to_uint8(alpha)])
            pil = Image.fromarray(arr, mode="RGBA")
        else:
            pil = Image.fromarray(arr, mode="RGB")
    else:
        raise DimensionError(f"cannot encode image of shape {arr.shape}")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, img, alpha=None):
    """Write a PNG; float input is clipped to [0, 1] and quantized to 8 bit."""
    Path(path).write_bytes(png_bytes(img, alpha))


def decode_png(data: bytes):
    """Decode PNG bytes into float [0, 1]. Returns (H, W) for grayscale,
    (H, W, 3) or (H, W, 4) otherwise."""
    try:
        with Image.open(io.BytesIO(data)) as pil:
            if pil.mode not in ("L", "RGB", "RGBA"):
                pil = pil.convert("RGBA" if "A" in pil.getbands() else "RGB")
            arr = np.asarray(pil, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ParseError(f"cannot decode image: {exc}") from exc
    return arr


def load_png(path):
    """Read a PNG into float [0, 1]. Returns (H, W) for grayscale, (H, W, 3) or
    (H, W, 4) otherwise."""
    return decode_png(Path(path).read_bytes())


def save_raw(path, arr):
    """Lossless float32 tensor dump: magic, u32 H/W/C, payload."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise DimensionError(f"raw dump expects (H, W[, C]), got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<3I", a.shape[0], a.shape[1], a.shape[2]))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_raw(path):
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != RAW_MAGIC:
        raise DimensionError(f"{path}: not a raw float dump")
    h, w, c = struct.unpack("<3I", raw[8:20])
    body = np.frombuffer(raw[20:], dtype="<f4")
    if body.size != h * w * c:
        raise DimensionError(f"{path}: payload size does not match header")
    out = body.reshape(h, w, c).astype(np.float64)
    return out[..., 0] if c == 1 else out


def block_mean(img, out_size: int) -> np.ndarray:
    """Average-pool a 2D array down to (out_size, out_size) with edge-safe bins."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError("block_mean expects a single-channel image")
    h, w = arr.shape
    if h < out_size or w < out_size:
        raise DimensionError("block_mean cannot upsample")
    ye = np.linspace(0, h, out_size + 1).astype(int)
    xe = np.linspace(0, w, out_size + 1).astype(int)
    rows = np.add.reduceat(arr, ye[:-1], axis=0)
    cells = np.add.reduceat(rows, xe[:-1], axis=1)
    counts = np.outer(np.diff(ye), np.diff(xe))
    return cells / counts


def poisson_blend(src, dst, mask, atol: float = 1e-8, maxiter: int | None = None):
    """Seamless clone of src into dst over mask by solving the Poisson equation.

    Inside the mask the result matches the Laplacian of src with Dirichlet
    boundary values taken from dst. The mask must not touch the image border.
    Solved per channel with conjugate gradients on the 5-point Laplacian.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if src.shape != dst.shape:
        raise DimensionError("src and dst shapes differ")
    if mask.shape != src.shape[:2]:
        raise DimensionError("mask shape must match image height/width")
    if not mask.any():
        return dst.copy()
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        raise DimensionError("mask touches the image border")

    single = src.ndim == 2
    if single:
        src = src[..., None]
        dst = dst[..., None]

    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[ys, xs] = np.arange(n)

    rows, cols, vals = [], [], []
    neighbor_off = ((-1, 0), (1, 0), (0, -1), (0, 1))
    # Dirichlet contribution per unknown, accumulated per channel below.
    boundary = np.zeros((n, src.shape[2]))
    lap = 4.0 * src[ys, xs] - sum(src[ys + dy, xs + dx] for dy, dx in neighbor_off)
    for dy, dx in neighbor_off:
        ny, nx = ys + dy, xs + dx
        inside = mask[ny, nx]
        rows.append(np.nonzero(inside)[0])
        cols.append(index[ny[inside], nx[inside]])
        vals.append(-np.ones(inside.sum()))
        out = ~inside
        boundary[out] += dst[ny[out], nx[out]]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(np.full(n, 4.0))
    A = csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n, n))

    result = dst.copy()
    maxiter = maxiter or max(200, 10 * n)
    for ch in range(src.shape[2]):
        rhs = lap[:, ch] + boundary[:, ch]
        x0 = src[ys, xs, ch]
        sol, info = cg(A, rhs, x0=x0, rtol=0.0, atol=atol, maxiter=maxiter)
        if info != 0:
            raise DimensionError(f"poisson solve did not converge (info={info})")
        result[ys, xs, ch] = sol
    return result[..., 0] if single else result

"""File containers (float maps, PSFs, RGBD states) and PNG images.

Containers share one layout: ASCII header lines of the form ``key value``
starting with a magic line and ending with ``end_header``, followed by a
little-endian float32 payload in C order.  Readers raise ``FormatError``
with the byte offset at which parsing failed.  A write of data read from a
container reproduces the original file byte for byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import png

from .errors import FormatError, ParameterError
from .forward import RgbdState
from .optics import CodedPsf

FMAP_MAGIC = "DFDDPS-FMAP 1"
PSF_MAGIC = "DFDDPS-PSF 1"
RGBD_MAGIC = "DFDDPS-RGBD 1"
_END = b"end_header\n"


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def _pack(magic: str, fields: dict, payload: np.ndarray) -> bytes:
    payload = np.asarray(payload, dtype=np.float64)
    if not np.all(np.isfinite(payload)):
        raise ParameterError("container payload must be finite")
    lines = [magic] + [f"{k} {_fmt(v)}" for k, v in fields.items()] + ["dtype float32-le", "end_header"]
    return ("\n".join(lines) + "\n").encode("ascii") + np.ascontiguousarray(payload, dtype="<f4").tobytes()


def _unpack(path, magic: str) -> tuple[dict, bytes, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    first = raw.split(b"\n", 1)[0]
    if first != magic.encode("ascii"):
        raise FormatError(f"{path}: bad magic {first[:32]!r}, expected {magic!r}", offset=0)
    end = raw.find(_END)
    if end < 0:
        raise FormatError(f"{path}: header has no end_header line", offset=len(first) + 1)
    fields = {}
    pos = len(first) + 1
    for line in raw[pos:end].split(b"\n"):
        if line:
            try:
                key, val = line.decode("ascii").split(" ", 1)
            except (UnicodeDecodeError, ValueError):
                raise FormatError(f"{path}: malformed header line {line[:40]!r}", offset=pos) from None
            fields[key] = (val, pos)
        pos += len(line) + 1
    if fields.get("dtype", ("",))[0] != "float32-le":
        raise FormatError(f"{path}: unsupported payload dtype", offset=fields.get("dtype", ("", end))[1])
    return fields, raw, end + len(_END)


def _field(path, fields: dict, key: str, kind):
    if key not in fields:
        raise FormatError(f"{path}: header lacks '{key}'", offset=0)
    val, offset = fields[key]
    try:
        return kind(val)
    except ValueError:
        raise FormatError(f"{path}: bad value {val!r} for '{key}'", offset=offset) from None


def _payload(path, raw: bytes, start: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    have = len(raw) - start
    if have < 4 * n:
        raise FormatError(f"{path}: truncated payload, {have} of {4 * n} bytes", offset=len(raw))
    if have > 4 * n:
        raise FormatError(f"{path}: {have - 4 * n} trailing bytes", offset=start + 4 * n)
    arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError(f"{path}: non-finite payload value", offset=start + 4 * bad)
    return arr


def _write(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from exc


# -- float maps -----------------------------------------------------------

def write_float_map(path, arr, scale: float = 1.0) -> None:
    """Write an (H, W) or (H, W, C) map; the payload stores ``arr / scale``."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ParameterError(f"float map must be (H, W) or (H, W, C), got {arr.shape}")
    if not scale > 0:
        raise ParameterError("float map scale must be positive")
    c = 1 if arr.ndim == 2 else arr.shape[2]
    fields = {"height": arr.shape[0], "width": arr.shape[1], "channels": c, "scale": float(scale)}
    _write(path, _pack(FMAP_MAGIC, fields, arr / scale if scale != 1.0 else arr))


def read_float_map(path) -> np.ndarray:
    fields, raw, start = _unpack(path, FMAP_MAGIC)
    h, w, c = (_field(path, fields, k, int) for k in ("height", "width", "channels"))
    scale = _field(path, fields, "scale", float)
    if h <= 0 or w <= 0 or c <= 0 or not scale > 0:
        raise FormatError(f"{path}: invalid map geometry", offset=0)
    arr = _payload(path, raw, start, (h, w, c))
    arr = arr[..., 0] if c == 1 else arr
    return arr * scale if scale != 1.0 else arr


# -- PSF container --------------------------------------------------------

def write_psf(path, psf: CodedPsf) -> None:
    fields = {"k": psf.size, "pixel_pitch": float(psf.pixel_pitch),
              "reference_depth": float(psf.reference_depth), "channels": "R,G,B"}
    _write(path, _pack(PSF_MAGIC, fields, psf.kernels))


def read_psf(path) -> CodedPsf:
    fields, raw, start = _unpack(path, PSF_MAGIC)
    k = _field(path, fields, "k", int)
    if k <= 0 or k % 2 == 0:
        raise FormatError(f"{path}: PSF support must be odd and positive, got {k}", offset=fields["k"][1])
    if _field(path, fields, "channels", str) != "R,G,B":
        raise FormatError(f"{path}: PSF channel order must be R,G,B", offset=fields["channels"][1])
    pitch = _field(path, fields, "pixel_pitch", float)
    ref = _field(path, fields, "reference_depth", float)
    kernels = _payload(path, raw, start, (3, k, k))
    try:
        return CodedPsf(kernels, pitch, ref)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}", offset=start) from exc


# -- RGBD states ----------------------------------------------------------

def write_state(path, state: RgbdState) -> None:
    h, w = state.shape
    d_min, d_max = state.depth_range
    fields = {"height": h, "width": w, "d_min": float(d_min), "d_max": float(d_max), "channels": "R,G,B,depth"}
    payload = np.concatenate([state.rgb, state.depth[..., None]], axis=2)
    _write(path, _pack(RGBD_MAGIC, fields, payload))


def read_state(path) -> RgbdState:
    fields, raw, start = _unpack(path, RGBD_MAGIC)
    h, w = _field(path, fields, "height", int), _field(path, fields, "width", int)
    d_min, d_max = _field(path, fields, "d_min", float), _field(path, fields, "d_max", float)
    if h <= 0 or w <= 0:
        raise FormatError(f"{path}: invalid state geometry", offset=0)
    if not d_max > d_min:
        raise FormatError(f"{path}: empty depth range", offset=fields["d_max"][1])
    payload = _payload(path, raw, start, (h, w, 4))
    return RgbdState(payload[..., :3], payload[..., 3], (d_min, d_max))


# -- PNG ------------------------------------------------------------------

def quantize(img, bits: int = 8) -> np.ndarray:
    if bits not in (8, 16):
        raise ParameterError("PNG bit depth must be 8 or 16")
    top = (1 << bits) - 1
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top).astype(np.uint16)


def write_png(path, img, bits: int = 8) -> None:
    """Write a grayscale (H, W) or RGB (H, W, 3) image with values in [0, 1]."""
    q = quantize(img, bits)
    if q.ndim == 2:
        greyscale, rows = True, q
    elif q.ndim == 3 and q.shape[2] == 3:
        greyscale, rows = False, q.reshape(q.shape[0], -1)
    else:
        raise ParameterError(f"cannot write image of shape {q.shape}")
    writer = png.Writer(width=q.shape[1], height=q.shape[0], greyscale=greyscale, bitdepth=bits)
    try:
        with open(path, "wb") as fh:
            writer.write(fh, rows.tolist())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from exc


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]; exact inverse of ``write_png`` on quantized input."""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.array([np.asarray(r, dtype=np.float64) for r in rows])
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    except png.Error as exc:
        raise FormatError(f"{path}: malformed PNG ({exc})", offset=0) from exc
    planes = info["planes"]
    top = float((1 << info["bitdepth"]) - 1)
    img = data.reshape(height, width, planes) / top
    return img[..., 0] if planes == 1 else img


def state_preview(x) -> np.ndarray:
    """Display image for a state: RGB and depth side by side for (H, W, 4) arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 4:
        rgb = np.clip((x[..., :3] + 1.0) / 2.0, 0.0, 1.0)
        depth = np.clip((x[..., 3] + 1.0) / 2.0, 0.0, 1.0)
        return np.concatenate([rgb, np.repeat(depth[..., None], 3, axis=2)], axis=1)
    flat = x.reshape(x.shape[0], -1) if x.ndim > 1 else x[None, :]
    lo, hi = float(flat.min()), float(flat.max())
    return (flat - lo) / (hi - lo) if hi > lo else np.zeros_like(flat)


def write_state_preview(path, x) -> None:
    write_png(path, state_preview(x), bits=8)

"""Image decoding, RGB normalization, downscaling and JPEG encoding.

Rasters are Pillow images in mode ``RGB``.  Vector graphics (pdf/eps/ps) are
rasterized by an external command configured as a RasterizerHook; without a
hook they are skipped.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import shlex
import subprocess
import tempfile
import threading
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError, features

from .errors import DecodeError, HookError, VectorNoHook

RASTER_EXTENSIONS = frozenset({"jpg", "jpeg", "png", "gif"})
VECTOR_EXTENSIONS = frozenset({"pdf", "eps", "ps"})

DEFAULT_TARGET = 512
DEFAULT_QUALITY = 90
JPEG_SUBSAMPLING = "4:2:0"
RESAMPLE = Image.Resampling.LANCZOS


@dataclass(frozen=True)
class RasterizerHook:
    """External rasterizer, e.g. ``gs -q -dSAFER -dBATCH -dNOPAUSE -sDEVICE=png16m
    -dFirstPage=1 -dLastPage=1 -r150 -sOutputFile={output} {input}``.

    Placeholders: ``{input}``, ``{output}`` (a .png path the command must
    write) and ``{maxdim}``.
    """

    template: str
    timeout: float = 60.0
    max_concurrency: int = 4

    @property
    def identity(self) -> str:
        return hashlib.sha256(self.template.encode()).hexdigest()[:16]


_hook_slots: dict[int, threading.BoundedSemaphore] = {}
_hook_lock = threading.Lock()


def _slots(n: int) -> threading.BoundedSemaphore:
    with _hook_lock:
        return _hook_slots.setdefault(n, threading.BoundedSemaphore(n))


@dataclass(frozen=True)
class NormalizedImage:
    jpeg: bytes
    width: int
    height: int

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.jpeg).hexdigest()


def codec_settings(quality: int = DEFAULT_QUALITY, target: int = DEFAULT_TARGET) -> dict:
    """Encoder settings recorded alongside outputs for reproducibility."""
    return {
        "pillow": Image.__version__,
        "libjpeg": features.version("jpg") or "unknown",
        "quality": quality,
        "subsampling": JPEG_SUBSAMPLING,
        "resample": "lanczos",
        "target": target,
    }


def flatten_alpha(rgba: np.ndarray) -> np.ndarray:
    """Composite an HxWx4 uint8 array over white: a*src + (1-a)*255, rounded."""
    rgb = rgba[..., :3].astype(np.float64)
    alpha = rgba[..., 3:4].astype(np.float64) / 255.0
    out = alpha * rgb + (1.0 - alpha) * 255.0
    return np.floor(out + 0.5).astype(np.uint8)


def to_rgb(img: Image.Image) -> Image.Image:
    """Convert any Pillow mode to RGB, flattening transparency over white."""
    if img.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
        arr = np.asarray(img, dtype=np.float64)
        hi = float(arr.max()) if arr.size else 0.0
        scale = 255.0 / hi if hi > 255 else 1.0
        img = Image.fromarray(np.clip(arr * scale, 0, 255).astype(np.uint8), "L")
    has_alpha = img.mode in ("RGBA", "LA", "PA", "RGBa", "La") or (
        img.mode == "P" and "transparency" in img.info
    ) or (img.mode in ("RGB", "L") and "transparency" in img.info)
    if has_alpha:
        rgba = np.asarray(img.convert("RGBA"))
        return Image.fromarray(flatten_alpha(rgba), "RGB")
    if img.mode == "CMYK":
        return img.convert("RGB")
    return img.convert("RGB") if img.mode != "RGB" else img


def _decode_raster(data: bytes) -> Image.Image:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", Image.DecompressionBombWarning)
            img = Image.open(io.BytesIO(data))
            img.seek(0)  # first frame of animations
            img.load()
    except UnidentifiedImageError as exc:
        # Pillow's message embeds an object address; keep reports reproducible
        raise DecodeError("unrecognized image data") from exc
    except (OSError, SyntaxError, ValueError, EOFError,
            Image.DecompressionBombError, Image.DecompressionBombWarning) as exc:
        raise DecodeError(str(exc)) from exc
    if img.width < 1 or img.height < 1:
        raise DecodeError("empty image")
    return to_rgb(img)


def _rasterize(data: bytes, extension: str, hook: RasterizerHook, target: int) -> Image.Image:
    with tempfile.TemporaryDirectory(prefix="scifig-") as tmp:
        src = os.path.join(tmp, f"input.{extension}")
        dst = os.path.join(tmp, "output.png")
        with open(src, "wb") as fh:
            fh.write(data)
        argv = [
            part.format(input=src, output=dst, maxdim=target)
            for part in shlex.split(hook.template)
        ]
        with _slots(hook.max_concurrency):
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=hook.timeout)
            except subprocess.TimeoutExpired as exc:
                raise HookError(f"rasterizer timed out after {hook.timeout}s") from exc
            except OSError as exc:
                raise HookError(f"rasterizer failed to start: {exc}") from exc
        if proc.returncode != 0:
            msg = proc.stderr.decode("utf-8", "replace").strip()[-200:]
            raise HookError(f"rasterizer exited {proc.returncode}: {msg}")
        if not os.path.exists(dst):
            raise HookError("rasterizer produced no output")
        with open(dst, "rb") as fh:
            out = fh.read()
    try:
        return _decode_raster(out)
    except DecodeError as exc:
        raise HookError(f"unreadable rasterizer output: {exc}") from exc


def decode_image(
    data: bytes,
    extension: str,
    hook: RasterizerHook | None = None,
    target: int = DEFAULT_TARGET,
) -> Image.Image:
    """Decode file bytes to an RGB raster."""
    extension = extension.lower().lstrip(".")
    if extension in VECTOR_EXTENSIONS:
        if hook is None:
            raise VectorNoHook(f".{extension} needs a rasterizer hook")
        return _rasterize(data, extension, hook, target)
    if extension not in RASTER_EXTENSIONS:
        raise DecodeError(f"unsupported extension {extension!r}")
    return _decode_raster(data)


def target_size(width: int, height: int, target: int = DEFAULT_TARGET) -> tuple[int, int]:
    """Dimensions after fitting the longer side to ``target`` (never upscales)."""
    longest = max(width, height)
    if longest <= target:
        return width, height
    scale = target / longest
    if width >= height:
        return target, max(1, math.floor(height * scale + 0.5))
    return max(1, math.floor(width * scale + 0.5)), target


def resize_to_target(img: Image.Image, target: int = DEFAULT_TARGET) -> Image.Image:
    size = target_size(img.width, img.height, target)
    if size == img.size:
        return img
    return img.resize(size, RESAMPLE)


def encode_jpeg(img: Image.Image, quality: int = DEFAULT_QUALITY) -> bytes:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    buf = io.BytesIO()
    img.convert("RGB").save(
        buf, "JPEG", quality=quality, subsampling=JPEG_SUBSAMPLING, optimize=False, progressive=False
    )
    return buf.getvalue()


def normalize_image(
    data: bytes,
    extension: str,
    *,
    target: int = DEFAULT_TARGET,
    quality: int = DEFAULT_QUALITY,
    hook: RasterizerHook | None = None,
) -> NormalizedImage:
    img = resize_to_target(decode_image(data, extension, hook, target), target)
    return NormalizedImage(encode_jpeg(img, quality), img.width, img.height)

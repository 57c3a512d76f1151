"""Image I/O, bicubic resampling, patch sampling and augmentation.

Images are ``(H, W, 3)`` float64 arrays with values on the 0..255 scale.
Values are clamped to [0, 255] only when quantizing for output; internal
computation is unclamped.
"""

from __future__ import annotations

import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from fc2n.errors import DimensionError, ImageFormatError, ImageTooSmallError, UnsupportedDepthError

IMAGE_SUFFIXES = (".png", ".ppm")


# ---------------------------------------------------------------------------
# I/O


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ImageFormatError(f"{path}: only binary PPM (P6) is supported, got {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if maxval > 255:
        raise UnsupportedDepthError(f"{path}: PPM maxval {maxval} is not 8-bit")
    if maxval < 1 or width < 1 or height < 1:
        raise ImageFormatError(f"{path}: malformed PPM header")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated PPM data ({len(body)} of {need} bytes)")
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).astype(np.float64)
    if maxval != 255:
        img = img * (255.0 / maxval)
    return img


def _write_ppm(img8: np.ndarray, path: Path) -> None:
    h, w, _ = img8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img8).tobytes())


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM as an (H, W, 3) float array in [0, 255].

    Grayscale images are replicated to three channels and alpha is dropped.
    """
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    if path.suffix.lower() != ".png":
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) == 26 and head[:8] == b"\x89PNG\r\n\x1a\n" and head[24] == 16:
        raise UnsupportedDepthError(f"{path}: 16-bit PNG is not supported")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG file")
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F") or "16" in im.mode:
                raise UnsupportedDepthError(f"{path}: {im.mode} PNG is not 8-bit")
            im.load()
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGBA" if "A" in im.mode or im.mode == "P" else "RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, SyntaxError, OSError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr[:, :, :3].astype(np.float64)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round and clamp to 8-bit values (still returned as float)."""
    return np.clip(np.round(img), 0, 255)


def save_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit PNG or PPM (chosen by suffix) after rounding and clamping."""
    path = Path(path)
    img8 = quantize(np.asarray(img, dtype=np.float64)).astype(np.uint8)
    if img8.ndim != 3 or img8.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got {img8.shape}")
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        _write_ppm(img8, path)
    elif suffix == ".png":
        Image.fromarray(img8, "RGB").save(path, format="PNG")
    else:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")


def list_images(directory) -> list[Path]:
    """Image files of a directory sorted by file name."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def find_paired_lr(hr_path: Path, lr_dir, scale: int) -> Path:
    """Locate the LR partner of an HR file using the ``<stem>x<scale><suffix>`` convention."""
    lr_dir = Path(lr_dir)
    for suffix in IMAGE_SUFFIXES:
        for name in (f"{hr_path.stem}x{scale}{suffix}", f"{hr_path.stem}{suffix}"):
            if (lr_dir / name).exists():
                return lr_dir / name
    raise FileNotFoundError(f"no LR image for {hr_path.name} in {lr_dir}")


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


# ---------------------------------------------------------------------------
# resampling


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _contributions(in_len: int, out_len: int, scale: Fraction, antialias: bool):
    inv = 1 / scale
    sc = float(scale)
    if scale < 1 and antialias:
        width = 4.0 * float(inv)

        def kernel(x):
            return sc * _cubic(sc * x)
    else:
        width = 4.0
        kernel = _cubic
    out_pos = np.arange(1, out_len + 1, dtype=np.float64)
    # centre of each output sample in input coordinates (1-based)
    u = out_pos * float(inv) + 0.5 * (1 - float(inv))
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights = weights / weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    keep = np.any(weights != 0, axis=0)
    return weights[:, keep], idx[:, keep]


def _resize_axis(img: np.ndarray, axis: int, out_len: int, scale: Fraction, antialias: bool) -> np.ndarray:
    weights, idx = _contributions(img.shape[axis], out_len, scale, antialias)
    moved = np.moveaxis(img, axis, 0)
    out = np.zeros((out_len,) + moved.shape[1:], dtype=np.float64)
    wshape = (out_len,) + (1,) * (moved.ndim - 1)
    for t in range(weights.shape[1]):
        out += weights[:, t].reshape(wshape) * moved[idx[:, t]]
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: np.ndarray, scale, antialias: bool = True, size: tuple[int, int] | None = None) -> np.ndarray:
    """Separable bicubic resampling (a = -0.5) with coordinate clamping at edges.

    ``scale`` may be a float, int or :class:`fractions.Fraction`; use
    ``Fraction(1, r)`` for exact downscaling. Output size defaults to
    ``ceil(scale * input)``. When downscaling with ``antialias`` the kernel
    is stretched by 1/scale.
    """
    scale = Fraction(scale).limit_denominator(10_000) if not isinstance(scale, Fraction) else scale
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if size is None:
        size = (math.ceil(h * scale), math.ceil(w * scale))
    if size[0] < 1 or size[1] < 1:
        raise DimensionError(f"target size {size} is not positive")
    out = img
    for axis in (0, 1):
        out = _resize_axis(out, axis, size[axis], scale, antialias)
    return out


def downsample(hr: np.ndarray, scale: int, antialias: bool = True) -> np.ndarray:
    """Crop to a multiple of ``scale`` and synthesize the 8-bit LR image."""
    hr = crop_to_multiple(hr, scale)
    if scale == 1:
        return hr.copy()
    return quantize(bicubic_resize(hr, Fraction(1, scale), antialias=antialias))


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma of a 0..255 RGB image."""
    img = np.asarray(img, dtype=np.float64)
    return 16.0 + (65.738 * img[..., 0] + 129.057 * img[..., 1] + 25.064 * img[..., 2]) / 256.0


# ---------------------------------------------------------------------------
# dihedral transforms


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """Transform ``k`` in 0..7 of the square's symmetry group on axes (0, 1).

    ``k % 4`` quarter turns, preceded by a horizontal flip when ``k >= 4``.
    """
    if k >= 4:
        img = img[:, ::-1]
    return np.rot90(img, k % 4, axes=(0, 1))


def dihedral_inverse(img: np.ndarray, k: int) -> np.ndarray:
    img = np.rot90(img, -(k % 4), axes=(0, 1))
    if k >= 4:
        img = img[:, ::-1]
    return img


# ---------------------------------------------------------------------------
# patches and augmentation


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray


def extract_patch_pair(hr: np.ndarray, lr: np.ndarray, p: int, scale: int, rng: np.random.Generator) -> PatchPair:
    """Uniformly random LR patch of size ``p`` and its aligned HR patch."""
    lh, lw = lr.shape[:2]
    if hr.shape[0] != lh * scale or hr.shape[1] != lw * scale:
        raise DimensionError(f"HR {hr.shape[:2]} is not {scale}x LR {lr.shape[:2]}")
    if lh < p or lw < p:
        raise ImageTooSmallError(f"LR image {lh}x{lw} is smaller than patch {p}")
    y = int(rng.integers(0, lh - p + 1))
    x = int(rng.integers(0, lw - p + 1))
    hp = p * scale
    return PatchPair(
        lr[y:y + p, x:x + p],
        hr[y * scale:y * scale + hp, x * scale:x * scale + hp],
    )


def augment(pair: PatchPair, hflip: bool = False, vflip: bool = False, rot90: bool = False,
            complement: bool = False) -> PatchPair:
    """Apply the same flips/rotation to both patches, and optionally v -> 255 - v."""

    def tf(img):
        if hflip:
            img = img[:, ::-1]
        if vflip:
            img = img[::-1]
        if rot90:
            img = np.rot90(img, 1, axes=(0, 1))
        if complement:
            img = 255.0 - img
        return img

    return PatchPair(tf(pair.lr), tf(pair.hr))


class TrainingSet:
    """HR/LR image pairs plus the patch sampler used by the trainer.

    Batch ``step`` is drawn from a generator seeded with ``(seed, step)``, so
    any batch can be regenerated independently. This makes resumed runs see
    the same data as uninterrupted ones, and lets prefetch workers produce
    batches in any order.
    """

    def __init__(self, hr_images: Sequence[np.ndarray], scale: int, lr_images: Sequence[np.ndarray] | None = None,
                 antialias: bool = True):
        self.scale = scale
        self.hr: list[np.ndarray] = []
        self.lr: list[np.ndarray] = []
        for i, hr in enumerate(hr_images):
            hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), scale)
            lr = downsample(hr, scale, antialias) if lr_images is None else np.asarray(lr_images[i], np.float64)
            self.hr.append(hr)
            self.lr.append(lr)
        if not self.hr:
            raise ValueError("training set is empty")

    @classmethod
    def from_dir(cls, hr_dir, scale: int, lr_dir=None) -> "TrainingSet":
        paths = list_images(hr_dir)
        hr = [load_image(p) for p in paths]
        lr = None
        if lr_dir is not None:
            lr = [load_image(find_paired_lr(p, lr_dir, scale)) for p in paths]
        return cls(hr, scale, lr)

    def __len__(self) -> int:
        return len(self.hr)

    def usable(self, patch: int) -> list[int]:
        return [i for i, lr in enumerate(self.lr) if lr.shape[0] >= patch and lr.shape[1] >= patch]

    def sample_batch(self, step: int, seed: int, batch_size: int, patch: int, augment_data: bool = True) -> list[PatchPair]:
        rng = np.random.default_rng([seed, step])
        usable = self.usable(patch)
        if not usable:
            raise ImageTooSmallError(f"no training image is at least {patch} pixels in LR size")
        batch = []
        for _ in range(batch_size):
            i = usable[int(rng.integers(len(usable)))]
            pair = extract_patch_pair(self.hr[i], self.lr[i], patch, self.scale, rng)
            if augment_data:
                flags = rng.random(4) < 0.5
                pair = augment(pair, *map(bool, flags))
            batch.append(pair)
        return batch


def prefetch(make: Callable[[int], object], steps: Iterable[int], workers: int = 1, depth: int = 4) -> Iterator:
    """Yield ``make(step)`` for each step in order, producing up to ``depth`` ahead.

    With ``workers > 1`` batches are built concurrently; output order always
    follows ``steps``.
    """
    if workers <= 1:
        for s in steps:
            yield make(s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for s in steps:
            pending.append(pool.submit(make, s))
            if len(pending) > depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def default_workers() -> int:
    env = os.environ.get("FC2N_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1

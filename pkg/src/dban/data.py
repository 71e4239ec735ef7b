"""Image I/O, colour conversion, patch cropping, augmentation and LR/HR pairing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from dban.resize import bicubic_resize
from dban.tensor import get_dtype

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)


class ImageIOError(OSError):
    pass


# -- I/O ----------------------------------------------------------------------

def load_image(path, channels: int = 3) -> np.ndarray:
    """Read an 8-bit PNG as a (1, channels, H, W) tensor with values in [0, 1].

    Grayscale files are replicated to ``channels``; colour files loaded with
    ``channels=1`` are reduced to luma.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if channels == 1:
                arr = np.asarray(im.convert("L"))[None]
            elif im.mode in ("1", "L", "LA", "I", "I;16"):
                arr = np.repeat(np.asarray(im.convert("L"))[None], channels, axis=0)
            else:
                arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    if arr.shape[0] != channels:
        raise ImageIOError(f"{path}: has {arr.shape[0]} channels, cannot map to {channels}")
    dtype = get_dtype()
    return (arr.astype(dtype) / dtype.type(255))[None]


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit integers."""
    return np.floor(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a (1, C, H, W) or (C, H, W) tensor with C in {1, 3} as an 8-bit PNG."""
    arr = img[0] if img.ndim == 4 else img
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"save_image expects 1 or 3 channels, got shape {img.shape}")
    q = quantize(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# -- colour -------------------------------------------------------------------

def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """BT.601 YCbCr of an RGB image in [0, 1], returned on the [0, 1] scale.

    Channels are on axis -3, so (3, H, W) and (n, 3, H, W) both work. The
    chroma rows are written as weighted colour differences, which is the same
    linear map but gives exactly 128/255 for neutral grays.
    """
    if img.shape[-3] != 3:
        raise ValueError(f"rgb_to_ycbcr expects 3 channels, got shape {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    y = (16 + 65.481 * r + 128.553 * g + 24.966 * b) / 255
    cb = (128 + 37.797 * (b - r) + 74.203 * (b - g)) / 255
    cr = (128 + 93.786 * (r - g) + 18.214 * (r - b)) / 255
    return np.stack([y, cb, cr], axis=-3)


def luma(img: np.ndarray) -> np.ndarray:
    """Y plane on the [0, 1] scale; single-channel input is treated as gray RGB."""
    if img.shape[-3] == 1:
        img = np.repeat(img, 3, axis=-3)
    return rgb_to_ycbcr(img)[..., 0, :, :]


# -- patches and augmentation -------------------------------------------------

def _grid(length: int, patch: int, stride: int, offset: int = 0) -> list[int]:
    starts = list(range(offset, length - patch + 1, stride))
    if not starts or starts[-1] + patch < length:
        starts.append(length - patch)  # snap the trailing window to the edge
    return starts


def patch_positions(h: int, w: int, patch_size: int, stride: int, seed=None) -> list[tuple[int, int]]:
    if seed is None:
        oy = ox = 0
    else:
        rng = np.random.default_rng(seed)
        oy = int(rng.integers(0, min(stride, h - patch_size) + 1))
        ox = int(rng.integers(0, min(stride, w - patch_size) + 1))
    return [(y, x) for y in _grid(h, patch_size, stride, oy) for x in _grid(w, patch_size, stride, ox)]


def crop_patches(img: np.ndarray, patch_size: int, stride: Optional[int] = None, seed=None) -> list[np.ndarray]:
    """Crop square patches on a regular grid from a (1, C, H, W) image.

    The last window on each axis is snapped to the border so the whole image is
    covered. ``seed`` shifts the grid origin by a random amount below ``stride``.
    An image smaller than the patch yields no patches and a logged warning.
    """
    stride = stride or patch_size
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    h, w = img.shape[-2:]
    if h < patch_size or w < patch_size:
        log.warning("image %sx%s is smaller than patch size %s; skipped", h, w, patch_size)
        return []
    return [img[..., y:y + patch_size, x:x + patch_size].copy()
            for y, x in patch_positions(h, w, patch_size, stride, seed)]


def augment(patch: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 dihedral transforms: ``code % 4`` quarter turns, then a
    horizontal flip when ``code >= 4``."""
    if not 0 <= code < 8:
        raise ValueError(f"augment code must be in 0..7, got {code}")
    out = np.rot90(patch, k=code % 4, axes=(-2, -1))
    if code >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def compose_codes(a: int, b: int) -> int:
    """Code of ``augment(augment(x, b), a)``."""
    ra, fa = a % 4, a // 4
    rb, fb = b % 4, b // 4
    # a flip conjugates a rotation into its inverse
    r = ((-ra if fb else ra) + rb) % 4
    return r + 4 * ((fa + fb) % 2)


def inverse_code(code: int) -> int:
    return next(c for c in range(8) if compose_codes(c, code) == 0)


# -- dataset ------------------------------------------------------------------

@dataclass
class ImageSample:
    hr: np.ndarray
    lr: np.ndarray
    scale: int
    source_id: str


@dataclass
class DatasetSpec:
    paths: Sequence = ()
    patch_size: int = 96
    patch_stride: Optional[int] = None
    scale: int = 2
    augment: bool = True
    seed: Optional[int] = 0
    random_offset: bool = False
    channels: int = 3
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        if self.patch_size % self.scale:
            raise ValueError(f"patch size {self.patch_size} is not divisible by scale {self.scale}")


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (antialiased) downscale by an integer factor."""
    return bicubic_resize(hr, Fraction(1, scale))


def pairs_from_image(img: np.ndarray, spec: DatasetSpec, source: str, seed=None) -> list[ImageSample]:
    samples = []
    patches = crop_patches(img, spec.patch_size, spec.patch_stride, seed)
    for p_idx, patch in enumerate(patches):
        codes = range(8) if spec.augment else (0,)
        for code in codes:
            hr = augment(patch, code)
            samples.append(ImageSample(hr, degrade(hr, spec.scale), spec.scale, f"{source}#p{p_idx}a{code}"))
    return samples


def make_pairs(spec: DatasetSpec) -> list[ImageSample]:
    """HR patches (each expanded to all 8 augmentations when enabled) with their
    bicubic LR counterparts, in file / grid / code order."""
    samples = []
    seeds = [None] * len(spec.paths)
    if spec.random_offset:
        seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.paths))
    for path, seed in zip(spec.paths, seeds):
        img = load_image(path, spec.channels)
        got = pairs_from_image(img, spec, Path(path).name, seed)
        if not got:
            spec.skipped.append(str(path))
        samples.extend(got)
    return samples


def stack_batch(samples: Sequence[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([s.lr for s in samples], axis=0),
            np.concatenate([s.hr for s in samples], axis=0))

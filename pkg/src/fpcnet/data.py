"""Image/mask I/O, augmentation, dataset splitting, and tiling.

Samples hold an image tensor [1, C, H, W] scaled to [0, 1] and a strictly
binary mask [1, 1, H, W]. Masks on disk are 8-bit single-channel PNGs with
0 = background and 255 = crack; values are binarized at 128.

Dataset manifests are UTF-8 text, one record per line:
``image_path<TAB>mask_path[<TAB>crack_type]``, '#' starts a comment.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import AugmentConfig
from .errors import DataError
from .tensor import Rng

CRACK_TYPES = ("transverse", "longitudinal", "block", "alligator")

MASK_THRESHOLD = 128


@dataclass
class Sample:
    image: np.ndarray          # [1, C, H, W], values in [0, 1]
    mask: np.ndarray           # [1, 1, H, W], values in {0, 1}
    id: str = ""
    crack_type: str | None = None

    def __post_init__(self):
        if self.image.ndim != 4 or self.mask.ndim != 4 or self.mask.shape[1] != 1:
            raise DataError(f"bad sample shapes: image {self.image.shape}, mask {self.mask.shape}")
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise DataError(
                f"image {self.image.shape[2:]} and mask {self.mask.shape[2:]} extents differ"
            )
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise DataError("mask must be strictly binary")
        if self.crack_type is not None and self.crack_type not in CRACK_TYPES:
            raise DataError(f"unknown crack type {self.crack_type!r}")


def _read_u8(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "RGB"):
                pass
            elif im.mode in ("P", "RGBA"):
                im = im.convert("RGB")
            elif im.mode in ("1", "I;16", "LA"):
                im = im.convert("L")
            else:
                raise DataError(f"{path}: unsupported image mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def load_image(path: str | Path, dtype=np.float32) -> np.ndarray:
    """8-bit grayscale or RGB file -> [1, C, H, W] scaled to [0, 1]."""
    raw = _read_u8(path)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    chw = np.ascontiguousarray(raw.transpose(2, 0, 1)).astype(dtype) / dtype(255)
    return chw[None]


def load_mask(path: str | Path, dtype=np.float32) -> np.ndarray:
    raw = _read_u8(path)
    if raw.ndim != 2:
        raise DataError(f"mask {path} must be single-channel, got shape {raw.shape}")
    nonbinary = int(np.count_nonzero((raw != 0) & (raw != 255)))
    if nonbinary:
        warnings.warn(
            f"mask {path}: {nonbinary} of {raw.size} pixels are neither 0 nor 255; "
            f"binarized at {MASK_THRESHOLD}",
            stacklevel=2,
        )
    return (raw >= MASK_THRESHOLD).astype(dtype)[None, None]


def load_sample(
    image_path: str | Path,
    mask_path: str | Path,
    sample_id: str | None = None,
    crack_type: str | None = None,
) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if image.shape[2:] != mask.shape[2:]:
        raise DataError(
            f"size mismatch: image {Path(image_path).name} is {image.shape[2:]}, "
            f"mask {Path(mask_path).name} is {mask.shape[2:]}"
        )
    return Sample(image, mask, sample_id or Path(image_path).stem, crack_type)


def read_manifest(path: str | Path) -> list[tuple[Path, Path, str | None]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        image_p = path.parent / parts[0].strip()
        mask_p = path.parent / parts[1].strip()
        crack_type = parts[2].strip() if len(parts) == 3 and parts[2].strip() else None
        if crack_type is not None and crack_type not in CRACK_TYPES:
            raise DataError(f"{path}:{lineno}: unknown crack type {crack_type!r}")
        records.append((image_p, mask_p, crack_type))
    return records


def load_manifest(path: str | Path) -> list[Sample]:
    return [load_sample(img, msk, crack_type=ct) for img, msk, ct in read_manifest(path)]


# geometric transforms: applied identically to image and mask, bitwise exact

def rot90(sample: Sample) -> Sample:
    """Clockwise quarter turn; four applications restore the original."""
    return replace(
        sample,
        image=np.ascontiguousarray(np.rot90(sample.image, k=-1, axes=(2, 3))),
        mask=np.ascontiguousarray(np.rot90(sample.mask, k=-1, axes=(2, 3))),
    )


def rot180(sample: Sample) -> Sample:
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[:, :, ::-1, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, :, ::-1, ::-1]),
    )


def hflip(sample: Sample) -> Sample:
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[:, :, :, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, :, :, ::-1]),
    )


_LUMA = np.array([0.299, 0.587, 0.114])


def color_jitter(image: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Multiplicative brightness/contrast/saturation jitter; image only.

    Three factors are always drawn (stream stability); saturation applies
    only to 3-channel images. Output is clipped to [0, 1].
    """
    fb = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    fc = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    fs = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    out = image * image.dtype.type(fb)
    mean = out.mean()
    out = mean + (out - mean) * out.dtype.type(fc)
    if image.shape[1] == 3 and cfg.saturation > 0:
        gray = np.tensordot(_LUMA.astype(out.dtype), out, axes=([0], [1]))[:, None]
        out = gray + (out - gray) * out.dtype.type(fs)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def random_crop(sample: Sample, size: int, rng: Rng) -> Sample:
    h, w = sample.image.shape[2:]
    if size > h or size > w:
        raise DataError(f"crop {size} larger than image {h}x{w}")
    top = rng.integers(0, h - size + 1)
    left = rng.integers(0, w - size + 1)
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[:, :, top : top + size, left : left + size]),
        mask=np.ascontiguousarray(sample.mask[:, :, top : top + size, left : left + size]),
    )


def augment(sample: Sample, cfg: AugmentConfig, rng: Rng) -> Rng and Sample:
    """Coin-flip (p=0.5) each enabled transform, then crop when configured."""
    out = sample
    if cfg.rot90 and rng.coin():
        out = rot90(out)
    if cfg.rot180 and rng.coin():
        out = rot180(out)
    if cfg.hflip and rng.coin():
        out = hflip(out)
    if cfg.color_jitter and rng.coin():
        out = replace(out, image=color_jitter(out.image, cfg, rng))
    if cfg.crop_size is not None:
        out = random_crop(out, cfg.crop_size, rng)
    return out


def split_dataset(samples: list, train_fraction: float, rng: Rng) -> tuple[list, list]:
    """Disjoint, exhaustive, seed-deterministic split.

    Train count = floor(n * fraction + 0.5).
    """
    if not samples:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train fraction must be in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(np.floor(n * train_fraction + 0.5))
    order = rng.permutation(n)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def tile(image: np.ndarray, tile_size: int) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    """Row-major grid of non-overlapping tiles plus their (row, col) coordinates.

    Extents must divide exactly; no implicit padding.
    """
    if image.ndim != 4:
        raise DataError(f"expected [N, C, H, W], got shape {image.shape}")
    h, w = image.shape[2:]
    if tile_size < 1 or h % tile_size or w % tile_size:
        raise DataError(f"extents {h}x{w} not divisible by tile size {tile_size}")
    tiles, coords = [], []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            tiles.append(
                np.ascontiguousarray(
                    image[:, :, r * tile_size : (r + 1) * tile_size,
                          c * tile_size : (c + 1) * tile_size]
                )
            )
            coords.append((r, c))
    return tiles, coords


def recombine(
    tiles: list[np.ndarray], coords: list[tuple[int, int]], full_hw: tuple[int, int]
) -> np.ndarray:
    """Stitch tiles back; every grid cell must be covered exactly once."""
    if not tiles or len(tiles) != len(coords):
        raise DataError("tiles and coordinates must be non-empty and aligned")
    t = tiles[0].shape[2]
    h, w = full_hw
    if h % t or w % t:
        raise DataError(f"full extents {h}x{w} not divisible by tile size {t}")
    expected = {(r, c) for r in range(h // t) for c in range(w // t)}
    seen = set()
    out = np.empty(tiles[0].shape[:2] + (h, w), dtype=tiles[0].dtype)
    for piece, (r, c) in zip(tiles, coords):
        if piece.shape != tiles[0].shape:
            raise DataError(f"tile at {(r, c)} has shape {piece.shape}, expected {tiles[0].shape}")
        if (r, c) in seen:
            raise DataError(f"duplicate tile at grid cell {(r, c)}")
        if (r, c) not in expected:
            raise DataError(f"tile coordinate {(r, c)} outside the grid")
        seen.add((r, c))
        out[:, :, r * t : (r + 1) * t, c * t : (c + 1) * t] = piece
    if seen != expected:
        missing = sorted(expected - seen)
        raise DataError(f"missing tiles at grid cells {missing}")
    return out

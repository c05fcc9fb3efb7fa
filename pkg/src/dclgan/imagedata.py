"""Unpaired image folders -> normalized training tensors.

Tensors follow the torch layout ``(3, H, W)`` with values in ``[-1, 1]``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMG_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class DatasetSpec:
    dir_x: str
    dir_y: str
    load_size: int = 286
    crop_size: int = 256
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.crop_size > self.load_size:
            raise ConfigError(
                f"crop_size ({self.crop_size}) must not exceed load_size ({self.load_size})"
            )
        if self.crop_size <= 0:
            raise ConfigError("crop_size must be positive")


class CropParams(NamedTuple):
    top: int
    left: int
    flipped: bool


class UnpairedSample(NamedTuple):
    x: torch.Tensor
    y: torch.Tensor
    x_path: str
    y_path: str
    x_crop: CropParams
    y_crop: CropParams


def normalize(pixels: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 array -> float32 (3, H, W) tensor in [-1, 1]."""
    arr = np.asarray(pixels, dtype=np.float32)
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def denormalize(img: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`, rounding and clamping to 8 bits."""
    arr = img.detach().cpu().double().numpy()
    arr = np.clip(np.rint(127.5 * (arr + 1.0)), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def decode_rgb(path: str | os.PathLike) -> Image.Image:
    """Open an image as RGB; grayscale and palette inputs are expanded."""
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def save_png(img: torch.Tensor, path: str | os.PathLike) -> None:
    Image.fromarray(denormalize(img)).save(path, format="PNG")


def list_images(directory: str | os.PathLike) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"image directory does not exist: {d}")
    return sorted(str(p) for p in d.iterdir() if p.suffix.lower() in IMG_EXTENSIONS)


def _decodable(paths: Sequence[str], directory) -> list[str]:
    if not paths:
        raise ConfigError(f"no PNG/JPEG images in {directory}")
    good = []
    for p in paths:
        try:
            with Image.open(p) as im:
                im.verify()
        except Exception as exc:  # PIL raises a zoo of types on corrupt files
            log.warning("skipping undecodable image %s (%s)", p, exc)
            continue
        good.append(p)
    if not good:
        raise DataError(f"none of the {len(paths)} files in {directory} could be decoded")
    return good


def augment(img: Image.Image, spec: DatasetSpec, rng: np.random.Generator) -> tuple[torch.Tensor, CropParams]:
    """Resize to ``load_size``, random crop to ``crop_size``, optional flip, normalize."""
    img = img.convert("RGB")
    if img.size != (spec.load_size, spec.load_size):
        img = img.resize((spec.load_size, spec.load_size), Image.BILINEAR)
    span = spec.load_size - spec.crop_size
    top = int(rng.integers(0, span + 1))
    left = int(rng.integers(0, span + 1))
    flipped = bool(spec.flip and rng.random() < 0.5)
    arr = np.asarray(img)[top : top + spec.crop_size, left : left + spec.crop_size]
    if flipped:
        arr = arr[:, ::-1]
    return normalize(arr), CropParams(top, left, flipped)


def load_test_image(path: str | os.PathLike, crop_size: int = 256) -> torch.Tensor:
    img = decode_rgb(path)
    if img.size != (crop_size, crop_size):
        img = img.resize((crop_size, crop_size), Image.BILINEAR)
    return normalize(np.asarray(img))


class UnpairedDataset(Dataset):
    """Random unpaired (x, y) samples, deterministic in ``(seed, epoch, index)``.

    An epoch has ``min(|X|, |Y|)`` samples; both domains are shuffled
    independently each epoch and the larger one is truncated. Every item
    derives its own RNG from ``(seed, epoch, index)``, so results do not
    depend on the number of loader workers.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.x_paths = _decodable(list_images(spec.dir_x), spec.dir_x)
        self.y_paths = _decodable(list_images(spec.dir_y), spec.dir_y)
        self.epoch = 0

    def __len__(self) -> int:
        return min(len(self.x_paths), len(self.y_paths))

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _pairing(self, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.spec.seed, epoch])
        n = len(self)
        return rng.permutation(len(self.x_paths))[:n], rng.permutation(len(self.y_paths))[:n]

    def sample(self, epoch: int, index: int) -> UnpairedSample:
        if not 0 <= index < len(self):
            raise IndexError(index)
        xi, yi = self._pairing(epoch)
        x_path, y_path = self.x_paths[xi[index]], self.y_paths[yi[index]]
        rng = np.random.default_rng([self.spec.seed, epoch, index])
        x, x_crop = augment(decode_rgb(x_path), self.spec, rng)
        y, y_crop = augment(decode_rgb(y_path), self.spec, rng)
        return UnpairedSample(x, y, x_path, y_path, x_crop, y_crop)

    def __getitem__(self, index: int) -> UnpairedSample:
        return self.sample(self.epoch, index)

    def iter_epoch(self, epoch: int) -> Iterator[UnpairedSample]:
        for i in range(len(self)):
            yield self.sample(epoch, i)


def load_unpaired_dataset(spec: DatasetSpec) -> UnpairedDataset:
    return UnpairedDataset(spec)


def dataset_dirs(root: str | os.PathLike, train: bool = True) -> tuple[str, str]:
    """``<root>/trainA, <root>/trainB`` (or the test pair)."""
    split = "train" if train else "test"
    return os.path.join(root, f"{split}A"), os.path.join(root, f"{split}B")

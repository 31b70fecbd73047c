"""Image loading, the built-in toy corpus, and seed-deterministic batching."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DatasetError

log = logging.getLogger(__name__)

BUILTIN_PREFIX = "builtin:"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` -> float32 ``(3, H, W)`` in ``[-1, 1]``."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(B, 3, H, W)`` in ``[-1, 1]`` -> uint8 ``(B, H, W, 3)``."""
    arr = ((images.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()


def center_crop_resize(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BICUBIC)
    return img


def load_folder(path: str | Path, size: int) -> torch.Tensor:
    """Every readable image under ``path``, sorted by relative path."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for file in files:
        try:
            with Image.open(file) as img:
                img = center_crop_resize(img.convert("RGB"), size)
                images.append(to_unit_range(np.asarray(img)))
        except (OSError, UnidentifiedImageError) as err:
            log.warning("skipping unreadable image %s: %s", file, err)
    if not images:
        raise DatasetError(f"no readable images in {root}")
    return torch.from_numpy(np.stack(images))


def shapes_corpus(count: int = 200, size: int = 32, seed: int = 0) -> torch.Tensor:
    """Procedural toy images: a two-colour gradient with one to three flat shapes."""
    rng = np.random.default_rng(seed)
    out = np.empty((count, 3, size, size), dtype=np.float32)
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)
    for i in range(count):
        c0, c1 = rng.uniform(0, 255, size=(2, 3))
        t = ramp[:, None] if rng.random() < 0.5 else ramp[None, :]
        bg = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
        bg = np.broadcast_to(bg, (size, size, 3)).astype(np.uint8)
        img = Image.fromarray(np.ascontiguousarray(bg))
        draw = ImageDraw.Draw(img)
        for _ in range(rng.integers(1, 4)):
            x0, y0 = rng.integers(0, size - 6, size=2)
            ext = rng.integers(6, size // 2 + 1, size=2)
            box = [int(x0), int(y0), int(min(size - 1, x0 + ext[0])), int(min(size - 1, y0 + ext[1]))]
            colour = tuple(int(v) for v in rng.integers(0, 256, size=3))
            if rng.random() < 0.5:
                draw.rectangle(box, fill=colour)
            else:
                draw.ellipse(box, fill=colour)
        out[i] = to_unit_range(np.asarray(img))
    return torch.from_numpy(out)


def ingest(source: str, size: int, count: int = 200, seed: int = 0) -> torch.Tensor:
    """Load a dataset as a ``(N, 3, size, size)`` tensor in ``[-1, 1]``.

    ``source`` is a folder path or ``builtin:shapes``; the built-in corpus is
    drawn from ``seed`` and is the same for every training seed by default.
    """
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX):]
        if name != "shapes":
            raise DatasetError(f"unknown built-in dataset {name!r}")
        return shapes_corpus(count, size, seed)
    return load_folder(source, size)


def iterate_batches(
    images: torch.Tensor, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True
) -> Iterator[torch.Tensor]:
    """One pass over ``images``; the order depends only on ``(seed, epoch)``."""
    n = images.shape[0]
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield images[torch.from_numpy(order[start:start + batch_size])]


def endless_batches(images: torch.Tensor, batch_size: int, seed: int, start_step: int = 0) -> Iterator[torch.Tensor]:
    """Reshuffled epochs forever, positioned so step ``k`` always sees the same batch."""
    per_epoch = -(-images.shape[0] // batch_size)
    epoch, skip = divmod(start_step, per_epoch)
    while True:
        for i, batch in enumerate(iterate_batches(images, batch_size, seed, epoch)):
            if i >= skip:
                yield batch
        epoch, skip = epoch + 1, 0


def save_image_grid(images: torch.Tensor, path: str | Path, columns: int = 8):
    arr = to_uint8(images)
    n, h, w, _ = arr.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    for i, tile in enumerate(arr):
        r, c = divmod(i, columns)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
    Image.fromarray(canvas).save(path)

"""Multichannel vector quantization.

Latents follow the torch convention ``(B, n_z, h, w)``. Each cell's ``n_z``
channels are split into ``c`` contiguous chunks of ``n_q = n_z // c`` channels
and every chunk is snapped independently to its nearest entry of one shared
codebook, so a cell can express ``K ** c`` distinct vectors.

Index grids are laid out ``(B, h, w, c)`` with the chunk axis last.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, FormatError, NumericError, ValidationError

__all__ = [
    "Codebook",
    "QuantizeResult",
    "TokenGrid",
    "quantize",
    "straight_through",
    "split_chunks",
    "merge_chunks",
    "usage_stats",
    "serialize_tokens",
    "deserialize_tokens",
    "compression_ratio",
    "lookup",
]

TOKEN_MAGIC = b"MOVQTOKS"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<8s5I")
# rows of (chunk x codevector) distances evaluated per block
_DIST_BLOCK_ELEMS = 1 << 22


class Codebook(nn.Module):
    """``K`` trainable codevectors of dimension ``n_q``.

    Entries start uniform in ``[-1/K, 1/K]``.
    """

    def __init__(self, num_codes: int = 1024, code_dim: int = 64):
        super().__init__()
        if num_codes < 2:
            raise ConfigurationError(f"codebook needs at least 2 entries, got {num_codes}")
        if code_dim < 1:
            raise ConfigurationError(f"code_dim must be positive, got {code_dim}")
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.entries = nn.Parameter(torch.empty(num_codes, code_dim))
        nn.init.uniform_(self.entries, -1.0 / num_codes, 1.0 / num_codes)

    def forward(self, z_hat: torch.Tensor, chunks: int) -> "QuantizeResult":
        return quantize(z_hat, self, chunks)

    def extra_repr(self) -> str:
        return f"K={self.num_codes}, n_q={self.code_dim}"


@dataclass
class QuantizeResult:
    z_q: torch.Tensor  # (B, n_z, h, w); differentiable wrt codebook entries
    indices: torch.Tensor  # (B, h, w, c) int64
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


@dataclass
class TokenGrid:
    """One image's ``h x w x c`` grid of codebook indices."""

    indices: np.ndarray
    vocab: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 3:
            raise ValidationError(f"token grid must be h x w x c, got shape {idx.shape}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValidationError(f"token grid must hold integers, got {idx.dtype}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise ValidationError(
                f"indices must lie in [0, {self.vocab}), got range [{idx.min()}, {idx.max()}]"
            )
        self.indices = idx.astype(np.int64, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.indices.shape)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.indices.copy())

    @classmethod
    def from_tensor(cls, indices: torch.Tensor, vocab: int) -> "TokenGrid":
        return cls(indices.detach().cpu().numpy().astype(np.int64), vocab)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.indices, other.indices)


def split_chunks(z_hat: torch.Tensor, chunks: int) -> torch.Tensor:
    """``(B, n_z, h, w)`` -> ``(B, h, w, c, n_q)``, chunk ``k`` holding channels ``[k*n_q, (k+1)*n_q)``."""
    b, n_z, h, w = z_hat.shape
    if chunks < 1 or n_z % chunks:
        raise ConfigurationError(f"n_z={n_z} is not divisible into {chunks} chunks")
    return z_hat.permute(0, 2, 3, 1).reshape(b, h, w, chunks, n_z // chunks)


def merge_chunks(chunked: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`split_chunks`."""
    b, h, w, c, n_q = chunked.shape
    return chunked.reshape(b, h, w, c * n_q).permute(0, 3, 1, 2)


def _nearest(flat: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    # Direct squared differences in float64: identical codevectors give bit-identical
    # distances, so argmin (first minimum) breaks ties toward the lower index.
    flat = flat.detach().double()
    entries = entries.detach().double()
    k, n_q = entries.shape
    rows = max(1, _DIST_BLOCK_ELEMS // (k * n_q))
    out = []
    for start in range(0, flat.shape[0], rows):
        block = flat[start:start + rows]
        dist = (block[:, None, :] - entries[None, :, :]).pow(2).sum(-1)
        out.append(dist.argmin(dim=1))
    if not out:
        return torch.empty(0, dtype=torch.long, device=flat.device)
    return torch.cat(out)


def quantize(z_hat: torch.Tensor, codebook: Codebook, chunks: int) -> QuantizeResult:
    """Snap every chunk of every cell to its nearest codevector.

    Losses are squared L2 distances per chunk, averaged over cells and chunks:
    ``codebook_loss`` treats ``z_hat`` as constant, ``commitment_loss`` treats
    the codevectors as constant (the commitment weight is applied by the caller).
    """
    if z_hat.dim() != 4:
        raise ConfigurationError(f"expected (B, n_z, h, w) latent, got shape {tuple(z_hat.shape)}")
    chunked = split_chunks(z_hat, chunks)
    if chunked.shape[-1] != codebook.code_dim:
        raise ConfigurationError(
            f"chunk width n_z/c={chunked.shape[-1]} does not match codebook n_q={codebook.code_dim}"
        )
    if not torch.isfinite(z_hat).all():
        raise NumericError("latent contains non-finite values")

    b, h, w, c, n_q = chunked.shape
    flat = chunked.reshape(-1, n_q)
    idx = _nearest(flat, codebook.entries)
    selected = codebook.entries[idx]

    codebook_loss = (flat.detach() - selected).pow(2).sum(-1).mean()
    commitment_loss = (flat - selected.detach()).pow(2).sum(-1).mean()
    z_q = merge_chunks(selected.view(b, h, w, c, n_q))
    return QuantizeResult(z_q, idx.view(b, h, w, c), codebook_loss, commitment_loss)


def straight_through(z_hat: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward passes gradients to ``z_hat`` unchanged."""
    if z_hat.shape != z_q.shape:
        raise NumericError(f"shape mismatch {tuple(z_hat.shape)} vs {tuple(z_q.shape)}")
    # z_hat - z_hat.detach() is exactly zero, so the forward value is bit-identical to z_q
    return z_q.detach() + (z_hat - z_hat.detach())


def lookup(indices: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Rebuild ``z_q`` of shape ``(B, n_z, h, w)`` from a ``(B, h, w, c)`` index grid."""
    if indices.dim() != 4:
        raise ConfigurationError(f"expected (B, h, w, c) indices, got {tuple(indices.shape)}")
    if indices.numel() and (indices.min() < 0 or indices.max() >= codebook.num_codes):
        raise ValidationError("index outside codebook range")
    return merge_chunks(codebook.entries[indices])


def _as_index_array(grid) -> np.ndarray:
    if isinstance(grid, TokenGrid):
        return grid.indices
    if isinstance(grid, torch.Tensor):
        return grid.detach().cpu().numpy()
    return np.asarray(grid)


def usage_stats(grids: Iterable, num_codes: int) -> tuple[float, float]:
    """Fraction of the codebook in use and perplexity of the empirical index distribution.

    ``grids`` may mix :class:`TokenGrid` objects, tensors and arrays of indices.
    """
    arrays = [_as_index_array(g).reshape(-1) for g in grids]
    if not arrays:
        raise ValueError("usage_stats needs at least one grid")
    flat = np.concatenate(arrays).astype(np.int64)
    if flat.size == 0:
        raise ValueError("usage_stats needs at least one index")
    if flat.min() < 0 or flat.max() >= num_codes:
        raise ValidationError(f"indices outside [0, {num_codes})")
    counts = np.bincount(flat, minlength=num_codes)
    p = counts[counts > 0] / flat.size
    entropy = float(-(p * np.log(p)).sum())
    perplexity = min(max(math.exp(entropy), 1.0), float(num_codes))
    return float((counts > 0).sum()) / num_codes, perplexity


def serialize_tokens(grid: TokenGrid) -> bytes:
    """Encode a grid as ``MOVQTOKS`` + u32 version + u32 h, w, c, K + u16 indices (all LE)."""
    if grid.vocab > 65536:
        raise ValidationError(f"vocab {grid.vocab} does not fit 16-bit indices")
    h, w, c = grid.shape
    header = _HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, h, w, c, grid.vocab)
    return header + np.ascontiguousarray(grid.indices, dtype="<u2").tobytes()


def deserialize_tokens(data: bytes) -> TokenGrid:
    if len(data) < _HEADER.size:
        raise FormatError(f"token file too short ({len(data)} bytes)")
    magic, version, h, w, c, vocab = _HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported token file version {version}")
    expected = 2 * h * w * c
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    indices = np.frombuffer(payload, dtype="<u2").reshape(h, w, c).astype(np.int64)
    return TokenGrid(indices, vocab)


def compression_ratio(image_size: int, f: int, chunks: int) -> float:
    """Scalar image values per discrete token: ``H*W*3 / (h*w*c)``."""
    if image_size % f:
        raise ConfigurationError(f"image size {image_size} not divisible by f={f}")
    side = image_size // f
    return image_size * image_size * 3 / (side * side * chunks)

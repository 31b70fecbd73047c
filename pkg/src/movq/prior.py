"""Stage 2: a transformer prior over multichannel token grids.

Two modes share one backbone:

* ``mask``: bidirectional. Each spatial position is one token built by
  concatenating its ``c`` per-channel index embeddings (masked entries use a
  per-channel MASK embedding). The head predicts ``c`` categoricals per
  position. Trained with random masking and sampled by confidence-based
  iterative unmasking.
* ``causal``: the grid is flattened position-major, channel-minor to
  ``h*w*c`` symbols and modelled left to right.

Token grids are ``(B, h, w, c)`` int64 tensors; masks are bool tensors of the
same shape with ``True`` meaning hidden.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, TextIO

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ModeError, ValidationError

MODES = ("mask", "causal")


@dataclass
class PriorConfig:
    layers: int = 8
    heads: int = 8
    embed_dim: int = 256
    hidden_dim: int = 1024
    h: int = 4
    w: int = 4
    c: int = 4
    num_codes: int = 64
    num_classes: int = 0
    mode: str = "mask"
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("layers", "heads", "embed_dim", "hidden_dim", "h", "w", "c", "num_codes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.embed_dim % self.c:
            raise ConfigurationError(f"embed_dim={self.embed_dim} not divisible by c={self.c}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.h, self.w, self.c

    @property
    def num_tokens(self) -> int:
        return self.h * self.w * self.c


@dataclass
class MaskState:
    mask: torch.Tensor  # bool, True = hidden
    ratio: torch.Tensor | float


@dataclass
class SampleSchedule:
    steps: int = 8
    gamma: Callable[[float], float] | None = None
    temperature: float = 1.0
    confidence_noise: float = 4.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"schedule needs at least one step, got {self.steps}")
        if self.gamma is None:
            self.gamma = cosine_schedule

    def remaining(self, step: int, total: int) -> int:
        """Entries still masked after ``step`` of ``steps`` when ``total`` started masked."""
        if step >= self.steps:
            return 0
        return math.ceil(self.gamma(step / self.steps) * total)


def cosine_schedule(r: float) -> float:
    """Mask ratio ``cos(pi r / 2)``, exactly 1 at 0 and 0 at 1."""
    if r <= 0:
        return 1.0
    if r >= 1:
        return 0.0
    return math.cos(math.pi * r / 2)


def _check_grid(tokens: torch.Tensor, cfg: PriorConfig):
    if tokens.dim() != 4 or tuple(tokens.shape[1:]) != cfg.grid_shape:
        raise ConfigurationError(f"expected (B, {cfg.h}, {cfg.w}, {cfg.c}) grid, got {tuple(tokens.shape)}")


class TokenTransformer(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.mode == "mask":
            d_e = d // cfg.c
            # row K of each table is that channel's MASK embedding
            self.token_emb = nn.ModuleList(nn.Embedding(cfg.num_codes + 1, d_e) for _ in range(cfg.c))
            self.pos_emb = nn.Parameter(torch.zeros(cfg.h * cfg.w, d))
            self.head = nn.Linear(d, cfg.c * cfg.num_codes)
        else:
            self.token_emb = nn.Embedding(cfg.num_codes, d)
            self.pos_emb = nn.Parameter(torch.zeros(cfg.num_tokens, d))
            self.start = nn.Parameter(torch.zeros(d))
            self.head = nn.Linear(d, cfg.num_codes)
        self.class_emb = nn.Embedding(cfg.num_classes, d) if cfg.num_classes else None
        layer = nn.TransformerEncoderLayer(
            d, cfg.heads, cfg.hidden_dim, cfg.dropout, activation="gelu", batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.apply(self._init_weights)
        nn.init.trunc_normal_(self.pos_emb, std=0.02)
        if cfg.mode == "causal":
            nn.init.trunc_normal_(self.start, std=0.02)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.trunc_normal_(module.weight, std=0.02)

    def _class_token(self, class_id, batch: int) -> torch.Tensor | None:
        if class_id is None:
            return None
        if self.class_emb is None:
            raise ConfigurationError("model was built without class conditioning")
        class_id = torch.as_tensor(class_id, dtype=torch.long, device=self.pos_emb.device)
        if class_id.dim() == 0:
            class_id = class_id.expand(batch)
        return self.class_emb(class_id).unsqueeze(1)

    def embed_tokens(self, tokens: torch.Tensor, mask: torch.Tensor, class_id=None) -> torch.Tensor:
        """``(B, h*w [+1], embed_dim)`` input sequence for the bidirectional mode."""
        cfg = self.cfg
        _check_grid(tokens, cfg)
        if mask.shape != tokens.shape:
            raise ConfigurationError(f"mask shape {tuple(mask.shape)} != grid shape {tuple(tokens.shape)}")
        visible = tokens[~mask]
        if visible.numel() and (visible.min() < 0 or visible.max() >= cfg.num_codes):
            raise ValidationError(f"token index outside [0, {cfg.num_codes})")
        ids = torch.where(mask, torch.full_like(tokens, cfg.num_codes), tokens)
        b = tokens.shape[0]
        parts = [emb(ids[..., k]) for k, emb in enumerate(self.token_emb)]
        x = torch.cat(parts, dim=-1).reshape(b, cfg.h * cfg.w, cfg.embed_dim) + self.pos_emb
        cls = self._class_token(class_id, b)
        return x if cls is None else torch.cat([cls, x], dim=1)

    def predict(self, tokens: torch.Tensor, mask: torch.Tensor, class_id=None) -> torch.Tensor:
        """Logits ``(B, h, w, c, K)`` for every entry from one bidirectional pass."""
        if self.cfg.mode != "mask":
            raise ModeError("predict requires a mask-mode prior")
        cfg = self.cfg
        x = self.embed_tokens(tokens, mask, class_id)
        x = self.norm(self.blocks(x))
        if class_id is not None:
            x = x[:, 1:]
        return self.head(x).view(-1, cfg.h, cfg.w, cfg.c, cfg.num_codes)

    def causal_logits(self, sequence: torch.Tensor, class_id=None) -> torch.Tensor:
        """Next-symbol logits ``(B, L+1, K)`` for a flat prefix ``(B, L)``.

        Output ``i`` is the distribution of symbol ``i`` given symbols ``< i``.
        """
        if self.cfg.mode != "causal":
            raise ModeError("causal_logits requires a causal-mode prior")
        cfg = self.cfg
        b, length = sequence.shape
        if length >= cfg.num_tokens + 1:
            raise ConfigurationError(f"prefix length {length} exceeds {cfg.num_tokens - 1}")
        if sequence.numel() and (sequence.min() < 0 or sequence.max() >= cfg.num_codes):
            raise ValidationError(f"token index outside [0, {cfg.num_codes})")
        start = self._class_token(class_id, b)
        if start is None:
            start = self.start.expand(b, 1, -1)
        x = torch.cat([start, self.token_emb(sequence)], dim=1)
        x = x[:, : cfg.num_tokens]
        x = x + self.pos_emb[: x.shape[1]]
        causal = nn.Transformer.generate_square_subsequent_mask(x.shape[1], device=x.device)
        x = self.norm(self.blocks(x, mask=causal, is_causal=True))
        return self.head(x)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None, class_id=None) -> torch.Tensor:
        if self.cfg.mode == "mask":
            return self.predict(tokens, mask, class_id)
        return self.causal_logits(flatten_grid(tokens), class_id)[:, : self.cfg.num_tokens]


def flatten_grid(tokens: torch.Tensor) -> torch.Tensor:
    """``(B, h, w, c)`` -> ``(B, h*w*c)``, position-major and channel-minor."""
    return tokens.reshape(tokens.shape[0], -1)


def masked_nll(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the hidden entries only."""
    if logits.shape[:-1] != target.shape or mask.shape != target.shape:
        raise ConfigurationError(
            f"shape mismatch: logits {tuple(logits.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}"
        )
    if not mask.any():
        raise ValueError("masked_nll needs at least one masked entry")
    return F.cross_entropy(logits[mask], target[mask])


def sample_training_mask(
    h: int,
    w: int,
    c: int,
    generator: torch.Generator | None = None,
    batch_size: int | None = None,
    ratio: float | None = None,
    gamma: Callable[[float], float] = cosine_schedule,
) -> MaskState:
    """Bernoulli mask per entry with ``r = gamma(u)``, ``u ~ U(0, 1)`` drawn per sample.

    Samples that come out fully visible are redrawn (with the same ratio).
    """
    n = batch_size or 1
    if ratio is None:
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        ratios = torch.tensor([gamma(float(v)) for v in u], dtype=torch.float64)
    else:
        ratios = torch.full((n,), float(ratio), dtype=torch.float64)
    if (ratios <= 0).any():
        raise ValueError("mask ratio must be positive so at least one entry is hidden")
    mask = torch.empty(n, h, w, c, dtype=torch.bool)
    for i in range(n):
        while True:
            draw = torch.rand(h, w, c, generator=generator, dtype=torch.float64) < ratios[i]
            if draw.any():
                break
        mask[i] = draw
    if batch_size is None:
        return MaskState(mask[0], float(ratios[0]))
    return MaskState(mask, ratios)


def _gumbel(shape, generator) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64).clamp_(1e-20, 1.0 - 1e-12)
    return -torch.log(-torch.log(u))


def _sample_categorical(logits: torch.Tensor, temperature: float, generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw one index per row; returns ``(indices, log-probabilities of the draws)``."""
    logp = F.log_softmax(logits.double(), dim=-1)
    if temperature <= 0:
        idx = logp.argmax(dim=-1)
    else:
        idx = (logp / temperature + _gumbel(logp.shape, generator)).argmax(dim=-1)
    return idx, logp.gather(-1, idx.unsqueeze(-1)).squeeze(-1)


def _emit(stream: TextIO | None, record: dict):
    if stream is not None:
        stream.write(json.dumps(record) + "\n")


@torch.no_grad()
def iterative_sample(
    model: TokenTransformer,
    schedule: SampleSchedule,
    class_id=None,
    generator: torch.Generator | None = None,
    batch_size: int = 1,
    tokens: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    debug_stream: TextIO | None = None,
) -> torch.Tensor:
    """Confidence-based iterative unmasking; exactly ``schedule.steps`` predict calls.

    Starts fully masked unless ``tokens``/``mask`` seed some entries as
    committed. After step ``t`` the number of still-hidden entries per sample
    is ``ceil(gamma(t/T) * m0)`` where ``m0`` is the initial hidden count.
    Committed entries never change.
    """
    cfg = model.cfg
    if cfg.mode != "mask":
        raise ModeError("iterative sampling requires a mask-mode prior")
    if tokens is None:
        tokens = torch.zeros(batch_size, *cfg.grid_shape, dtype=torch.long)
        mask = torch.ones_like(tokens, dtype=torch.bool)
    else:
        tokens = tokens.clone()
        mask = torch.ones_like(tokens, dtype=torch.bool) if mask is None else mask.clone()
        tokens[mask] = 0
    b = tokens.shape[0]
    initial_hidden = mask.reshape(b, -1).sum(1)
    total = cfg.num_tokens
    was_training = model.training
    model.eval()
    try:
        for step in range(1, schedule.steps + 1):
            logits = model.predict(tokens, mask, class_id)
            sampled, logp = _sample_categorical(logits, schedule.temperature, generator)
            noise_scale = schedule.confidence_noise * (1.0 - step / schedule.steps)
            confidence = logp + noise_scale * _gumbel(logp.shape, generator)
            confidence = torch.where(mask, confidence, torch.full_like(confidence, math.inf))
            flat_conf = confidence.reshape(b, -1)
            keep = torch.empty(b, total, dtype=torch.bool)
            for i in range(b):
                n_keep = total - schedule.remaining(step, int(initial_hidden[i]))
                order = torch.argsort(flat_conf[i], descending=True, stable=True)
                row = torch.zeros(total, dtype=torch.bool)
                row[order[:n_keep]] = True
                keep[i] = row
            keep = keep.view_as(mask)
            newly = keep & mask
            tokens = torch.where(newly, sampled, tokens)
            mask = ~keep
            _emit(debug_stream, {
                "step": step,
                "keep_count": keep.reshape(b, -1).sum(1).tolist(),
                "committed": keep.reshape(b, -1).to(torch.uint8).tolist(),
            })
    finally:
        model.train(was_training)
    return tokens


@torch.no_grad()
def autoregressive_sample(
    model: TokenTransformer,
    class_id=None,
    generator: torch.Generator | None = None,
    batch_size: int = 1,
    temperature: float = 1.0,
    prefix: torch.Tensor | None = None,
) -> torch.Tensor:
    """Left-to-right sampling, one model evaluation per generated symbol.

    ``prefix`` (``(B, k)`` flat symbols) is kept verbatim; the remaining
    ``h*w*c - k`` symbols are drawn. ``temperature <= 0`` decodes greedily.
    """
    cfg = model.cfg
    if cfg.mode != "causal":
        raise ModeError("autoregressive sampling requires a causal-mode prior")
    seq = torch.zeros(batch_size, 0, dtype=torch.long) if prefix is None else prefix.clone().long()
    was_training = model.training
    model.eval()
    try:
        while seq.shape[1] < cfg.num_tokens:
            logits = model.causal_logits(seq, class_id)[:, -1]
            nxt, _ = _sample_categorical(logits, temperature, generator)
            seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
    finally:
        model.train(was_training)
    return seq.view(-1, *cfg.grid_shape)


def reconstruction_mask(
    batch: int, h: int, w: int, c: int, ratio: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Hide all but ``floor((1 - ratio) * h * w)`` positions in every channel, chosen independently."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    positions = h * w
    visible = math.floor((1.0 - ratio) * positions + 1e-9)
    mask = torch.ones(batch, c, positions, dtype=torch.bool)
    if visible == 0:
        return mask.permute(0, 2, 1).reshape(batch, h, w, c)
    for i in range(batch):
        for k in range(c):
            chosen = torch.randperm(positions, generator=generator)[:visible]
            mask[i, k, chosen] = False
    return mask.permute(0, 2, 1).reshape(batch, h, w, c)


@torch.no_grad()
def masked_reconstruct(
    model: TokenTransformer,
    tokens: torch.Tensor,
    ratio: float,
    mode: str = "top1",
    steps: int = 8,
    generator: torch.Generator | None = None,
    class_id=None,
    schedule: SampleSchedule | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hide a fraction of ``tokens`` and let the prior fill them back in.

    ``top1`` fills every hidden entry with its argmax from a single pass;
    ``multistep`` runs :func:`iterative_sample` seeded with the visible
    entries. Returns ``(filled grid, mask used)``.
    """
    cfg = model.cfg
    _check_grid(tokens, cfg)
    mask = reconstruction_mask(tokens.shape[0], cfg.h, cfg.w, cfg.c, ratio, generator)
    if not mask.any():
        return tokens.clone(), mask
    if mode == "top1":
        was_training = model.training
        model.eval()
        try:
            logits = model.predict(tokens.masked_fill(mask, 0), mask, class_id)
        finally:
            model.train(was_training)
        return torch.where(mask, logits.argmax(-1), tokens), mask
    if mode == "multistep":
        schedule = schedule or SampleSchedule(steps=steps)
        out = iterative_sample(model, schedule, class_id, generator, tokens=tokens, mask=mask)
        return out, mask
    raise ValueError(f"unknown mode {mode!r}; expected 'top1' or 'multistep'")

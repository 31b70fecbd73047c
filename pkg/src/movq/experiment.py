"""Matched-budget ablation sweeps over decoder and quantizer settings."""

from __future__ import annotations

import statistics
from pathlib import Path

import torch

from .config import TrainConfig
from .train import evaluate_vq, split_dataset, train_vq
from .vq import compression_ratio

AXES = {
    "f0_kind": ("initial_feature_kind", ("sinusoid", "learned_constant", "fourier")),
    "codebook_size": ("K", (64, 256, 1024)),
    "channel_count": ("c", (1, 2, 4, 8)),
}

COLUMNS = ("axis", "value", "seed", "mse", "psnr", "ssim", "perplexity", "usage", "compression")


def run_experiment(
    axis: str,
    cfg: TrainConfig,
    seeds: tuple[int, ...] | None = None,
    values: tuple | None = None,
    out_dir: str | Path | None = None,
    images: torch.Tensor | None = None,
) -> list[dict]:
    """Train one stage-1 model per (value, seed) and score it on the held-out split.

    Falls back to the training images when ``cfg.holdout`` is zero.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")
    key, defaults = AXES[axis]
    values = defaults if values is None else values
    seeds = (cfg.seed,) if seeds is None else seeds
    rows = []
    for value in values:
        for seed in seeds:
            variant = cfg.replace(**{key: value, "seed": seed, "stage": "vq"})
            run_dir = Path(out_dir) / f"{axis}_{value}_seed{seed}" if out_dir is not None else None
            result = train_vq(variant, run_dir, images=images)
            train_images, held_out = split_dataset(variant, images)
            report = evaluate_vq(result.model, held_out if len(held_out) else train_images)
            rows.append({
                "axis": axis,
                "value": value,
                "seed": seed,
                "mse": report.mse,
                "psnr": report.psnr,
                "ssim": report.ssim,
                "perplexity": report.perplexity,
                "usage": report.codebook_usage,
                "compression": compression_ratio(variant.image_size, variant.f, variant.c),
            })
    return rows


def median_by_value(rows: list[dict], column: str = "mse") -> dict:
    grouped: dict = {}
    for row in rows:
        grouped.setdefault(row["value"], []).append(row[column])
    return {value: statistics.median(vals) for value, vals in grouped.items()}


def format_table(rows: list[dict]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [COLUMNS] + [tuple(cell(row[c]) for c in COLUMNS) for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

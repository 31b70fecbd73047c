"""``movq`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import TrainConfig
from .data import ingest, save_image_grid
from .errors import MovqError
from .experiment import AXES, format_table, run_experiment
from .metrics import MetricsReport, diversity, psnr, ssim
from .prior import SampleSchedule, autoregressive_sample, iterative_sample, masked_reconstruct
from .train import evaluate_vq, load_prior, load_vq, split_dataset, train_prior, train_vq
from .vq import TokenGrid, compression_ratio, serialize_tokens

log = logging.getLogger("movq")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="movq", description="Modulated multichannel VQ image generation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train-vq", help="train the stage-1 autoencoder")
    _common(p)
    p.add_argument("--steps", type=int, help="optimisation step budget")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("train-prior", help="train the stage-2 prior on frozen stage-1 tokens")
    _common(p)
    p.add_argument("--vq", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--stage", choices=("prior_mask", "prior_auto"))
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("reconstruct", help="encode, quantize and decode images")
    _common(p)
    p.add_argument("--vq", type=Path, required=True)
    p.add_argument("--input", help="image folder (default: the checkpoint's dataset)")
    p.add_argument("--count", type=int, default=16)

    p = sub.add_parser("sample", help="draw token grids from the prior and decode them")
    _common(p)
    p.add_argument("--vq", type=Path, required=True)
    p.add_argument("--prior", type=Path, required=True)
    p.add_argument("--steps", type=int, default=8, help="iterative decoding steps (mask prior)")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--class-id", type=int)

    p = sub.add_parser("masked-recon", help="hide a fraction of an image's tokens and refill them")
    _common(p)
    p.add_argument("--vq", type=Path, required=True)
    p.add_argument("--prior", type=Path, required=True)
    p.add_argument("--input")
    p.add_argument("--ratio", type=float, default=0.95)
    p.add_argument("--mode", choices=("top1", "multistep"), default="top1")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("eval", help="reconstruction metrics and codebook statistics")
    _common(p)
    p.add_argument("--vq", type=Path, required=True)
    p.add_argument("--input")
    p.add_argument("--count", type=int)

    p = sub.add_parser("experiment", help="matched-budget ablation sweep")
    _common(p)
    p.add_argument("--axis", choices=sorted(AXES), required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int, default=1, help="seeds per variant")
    return parser


def _config(args, **defaults) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig(**defaults)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None and args.command in ("train-vq", "train-prior", "experiment"):
        changes["steps"] = args.steps
    return cfg.replace(**changes) if changes else cfg


def _images(args, cfg: TrainConfig, count: int | None) -> torch.Tensor:
    if args.input:
        images = ingest(args.input, cfg.image_size)
    else:
        images, _ = split_dataset(cfg)
    return images[:count] if count else images


def _write_tokens(tokens: torch.Tensor, vocab: int, out: Path, stem: str) -> list[Path]:
    paths = []
    for i, grid in enumerate(tokens):
        path = out / f"{stem}_{i:04d}.movqtoks"
        path.write_bytes(serialize_tokens(TokenGrid.from_tensor(grid, vocab)))
        paths.append(path)
    return paths


def _seed(args, cfg: TrainConfig) -> torch.Generator:
    seed = cfg.seed if args.seed is None else args.seed
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def cmd_train_vq(args) -> int:
    cfg = _config(args, stage="vq")
    result = train_vq(cfg, args.out, resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint), "step": result.step}))
    return 0


def cmd_train_prior(args) -> int:
    if args.config:
        cfg = _config(args)
    else:
        _, vq_cfg = load_vq(args.vq)
        cfg = vq_cfg.replace(stage="prior_mask")
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.steps is not None:
            cfg = cfg.replace(steps=args.steps)
    if args.stage:
        cfg = cfg.replace(stage=args.stage)
    if cfg.stage == "vq":
        cfg = cfg.replace(stage="prior_mask")
    result = train_prior(cfg, args.vq, args.out, resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint), "step": result.step}))
    return 0


@torch.no_grad()
def cmd_reconstruct(args) -> int:
    model, cfg = load_vq(args.vq)
    images = _images(args, cfg, args.count)
    rec = model.reconstruct(images)
    args.out.mkdir(parents=True, exist_ok=True)
    save_image_grid(torch.cat([images, rec.x_hat]), args.out / "reconstruction.png", columns=len(images))
    _write_tokens(rec.result.indices, cfg.K, args.out, "recon")
    report = evaluate_vq(model, images)
    print(report.to_record(command="reconstruct"))
    return 0


@torch.no_grad()
def cmd_sample(args) -> int:
    vq_model, _ = load_vq(args.vq)
    prior, pcfg = load_prior(args.prior)
    gen = _seed(args, pcfg)
    if prior.cfg.mode == "causal":
        tokens = autoregressive_sample(prior, args.class_id, gen, args.count, args.temperature)
    else:
        schedule = SampleSchedule(steps=args.steps, temperature=args.temperature)
        debug = sys.stderr if args.verbose else None
        tokens = iterative_sample(prior, schedule, args.class_id, gen, args.count, debug_stream=debug)
    args.out.mkdir(parents=True, exist_ok=True)
    paths = _write_tokens(tokens, prior.cfg.num_codes, args.out, "sample")
    save_image_grid(vq_model.decode_indices(tokens), args.out / "samples.png")
    print(json.dumps({"samples": len(paths), "out": str(args.out)}))
    return 0


@torch.no_grad()
def cmd_masked_recon(args) -> int:
    vq_model, vq_cfg = load_vq(args.vq)
    prior, _ = load_prior(args.prior)
    if prior.cfg.mode != "mask":
        raise MovqError("masked reconstruction needs a mask-mode prior")
    gen = _seed(args, vq_cfg)
    images = _images(args, vq_cfg, args.count)
    tokens = vq_model.tokenize(images)
    filled, mask = masked_reconstruct(prior, tokens, args.ratio, args.mode, args.steps, gen)
    base = vq_model.decode_indices(tokens)
    out_images = vq_model.decode_indices(filled)
    args.out.mkdir(parents=True, exist_ok=True)
    save_image_grid(torch.cat([images, base, out_images]), args.out / "masked_recon.png", columns=len(images))
    _write_tokens(filled, prior.cfg.num_codes, args.out, "masked")
    record = {
        "command": "masked-recon",
        "ratio": args.ratio,
        "mode": args.mode,
        "masked_fraction": float(mask.float().mean()),
        "mse_vs_unmasked": float(((out_images - base) ** 2).mean()),
        "psnr_vs_unmasked": sum(psnr(a, b) for a, b in zip(out_images, base)) / len(base),
        "ssim_vs_unmasked": sum(ssim(a, b) for a, b in zip(out_images, base)) / len(base),
    }
    if len(out_images) >= 2:
        record["diversity"] = diversity(out_images)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_vq(args.vq)
    images = _images(args, cfg, args.count)
    report: MetricsReport = evaluate_vq(model, images)
    line = report.to_record(command="eval", compression_ratio=compression_ratio(cfg.image_size, cfg.f, cfg.c))
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.jsonl", "a") as fh:
        fh.write(line + "\n")
    print(line)
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args, stage="vq")
    seeds = tuple(cfg.seed + i for i in range(max(1, args.seeds)))
    rows = run_experiment(args.axis, cfg, seeds=seeds, out_dir=args.out)
    table = format_table(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.axis}.txt").write_text(table + "\n")
    with open(args.out / f"{args.axis}.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(table)
    return 0


COMMANDS = {
    "train-vq": cmd_train_vq,
    "train-prior": cmd_train_prior,
    "reconstruct": cmd_reconstruct,
    "sample": cmd_sample,
    "masked-recon": cmd_masked_recon,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (MovqError, OSError, ValueError, RuntimeError) as err:
        log.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())

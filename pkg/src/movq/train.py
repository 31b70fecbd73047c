"""Training loops for both stages, checkpoints and run records."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .autoencoder import MoVQ, PatchDiscriminator
from .config import TrainConfig
from .data import endless_batches, ingest
from .errors import ConfigurationError, FormatError, NumericError
from .metrics import MetricsReport, psnr, ssim
from .prior import TokenTransformer, masked_nll, sample_training_mask
from .vq import usage_stats

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "movq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class RunRecord:
    step: int
    losses: dict
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class RunLog:
    """Append-only JSONL record stream with strictly increasing steps."""

    def __init__(self, path: Path | None = None):
        self.path = path
        self.records: list[RunRecord] = []

    def append(self, record: RunRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"record step {record.step} does not follow {self.records[-1].step}")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(record.to_json() + "\n")


@dataclass
class TrainResult:
    model: torch.nn.Module
    records: list[RunRecord]
    checkpoint: Path | None
    step: int


def set_seed(seed: int):
    torch.manual_seed(seed)


def state_checksum(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path: Path, kind: str, cfg: TrainConfig, model: torch.nn.Module, step: int, **extra):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": cfg.to_text(),
        "step": step,
        "model": model.state_dict(),
    }
    if isinstance(model, MoVQ):
        payload["codebook"] = model.codebook.entries.detach().clone()
    payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises several unrelated types on corrupt archives
        raise FormatError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a MoVQ checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload["kind"] != kind:
        raise FormatError(f"{path} holds a {payload['kind']} model, expected {kind}")
    payload["config"] = TrainConfig.from_text(payload["config"])
    return payload


def load_vq(path: str | Path) -> tuple[MoVQ, TrainConfig]:
    payload = read_checkpoint(path, "vq")
    cfg = payload["config"]
    model = MoVQ(cfg.autoencoder())
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg


def load_prior(path: str | Path) -> tuple[TokenTransformer, TrainConfig]:
    payload = read_checkpoint(path, "prior")
    cfg = payload["config"]
    model = TokenTransformer(cfg.prior())
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg


def split_dataset(cfg: TrainConfig, images: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(train, held-out) images; the last ``cfg.holdout`` images are held out."""
    if images is None:
        images = ingest(cfg.dataset, cfg.image_size, cfg.dataset_size + cfg.holdout)
    if cfg.holdout:
        if cfg.holdout >= images.shape[0]:
            raise ConfigurationError("holdout leaves no training images")
        return images[: -cfg.holdout], images[-cfg.holdout:]
    return images, images[:0]


def _dump_and_abort(out_dir: Path | None, step: int, losses: dict):
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diagnostic.json").write_text(json.dumps({"step": step, "losses": losses}, indent=2))
    raise NumericError(f"non-finite loss at step {step}: {losses}")


def vq_losses(model: MoVQ, x: torch.Tensor, beta: float) -> tuple[torch.Tensor, dict, object]:
    rec = model.reconstruct(x)
    reconstruction = F.mse_loss(rec.x_hat, x)
    commitment = beta * rec.result.commitment_loss
    total = reconstruction + rec.result.codebook_loss + commitment
    parts = {
        "reconstruction": reconstruction,
        "codebook": rec.result.codebook_loss,
        "commitment": commitment,
    }
    return total, parts, rec


def _checkpoint_steps(cfg: TrainConfig, start: int) -> set[int]:
    every = max(1, cfg.checkpoint_every)
    return {s for s in range(start + 1, cfg.steps + 1) if s % every == 0}


def train_vq(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    images: torch.Tensor | None = None,
) -> TrainResult:
    """Optimise reconstruction + codebook + beta * commitment (+ optional hinge GAN term)."""
    if cfg.stage != "vq":
        raise ConfigurationError(f"train_vq needs stage=vq, got {cfg.stage}")
    out_dir = Path(out_dir) if out_dir is not None else None
    set_seed(cfg.seed)
    train_images, _ = split_dataset(cfg, images)
    model = MoVQ(cfg.autoencoder())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95))
    disc = disc_opt = None
    if cfg.adversarial:
        disc = PatchDiscriminator()
        disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.9, 0.95))
    step = 0
    if resume is not None:
        payload = read_checkpoint(resume, "vq")
        model.load_state_dict(payload["model"])
        opt.load_state_dict(payload["optimizer"])
        if disc is not None and "discriminator" in payload:
            disc.load_state_dict(payload["discriminator"])
            disc_opt.load_state_dict(payload["discriminator_optimizer"])
        step = payload["step"]
    runlog = RunLog(out_dir / "records.jsonl" if out_dir else None)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_steps = _checkpoint_steps(cfg, step)
    batches = endless_batches(train_images, cfg.batch_size, cfg.seed, start_step=step)
    start_time = time.time()
    ckpt_path = None
    model.train()

    def extras():
        state = {"optimizer": opt.state_dict()}
        if disc is not None:
            state["discriminator"] = disc.state_dict()
            state["discriminator_optimizer"] = disc_opt.state_dict()
        return state

    while step < cfg.steps:
        x = next(batches)
        try:
            total, parts, rec = vq_losses(model, x, cfg.beta)
        except NumericError as err:
            _dump_and_abort(out_dir, step, {"error": str(err)})
        if disc is not None:
            adv = -disc(rec.x_hat).mean()
            total = total + cfg.adversarial_weight * adv
            parts["adversarial"] = cfg.adversarial_weight * adv
        losses = {k: float(v.detach()) for k, v in parts.items()}
        losses["total"] = float(total.detach())
        if not all(math.isfinite(v) for v in losses.values()):
            _dump_and_abort(out_dir, step, losses)
        if step % max(1, cfg.log_every) == 0:
            runlog.append(RunRecord(step, losses, wall_clock=time.time() - start_time))
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if disc is not None:
            d_real = disc(x)
            d_fake = disc(rec.x_hat.detach())
            d_loss = F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()
            disc_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            disc_opt.step()
        step += 1
        if out_dir is not None and step in ckpt_steps:
            ckpt_path = save_checkpoint(out_dir / f"vq_step{step:07d}.pt", "vq", cfg, model, step, **extras())
    model.eval()
    if out_dir is not None:
        ckpt_path = save_checkpoint(out_dir / "vq.pt", "vq", cfg, model, step, **extras())
    return TrainResult(model, runlog.records, ckpt_path, step)


@torch.no_grad()
def tokenize_images(model: MoVQ, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return torch.cat([model.tokenize(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)])
    finally:
        model.train(was_training)


@torch.no_grad()
def reconstruct_images(model: MoVQ, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    return torch.cat([model.reconstruct(images[i:i + batch_size]).x_hat for i in range(0, images.shape[0], batch_size)])


@torch.no_grad()
def evaluate_vq(model: MoVQ, images: torch.Tensor) -> MetricsReport:
    recon = reconstruct_images(model, images)
    tokens = tokenize_images(model, images)
    usage, perplexity = usage_stats([tokens], model.cfg.num_codes)
    return MetricsReport(
        psnr=sum(psnr(a, b) for a, b in zip(images, recon)) / len(images),
        ssim=sum(ssim(a, b) for a, b in zip(images, recon)) / len(images),
        mse=float(F.mse_loss(recon, images)),
        codebook_usage=usage,
        perplexity=perplexity,
        sample_count=len(images),
    )


def check_geometry(prior_cfg, vq_model: MoVQ):
    h, w, c = vq_model.token_shape
    if (prior_cfg.h, prior_cfg.w, prior_cfg.c, prior_cfg.num_codes) != (h, w, c, vq_model.cfg.num_codes):
        raise ConfigurationError(
            f"prior geometry {prior_cfg.h}x{prior_cfg.w}x{prior_cfg.c}/K={prior_cfg.num_codes} "
            f"does not match VQ tokens {h}x{w}x{c}/K={vq_model.cfg.num_codes}"
        )


def prior_loss(model: TokenTransformer, tokens: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    cfg = model.cfg
    if cfg.mode == "mask":
        state = sample_training_mask(cfg.h, cfg.w, cfg.c, generator, batch_size=tokens.shape[0])
        return masked_nll(model.predict(tokens.masked_fill(state.mask, 0), state.mask), tokens, state.mask)
    logits = model(tokens)
    return F.cross_entropy(logits.reshape(-1, cfg.num_codes), tokens.reshape(-1))


@torch.no_grad()
def evaluate_prior_nll(model: TokenTransformer, tokens: torch.Tensor, seed: int = 0, repeats: int = 4) -> float:
    """Average loss over ``repeats`` passes with masks drawn from a fixed seed."""
    gen = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    try:
        vals = [float(prior_loss(model, tokens, gen)) for _ in range(repeats)]
    finally:
        model.train(was_training)
    return sum(vals) / len(vals)


def train_prior(
    cfg: TrainConfig,
    vq_checkpoint: str | Path,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    images: torch.Tensor | None = None,
) -> TrainResult:
    """Tokenise the corpus once with the frozen stage-1 model, then fit the prior."""
    if cfg.stage not in ("prior_mask", "prior_auto"):
        raise ConfigurationError(f"train_prior needs a prior stage, got {cfg.stage}")
    out_dir = Path(out_dir) if out_dir is not None else None
    vq_model, vq_cfg = load_vq(vq_checkpoint)
    vq_sum = state_checksum(vq_model)
    if images is None:
        images, _ = split_dataset(vq_cfg)
    tokens = tokenize_images(vq_model, images)
    set_seed(cfg.seed)
    model = TokenTransformer(cfg.prior())
    check_geometry(model.cfg, vq_model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95))
    step = 0
    if resume is not None:
        payload = read_checkpoint(resume, "prior")
        model.load_state_dict(payload["model"])
        opt.load_state_dict(payload["optimizer"])
        step = payload["step"]
    runlog = RunLog(out_dir / "records.jsonl" if out_dir else None)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_steps = _checkpoint_steps(cfg, step)
    batches = endless_batches(tokens, cfg.batch_size, cfg.seed, start_step=step)
    mask_gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
    start_time = time.time()
    ckpt_path = None
    model.train()
    while step < cfg.steps:
        batch = next(batches)
        loss = prior_loss(model, batch, mask_gen)
        if not math.isfinite(float(loss.detach())):
            _dump_and_abort(out_dir, step, {"nll": float(loss.detach())})
        if step % max(1, cfg.log_every) == 0:
            runlog.append(RunRecord(step, {"nll": float(loss.detach())}, wall_clock=time.time() - start_time))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        if out_dir is not None and step in ckpt_steps:
            ckpt_path = save_checkpoint(
                out_dir / f"prior_step{step:07d}.pt", "prior", cfg, model, step, optimizer=opt.state_dict()
            )
    model.eval()
    if state_checksum(vq_model) != vq_sum:
        raise RuntimeError("stage-1 parameters changed during prior training")
    if out_dir is not None:
        ckpt_path = save_checkpoint(out_dir / "prior.pt", "prior", cfg, model, step, optimizer=opt.state_dict())
    return TrainResult(model, runlog.records, ckpt_path, step)

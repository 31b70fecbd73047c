import hashlib
import json

import numpy as np
import pytest
import torch
from PIL import Image

from movq import cli
from movq.config import TrainConfig, parse_pairs
from movq.data import (
    endless_batches,
    ingest,
    iterate_batches,
    load_folder,
    shapes_corpus,
    to_uint8,
    to_unit_range,
)
from movq.errors import ConfigurationError, DatasetError, NumericError
from movq.experiment import AXES, format_table, median_by_value, run_experiment
from movq.prior import autoregressive_sample
from movq.train import RunLog, RunRecord, load_prior, read_checkpoint, train_prior, train_vq, vq_losses

TINY = dict(
    image_size=16, f=4, n_z=16, c=4, K=8, base_width=8, channel_mult=(1, 1, 1), num_res_blocks=1,
    dataset_size=12, batch_size=4, steps=3, lr=1e-3, log_every=1, checkpoint_every=2,
    prior_layers=1, prior_heads=2, prior_embed_dim=16, prior_hidden_dim=32,
)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = tiny_cfg()
    vq = train_vq(cfg, root / "vq")
    prior = train_prior(cfg.replace(stage="prior_mask"), vq.checkpoint, root / "prior")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(cfg.to_text())
    return {"root": root, "cfg": cfg, "vq": vq.checkpoint, "prior": prior.checkpoint, "config": cfg_path}


# data

def test_pixel_mapping():
    pixels = np.array([[[0, 127, 255]]], dtype=np.uint8)
    out = to_unit_range(pixels)
    assert out.shape == (3, 1, 1)
    assert out[0, 0, 0] == -1.0 and out[2, 0, 0] == 1.0
    back = to_uint8(torch.from_numpy(out)[None])
    assert np.array_equal(back[0], pixels)


def test_batches_keep_the_remainder():
    images = torch.arange(3.0).view(3, 1, 1, 1)
    sizes = [len(b) for b in iterate_batches(images, 2, seed=0)]
    assert sizes == [2, 1]


def test_batch_order_is_seed_deterministic():
    images = torch.arange(20.0).view(20, 1, 1, 1)
    first = [b.flatten().tolist() for b in iterate_batches(images, 4, seed=3)]
    again = [b.flatten().tolist() for b in iterate_batches(images, 4, seed=3)]
    other = [b.flatten().tolist() for b in iterate_batches(images, 4, seed=4)]
    assert first == again and first != other
    assert sorted(sum(first, [])) == list(range(20))


def test_endless_batches_resume_position():
    images = torch.arange(10.0).view(10, 1, 1, 1)
    stream = endless_batches(images, 4, seed=1)
    full = [next(stream).flatten().tolist() for _ in range(7)]
    resumed = endless_batches(images, 4, seed=1, start_step=4)
    assert [next(resumed).flatten().tolist() for _ in range(3)] == full[4:]


def test_builtin_corpus():
    a = shapes_corpus(5, 16, seed=2)
    assert a.shape == (5, 3, 16, 16) and a.min() >= -1 and a.max() <= 1
    assert torch.equal(a, ingest("builtin:shapes", 16, count=5, seed=2))
    with pytest.raises(DatasetError):
        ingest("builtin:faces", 16)


def test_folder_loading_skips_unreadable(tmp_path, caplog):
    Image.fromarray(np.full((20, 30, 3), 255, np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "b.png").write_bytes(b"not an image")
    images = load_folder(tmp_path, 8)
    assert images.shape == (1, 3, 8, 8)
    assert torch.allclose(images, torch.ones_like(images))
    assert "skipping" in caplog.text


def test_empty_folder(tmp_path):
    with pytest.raises(DatasetError):
        load_folder(tmp_path, 8)


# config

def test_config_text_round_trip():
    cfg = tiny_cfg(adversarial=True, seed=11)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_parse_comments_and_errors():
    assert parse_pairs("# header\nK = 16  # codes\n\nlr=0.5\n") == {"K": 16, "lr": 0.5}
    with pytest.raises(ConfigurationError):
        parse_pairs("nonsense = 1")
    with pytest.raises(ConfigurationError):
        parse_pairs("K = many")
    with pytest.raises(ConfigurationError):
        parse_pairs("just a line")
    with pytest.raises(ConfigurationError):
        TrainConfig(n_z=64, c=3)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage="stage3")


def test_prior_auto_config_selects_causal_mode():
    assert tiny_cfg(stage="prior_auto").prior().mode == "causal"
    assert tiny_cfg(stage="prior_mask").prior().mode == "mask"


# training

def test_run_log_rejects_non_increasing_steps(tmp_path):
    log = RunLog(tmp_path / "r.jsonl")
    log.append(RunRecord(0, {"total": 1.0}))
    log.append(RunRecord(5, {"total": 0.5}))
    with pytest.raises(ValueError):
        log.append(RunRecord(5, {"total": 0.4}))
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [0, 5]


def test_zero_beta_reports_zero_commitment():
    torch.manual_seed(0)
    from movq.autoencoder import MoVQ
    model = MoVQ(tiny_cfg().autoencoder())
    _, parts, _ = vq_losses(model, shapes_corpus(2, 16), beta=0.0)
    assert parts["commitment"].item() == 0.0


def test_train_vq_records_and_checkpoints(trained):
    records = [json.loads(line) for line in (trained["root"] / "vq" / "records.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2]
    assert set(records[0]["losses"]) >= {"reconstruction", "codebook", "commitment", "total"}
    assert (trained["root"] / "vq" / "vq_step0000002.pt").exists()
    payload = read_checkpoint(trained["vq"], "vq")
    assert payload["step"] == 3 and payload["config"] == trained["cfg"]
    assert payload["codebook"].shape == (8, 4)


def test_resume_continues_step_numbering(trained, tmp_path):
    cfg = trained["cfg"].replace(steps=5)
    result = train_vq(cfg, tmp_path, resume=trained["vq"])
    assert result.step == 5
    assert [r.step for r in result.records] == [3, 4]


def test_training_is_deterministic(tmp_path):
    cfg = tiny_cfg(steps=2)
    a = train_vq(cfg)
    b = train_vq(cfg)
    for (name, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), name


def test_non_finite_loss_aborts_with_diagnostic(tmp_path):
    images = shapes_corpus(12, 16)
    images[0, 0, 0, 0] = float("nan")
    cfg = tiny_cfg(batch_size=12)
    with pytest.raises(NumericError):
        train_vq(cfg, tmp_path, images=images)
    dump = json.loads((tmp_path / "diagnostic.json").read_text())
    assert dump["step"] == 0


def test_wrong_stage_is_rejected(trained):
    with pytest.raises(ConfigurationError):
        train_vq(tiny_cfg(stage="prior_mask"))
    with pytest.raises(ConfigurationError):
        train_prior(tiny_cfg(), trained["vq"])


def test_prior_training_leaves_stage_one_untouched(trained, tmp_path):
    before = file_hash(trained["vq"])
    train_prior(tiny_cfg(stage="prior_mask", steps=2), trained["vq"], tmp_path)
    assert file_hash(trained["vq"]) == before


def test_prior_geometry_mismatch(trained):
    with pytest.raises(ConfigurationError):
        train_prior(tiny_cfg(stage="prior_mask", K=16), trained["vq"])


def test_causal_prior_samples_in_grid_size_steps(trained, tmp_path):
    cfg = tiny_cfg(stage="prior_auto", c=2, steps=2)
    vq = train_vq(cfg.replace(stage="vq"), tmp_path / "vq")
    result = train_prior(cfg, vq.checkpoint, tmp_path / "prior")
    model, _ = load_prior(result.checkpoint)
    assert model.cfg.grid_shape == (4, 4, 2)
    calls = []
    original = model.causal_logits

    def counted(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    model.causal_logits = counted
    out = autoregressive_sample(model, None, torch.Generator().manual_seed(0), batch_size=1)
    assert out.shape == (1, 4, 4, 2)
    assert len(calls) == 32


# experiment

def test_axes_cover_sweeps():
    assert AXES["channel_count"][1] == (1, 2, 4, 8)
    assert AXES["codebook_size"][1] == (64, 256, 1024)
    assert AXES["f0_kind"][1] == ("sinusoid", "learned_constant", "fourier")


def test_run_experiment_rows():
    cfg = tiny_cfg(steps=1, holdout=4, log_every=100)
    rows = run_experiment("channel_count", cfg, seeds=(0, 1), values=(1, 4))
    assert [(r["value"], r["seed"]) for r in rows] == [(1, 0), (1, 1), (4, 0), (4, 1)]
    assert rows[0]["compression"] == 16 * 16 * 3 / (4 * 4 * 1)
    medians = median_by_value(rows)
    assert set(medians) == {1, 4}
    table = format_table(rows)
    assert table.splitlines()[0].split()[:3] == ["axis", "value", "seed"]
    with pytest.raises(ValueError):
        run_experiment("depth", cfg)


# command line

def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_usage_errors(capsys):
    code, _, err = run(["train-vq", "--bogus"], capsys)
    assert code == 1 and "usage" in err
    code, _, _ = run([], capsys)
    assert code == 1
    code, _, _ = run(["sample", "--vq", "x.pt"], capsys)  # missing --prior
    assert code == 1


def test_cli_help_exits_zero(capsys):
    code, out, _ = run(["--help"], capsys)
    assert code == 0 and "train-vq" in out


def test_cli_runtime_failure(tmp_path, capsys):
    code, _, _ = run(["eval", "--vq", tmp_path / "missing.pt", "--out", tmp_path], capsys)
    assert code == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("K = lots\n")
    code, _, _ = run(["train-vq", "--config", bad, "--out", tmp_path], capsys)
    assert code == 2


def test_cli_train_vq(trained, tmp_path, capsys):
    code, out, _ = run(["train-vq", "--config", trained["config"], "--steps", 2, "--out", tmp_path], capsys)
    assert code == 0
    assert json.loads(out)["step"] == 2
    assert (tmp_path / "vq.pt").exists()


def test_cli_sample_is_byte_identical(trained, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(["sample", "--vq", trained["vq"], "--prior", trained["prior"], "--seed", 7,
                          "--count", 3, "--steps", 4, "--out", tmp_path / name], capsys)
        assert code == 0
        outs.append(sorted((tmp_path / name).glob("*.movqtoks")))
    assert len(outs[0]) == 3
    assert [p.read_bytes() for p in outs[0]] == [p.read_bytes() for p in outs[1]]
    assert (tmp_path / "a" / "samples.png").exists()


def test_cli_sample_debug_stream(trained, tmp_path, capsys):
    code, _, err = run(["sample", "--vq", trained["vq"], "--prior", trained["prior"], "--count", 1,
                        "--steps", 3, "--verbose", "--out", tmp_path], capsys)
    assert code == 0
    lines = [json.loads(line) for line in err.splitlines() if line.startswith("{")]
    assert [line["step"] for line in lines] == [1, 2, 3]
    assert lines[-1]["keep_count"] == [64]


def test_cli_masked_recon_eval_reconstruct(trained, tmp_path, capsys):
    common = ["--vq", trained["vq"], "--out", tmp_path]
    code, out, _ = run(["masked-recon", *common, "--prior", trained["prior"], "--ratio", 0.5, "--count", 2], capsys)
    assert code == 0
    record = json.loads(out)
    assert record["mode"] == "top1" and 0 < record["masked_fraction"] < 1
    code, out, _ = run(["eval", *common], capsys)
    assert code == 0
    assert json.loads(out)["compression_ratio"] == 16 * 16 * 3 / (4 * 4 * 4)
    assert (tmp_path / "metrics.jsonl").exists()
    code, _, _ = run(["reconstruct", *common, "--count", 2], capsys)
    assert code == 0
    assert (tmp_path / "reconstruction.png").exists()


def test_cli_experiment(trained, tmp_path, capsys):
    cfg = trained["cfg"].replace(steps=1, holdout=4, log_every=100)
    path = tmp_path / "exp.cfg"
    path.write_text(cfg.to_text())
    code, out, _ = run(["experiment", "--config", path, "--axis", "f0_kind", "--out", tmp_path], capsys)
    assert code == 0
    assert "learned_constant" in out
    assert len((tmp_path / "f0_kind.jsonl").read_text().splitlines()) == 3

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from movq.metrics import MetricsReport, diversity, gaussian_window, mse, psnr, ssim


def naive_ssim(x, y, size=11, sigma=1.5, data_range=2.0):
    """Window-by-window SSIM with wrap-around windows, straight from the definition."""
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-coords ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    window = np.outer(g, g)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    channels, h, w = x.shape
    half = size // 2
    scores = []
    for ch in range(channels):
        for i in range(h):
            rows = [(i + d) % h for d in range(-half, half + 1)]
            for j in range(w):
                cols = [(j + d) % w for d in range(-half, half + 1)]
                px, py = x[ch][np.ix_(rows, cols)], y[ch][np.ix_(rows, cols)]
                mx, my = (window * px).sum(), (window * py).sum()
                vx = (window * (px - mx) ** 2).sum()
                vy = (window * (py - my) ** 2).sum()
                cov = (window * (px - mx) * (py - my)).sum()
                scores.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


def rand_image(seed, shape=(3, 16, 16)):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


# psnr

def test_psnr_hand_example():
    x = np.zeros((3, 8, 8))
    y = np.full((3, 8, 8), 0.02)
    # mse 4e-4, peak^2 = 4 -> 10 log10(1e4) = 40
    assert psnr(x, y) == pytest.approx(40.0, abs=1e-9)
    y = np.full((3, 8, 8), 0.2)
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_images_capped():
    x = rand_image(0)
    assert psnr(x, x) == 100.0
    assert psnr(x, x + 1e-7) == 100.0


def test_psnr_symmetric():
    a, b = rand_image(1), rand_image(2)
    assert psnr(a, b) == psnr(b, a)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_decreases_with_noise():
    x = rand_image(3)
    noise = np.random.default_rng(4).normal(size=x.shape)
    values = [psnr(x, x + s * noise) for s in (0.01, 0.05, 0.2, 0.5)]
    assert all(a > b for a, b in zip(values, values[1:]))


# ssim

def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum().item() == pytest.approx(1.0, abs=1e-12)
    assert w[5, 5] == w.max()


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_naive_scan(seed):
    x = rand_image(seed, (2, 13, 15))
    y = np.clip(x + np.random.default_rng(seed + 10).normal(scale=0.3, size=x.shape), -1, 1)
    assert abs(ssim(x, y) - naive_ssim(x, y)) <= 1e-6


def test_ssim_identical_is_one():
    x = rand_image(5)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric_and_bounded():
    a, b = rand_image(6), rand_image(7)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0
    assert -1.0 <= ssim(a, -a) <= 1.0


def test_ssim_decreases_with_noise():
    x = np.clip(rand_image(8) * 0.5, -1, 1)
    noise = np.random.default_rng(9).normal(size=x.shape)
    values = [ssim(x, np.clip(x + s * noise, -1, 1)) for s in (0.02, 0.1, 0.3, 0.8)]
    assert all(a > b for a, b in zip(values, values[1:]))


@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_ssim_shift_invariant(dy, dx, seed):
    x = rand_image(seed)
    y = np.clip(x + np.random.default_rng(seed + 1).normal(scale=0.2, size=x.shape), -1, 1)
    shifted = ssim(np.roll(x, (dy, dx), axis=(1, 2)), np.roll(y, (dy, dx), axis=(1, 2)))
    assert abs(shifted - ssim(x, y)) <= 1e-9


def test_ssim_batched_and_tensor_inputs():
    x, y = rand_image(10, (2, 3, 12, 12)), rand_image(11, (2, 3, 12, 12))
    expected = (naive_ssim(x[0], y[0]) + naive_ssim(x[1], y[1])) / 2
    assert ssim(torch.from_numpy(x).float(), torch.from_numpy(y).float()) == pytest.approx(expected, abs=1e-6)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# diversity

def test_diversity_identical_samples_is_zero():
    x = rand_image(12)
    assert diversity([x, x, x]) == 0.0


def test_diversity_hand_example():
    a, b, c = np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.full((1, 2, 2), 3.0)
    # pairs: 1, 9, 4
    assert diversity([a, b, c]) == pytest.approx(14 / 3)


def test_diversity_needs_two():
    with pytest.raises(ValueError):
        diversity([np.zeros((1, 2, 2))])


def test_report_is_one_json_line():
    report = MetricsReport(psnr=20.0, ssim=0.5, mse=0.04, codebook_usage=0.5, perplexity=12.0, sample_count=4)
    line = report.to_record(command="eval")
    assert "\n" not in line
    data = json.loads(line)
    assert data["command"] == "eval" and data["sample_count"] == 4
    assert math.isclose(data["psnr"], 20.0)

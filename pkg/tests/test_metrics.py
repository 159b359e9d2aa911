import math

import numpy as np
import pytest

from ripnerf import metrics as mt
from oracles import ssim_reference


def test_psnr_cap_and_symmetry(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert mt.psnr(a, a) == 99.0
    b = rng.uniform(0, 1, (8, 8, 3))
    assert mt.psnr(a, b) == mt.psnr(b, a)


def test_psnr_uniform_error():
    a = np.full((4, 4, 3), 0.5)
    assert mt.psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("m", [1e-2, 3e-4, 1e-6])
def test_psnr_constructed_noise(rng, m):
    target = rng.uniform(0.2, 0.8, (16, 16, 3))
    noise = math.sqrt(m) * rng.choice([-1.0, 1.0], target.shape)
    assert abs(mt.psnr(target + noise, target) - 10 * math.log10(1 / m)) < 1e-9


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mt.psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_identity(rng):
    x = rng.uniform(0, 1, (20, 24, 3))
    assert mt.ssim(x, x) == 1.0


def test_ssim_inverted_binary_matches_reference(rng):
    x = (rng.random((24, 20)) > 0.5).astype(np.float64)
    assert abs(mt.ssim(1 - x, x) - ssim_reference(1 - x, x)) < 1e-9


def test_ssim_random_matches_reference(rng):
    a = rng.uniform(0, 1, (16, 18, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(mt.ssim(a, b) - ssim_reference(a, b)) < 1e-9


@pytest.mark.parametrize("c1,c2", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.55)])
def test_ssim_constant_images(c1, c2):
    k1 = (0.01) ** 2
    expect = (2 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1)
    got = mt.ssim(np.full((12, 12, 3), c1), np.full((12, 12, 3), c2))
    assert abs(got - expect) < 1e-9


def test_report_averages(rng):
    rep = mt.MetricReport()
    for s in (1, 1, 2, 4):
        h = 32 // s
        t = rng.uniform(0, 1, (h, h, 3))
        rep.add(f"v{s}", s, np.clip(t + rng.normal(0, 0.05 * s, t.shape), 0, 1), t)
    per = rep.per_scale
    assert per[1]["count"] == 2
    assert per[1]["psnr"] == pytest.approx(np.mean([i["psnr"] for i in rep.images[:2]]),
                                           abs=1e-12)
    assert abs(rep.average["psnr"] - np.mean([v["psnr"] for v in per.values()])) < 1e-12
    d = rep.to_dict()
    assert set(d["per_scale"]) == {"1", "2", "4"}
    # 8x8 images are below the SSIM window: reported as missing, not averaged in
    assert per[4]["ssim"] is None
    assert rep.average["ssim"] == pytest.approx((per[1]["ssim"] + per[2]["ssim"]) / 2)


def test_report_table_layout():
    rep = mt.MetricReport(model_bytes=3 * 2**20, wall_clock_s=12.34)
    x = np.full((12, 12, 3), 0.5)
    for s in (1, 2, 4, 8):
        rep.add("a", s, x, x)
    rep.add("tiny", 16, x[:4, :4], x[:4, :4])
    lines = rep.table().splitlines()
    assert "Full Res." in lines[0] and "1/8 Res." in lines[0] and "Avg." in lines[0]
    assert lines[1].split()[1:] == ["99.00"] * 6
    assert lines[2].split()[1:] == ["1.0000"] * 4 + ["n/a", "1.0000"]
    assert len({len(line) for line in lines[:3]}) == 1
    assert lines[3] == "Size: 3.00 MiB  Time: 12.3 s"


def test_empty_report():
    rep = mt.MetricReport()
    assert rep.average["psnr"] is None
    assert rep.per_scale == {}

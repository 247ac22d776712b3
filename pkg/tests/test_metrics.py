import numpy as np
import pytest

from sgen.data import DegradationSpec, SyntheticCorpus, to_unit
from sgen.errors import ConfigError
from sgen.metrics import (MetricReport, ScaleRow, eval_model, model_restorer,
                          psnr, ssim)
from sgen.model import SgenConfig, init_params

from oracles import ssim_windowed_naive


def test_psnr_identical_hits_cap():
    img = np.arange(64, dtype=np.float64).reshape(8, 8)
    assert psnr(img, img) == 99.0


def test_psnr_full_scale_error_is_zero():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 255.0)
    assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)


def test_psnr_known_value():
    # mse of a constant 25.5 offset is 650.25, 10*log10(255^2/650.25) = 20
    a = np.full((16, 16), 100.0)
    assert psnr(a, a + 25.5) == pytest.approx(20.0, abs=1e-12)


def test_psnr_monotone_in_mse():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 255, (32, 32))
    assert psnr(a, a + 5.0) > psnr(a, a + 10.0) > psnr(a, a + 20.0)


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity_is_exactly_one():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 255, (24, 24))
    assert ssim(img, img) == 1.0


def test_ssim_penalizes_inversion():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 255, (32, 32))
    assert ssim(a, 255.0 - a) < 0.2


def test_ssim_matches_windowed_oracle():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 255, (20, 26))
    b = np.clip(a + rng.normal(0, 12, a.shape), 0, 255)
    assert ssim(a, b) == pytest.approx(ssim_windowed_naive(a, b), abs=1e-8)


def test_ssim_symmetric():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 255, (16, 16))
    b = rng.uniform(0, 255, (16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ConfigError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_metrics_accept_color_images():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 255, (3, 16, 16))
    assert psnr(a, a) == 99.0
    assert ssim(a, a) == 1.0
    b = np.clip(a + rng.normal(0, 8, a.shape), 0, 255)
    assert 0.0 < ssim(a, b) < 1.0


# ---------------------------------------------------------------------------
# reports


def test_report_aggregate_weighted_by_count():
    rows = [ScaleRow((48, 32), 20.0, 0.5, 1), ScaleRow((64, 48), 30.0, 1.0, 3)]
    rep = MetricReport(rows)
    assert rep.mean_psnr == pytest.approx(27.5)
    assert rep.mean_ssim == pytest.approx(0.875)


def test_report_csv_layout():
    rep = MetricReport([ScaleRow((48, 32), 20.0, 0.5, 2)])
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "scale,psnr,ssim,n"
    assert lines[1].startswith("48x32,20.0")
    assert lines[-1].startswith("all,")


# ---------------------------------------------------------------------------
# evaluation loop


def test_eval_perfect_model_saturates():
    corpus = SyntheticCorpus(4)
    spec = DegradationSpec(down_factor=1, noise="none")
    rep = eval_model(lambda s: s, corpus, [(32, 32), (48, 32)], spec)
    assert len(rep.rows) == 2
    for row in rep.rows:
        assert row.psnr == 99.0
        assert row.ssim == 1.0
        assert row.count == 4


def test_eval_deterministic_and_limited():
    corpus = SyntheticCorpus(6)
    spec = DegradationSpec()
    rep1 = eval_model(lambda s: np.clip(s, -1, 1), corpus, [(48, 32)], spec, seed=3)
    rep2 = eval_model(lambda s: np.clip(s, -1, 1), corpus, [(48, 32)], spec, seed=3)
    assert rep1.rows[0].psnr == rep2.rows[0].psnr
    assert rep1.rows[0].ssim == rep2.rows[0].ssim
    rep3 = eval_model(lambda s: np.clip(s, -1, 1), corpus, [(48, 32)], spec, seed=3, limit=2)
    assert rep3.rows[0].count == 2


def test_eval_identity_baseline_is_degraded_quality():
    # the identity restorer scores the degradation itself: far below cap
    corpus = SyntheticCorpus(4)
    rep = eval_model(lambda s: s, corpus, [(48, 32)], DegradationSpec(), seed=0)
    assert 5.0 < rep.rows[0].psnr < 40.0
    assert rep.rows[0].ssim < 0.99


def test_model_restorer_pads_odd_sizes():
    cfg = SgenConfig(levels=2, base_channels=2)
    params = init_params(cfg, seed=0)
    restore = model_restorer(params, cfg)
    out = restore(to_unit(SyntheticCorpus(1).image(0, 50, 34)))
    assert out.shape == (1, 50, 34)
    assert np.all(np.isfinite(out))
    assert out.min() >= -1.0 and out.max() <= 1.0

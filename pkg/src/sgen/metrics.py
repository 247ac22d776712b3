"""PSNR/SSIM image quality metrics and per-scale model evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .data import degrade_pair, to_bytes
from .errors import ConfigError
from .model import generator_forward

PSNR_CAP = 99.0  # sentinel for zero/negligible error, keeps tables finite

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


def psnr(a, b, max_val: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB over 8-bit-scale arrays, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(max_val * max_val / mse), PSNR_CAP)


def _as_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3:
        return img.mean(axis=0)
    raise ConfigError(f"ssim expects (h, w) or (c, h, w), got shape {img.shape}")


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def ssim(a, b) -> float:
    """Mean local SSIM over fully valid 11x11 Gaussian windows (8-bit scale).

    Color inputs are reduced to grayscale by channel mean first.
    """
    a = _as_gray(a)
    b = _as_gray(b)
    if a.shape != b.shape:
        raise ConfigError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigError(f"ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    half = SSIM_WINDOW // 2
    crop = (slice(half, -half), slice(half, -half))

    def filt(x):
        return ndimage.correlate(x, _WINDOW, mode="constant")[crop]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# per-scale evaluation


@dataclass
class ScaleRow:
    scale: tuple
    psnr: float
    ssim: float
    count: int


@dataclass
class MetricReport:
    rows: list

    @property
    def mean_psnr(self) -> float:
        total = sum(r.count for r in self.rows)
        return sum(r.psnr * r.count for r in self.rows) / total

    @property
    def mean_ssim(self) -> float:
        total = sum(r.count for r in self.rows)
        return sum(r.ssim * r.count for r in self.rows) / total

    def to_csv(self) -> str:
        lines = ["scale,psnr,ssim,n"]
        for r in self.rows:
            lines.append(f"{r.scale[0]}x{r.scale[1]},{r.psnr:.4f},{r.ssim:.6f},{r.count}")
        total = sum(r.count for r in self.rows)
        lines.append(f"all,{self.mean_psnr:.4f},{self.mean_ssim:.6f},{total}")
        return "\n".join(lines) + "\n"


def model_restorer(params: dict, config) -> callable:
    """Wrap generator parameters as a restore function over single images.

    The returned callable maps a [-1, 1] float image (c, h, w) to its
    restored version, edge-padding to the generator divisor and cropping
    back, so any size at or above the divisor works.
    """
    d = config.divisor

    def restore(s):
        arr = np.asarray(s, dtype=np.float64)
        if arr.ndim != 3:
            raise ConfigError(f"restore expects a (c, h, w) image, got shape {arr.shape}")
        _, h, w = arr.shape
        ph = (d - h % d) % d
        pw = (d - w % d) % d
        if ph or pw:
            arr = np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="edge")
        out, _ = generator_forward(Tensor(arr[None]), params, config)
        return out.data[0, :, :h, :w]

    return restore


def eval_model(restore, corpus, scales, spec, seed: int = 0, limit: int | None = None) -> MetricReport:
    """Restore every corpus image at every scale and average PSNR/SSIM.

    `restore` maps a degraded [-1, 1] image (c, h, w) to a restored one (see
    model_restorer; the identity lambda gives the degraded baseline).  Each
    (scale, image) pair gets its own derived rng, so results do not depend on
    iteration order.  Metrics are computed on quantized 8-bit values.
    """
    rows = []
    count = len(corpus) if limit is None else min(limit, len(corpus))
    if count == 0:
        raise ConfigError("eval_model needs a non-empty corpus")
    for si, scale in enumerate(scales):
        psnrs, ssims = [], []
        for i in range(count):
            rng = np.random.default_rng([seed, si, i])
            pair = degrade_pair(corpus.image(i, *scale), spec, rng, scale)
            out = np.asarray(restore(pair.s), dtype=np.float64)
            a = to_bytes(out).astype(np.float64)
            b = to_bytes(pair.t).astype(np.float64)
            psnrs.append(psnr(a, b))
            ssims.append(ssim(a, b))
        rows.append(ScaleRow(scale, float(np.mean(psnrs)), float(np.mean(ssims)), count))
    return MetricReport(rows)

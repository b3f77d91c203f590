"""Image quality metrics: PSNR and SSIM, plus per-frame evaluation curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dgsplat.autodiff import ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0  # dB reported for (near-)zero MSE; keeps CSVs finite


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1], capped at 99 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with an outer-product window."""
    k = len(kernel1d)
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(win, np.outer(kernel1d, kernel1d), axes=([2, 3], [0, 1]))


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    w = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1/K2 = .01/.03).

    Accepts single-channel or 3-channel images in [0,1]; channels are
    averaged.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c])
                          for c in range(a.shape[2])]))


@dataclass
class MetricReport:
    """Per-frame quality against ground-truth frames."""

    frame_index: np.ndarray
    timestamps: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def rows(self):
        for i in range(len(self.frame_index)):
            yield [int(self.frame_index[i]), float(self.timestamps[i]),
                   float(self.psnr[i]), float(self.ssim[i])]


def per_frame_curve(render_fn, frames) -> MetricReport:
    """Evaluate ``render_fn(t, camera) -> (H,W,3) array`` against a FrameSet.

    PSNR/SSIM are averaged over cameras per timestamp, giving the per-frame
    curve used for beginning/middle/end comparisons.
    """
    t_count = frames.n_frames
    psnrs = np.empty(t_count)
    ssims = np.empty(t_count)
    for i in range(t_count):
        ps, ss = [], []
        for j, cam in enumerate(frames.cameras):
            img = np.clip(render_fn(float(frames.timestamps[i]), cam), 0.0, 1.0)
            gt = frames.images[i, j].astype(np.float64)
            ps.append(psnr(img, gt))
            ss.append(ssim(img, gt))
        psnrs[i] = np.mean(ps)
        ssims[i] = np.mean(ss)
    return MetricReport(frame_index=np.arange(t_count),
                        timestamps=np.asarray(frames.timestamps, dtype=np.float64),
                        psnr=psnrs, ssim=ssims)

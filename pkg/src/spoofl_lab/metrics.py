"""Reconstruction-quality and privacy metrics.

All metrics are pure functions of their inputs.  Image metrics assume the
fixed [0, 1] data range established by the data module.  The perceptual
distance is computed with a locally trained feature network and is therefore
reported as ``lpips_like`` — it follows the layer-normalized feature-space
construction but not the official pretrained backbone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .models import ClassifierState, feature_taps, penultimate_embedding, softmax_confidences

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class MetricReport:
    ssim: float | None = None
    psnr_db: float | None = None
    fmse: float | None = None
    lpips_like: float | None = None
    plc: float | None = None
    accuracy: float | None = None
    relative_execution_time: float | None = None
    per_sample: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ssim": self.ssim, "psnr_db": self.psnr_db, "fmse": self.fmse,
            "lpips_like": self.lpips_like, "plc": self.plc,
            "accuracy": self.accuracy,
            "relative_execution_time": self.relative_execution_time,
            "per_sample": {k: list(map(float, v)) for k, v in self.per_sample.items()},
        }


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise ValueError("expected (B, C, H, W) or (C, H, W) images")
    return a, b


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation with the Gaussian window
    from numpy.lib.stride_tricks import sliding_window_view

    win = len(kernel)
    rows = sliding_window_view(img, win, axis=0) @ kernel  # (H-w+1, W)
    return sliding_window_view(rows, win, axis=1) @ kernel  # (H-w+1, W-w+1)


def _ssim_single(a: np.ndarray, b: np.ndarray, win: int) -> float:
    kernel = _gaussian_kernel(win, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    e_aa = _windowed_mean(a * a, kernel)
    e_bb = _windowed_mean(b * b, kernel)
    e_ab = _windowed_mean(a * b, kernel)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over batch and channels (Gaussian window 11, sigma 1.5)."""
    a, b = _check_pair(a, b)
    h, w = a.shape[2], a.shape[3]
    win = _SSIM_WINDOW
    if min(h, w) < win:
        win = min(h, w) - (1 - min(h, w) % 2)  # largest odd window that fits
        log.warning("image %dx%d smaller than SSIM window; using window %d", h, w, win)
    vals = [
        _ssim_single(a[i, c], b[i, c], win)
        for i in range(a.shape[0])
        for c in range(a.shape[1])
    ]
    return float(np.mean(np.asarray(vals).reshape(a.shape[0], a.shape[1]).mean(axis=1)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for data range 1.0, capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def fmse(a: np.ndarray, b: np.ndarray, feature_net: ClassifierState) -> float:
    """Mean squared distance between penultimate-layer embeddings."""
    a, b = _check_pair(a, b)
    ea = penultimate_embedding(feature_net, a.astype(np.float32))
    eb = penultimate_embedding(feature_net, b.astype(np.float32))
    return float(np.mean((ea - eb) ** 2))


def lpips_like(a: np.ndarray, b: np.ndarray, feature_net: ClassifierState) -> float:
    """Perceptual distance: sum over tap layers of the MSE between
    location-wise unit-normalized feature maps."""
    a, b = _check_pair(a, b)
    taps_a = feature_taps(feature_net, a.astype(np.float32))
    taps_b = feature_taps(feature_net, b.astype(np.float32))
    if len(taps_a) < 2:
        raise ValueError("feature network exposes fewer than 2 intermediate layers")
    total = 0.0
    for ta, tb in zip(taps_a, taps_b):
        na = ta / (np.linalg.norm(ta, axis=1, keepdims=True) + 1e-10)
        nb = tb / (np.linalg.norm(tb, axis=1, keepdims=True) + 1e-10)
        total += float(np.mean((na - nb) ** 2))
    return total


def plc(recon: np.ndarray, true_labels: np.ndarray, private_classifier: ClassifierState,
        num_classes: int) -> float:
    """Private Leakage Confidence: class count times the mean confidence the
    private-task classifier assigns to each reconstruction's true class.

    A uniform classifier scores exactly 1.0 for any batch; lower is a
    stronger defense.
    """
    recon = np.asarray(recon, np.float32)
    if recon.ndim == 3:
        recon = recon[None]
    labels = np.asarray(true_labels, np.int64).ravel()
    if len(recon) != len(labels) or len(labels) < 1:
        raise ValueError("reconstruction and label counts must match and be >= 1")
    if num_classes != private_classifier.spec.num_classes:
        raise ValueError("num_classes does not match the classifier head")
    probs = softmax_confidences(private_classifier, np.clip(recon, 0.0, 1.0))
    confidences = probs[np.arange(len(labels)), labels]
    return float(num_classes * confidences.mean())


def relative_execution_time(defended_wall_s: float, baseline_wall_s: float) -> float:
    """Defended wall time divided by the undefended baseline."""
    if defended_wall_s <= 0 or baseline_wall_s <= 0:
        raise ValueError("wall times must be positive")
    return float(defended_wall_s / baseline_wall_s)


def score_reconstruction(recon: np.ndarray, reference: np.ndarray,
                         true_labels: np.ndarray | None = None,
                         private_classifier: ClassifierState | None = None,
                         ) -> MetricReport:
    """Full metric report for a reconstruction against its ground truth."""
    recon = np.clip(np.asarray(recon, np.float32), 0.0, 1.0)
    report = MetricReport(
        ssim=ssim(recon, reference),
        psnr_db=psnr(recon, reference),
        per_sample={
            "ssim": [ssim(recon[i], reference[i]) for i in range(len(recon))],
            "psnr_db": [psnr(recon[i], reference[i]) for i in range(len(recon))],
        },
    )
    if private_classifier is not None:
        report.fmse = fmse(recon, reference, private_classifier)
        report.lpips_like = lpips_like(recon, reference, private_classifier)
        if true_labels is not None:
            report.plc = plc(recon, true_labels, private_classifier,
                             private_classifier.spec.num_classes)
    return report

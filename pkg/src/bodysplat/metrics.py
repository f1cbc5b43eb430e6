"""Image-quality metrics, high-frequency analysis, and significance tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import betainc

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

CANNY_SIGMA = 1.4
CANNY_LOW_FRAC = 0.1
CANNY_HIGH_FRAC = 0.2
FFT_CUTOFF_FRAC = 0.1


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image @ LUMA_WEIGHTS
    return image


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return the +inf sentinel.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel1d(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity over luminance.

    11x11 Gaussian window (sigma 1.5), evaluated where the window fits
    entirely inside the image.
    """
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    r = SSIM_WINDOW // 2
    k1 = _gaussian_kernel1d(SSIM_SIGMA, r)

    def smooth(img):
        out = ndimage.correlate1d(img, k1, axis=0, mode="constant")
        out = ndimage.correlate1d(out, k1, axis=1, mode="constant")
        return out[r:-r, r:-r]

    mu_a = smooth(ga)
    mu_b = smooth(gb)
    var_a = smooth(ga * ga) - mu_a * mu_a
    var_b = smooth(gb * gb) - mu_b * mu_b
    cov = smooth(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def canny_edges(image: np.ndarray, sigma: float = CANNY_SIGMA,
                low_frac: float = CANNY_LOW_FRAC,
                high_frac: float = CANNY_HIGH_FRAC) -> np.ndarray:
    """Boolean edge map: Gaussian smoothing, Sobel gradients, non-maximum
    suppression, then relative double thresholding with hysteresis.

    Thresholds are fractions of the maximum gradient magnitude, so the
    output is invariant to rescaling the input by a positive constant.
    """
    gray = to_gray(image)
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    gx = ndimage.correlate(smooth, kx, mode="nearest")
    gy = ndimage.correlate(smooth, kx.T, mode="nearest")
    mag = np.hypot(gx, gy)
    # constant inputs leave only rounding dust; relative thresholds would
    # otherwise amplify it into phantom edges
    if mag.max() <= 1e-10 * max(float(np.abs(smooth).max()), 1e-300):
        return np.zeros_like(mag, dtype=bool)

    # non-maximum suppression along the quantized gradient direction
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    center = padded[1:-1, 1:-1]
    shifts = {
        0: (padded[1:-1, 2:], padded[1:-1, :-2]),     # east/west
        45: (padded[:-2, 2:], padded[2:, :-2]),       # ne/sw
        90: (padded[:-2, 1:-1], padded[2:, 1:-1]),    # north/south
        135: (padded[:-2, :-2], padded[2:, 2:]),      # nw/se
    }
    bins = (np.round(angle / 45.0).astype(int) % 4) * 45
    nms = np.zeros_like(mag)
    for b, (fwd, bwd) in shifts.items():
        sel = bins == b
        keep = sel & (center >= fwd) & (center >= bwd)
        nms[keep] = mag[keep]

    high = high_frac * mag.max()
    low = low_frac * mag.max()
    strong = nms >= high
    weak = nms >= low
    labels, n_labels = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n_labels == 0:
        return strong
    keep_label = np.zeros(n_labels + 1, dtype=bool)
    keep_label[np.unique(labels[strong])] = True
    keep_label[0] = False
    return keep_label[labels]


def fourier_highpass(image: np.ndarray,
                     cutoff_frac: float = FFT_CUTOFF_FRAC) -> np.ndarray:
    """Magnitude of the inverse transform after zeroing a centered disk."""
    gray = to_gray(image)
    h, w = gray.shape
    spectrum = np.fft.fftshift(np.fft.fft2(gray))
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h // 2, w // 2
    radius = cutoff_frac * min(h, w)
    spectrum[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = 0.0
    return np.abs(np.fft.ifft2(np.fft.ifftshift(spectrum)))


def high_freq_maps(image: np.ndarray):
    """(Canny edge map, Fourier high-pass magnitude) of one image."""
    return canny_edges(image), fourier_highpass(image)


def mask_iou(pred: np.ndarray, gt: np.ndarray):
    """Per-part and mean intersection over union for 0..15 label masks.

    Parts absent from both masks are skipped; the mean covers the rest.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    per_part = {}
    for label in range(1, 16):
        p = pred == label
        g = gt == label
        union = int(np.count_nonzero(p | g))
        if union == 0:
            continue
        per_part[label] = float(np.count_nonzero(p & g) / union)
    mean = float(np.mean(list(per_part.values()))) if per_part else float("nan")
    return per_part, mean


@dataclass
class TTestResult:
    mean_x: float
    std_x: float
    mean_y: float
    std_y: float
    t_value: float
    dof: int
    p_value: float


def _student_sf2(t_abs: float, dof: int) -> float:
    """Two-tailed tail probability of Student's t via the incomplete beta."""
    if np.isinf(t_abs):
        return 0.0
    x = dof / (dof + t_abs * t_abs)
    return float(betainc(dof / 2.0, 0.5, x))


def two_sample_t_test(xs, ys) -> TTestResult:
    """Pooled-variance two-sample t-test with df = n1 + n2 - 2.

    Zero pooled variance yields t = 0 (equal means) or the infinite-t
    sentinel (p reported as 0).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n1, n2 = len(xs), len(ys)
    if n1 < 2 or n2 < 2:
        raise ValueError("each sample needs at least 2 observations")
    m1, m2 = float(xs.mean()), float(ys.mean())
    v1 = float(xs.var(ddof=1))
    v2 = float(ys.var(ddof=1))
    dof = n1 + n2 - 2
    pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / dof
    if pooled == 0.0:
        t = 0.0 if m1 == m2 else float(np.sign(m1 - m2)) * float("inf")
    else:
        t = (m1 - m2) / np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    p = 1.0 if t == 0.0 else _student_sf2(abs(t), dof)
    return TTestResult(
        mean_x=m1, std_x=float(np.sqrt(v1)), mean_y=m2, std_y=float(np.sqrt(v2)),
        t_value=float(t), dof=dof, p_value=p,
    )


def t_critical(dof: int, alpha: float = 0.05) -> float:
    """Two-tailed critical t value: the t with tail probability alpha."""
    lo, hi = 0.0, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _student_sf2(mid, dof) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class MetricReport:
    """Per-view quality metrics with their means."""

    psnr_per_view: list = field(default_factory=list)
    ssim_per_view: list = field(default_factory=list)
    iou_per_view: list = field(default_factory=list)
    iou_per_part: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        vals = [v for v in self.psnr_per_view if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("inf")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_per_view)) if self.ssim_per_view else float("nan")

    @property
    def mean_iou(self) -> float:
        vals = [v for v in self.iou_per_view if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        for i, p in enumerate(self.psnr_per_view):
            s = self.ssim_per_view[i] if i < len(self.ssim_per_view) else float("nan")
            iou = self.iou_per_view[i] if i < len(self.iou_per_view) else float("nan")
            yield i, p, s, iou

    def as_text(self) -> str:
        lines = ["view\tpsnr_db\tssim\tmask_iou"]
        for i, p, s, iou in self.rows():
            lines.append(f"{i}\t{p:.4f}\t{s:.6f}\t{iou:.6f}")
        lines.append(
            f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}\t{self.mean_iou:.6f}"
        )
        return "\n".join(lines) + "\n"

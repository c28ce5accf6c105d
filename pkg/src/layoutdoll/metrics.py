"""Evaluation metrics: SSIM, mask overlap scores, the weighted spatial
composite, Fréchet / kernel-MMD distribution distances over a handcrafted
feature extractor, and the color-oracle component detector."""

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, ndimage

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DETECT_TOL = 24  # L-inf tolerance of the color-oracle detector


def _to_gray(img):
    a = np.asarray(img)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    else:
        a = a.astype(np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    return a


def _gaussian_kernel1d():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


_K1D = _gaussian_kernel1d()


def _blur(a):
    out = ndimage.correlate1d(a, _K1D, axis=0, mode="reflect")
    return ndimage.correlate1d(out, _K1D, axis=1, mode="reflect")


def ssim(a, b):
    """Structural similarity with the standard 11-tap Gaussian window,
    K1=0.01, K2=0.03, dynamic range 1. Tri-channel inputs are averaged to a
    single channel first."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ContractViolation(f"ssim: sizes differ {ga.shape} vs {gb.shape}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a, mu_b = _blur(ga), _blur(gb)
    var_a = _blur(ga * ga) - mu_a * mu_a
    var_b = _blur(gb * gb) - mu_b * mu_b
    cov = _blur(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def jaccard(a, b):
    if a.shape != b.shape:
        raise ContractViolation("jaccard: sizes differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b):
    if a.shape != b.shape:
        raise ContractViolation("dice: sizes differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def spatial_accuracy(detected, layout_masks):
    """Per layout component: 0.25*Jaccard + 0.25*Dice + 0.50*SSIM between the
    detected mask and the layout mask, averaged over layout components.
    Undetected components contribute zero to all three terms."""
    if not layout_masks:
        return 1.0
    scores = []
    for comp, lay in layout_masks.items():
        det = detected.get(comp)
        if det is None or not det.any():
            scores.append(0.0)
            continue
        s = ssim(det.astype(np.float64), lay.astype(np.float64))
        scores.append(0.25 * jaccard(det, lay) + 0.25 * dice(det, lay) + 0.50 * s)
    return float(np.mean(scores))


def detect_components(image, palette):
    """Color-oracle detector: nearest candidate color per pixel within L-inf
    DETECT_TOL, then keep only the largest connected blob per component.

    `palette` maps component -> list of candidate RGB colors.
    """
    img = np.asarray(image).astype(np.int16)
    comps = list(palette)
    colors = []
    owner = []
    for ci, comp in enumerate(comps):
        for col in palette[comp]:
            colors.append(col)
            owner.append(ci)
    refs = np.array(colors, dtype=np.int16)  # (K, 3)
    owner = np.array(owner)
    d = np.abs(img[:, :, None, :] - refs[None, None, :, :]).max(axis=3)
    nearest = d.argmin(axis=2)
    ok = d.min(axis=2) <= DETECT_TOL
    comp_map = np.where(ok, owner[nearest], -1)
    out = {}
    for ci, comp in enumerate(comps):
        m = comp_map == ci
        if not m.any():
            continue
        lab, nlab = ndimage.label(m)
        if nlab > 1:
            sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, nlab + 1))
            m = lab == (int(sizes.argmax()) + 1)
        out[comp] = m
    return out


# ---------------------------------------------------------------------------
# distribution distances
# ---------------------------------------------------------------------------

def frechet_distance(fa, fb):
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), symmetric sqrt."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ContractViolation("frechet_distance expects (n, d) feature sets of equal d")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ContractViolation("frechet_distance needs n >= 2 per set")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.cov(fa, rowvar=False)
    cb = np.cov(fb, rowvar=False)
    ca = np.atleast_2d(ca)
    cb = np.atleast_2d(cb)
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        if np.abs(covmean.imag).max() > 1e-6:
            warnings.warn("covariance product is not PSD; taking the real part")
        covmean = covmean.real
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean))
    if fd < 0:
        if fd < -1e-6:
            warnings.warn(f"negative Fréchet distance {fd}; clipping to 0")
        fd = 0.0
    return fd


def _poly_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kernel_mmd(fa, fb):
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/d + 1)^3.

    For equal set sizes the complete U-statistic (cross-kernel diagonal
    excluded) is used, which is exactly zero on identical sets; otherwise the
    cross term averages over all pairs. Either way the estimate may be
    slightly negative.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    m, n = fa.shape[0], fb.shape[0]
    if m < 2 or n < 2:
        raise ContractViolation("kernel_mmd needs n >= 2 per set")
    kaa = _poly_kernel(fa, fa)
    kbb = _poly_kernel(fb, fb)
    kab = _poly_kernel(fa, fb)
    sum_aa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sum_bb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    if m == n:
        cross = (kab.sum() - np.trace(kab)) / (m * (m - 1))
    else:
        cross = kab.mean()
    return float(sum_aa + sum_bb - 2.0 * cross)


def toy_features(images, palette=None):
    """Handcrafted stand-in features: per-component [coverage, mean RGB]
    (8 x 4 = 32 dims) plus a 4x6 average-luminance grid (24 dims) = 56 dims."""
    if palette is None:
        from .dataset import DETECTION_PALETTE
        palette = DETECTION_PALETTE
    comps = list(palette)
    rows = []
    for img in images:
        img = np.asarray(img)
        H, W, _ = img.shape
        det = detect_components(img, palette)
        feats = []
        for comp in comps:
            m = det.get(comp)
            if m is None or not m.any():
                feats.extend([0.0, 0.0, 0.0, 0.0])
            else:
                mean = img[m].mean(axis=0) / 255.0
                feats.extend([m.mean(), mean[0], mean[1], mean[2]])
        lum = img.astype(np.float64).mean(axis=2) / 255.0
        gh, gw = 4, 6
        ys = np.linspace(0, H, gh + 1).astype(int)
        xs = np.linspace(0, W, gw + 1).astype(int)
        for i in range(gh):
            for j in range(gw):
                feats.append(float(lum[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean()))
        rows.append(feats)
    return np.array(rows, dtype=np.float64)


@dataclass
class MetricReport:
    spatial_accuracy: float
    ssim: float
    fid: float
    kid: float
    n: int

    def to_json(self):
        data = asdict(self)
        for key, v in data.items():
            if isinstance(v, float) and not np.isfinite(v):
                data[key] = None  # undefined (e.g. distribution metrics at n < 2)
        return json.dumps(data, sort_keys=True)

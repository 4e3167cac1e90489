"""Image quality metrics: PSNR, SSIM, NIQE, and the perceptual index.

Full-reference metrics follow SR conventions: BT.601 luminance, 4-px
border crop. NIQE is implemented natively against a shipped natural-scene
model (regenerable with fit_niqe_params); NRQM is only pluggable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import gamma as gamma_fn

from .imgproc import luminance, resize_bicubic


class MetricsError(Exception):
    pass


PSNR_CAP = 100.0


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    niqe: float | None = None
    nrqm: float | None = None
    pi: float | None = None

    def __post_init__(self):
        if (self.pi is not None) != (self.niqe is not None and self.nrqm is not None):
            raise MetricsError("pi must be present exactly when both niqe and nrqm are")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise MetricsError(f"ssim out of range: {self.ssim}")

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _prep_pair(a: np.ndarray, b: np.ndarray, border: int):
    if a.shape != b.shape:
        raise MetricsError(f"image shapes differ: {a.shape} vs {b.shape}")
    ya, yb = luminance(a), luminance(b)
    if border > 0:
        ya = ya[border:-border, border:-border]
        yb = yb[border:-border, border:-border]
    return ya.astype(np.float64), yb.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray, border: int = 4) -> float:
    """Luminance PSNR in dB; identical inputs report the 100 dB cap."""
    ya, yb = _prep_pair(a, b, border)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, border: int = 4) -> float:
    """Mean local SSIM on luminance, 11x11 gaussian window (sigma 1.5)."""
    ya, yb = _prep_pair(a, b, border)
    sigma, truncate = 1.5, 3.5
    radius = int(truncate * sigma + 0.5)
    win = 2 * radius + 1
    if min(ya.shape) < win:
        raise MetricsError(f"image side {min(ya.shape)} smaller than SSIM window {win}")
    filt = lambda x: gaussian_filter(x, sigma, truncate=truncate)  # noqa: E731
    mu_a, mu_b = filt(ya), filt(yb)
    saa = filt(ya * ya) - mu_a * mu_a
    sbb = filt(yb * yb) - mu_b * mu_b
    sab = filt(ya * yb) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    smap = num / den
    return float(smap[radius:-radius, radius:-radius].mean())


# ---------------------------------------------------------------------------
# NIQE

_GAM_GRID = np.arange(0.2, 10.001, 0.001)
_R_GAM = (gamma_fn(2.0 / _GAM_GRID) ** 2
          / (gamma_fn(1.0 / _GAM_GRID) * gamma_fn(3.0 / _GAM_GRID)))


def _fit_aggd(vec: np.ndarray) -> tuple[float, float, float]:
    """Asymmetric generalized gaussian fit: (alpha, beta_left, beta_right)."""
    vec = vec.ravel()
    left = vec[vec < 0]
    right = vec[vec > 0]
    sigma_l = math.sqrt(float(np.mean(left ** 2))) if left.size else 0.0
    sigma_r = math.sqrt(float(np.mean(right ** 2))) if right.size else 0.0
    if sigma_l == 0 or sigma_r == 0:
        return 0.2, sigma_l, sigma_r
    gammahat = sigma_l / sigma_r
    rhat = float(np.mean(np.abs(vec))) ** 2 / float(np.mean(vec ** 2))
    rhatnorm = rhat * (gammahat ** 3 + 1) * (gammahat + 1) / (gammahat ** 2 + 1) ** 2
    alpha = float(_GAM_GRID[np.argmin((_R_GAM - rhatnorm) ** 2)])
    ratio = math.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    return alpha, sigma_l * ratio, sigma_r * ratio


def _mscn(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the local sigma."""
    mu = gaussian_filter(lum, 7.0 / 6.0, truncate=2.9)
    sigma = np.sqrt(np.abs(gaussian_filter(lum * lum, 7.0 / 6.0, truncate=2.9) - mu * mu))
    return (lum - mu) / (sigma + 1.0), sigma


_SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _mscn_features(mscn: np.ndarray) -> np.ndarray:
    feats = []
    alpha, bl, br = _fit_aggd(mscn)
    feats += [alpha, (bl + br) / 2.0]
    for dy, dx in _SHIFTS:
        shifted = np.roll(np.roll(mscn, dy, axis=0), dx, axis=1)
        pair = (mscn * shifted)[dy:, :]
        alpha, bl, br = _fit_aggd(pair)
        eta = (br - bl) * (gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha))
        feats += [alpha, eta, bl, br]
    return np.asarray(feats)


def _image_block_features(lum: np.ndarray, block: int = 96):
    """Per-block 36-dim NIQE features at two scales plus block sharpness."""
    h, w = lum.shape
    ny, nx = h // block, w // block
    if ny == 0 or nx == 0:
        raise MetricsError(f"image {h}x{w} smaller than the {block}px NIQE block")
    feats_scales = []
    sharpness = None
    for scale in (1, 2):
        b = block // scale
        mscn, sigma = _mscn(lum)
        feats = np.array([
            _mscn_features(mscn[by * b:(by + 1) * b, bx * b:(bx + 1) * b])
            for by in range(ny) for bx in range(nx)])
        feats_scales.append(feats)
        if scale == 1:
            sharpness = np.array([
                sigma[by * b:(by + 1) * b, bx * b:(bx + 1) * b].mean()
                for by in range(ny) for bx in range(nx)])
            lum = resize_bicubic(lum, h // 2, w // 2).astype(np.float64)
    return np.concatenate(feats_scales, axis=1), sharpness


def _default_params_path() -> Path:
    return Path(resources.files("mimicsr") / "data" / "niqe_params.npz")


def load_niqe_params(path: str | Path | None = None) -> dict:
    p = Path(path) if path else _default_params_path()
    if not p.is_file():
        raise MetricsError(f"NIQE parameter file not found: {p}")
    with np.load(p) as z:
        return {"mu": z["mu"], "cov": z["cov"]}


def niqe(img: np.ndarray, model_params: dict | str | Path | None = None) -> float:
    """Naturalness distance of an image; lower is more natural.

    img is HxWx3 in [0,1] (or an HxW luminance plane), at least 96x96.
    """
    if not isinstance(model_params, dict):
        model_params = load_niqe_params(model_params)
    lum = (luminance(img) if img.ndim == 3 else img).astype(np.float64) * 255.0
    if min(lum.shape) < 96:
        raise MetricsError(f"NIQE needs at least 96x96 pixels, got {lum.shape}")
    feats, _ = _image_block_features(lum)
    feats = feats[np.isfinite(feats).all(axis=1)]
    if len(feats) < 2:
        raise MetricsError("too few valid NIQE blocks")
    mu_img = feats.mean(axis=0)
    cov_img = np.cov(feats, rowvar=False)
    mu_p, cov_p = model_params["mu"], model_params["cov"]
    diff = mu_p - mu_img
    inv = np.linalg.pinv((cov_p + cov_img) / 2.0)
    return float(np.sqrt(max(0.0, diff @ inv @ diff)))


def fit_niqe_params(images: list[np.ndarray], sharpness_fraction: float = 0.75) -> dict:
    """Fit the natural-scene Gaussian over the sharpest blocks of pristine
    images. Returns {'mu', 'cov'} ready for niqe()."""
    rows = []
    for img in images:
        lum = (luminance(img) if img.ndim == 3 else img).astype(np.float64) * 255.0
        if min(lum.shape) < 96:
            continue
        feats, sharp = _image_block_features(lum)
        keep = sharp > sharpness_fraction * sharp.max()
        rows.append(feats[keep])
    if not rows:
        raise MetricsError("no usable pristine images (need at least 96x96)")
    feats = np.concatenate(rows, axis=0)
    feats = feats[np.isfinite(feats).all(axis=1)]
    return {"mu": feats.mean(axis=0), "cov": np.cov(feats, rowvar=False)}


def save_niqe_params(params: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, mu=params["mu"], cov=params["cov"])


# ---------------------------------------------------------------------------
# NRQM plumbing and the perceptual index


def nrqm_external(img: np.ndarray, scorer_handle) -> float:
    """Forward to an external NRQM scorer; never fabricates a value."""
    if scorer_handle is None:
        raise MetricsError("no NRQM scorer configured")
    try:
        return float(scorer_handle(img))
    except MetricsError:
        raise
    except Exception as exc:
        raise MetricsError(f"NRQM scorer failed: {exc}") from exc


def pi(niqe_score: float, nrqm_score: float) -> float:
    """Perceptual index, 0.5*((10 - NRQM) + NIQE); lower is better."""
    if not (math.isfinite(niqe_score) and math.isfinite(nrqm_score)):
        raise MetricsError("pi inputs must be finite")
    return 0.5 * ((10.0 - nrqm_score) + niqe_score)


def evaluate_image(out: np.ndarray, ref: np.ndarray | None = None,
                   niqe_params: dict | str | Path | None = None,
                   nrqm_scorer=None, border: int = 4) -> MetricReport:
    """Full metric report for one image; absent scorers are omitted."""
    rep = {}
    if ref is not None:
        rep["psnr"] = psnr(out, ref, border)
        rep["ssim"] = ssim(out, ref, border)
    rep["niqe"] = niqe(out, niqe_params)
    if nrqm_scorer is not None:
        rep["nrqm"] = nrqm_external(out, nrqm_scorer)
        rep["pi"] = pi(rep["niqe"], rep["nrqm"])
    return MetricReport(**rep)

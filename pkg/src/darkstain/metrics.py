"""No-reference evaluation: FID, KID, NIQE, and a deep-feature content
distance between the enhanced input and the luma of the stained output.

FID is the Fréchet distance between Gaussian fits of embedder features,
with the symmetric matrix square root taken by eigendecomposition. KID is
the unbiased squared MMD with the cubic polynomial kernel
k(x, y) = (x'y / D + 1)^3 averaged over seeded fixed-size subsets. NIQE
fits generalized-Gaussian statistics of locally normalized luminance on
96x96 patches at two scales and measures a Mahalanobis-type distance to a
pristine-model Gaussian. All four are deterministic given the embedder and
model files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from .errors import NumericalError
from .imaging import replicate_gray, to_luma, validate_image
from .networks import ConvEmbedder
from .training import to_tensor

NIQE_PATCH = 96
_MSCN_C = 1.0 / (255.0 * 255.0)

# gamma-ratio lookup grid shared by the GGD/AGGD shape estimators
_GAMMA_GRID = np.arange(0.2, 10.0, 0.001)
_GGD_RATIO = (gamma_fn(2.0 / _GAMMA_GRID) ** 2) / (
    gamma_fn(1.0 / _GAMMA_GRID) * gamma_fn(3.0 / _GAMMA_GRID)
)


@dataclass
class FeatureSet:
    vectors: np.ndarray
    extractor_id: str

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature matrix contains non-finite values")


@dataclass
class NiqeModel:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        eigvals = np.linalg.eigvalsh((self.cov + self.cov.T) / 2.0)
        if eigvals.min() < -1e-8 * max(1.0, float(np.abs(eigvals).max())):
            raise ValueError("covariance must be positive semi-definite")

    def save(self, path: str | Path) -> None:
        np.savez(path, mean=self.mean, cov=self.cov)

    @classmethod
    def load(cls, path: str | Path) -> "NiqeModel":
        with np.load(path) as data:
            return cls(mean=data["mean"], cov=data["cov"])


@dataclass
class MetricsReport:
    fid: float
    kid: float
    niqe: float
    lpips: float

    def write_csv_row(self, path: str | Path, method: str) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["method", "fid", "kid", "niqe", "lpips"])
            w.writerow([method, f"{self.fid:.6f}", f"{self.kid:.6f}",
                        f"{self.niqe:.6f}", f"{self.lpips:.6f}"])


def extract_features(images, embedder: ConvEmbedder) -> FeatureSet:
    """One spatially pooled deep-feature vector per image."""
    images = list(images)
    if len(images) < 2:
        raise ValueError("need at least 2 images to build a feature set")
    rows = []
    with torch.no_grad():
        for img in images:
            validate_image(img)
            t = to_tensor(replicate_gray(img))[None]
            feat = embedder(t)
            rows.append(feat.mean(dim=(2, 3))[0].double().numpy())
    seed_tag = getattr(embedder, "seed_tag", "convembed")
    return FeatureSet(np.stack(rows), extractor_id=seed_tag)


def _sqrtm_psd(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    floor = -tol * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise NumericalError(f"matrix square root failed: eigenvalue {vals.min():.3e} below tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Fréchet distance between Gaussian fits of the two feature sets."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    if a.vectors.shape[0] < 2 or b.vectors.shape[0] < 2:
        raise ValueError("need at least 2 vectors per set")
    mu_a, mu_b = a.vectors.mean(axis=0), b.vectors.mean(axis=0)
    cov_a = np.cov(a.vectors, rowvar=False)
    cov_b = np.cov(b.vectors, rowvar=False)
    s = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(s @ cov_b @ s)
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return d2


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n and np.array_equal(x, y):
        # degenerate case of literally shared rows: exclude the matched pairs
        # from the cross term as well, giving exactly zero for identical sets
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.mean()
    return float(sum_xx + sum_yy - 2.0 * cross)


def kid(a: FeatureSet, b: FeatureSet, subset_size: int = 100, n_subsets: int = 10,
        seed: int = 0) -> float:
    """Unbiased squared-MMD estimate averaged over seeded subsets of size
    min(subset_size, N). With sets no larger than the subset size each subset
    is the full set, which makes the estimate row-permutation invariant."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    na, nb = a.vectors.shape[0], b.vectors.shape[0]
    if na < 2 or nb < 2:
        raise ValueError("need at least 2 vectors per set")
    m_a, m_b = min(subset_size, na), min(subset_size, nb)
    rng = np.random.default_rng(seed)
    same = na == nb and np.array_equal(a.vectors, b.vectors)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(na, size=m_a, replace=False) if m_a < na else np.arange(na)
        if same:
            ib = ia
        else:
            ib = rng.choice(nb, size=m_b, replace=False) if m_b < nb else np.arange(nb)
        vals.append(_mmd2_unbiased(a.vectors[ia], b.vectors[ib]))
    return float(np.mean(vals))


def _gauss_window(radius: int = 3, sigma: float = 7.0 / 4.0) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def mscn(gray: np.ndarray) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients with a 7x7 Gaussian
    window. The variance floor keeps constant regions at exactly zero."""
    img = gray.astype(np.float64)
    w = _gauss_window()
    mu = ndimage.correlate1d(img, w, axis=0, mode="nearest")
    mu = ndimage.correlate1d(mu, w, axis=1, mode="nearest")
    mu2 = ndimage.correlate1d(img * img, w, axis=0, mode="nearest")
    mu2 = ndimage.correlate1d(mu2, w, axis=1, mode="nearest")
    sigma = np.sqrt(np.abs(mu2 - mu * mu))
    return (img - mu) / (sigma + _MSCN_C)


def _ggd_features(x: np.ndarray) -> tuple[float, float]:
    x = x.ravel()
    sigma_sq = float(np.mean(x * x))
    mean_abs = float(np.mean(np.abs(x)))
    if sigma_sq < 1e-12 or mean_abs < 1e-12:
        return 10.0, sigma_sq
    rho = mean_abs * mean_abs / sigma_sq
    alpha = _GAMMA_GRID[int(np.argmin((_GGD_RATIO - rho) ** 2))]
    return float(alpha), sigma_sq


def _aggd_features(x: np.ndarray) -> tuple[float, float, float, float]:
    x = x.ravel()
    left = x[x < 0]
    right = x[x >= 0]
    l_std = float(np.sqrt(np.mean(left * left))) if left.size else 0.0
    r_std = float(np.sqrt(np.mean(right * right))) if right.size else 0.0
    if l_std < 1e-12 or r_std < 1e-12:
        return 10.0, 0.0, l_std**2, r_std**2
    gamma_hat = l_std / r_std
    mean_abs = float(np.mean(np.abs(x)))
    sq_mean = float(np.mean(x * x))
    r_hat = mean_abs * mean_abs / sq_mean
    rho = r_hat * (gamma_hat**3 + 1.0) * (gamma_hat + 1.0) / (gamma_hat**2 + 1.0) ** 2
    alpha = float(_GAMMA_GRID[int(np.argmin((_GGD_RATIO - rho) ** 2))])
    g1, g2 = gamma_fn(1.0 / alpha), gamma_fn(2.0 / alpha)
    mean = (r_std - l_std) * g2 / g1
    return alpha, float(mean), l_std**2, r_std**2


def _patch_features(m: np.ndarray) -> np.ndarray:
    feats = list(_ggd_features(m))
    for shift in ((0, 1), (1, 0), (1, 1), (1, -1)):
        product = m * np.roll(m, shift, axis=(0, 1))
        feats.extend(_aggd_features(product))
    return np.asarray(feats)


def _half_scale(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    g = gray[: h - h % 2, : w - w % 2]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def niqe_features(img: np.ndarray) -> np.ndarray:
    """Per-patch natural-scene-statistics features at two scales (36-d rows)."""
    gray = to_luma(img)
    h, w = gray.shape
    if h < NIQE_PATCH or w < NIQE_PATCH:
        raise ValueError(f"image must be at least {NIQE_PATCH}x{NIQE_PATCH} for NIQE, got {h}x{w}")
    scales = [gray, _half_scale(gray)]
    patch_sizes = [NIQE_PATCH, NIQE_PATCH // 2]
    per_scale = []
    for scale_img, p in zip(scales, patch_sizes):
        m = mscn(scale_img)
        rows = []
        for y0 in range(0, m.shape[0] - p + 1, p):
            for x0 in range(0, m.shape[1] - p + 1, p):
                rows.append(_patch_features(m[y0 : y0 + p, x0 : x0 + p]))
        per_scale.append(np.stack(rows))
    n = min(ps.shape[0] for ps in per_scale)
    return np.hstack([ps[:n] for ps in per_scale])


def fit_niqe_model(images) -> NiqeModel:
    """Fit the pristine multivariate-Gaussian feature model on an image set."""
    rows = [niqe_features(img) for img in images]
    if not rows:
        raise ValueError("cannot fit a model on an empty image set")
    feats = np.vstack(rows)
    mean = feats.mean(axis=0)
    if feats.shape[0] >= 2:
        cov = np.cov(feats, rowvar=False)
    else:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    return NiqeModel(mean=mean, cov=(cov + cov.T) / 2.0)


def niqe(img: np.ndarray, model: NiqeModel) -> float:
    """Distance between the image's patch-feature Gaussian and the pristine
    model: sqrt(d' ((S + S_m) / 2)^+ d) with d the mean difference."""
    feats = niqe_features(img)
    nu = feats.mean(axis=0)
    if feats.shape[0] >= 2:
        cov = np.cov(feats, rowvar=False)
    else:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    diff = nu - model.mean
    pooled = (model.cov + cov) / 2.0
    pinv = np.linalg.pinv(pooled)
    return float(np.sqrt(max(0.0, diff @ pinv @ diff)))


def lpips_content(y: np.ndarray, z: np.ndarray, embedder: ConvEmbedder) -> float:
    """Deep-feature content distance between the output's luma and the
    enhanced input: channel-normalized per-stage features, squared
    differences averaged per stage, then across stages."""
    validate_image(z)
    y_gray = to_luma(y)
    if y_gray.shape != z.shape[:2] if z.ndim == 3 else y_gray.shape != z.shape:
        raise ValueError(f"spatial size mismatch: {y_gray.shape} vs {z.shape}")
    a = to_tensor(replicate_gray(y_gray))[None]
    b = to_tensor(replicate_gray(to_luma(z)))[None]
    with torch.no_grad():
        taps_a = embedder.taps(a)
        taps_b = embedder.taps(b)
    dist = 0.0
    for fa, fb in zip(taps_a, taps_b):
        na = fa / torch.sqrt((fa * fa).sum(dim=1, keepdim=True) + 1e-10)
        nb = fb / torch.sqrt((fb * fb).sum(dim=1, keepdim=True) + 1e-10)
        dist += float(((na - nb) ** 2).mean())
    return dist / len(taps_a)


def evaluate(outputs, reference_brights, enhanced_inputs, embedder: ConvEmbedder,
             niqe_model: NiqeModel, csv_path: str | Path | None = None,
             method: str = "ours") -> MetricsReport:
    """Full protocol: FID/KID of outputs against the stained reference set,
    mean NIQE of outputs, and mean content distance against the aligned
    enhanced inputs."""
    outputs = list(outputs)
    reference_brights = list(reference_brights)
    enhanced_inputs = list(enhanced_inputs)
    if not outputs:
        raise ValueError("empty output set")
    if len(outputs) != len(enhanced_inputs):
        raise ValueError(f"outputs ({len(outputs)}) and enhanced inputs "
                         f"({len(enhanced_inputs)}) must be aligned")
    feats_out = extract_features(outputs, embedder)
    feats_ref = extract_features(reference_brights, embedder)
    report = MetricsReport(
        fid=fid(feats_out, feats_ref),
        kid=kid(feats_out, feats_ref),
        niqe=float(np.mean([niqe(img, niqe_model) for img in outputs])),
        lpips=float(np.mean([
            lpips_content(y, z, embedder) for y, z in zip(outputs, enhanced_inputs)
        ])),
    )
    if csv_path is not None:
        report.write_csv_row(csv_path, method)
    return report

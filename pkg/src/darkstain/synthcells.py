"""Procedural unpaired cell-image domains.

Emulates the two acquisition regimes at desk scale: dark-field images with
bright scattering cell bodies embedded in glowing tissue slabs over near-black
pockets, and H&E-style bright-field images with pink/purple cells over a
near-white background. The domains come from independent seed streams, so
there is no hidden pairing.

The dark-field backdrop is built by rank-transforming a structured field
(tissue slabs + texture + illumination ramp) to an exactly uniform intensity
marginal on [lo, hi]. This keeps the aggregate luma histogram free of heavy
bins, which the CDF-inversion enhancement needs in order to track the
reference distribution closely; clipped noise or additive component stacking
would concentrate mass and degrade the match.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ConfigError
from .imaging import replicate_gray, save_image, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    n_images: int = 64
    cells_per_image: tuple[int, int] = (26, 40)
    cell_radius: tuple[float, float] = (7.0, 12.0)
    background_noise_sigma: float = 0.012
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 4 != 0:
            raise ConfigError(f"image_size must be a multiple of 4 and >= 32, got {self.image_size}")
        if self.n_images < 1:
            raise ConfigError("n_images must be positive")
        lo, hi = self.cells_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"degenerate cells_per_image range {self.cells_per_image}")
        rlo, rhi = self.cell_radius
        if not (2.0 <= rlo <= rhi):
            raise ConfigError(f"degenerate cell_radius range {self.cell_radius}")
        if rhi > self.image_size / 3:
            raise ConfigError("cell_radius too large for image_size")
        if self.background_noise_sigma < 0:
            raise ConfigError("background_noise_sigma must be >= 0")


def _rng_for(cfg: SynthConfig, domain: int, index: int) -> np.random.Generator:
    # Stable per-image stream: parallel and sequential generation agree.
    return np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(domain, index)))


def _unitize(field: np.ndarray) -> np.ndarray:
    return (field - field.mean()) / (field.std() + 1e-9)


def _rank_uniform(field: np.ndarray) -> np.ndarray:
    """Empirical probability-integral transform: exactly flat marginal on (0, 1)."""
    ranks = rankdata(field, method="average").reshape(field.shape)
    return (ranks - 0.5) / field.size


def _tissue_slabs(rng: np.random.Generator, size: int, shrink: float = 1.0) -> np.ndarray:
    """Union of soft super-gaussian blobs in [0, 1]: ~1 on the slab, ~0 in pockets."""
    n_blobs = int(rng.integers(3, 7))
    yy, xx = np.mgrid[0:size, 0:size]
    slab = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.12 * size, 0.88 * size, size=2)
        ry = rng.uniform(0.27 * size, 0.45 * size) * shrink
        rx = ry * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0.0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = (dx * ct + dy * st) / rx
        v = (-dx * st + dy * ct) / ry
        slab = np.maximum(slab, np.exp(-((u * u + v * v) ** 3)))
    return slab


def _paint_cells(rng: np.random.Generator, cfg: SynthConfig, slab: np.ndarray | None,
                 peaks: np.ndarray, dome: float = 0.25) -> np.ndarray:
    """Rasterize elliptical cell bodies with a soft radial dome profile.
    When ``slab`` is given, placement prefers points on the tissue."""
    s = cfg.image_size
    rlo, rhi = cfg.cell_radius
    field = np.zeros((s, s))
    for peak in peaks:
        a = rng.uniform(rlo, rhi)
        b = a * rng.uniform(0.55, 0.95)
        theta = rng.uniform(0.0, np.pi)
        margin = a + 2.0
        cy = cx = s / 2.0
        for _ in range(40):
            cy = rng.uniform(margin, s - margin)
            cx = rng.uniform(margin, s - margin)
            if slab is None or slab[int(cy), int(cx)] > 0.55:
                break
        r = int(np.ceil(max(a, b))) + 1
        y0, y1 = max(0, int(cy) - r), min(s, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(s, int(cx) + r + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = (dx * ct + dy * st) / a
        v = (-dx * st + dy * ct) / b
        d2 = u * u + v * v
        inside = d2 <= 1.0
        profile = peak * (1.0 - dome * d2)
        sub = field[y0:y1, x0:x1]
        sub[inside] = np.maximum(sub[inside], profile[inside])
    return field


def gen_dark_field(cfg: SynthConfig) -> list[np.ndarray]:
    """Dark-field set: bright cell bodies on glowing tissue slabs, near-black
    pockets between slabs; grayscale stored as 3 equal channels."""
    cfg.validate()
    out = []
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    for i in range(cfg.n_images):
        rng = _rng_for(cfg, 0, i)
        slab = _tissue_slabs(rng, s)
        pocket_frac = (slab < 0.15).mean()
        if pocket_frac < 0.10:
            slab = _tissue_slabs(rng, s, shrink=0.80)
        elif pocket_frac > 0.26:
            slab = _tissue_slabs(rng, s, shrink=1.25)

        n_cells = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))
        peaks = rng.uniform(0.28, 0.42, size=n_cells)
        body = _paint_cells(rng, cfg, slab, peaks)
        sharp = ndimage.gaussian_filter(body, sigma=rng.uniform(1.2, 2.0))
        glow = ndimage.gaussian_filter(body, sigma=rng.uniform(5.0, 8.0))
        cells = 0.85 * sharp + rng.uniform(0.22, 0.36) * glow

        texture = _unitize(ndimage.gaussian_filter(rng.standard_normal((s, s)), rng.uniform(7, 14)))
        phi = rng.uniform(0.0, 2.0 * np.pi)
        ramp = _unitize((np.cos(phi) * xx + np.sin(phi) * yy) / s)
        structure = rng.uniform(2.2, 3.6) * _unitize(slab) + texture + rng.uniform(0.3, 0.8) * ramp
        lo = rng.uniform(0.002, 0.020)
        hi = rng.uniform(0.20, 0.32)
        backdrop = lo + (hi - lo) * _rank_uniform(structure)

        sigma = cfg.background_noise_sigma * rng.uniform(0.9, 1.5)
        # exposure guard: keep the scene mean in dark-field range without
        # collapsing the per-image diversity (random target)
        target = rng.uniform(0.126, 0.140)
        mean = (backdrop + cells).mean()
        if mean > 0.140:
            factor = target / max(mean, 1e-6)
            backdrop = backdrop * factor
            cells = cells * factor
        img = backdrop + cells + rng.normal(0.0, sigma, size=(s, s))
        # reflect sensor noise at zero instead of clipping; clipping would
        # pile an atom of mass onto the bottom intensity bin
        img = np.clip(np.abs(img), 0.0, 1.0).astype(np.float32)
        out.append(replicate_gray(img))
    return out


def gen_bright_field(cfg: SynthConfig) -> list[np.ndarray]:
    """Stained bright-field set: pink cytoplasm and purple nuclei over a
    near-white background; cells are darker than the background in luma."""
    cfg.validate()
    out = []
    s = cfg.image_size
    for i in range(cfg.n_images):
        rng = _rng_for(cfg, 1, i)
        n_cells = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))

        cyto_alpha = rng.uniform(0.55, 0.9, size=n_cells)
        body = _paint_cells(rng, cfg, None, cyto_alpha, dome=0.15)
        alpha = ndimage.gaussian_filter(body, sigma=rng.uniform(1.2, 2.2))
        mask = body > 0.0

        nuc_cfg = SynthConfig(
            image_size=cfg.image_size,
            n_images=1,
            cells_per_image=cfg.cells_per_image,
            cell_radius=(max(2.0, cfg.cell_radius[0] * 0.28), max(2.5, cfg.cell_radius[1] * 0.38)),
            background_noise_sigma=cfg.background_noise_sigma,
            seed=cfg.seed,
        )
        nuc_body = _paint_cells(rng, nuc_cfg, None, rng.uniform(0.6, 0.95, size=n_cells), dome=0.1)
        nuc_body[~mask] = 0.0
        nuc = ndimage.gaussian_filter(nuc_body, sigma=rng.uniform(0.8, 1.4))

        w = rng.uniform(0.905, 0.965)
        bg = np.empty((s, s, 3), dtype=np.float64)
        bg[..., 0] = w
        bg[..., 1] = w - rng.uniform(0.03, 0.055)
        bg[..., 2] = w - rng.uniform(0.004, 0.018)

        cyto = np.array([
            rng.uniform(0.80, 0.90),
            rng.uniform(0.45, 0.58),
            rng.uniform(0.64, 0.78),
        ])
        purple = np.array([
            rng.uniform(0.40, 0.52),
            rng.uniform(0.20, 0.32),
            rng.uniform(0.50, 0.64),
        ])

        a3 = np.clip(alpha, 0.0, 1.0)[..., None]
        n3 = np.clip(nuc, 0.0, 1.0)[..., None]
        img = bg * (1.0 - a3) + cyto[None, None, :] * a3
        img = img * (1.0 - n3) + purple[None, None, :] * n3
        img += rng.normal(0.0, 0.008, size=img.shape)
        out.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return out


def write_dataset(cfg: SynthConfig, out_dir: str | Path) -> tuple[list[Path], list[Path]]:
    """Write both domains as PNG sets plus one manifest per subset."""
    out_dir = Path(out_dir)
    dark_dir = out_dir / "dark"
    bright_dir = out_dir / "bright"
    dark_dir.mkdir(parents=True, exist_ok=True)
    bright_dir.mkdir(parents=True, exist_ok=True)

    dark_paths, bright_paths = [], []
    for i, img in enumerate(gen_dark_field(cfg)):
        p = dark_dir / f"dark_{i:04d}.png"
        save_image(img, p)
        dark_paths.append(p)
    for i, img in enumerate(gen_bright_field(cfg)):
        p = bright_dir / f"bright_{i:04d}.png"
        save_image(img, p)
        bright_paths.append(p)

    write_manifest(dark_paths, out_dir / "dark_manifest.txt", relative_to=out_dir)
    write_manifest(bright_paths, out_dir / "bright_manifest.txt", relative_to=out_dir)
    return dark_paths, bright_paths

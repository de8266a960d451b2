"""Closed-form light enhancement by inverse histogram matching.

Dark-field cell images are bright-on-dark while stained bright-field images
are dark-on-bright, so the two illuminance distributions are related through
an approximately reversed quantile map. Enhancement sends a dark-field pixel
at dark-domain quantile q to the bright-domain intensity whose quantile is
1 - q. Everything is realized on a fixed 256-bin grid as a lookup table, so
the mapping is cheap, deterministic, and monotone non-increasing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .imaging import to_luma, validate_image

BINS = 256


def luma_bins(gray: np.ndarray) -> np.ndarray:
    """Bin indices for luma values: bin k covers [k/256, (k+1)/256), with the
    last bin closed at 1.0."""
    return np.minimum(np.floor(gray.astype(np.float64) * BINS).astype(np.int64), BINS - 1)


@dataclass
class Histogram256:
    """Pixel counts over 256 uniform luma bins of [0, 1]."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (BINS,):
            raise ValueError(f"histogram must have {BINS} bins, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("histogram counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "Histogram256") -> "Histogram256":
        # Exact integer addition, so partial histograms from parallel workers
        # combine losslessly.
        return Histogram256(self.counts + other.counts)


@dataclass
class Cdf:
    """Cumulative distribution over the 256 luma bins; ends exactly at 1.0."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (BINS,):
            raise ValueError(f"cdf must have {BINS} values, got shape {self.values.shape}")
        if (np.diff(self.values) < 0).any():
            raise ValueError("cdf must be non-decreasing")
        if self.values[0] < 0 or self.values[-1] != 1.0:
            raise ValueError("cdf must lie in [0, 1] and end at exactly 1.0")


@dataclass
class LutMapping:
    """Intensity lookup table: index = input luma bin, value = output intensity.

    Monotone non-increasing by construction, reflecting the reversed
    illuminance relationship between the two domains.
    """

    table: np.ndarray

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.shape != (BINS,):
            raise ValueError(f"lut must have {BINS} entries, got shape {self.table.shape}")
        if self.table.min() < 0.0 or self.table.max() > 1.0:
            raise ValueError("lut entries must lie in [0, 1]")
        if (np.diff(self.table) > 0).any():
            raise ValueError("lut must be monotone non-increasing")


def accumulate_histogram(images: Iterable[np.ndarray]) -> Histogram256:
    """Aggregate luma histogram over a sequence of images (converted to luma
    internally). Raises on an empty sequence."""
    counts = np.zeros(BINS, dtype=np.int64)
    n = 0
    for img in images:
        validate_image(img)
        bins = luma_bins(to_luma(img))
        counts += np.bincount(bins.ravel(), minlength=BINS)
        n += 1
    if n == 0:
        raise ValueError("cannot accumulate a histogram over an empty sequence")
    return Histogram256(counts)


def histogram_to_cdf(h: Histogram256) -> Cdf:
    total = h.total
    if total <= 0:
        raise ValueError("cannot build a cdf from a zero-total histogram")
    # Integer prefix sums divided by the exact total: the terminal value is
    # total/total == 1.0 with no float drift.
    return Cdf(np.cumsum(h.counts) / float(total))


def build_staining_lut(c_d: Cdf, c_b: Cdf) -> LutMapping:
    """Build the dark-to-bright intensity map from the two domain CDFs.

    Entry k solves c_b(z) = 1 - c_d(k) with the right-continuous generalized
    inverse: the smallest output bin j whose bright CDF reaches the target
    mass, ties broken to the smallest index. Because c_d is non-decreasing
    the targets are non-increasing, so the table is monotone non-increasing
    for every valid CDF pair. Flat (empty) stretches of c_b are skipped by
    the inverse itself; no interpolation is applied.
    """
    targets = 1.0 - c_d.values
    j = np.searchsorted(c_b.values, targets, side="left")
    # c_b ends at exactly 1.0 >= every target, so j < BINS always.
    return LutMapping(j.astype(np.float64) / (BINS - 1))


def enhance(x: np.ndarray, lut: LutMapping) -> np.ndarray:
    """Apply the enhancement map: bin the luma of ``x``, look up the output
    intensity. Returns the enhanced grayscale image as float32."""
    gray = to_luma(x)
    return lut.table[luma_bins(gray)].astype(np.float32)


def ks_statistic(a: Cdf, b: Cdf) -> float:
    """Kolmogorov-Smirnov distance between two binned CDFs."""
    return float(np.abs(a.values - b.values).max())


def hash_image_files(paths: Iterable[str | Path]) -> str:
    """SHA-256 over the raw bytes of the files, in the order given."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def save_lut(lut: LutMapping, path: str | Path, source_hashes: Mapping[str, str] | None = None) -> None:
    """Persist a LUT as text: one header line with source dataset hashes, then
    256 lines of ``index<TAB>value``. Values are written with repr so the
    reload is bit-exact."""
    meta = " ".join(f"{k}={v}" for k, v in sorted((source_hashes or {}).items()))
    lines = [f"# staining-lut v1 {meta}".rstrip()]
    lines += [f"{k}\t{float(lut.table[k])!r}" for k in range(BINS)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_lut(path: str | Path) -> tuple[LutMapping, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such lut file: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# staining-lut"):
        raise ValueError(f"not a staining lut file: {path}")
    header = {}
    for token in lines[0].split()[3:]:
        key, _, value = token.partition("=")
        header[key] = value
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != BINS:
        raise ValueError(f"expected {BINS} lut entries, got {len(body)}")
    table = np.empty(BINS, dtype=np.float64)
    for ln in body:
        idx_s, _, val_s = ln.partition("\t")
        table[int(idx_s)] = float(val_s)
    return LutMapping(table), header

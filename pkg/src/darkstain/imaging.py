"""Float image primitives, PNG I/O, and unpaired dataset bookkeeping.

Images are numpy float32 arrays with values in [0, 1]: shape (H, W) for
grayscale, (H, W, 3) for RGB in R,G,B order. 8-bit PNG is the canonical
storage format; internal math runs at 32-bit float or better.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

# Rec.601 luma weights.
LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless ``img`` is a valid float image in [0, 1]."""
    if not isinstance(img, np.ndarray):
        raise ValueError(f"expected numpy array, got {type(img).__name__}")
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise ValueError(f"3-d image must have 3 channels, got {img.shape[2]}")
    elif img.ndim != 2:
        raise ValueError(f"image must be (H, W) or (H, W, 3), got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("zero-sized image")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"image dtype must be floating, got {img.dtype}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


def num_channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit PNG (grayscale or RGB) as a float32 image in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float32) / 255.0
            elif mode in ("I", "I;16"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float32) / 255.0
            else:
                raise ValueError(f"unsupported image mode {mode!r} in {path}")
    except UnidentifiedImageError as exc:
        raise ValueError(f"unsupported or corrupt image file: {path}") from exc
    if arr.size == 0:
        raise ValueError(f"zero-sized image: {path}")
    arr = np.clip(arr, 0.0, 1.0)
    validate_image(arr)
    return arr


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write ``img`` as an 8-bit PNG; value v maps to the byte floor(v*255 + 0.5)."""
    validate_image(img)
    path = Path(path)
    # Round half up, not banker's rounding: 0.5 -> 128.
    data = np.floor(img.astype(np.float64) * 255.0 + 0.5)
    data = np.clip(data, 0, 255).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def to_luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an image; grayscale input is copied unchanged.

    The weighted sum is accumulated in float64 so that r == g == b inputs
    reproduce the channel value exactly after the cast back to float32.
    """
    validate_image(img)
    if img.ndim == 2:
        return img.copy()
    y64 = (
        img[..., 0].astype(np.float64) * LUMA_R
        + img[..., 1].astype(np.float64) * LUMA_G
        + img[..., 2].astype(np.float64) * LUMA_B
    )
    return np.clip(y64, 0.0, 1.0).astype(np.float32)


def gray_pair_from_stained(bright: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Build a synthetic colorization training pair (luma input, color target)
    from one stained bright-field image. Rejects grayscale input: there is no
    color to learn from.
    """
    validate_image(bright)
    if num_channels(bright) != 3:
        raise ValueError("stained bright-field image must have 3 channels")
    return to_luma(bright), bright


def replicate_gray(img: np.ndarray) -> np.ndarray:
    """Stack a grayscale image into 3 equal channels."""
    validate_image(img)
    if img.ndim == 3:
        return img.copy()
    return np.repeat(img[:, :, None], 3, axis=2)


def scan_directory(directory: str | Path) -> list[Path]:
    """PNG files directly inside ``directory``, in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def read_manifest(path: str | Path) -> list[Path]:
    """One image path per line; blank lines and '#' comments are skipped.
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else base / p)
    return out


def write_manifest(paths: list[Path], out_path: str | Path, relative_to: str | Path | None = None) -> None:
    lines = []
    for p in paths:
        p = Path(p)
        if relative_to is not None:
            p = p.relative_to(relative_to)
        lines.append(str(p))
    Path(out_path).write_text("\n".join(lines) + "\n")


@dataclass
class UnpairedDataset:
    """Two image sets with no pixel-level pairing between them."""

    dark_paths: list[Path] = field(default_factory=list)
    bright_paths: list[Path] = field(default_factory=list)

    def validate_for_training(self) -> None:
        if not self.dark_paths or not self.bright_paths:
            raise ValueError("both subsets must be non-empty for training")
        overlap = {Path(p).resolve() for p in self.dark_paths} & {
            Path(p).resolve() for p in self.bright_paths
        }
        if overlap:
            raise ValueError(f"{len(overlap)} path(s) appear in both subsets")

    @classmethod
    def from_manifests(cls, dark_manifest: str | Path, bright_manifest: str | Path) -> "UnpairedDataset":
        return cls(read_manifest(dark_manifest), read_manifest(bright_manifest))

    @classmethod
    def from_dirs(cls, dark_dir: str | Path, bright_dir: str | Path) -> "UnpairedDataset":
        return cls(scan_directory(dark_dir), scan_directory(bright_dir))

"""Samples, manifests, PNG loading and the synthetic disk/ellipse dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage


class DataError(Exception):
    """Base class for dataset problems (exit code 2 at the CLI)."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class CorruptImageError(DataError):
    pass


class EmptyImageError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}


@dataclass
class ManifestEntry:
    id: str
    image_path: Path
    mask_path: Path


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def load_manifest(path, split: str | None = None) -> Manifest:
    """Read a two-column ``image,mask`` CSV; paths are relative to the manifest's directory.

    The sample id is the image file stem. Duplicate ids are rejected with the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["image", "mask"]:
            raise ManifestError(f"{path}:1: expected header 'image,mask', got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            img, msk = (c.strip() for c in row)
            sid = Path(img).stem
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {sid!r} (first seen on line {seen[sid]})")
            seen[sid] = lineno
            entries.append(ManifestEntry(sid, root / img, root / msk))
    if split is None:
        split = "test" if "test" in path.stem.lower() else "train"
    return Manifest(entries, split, path)


def write_manifest(path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "mask"])
        w.writerows(pairs)


def _open_image(path: Path, mode: str) -> Image.Image:
    if not Path(path).is_file():
        raise MissingFileError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            out = im.convert(mode)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot decode {path}: {exc}") from None
    if out.width == 0 or out.height == 0:
        raise EmptyImageError(f"{path} has a zero dimension")
    return out


def load_image(path, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    im = _open_image(Path(path), "RGB")
    if target_hw is not None and (im.height, im.width) != tuple(target_hw):
        im = im.resize((target_hw[1], target_hw[0]), Image.BILINEAR)
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_mask(path, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    im = _open_image(Path(path), "L")
    if target_hw is not None and (im.height, im.width) != tuple(target_hw):
        im = im.resize((target_hw[1], target_hw[0]), Image.NEAREST)
    return (np.asarray(im) >= 128).astype(np.float32)


def load_sample(entry: ManifestEntry, target_hw: tuple[int, int] | None = None) -> Sample:
    image = load_image(entry.image_path, target_hw)
    mask = load_mask(entry.mask_path, target_hw)
    if image.shape[1:] != mask.shape:
        mask = load_mask(entry.mask_path, image.shape[1:])
    return Sample(entry.id, image, mask)


def load_dataset(manifest: Manifest, target_hw) -> list[Sample]:
    return [load_sample(e, target_hw) for e in manifest]


def save_mask(mask: np.ndarray, path) -> None:
    """Write a {0,1} (or probability) map as an 8-bit single-channel PNG."""
    m = np.asarray(mask, dtype=np.float64)
    Image.fromarray(np.clip(np.round(m * 255), 0, 255).astype(np.uint8), mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(np.clip(np.round(arr * 255), 0, 255).astype(np.uint8), mode="RGB").save(path)


# -- synthetic data -------------------------------------------------------

# (cy, cx, ry, rx, angle) in pixels / radians
Ellipse = tuple[float, float, float, float, float]


def _inside(yy: np.ndarray, xx: np.ndarray, shapes: list[Ellipse]) -> np.ndarray:
    hit = np.zeros(yy.shape, dtype=bool)
    for cy, cx, ry, rx, ang in shapes:
        dy, dx = yy - cy, xx - cx
        c, s = np.cos(ang), np.sin(ang)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        hit |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return hit


def random_shapes(rng: np.random.Generator, size: int) -> list[Ellipse]:
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        ry = rng.uniform(0.08, 0.2) * size
        rx = rng.uniform(0.08, 0.2) * size
        r = max(ry, rx)
        cy = rng.uniform(r, size - 1 - r)
        cx = rng.uniform(r, size - 1 - r)
        shapes.append((cy, cx, ry, rx, float(rng.uniform(0, np.pi))))
    return shapes


def render_sample(rng: np.random.Generator, size: int, shapes: list[Ellipse] | None = None, supersample: int = 4):
    """Render one ``(image uint8 HxWx3, mask uint8 HxW)`` pair.

    The mask marks pixels whose center lies inside a shape; the image blends a
    bright fill by the supersampled coverage over a smoothed-noise texture.
    """
    if shapes is None:
        shapes = random_shapes(rng, size)
    idx = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(idx, idx, indexing="ij")
    mask = _inside(yy, xx, shapes)

    ss = supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    cov = np.zeros((size, size))
    for oy in sub:
        for ox in sub:
            cov += _inside(yy + oy, xx + ox, shapes)
    cov /= ss * ss

    noise = rng.standard_normal((3, size, size))
    texture = np.stack([ndimage.gaussian_filter(ch, sigma=max(size / 32, 1.0)) for ch in noise])
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    tint = rng.uniform(0.6, 1.0, size=(3, 1, 1))
    background = 0.1 + 0.3 * texture * tint
    fill = rng.uniform(0.7, 0.95, size=(3, 1, 1)) + 0.05 * rng.standard_normal((3, size, size))
    img = background * (1 - cov) + fill * cov
    img = np.clip(img, 0, 1).transpose(1, 2, 0)
    return np.round(img * 255).astype(np.uint8), mask.astype(np.uint8)


def synth_dataset(n: int, size: int, seed: int, out_dir, name: str = "manifest.csv") -> Manifest:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        img, mask = render_sample(rng, size)
        sid = f"synth_{i:04d}"
        try:
            Image.fromarray(img, mode="RGB").save(out / "images" / f"{sid}.png")
            Image.fromarray(mask * 255, mode="L").save(out / "masks" / f"{sid}.png")
        except OSError as exc:
            raise DataError(f"cannot write sample {sid} into {out}: {exc}") from None
        pairs.append((f"images/{sid}.png", f"masks/{sid}.png"))
    write_manifest(out / name, pairs)
    return load_manifest(out / name)

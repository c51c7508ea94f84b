"""Image/mask loading, manifests, synthetic data and saliency-map export."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor import Tensor

MASK_THRESHOLD = 128
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.5
TRAIN_FRACTION = 0.8


class DataError(Exception):
    """Input data is missing, undecodable or inconsistent."""


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    return img


def _as_size(target) -> Optional[Tuple[int, int]]:
    if target is None:
        return None
    if isinstance(target, int):
        return target, target
    h, w = target
    return int(h), int(w)


def load_image(path, target=None) -> np.ndarray:
    """RGB image as float64 (3, h, w) in [0, 1], bilinearly resized to ``target`` (h, w)."""
    img = _open(path).convert("RGB")
    size = _as_size(target)
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_mask(path, target=None) -> np.ndarray:
    """Binary (h, w) mask; multi-channel files use their first channel."""
    img = _open(path)
    if img.mode not in ("L", "1"):
        if img.mode in ("P", "PA"):
            img = img.convert("RGB")
        img = img.split()[0]
    else:
        img = img.convert("L")
    size = _as_size(target)
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(img) >= MASK_THRESHOLD


def load_saliency(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_pair(image_path, mask_path, target=None) -> Tuple[Tensor, np.ndarray]:
    if Path(image_path).stem != Path(mask_path).stem:
        raise DataError(f"pair names differ: {Path(image_path).name} vs {Path(mask_path).name}")
    image = load_image(image_path, target)
    return Tensor(image[None]), load_mask(mask_path, target)


def quantize(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("saliency map contains non-finite values")
    # round half up
    return np.floor(np.clip(s, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_saliency(s: np.ndarray, path) -> None:
    """Write an 8-bit single-channel PNG with value round(255 * s)."""
    s = np.asarray(s)
    if s.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {s.shape}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(s), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


@dataclass
class DatasetManifest:
    root: Path
    pairs: List[Tuple[str, str]] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    def paths(self) -> Iterator[Tuple[Path, Path]]:
        for img, mask in self.pairs:
            yield self.root / img, self.root / mask

    def check(self) -> None:
        missing = [str(p) for pair in self.paths() for p in pair if not p.is_file()]
        if missing:
            raise DataError(f"missing files: {', '.join(missing)}")
        for img, mask in self.pairs:
            if Path(img).stem != Path(mask).stem:
                raise DataError(f"pair names differ: {img} vs {mask}")


def read_manifest(path, split: Optional[str] = None) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    pairs = []
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pairs.append((parts[0], parts[1]))
    manifest = DatasetManifest(path.parent, pairs, split or path.stem)
    manifest.check()
    return manifest


def write_manifest(path, pairs: Sequence[Tuple[str, str]], comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{img}\t{mask}" for img, mask in pairs]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest_arrays(manifest: DatasetManifest, target=None, workers: int = 1):
    """Images (n, 3, h, w) float64 and masks (n, h, w) bool, in manifest order."""
    def one(pair):
        img, mask = pair
        return load_image(img, target), load_mask(mask, target)

    pairs = list(manifest.paths())
    if not pairs:
        raise DataError("manifest lists no pairs")
    if workers > 1:
        # map preserves submission order
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, pairs))
    else:
        records = [one(p) for p in pairs]
    shapes = {r[0].shape for r in records}
    if len(shapes) != 1:
        raise DataError("images differ in size; pass a target size")
    return np.stack([r[0] for r in records]), np.stack([r[1] for r in records])


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        ry, rx = rng.uniform(0.08, 0.3, 2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def synth_sample(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (h, w, 3) uint8 image and its (h, w) bool mask."""
    while True:
        mask = _ellipse_mask(rng, size)
        if MIN_FOREGROUND <= mask.mean() <= MAX_FOREGROUND:
            break
    background = rng.uniform(0.1, 0.35, 3)
    color = rng.uniform(0.7, 1.0, 3)
    noise = rng.normal(0.0, 0.04, (size, size, 3))
    image = np.where(mask[..., None], color, background) + noise
    return quantize(image), mask


def synth_generate(n: int, size: int, seed: int, out_dir) -> Tuple[DatasetManifest, DatasetManifest]:
    """Write ``n`` synthetic pairs plus train.txt/test.txt manifests (80/20 split)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if size < 8 or size % 8:
        raise ValueError("size must be a positive multiple of 8")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    pairs = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        image, mask = synth_sample(rng, size)
        stem = f"{i:0{width}d}"
        img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
        try:
            Image.fromarray(image, mode="RGB").save(out / img_rel, format="PNG")
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / mask_rel, format="PNG")
        except OSError as exc:
            raise DataError(f"cannot write into {out}: {exc}") from None
        pairs.append((img_rel, mask_rel))
    n_train = int(round(TRAIN_FRACTION * n)) if n > 1 else 1
    note = f"synthetic n={n} size={size} seed={seed}"
    write_manifest(out / "train.txt", pairs[:n_train], note)
    write_manifest(out / "test.txt", pairs[n_train:], note)
    return (DatasetManifest(out, pairs[:n_train], "train"),
            DatasetManifest(out, pairs[n_train:], "test"))


def list_images(directory) -> dict:
    """Map stem -> path for every supported image directly in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = {}
    for entry in sorted(os.listdir(directory)):
        p = directory / entry
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise DataError(f"duplicate stem {p.stem!r} in {directory}")
            found[p.stem] = p
    return found

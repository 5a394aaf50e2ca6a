"""Forged-image datasets: on-disk layout, loading, splitting, resizing and
synthetic splice generation.

Images are kept as float arrays in [0, 1] with shape (H, W, 3); masks are
uint8 arrays in {0, 1} with shape (H, W), 1 marking tampered pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
MASK_THRESHOLD = 127


class DatasetError(ValueError):
    pass


@dataclass
class ForgerySample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {image.shape}")
        if mask.shape != image.shape[:2]:
            raise DatasetError(
                f"{self.id}: mask shape {mask.shape} does not match image {image.shape[:2]}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise DatasetError(f"{self.id}: mask values must be 0 or 1")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise DatasetError(f"{self.id}: image values must lie in [0, 1]")
        self.image = image
        self.mask = mask.astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    mask: Path
    id: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> set[str]:
        return {e.id for e in self.entries}

    def subset(self, ids, split=None) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.root, [e for e in self.entries if e.id in keep], split)

    def write_jsonl(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"id": e.id, "image": str(e.image), "mask": str(e.mask)}) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be strictly between 0 and 1")


def _check_decodes(path: Path, id_: str) -> None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:
        raise DatasetError(f"{id_}: cannot decode {path}: {exc}") from exc


def _stems(directory: Path) -> dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def load_manifest(path) -> DatasetManifest:
    """Read a dataset from a JSON-lines manifest or an images/ + masks/ tree.

    Entries are sorted by id. Every referenced file is checked to decode.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    if path.is_file():
        root = path.parent
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    img, msk = Path(rec["image"]), Path(rec["mask"])
                    id_ = str(rec["id"])
                except KeyError as exc:
                    raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
                img = img if img.is_absolute() else root / img
                msk = msk if msk.is_absolute() else root / msk
                for p in (img, msk):
                    if not p.exists():
                        raise DatasetError(f"{id_}: missing file {p}")
                entries.append(ManifestEntry(img, msk, id_))
    elif path.is_dir():
        root = path
        img_dir, mask_dir = path / "images", path / "masks"
        images = _stems(img_dir) if img_dir.is_dir() else {}
        masks = _stems(mask_dir) if mask_dir.is_dir() else {}
        for stem, img in images.items():
            if stem not in masks:
                raise DatasetError(f"{stem}: image has no matching mask in {mask_dir}")
            entries.append(ManifestEntry(img, masks[stem], stem))
    else:
        raise DatasetError(f"{path} is neither a manifest file nor a directory")

    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate ids in manifest: {dup[:5]}")
    for e in entries:
        _check_decodes(e.image, e.id)
        _check_decodes(e.mask, e.id)
    entries.sort(key=lambda e: e.id)
    return DatasetManifest(root, entries)


def load_sample(entry: ManifestEntry) -> ForgerySample:
    with Image.open(entry.image) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(entry.mask) as im:
        mask = np.asarray(im.convert("L"))
    if mask.ndim != 2:
        raise DatasetError(f"{entry.id}: mask is not single-channel after grayscale conversion")
    return ForgerySample(image, (mask > MASK_THRESHOLD).astype(np.uint8), entry.id)


def save_sample(sample: ForgerySample, root) -> ManifestEntry:
    """Write a sample as 8-bit PNGs under root/images and root/masks."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img_path = root / "images" / f"{sample.id}.png"
    mask_path = root / "masks" / f"{sample.id}.png"
    Image.fromarray(to_uint8(sample.image)).save(img_path)
    Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").save(mask_path)
    return ManifestEntry(img_path, mask_path, sample.id)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def resize_sample(sample: ForgerySample, size: int) -> ForgerySample:
    """Bilinear resize for the image, nearest-neighbour for the mask."""
    if size < 16:
        raise ValueError("size must be >= 16")
    h, w = sample.mask.shape
    if (h, w) == (size, size):
        return ForgerySample(sample.image.copy(), sample.mask.copy(), sample.id)
    channels = [
        np.asarray(
            Image.fromarray(sample.image[..., c].astype(np.float32), mode="F").resize(
                (size, size), Image.BILINEAR
            )
        )
        for c in range(3)
    ]
    image = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    mask = np.asarray(Image.fromarray(sample.mask).resize((size, size), Image.NEAREST))
    return ForgerySample(image, mask, sample.id)


def split_dataset(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    n = len(manifest)
    if n < 2:
        raise DatasetError(f"cannot split a manifest with {n} entries")
    n_train = int(math.floor(spec.train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(spec.seed).permutation(n)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    train = DatasetManifest(manifest.root, [manifest.entries[i] for i in train_idx], "train")
    test = DatasetManifest(manifest.root, [manifest.entries[i] for i in test_idx], "test")
    return train, test


# --- synthetic splices ------------------------------------------------------


# (blur sigma range, sensor-noise std range) per source "camera"
TEXTURE_PARAMS = {
    "camera_a": ((3.0, 6.0), (0.004, 0.012)),
    "camera_b": ((1.0, 2.0), (0.035, 0.06)),
}


def _texture(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    """Procedural colour texture in [0, 1].

    "camera_a" and "camera_b" differ in smoothness, colour statistics and the
    strength of their high-frequency sensor-like noise, so a splice of one into
    the other leaves a localisable trace.
    """
    sigma_range, noise_range = TEXTURE_PARAMS[kind]
    sigma, noise = rng.uniform(*sigma_range), rng.uniform(*noise_range)
    base = rng.standard_normal((size, size))
    base = ndimage.gaussian_filter(base, sigma, mode="wrap")
    base = (base - base.mean()) / (base.std() + 1e-8)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.0, 4.0)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    color = rng.uniform(0.25, 0.75, size=3)
    tint = rng.uniform(0.05, 0.15, size=3)
    img = color + tint * (0.7 * base + 0.3 * stripes)[..., None]
    img = img + noise * rng.standard_normal((size, size, 3))
    return np.clip(img, 0.0, 1.0)


def synth_toy_forgery(seed: int, size: int, count: int) -> list[ForgerySample]:
    """Generate `count` deterministic splice forgeries of shape (size, size).

    Each sample pastes a rectangle cut from a second texture into a
    background texture. The tampered area fraction is drawn log-uniformly
    from [0.05, 0.40].
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = np.random.default_rng(seed)
    samples = []
    total = size * size
    for k in range(count):
        background = _texture(rng, size, "camera_a")
        donor = _texture(rng, size, "camera_b")
        frac = math.exp(rng.uniform(math.log(0.05), math.log(0.40)))
        aspect = math.exp(rng.uniform(math.log(0.6), math.log(1.0 / 0.6)))
        ph = int(round(math.sqrt(frac * total * aspect)))
        ph = min(max(ph, 2), size)
        pw = int(round(frac * total / ph))
        pw = min(max(pw, 2), size)
        # keep the area inside the contract after rounding
        while ph * pw > 0.40 * total:
            pw -= 1
        while ph * pw < 0.05 * total:
            if pw < size:
                pw += 1
            else:
                ph += 1
        top = int(rng.integers(0, size - ph + 1))
        left = int(rng.integers(0, size - pw + 1))
        image = background.copy()
        image[top : top + ph, left : left + pw] = donor[top : top + ph, left : left + pw]
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[top : top + ph, left : left + pw] = 1
        samples.append(ForgerySample(image.astype(np.float32), mask, f"toy_{seed}_{k:05d}"))
    return samples


def write_dataset(samples, root) -> DatasetManifest:
    """Write samples to root in the images/ + masks/ layout plus manifest.jsonl."""
    root = Path(root)
    entries = [save_sample(s, root) for s in samples]
    manifest = DatasetManifest(root, sorted(entries, key=lambda e: e.id))
    with (root / "manifest.jsonl").open("w") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {"id": e.id, "image": str(e.image.relative_to(root)), "mask": str(e.mask.relative_to(root))}
                )
                + "\n"
            )
    return manifest


def load_samples(manifest: DatasetManifest, size: int | None = None) -> list[ForgerySample]:
    out = []
    for entry in manifest:
        s = load_sample(entry)
        out.append(resize_sample(s, size) if size else s)
    return out


def stack_samples(samples):
    """Stack samples into NCHW float and N1HW float torch tensors."""
    import torch

    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    return images.float(), masks

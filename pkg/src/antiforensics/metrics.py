"""Evaluation metrics: localisation F1, attack rate, reversed-mask F1, PSNR,
SSIM, GLCM contrast and perturbation statistics.

Metric kernels take numpy arrays. Images are (H, W, 3) or (H, W) floats in
[0, 1]; masks are (H, W) arrays in {0, 1}.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate

PSNR_CAP = 99.0


def binarize(prob, threshold=0.5):
    return (np.asarray(prob) > threshold).astype(np.uint8)


def confusion(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def pixel_f1(pred, gt) -> float:
    """Pixel-level F1 of a binary prediction.

    Both masks empty scores 1; exactly one empty scores 0.
    """
    tp, fp, fn = confusion(pred, gt)
    n_pred, n_gt = tp + fp, tp + fn
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_reverse(pred, gt) -> float:
    """F1 of the inverted prediction; high values flag zero-one reversal."""
    return pixel_f1(1 - np.asarray(pred).astype(np.uint8), gt)


def attack_rate(f1_ori, f1_anti) -> float:
    if f1_ori <= 0:
        raise ValueError("attack rate is undefined when the original F1 is 0")
    return (f1_ori - f1_anti) / f1_ori


def _to_255(img):
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)


def psnr(a, b) -> float:
    a, b = _to_255(a), _to_255(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, win, c1, c2):
    mu_x = correlate(x, win, mode="valid")
    mu_y = correlate(y, win, mode="valid")
    sxx = correlate(x * x, win, mode="valid") - mu_x**2
    syy = correlate(y * y, win, mode="valid") - mu_y**2
    sxy = correlate(x * y, win, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return np.mean(num / den)


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=255.0) -> float:
    """Gaussian-window SSIM on the 0-255 scale, averaged over valid window
    positions and colour channels."""
    a, b = _to_255(a), _to_255(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if a.ndim == 2:
        return float(_ssim_channel(a, b, win, c1, c2))
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2) for c in range(a.shape[2])]))


# --- texture ------------------------------------------------------------------


def to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image @ np.array([0.299, 0.587, 0.114])
    return image


def quantize(gray, levels):
    return np.clip(np.floor(np.clip(gray, 0.0, 1.0) * levels), 0, levels - 1).astype(np.intp)


def glcm(image, levels=32, offset=(0, 1)):
    """Symmetric, normalised co-occurrence matrix of the quantised gray image."""
    q = quantize(to_gray(image), levels)
    dr, dc = offset
    h, w = q.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    src = q[r0:r1, c0:c1].ravel()
    dst = q[r0 + dr : r1 + dr, c0 + dc : c1 + dc].ravel()
    m = np.zeros((levels, levels), dtype=np.float64)
    np.add.at(m, (src, dst), 1.0)
    m = m + m.T
    total = m.sum()
    return m / total if total else m


def glcm_property(image, levels=32, offset=(0, 1)) -> float:
    """GLCM contrast: sum of p(i, j) * (i - j)**2."""
    p = glcm(image, levels, offset)
    i, j = np.indices(p.shape)
    return float(np.sum(p * (i - j) ** 2))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray

    def rows(self):
        return [(float(self.edges[k]), float(self.edges[k + 1]), int(self.counts[k])) for k in range(len(self.counts))]

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_left", "bin_right", "count"])
            wr.writerows(self.rows())


def glcm_diff_histogram(pairs, bin_width=0.5, levels=32, offset=(0, 1)) -> Histogram:
    """Histogram of contrast(original) - contrast(anti) over image pairs.

    Bins have fixed width and are aligned so that 0 sits at a bin centre.
    """
    diffs = np.array(
        [glcm_property(o, levels, offset) - glcm_property(a, levels, offset) for o, a in pairs], dtype=np.float64
    )
    if diffs.size == 0:
        return Histogram(np.array([-bin_width / 2, bin_width / 2]), np.zeros(1, dtype=int), diffs)
    lo = math.floor(diffs.min() / bin_width - 0.5)
    hi = math.ceil(diffs.max() / bin_width + 0.5)
    edges = (np.arange(lo, hi + 1) + 0.5) * bin_width
    if edges[0] > diffs.min():
        edges = np.concatenate([[edges[0] - bin_width], edges])
    counts, _ = np.histogram(diffs, bins=edges)
    return Histogram(edges, counts, diffs)


def perturbation_stats(delta, mask) -> dict:
    """Mean and variance of |delta| * 255 inside tampered (t) and pristine (p)
    pixels. A region with no pixels reports None."""
    mag = np.abs(np.asarray(delta, dtype=np.float64)) * 255.0
    mask = np.asarray(mask).astype(bool)
    if mag.ndim == 3:
        region_t = mag[mask].ravel()
        region_p = mag[~mask].ravel()
    else:
        region_t, region_p = mag[mask], mag[~mask]
    out = {}
    for tag, vals in (("t", region_t), ("p", region_p)):
        out[f"mean_{tag}"] = float(vals.mean()) if vals.size else None
        out[f"var_{tag}"] = float(vals.var()) if vals.size else None
    return out


# --- reports --------------------------------------------------------------------


@dataclass
class ImageRow:
    id: str
    f1_ori: float
    f1: float
    f1_reverse: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    attack: str = ""
    model: str = ""
    setting: str = ""
    dataset: str = ""
    rows: list[ImageRow] = field(default_factory=list)

    def _mean(self, key):
        vals = [getattr(r, key) for r in self.rows]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def aggregates(self) -> dict:
        """Dataset means; attack rate comes from mean F1s over images whose
        clean F1 is positive."""
        kept = [r for r in self.rows if r.f1_ori > 0]
        f1_ori = float(np.mean([r.f1_ori for r in kept])) if kept else float("nan")
        f1_anti = float(np.mean([r.f1 for r in kept])) if kept else float("nan")
        return {
            "mean_f1_ori": self._mean("f1_ori"),
            "mean_f1_anti": self._mean("f1"),
            "attack_rate": attack_rate(f1_ori, f1_anti) if kept else float("nan"),
            "mean_f1_reverse": self._mean("f1_reverse"),
            "mean_psnr": self._mean("psnr"),
            "mean_ssim": self._mean("ssim"),
            "n_images": len(self.rows),
            "n_excluded": len(self.rows) - len(kept),
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "per_image.csv").open("w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(ImageRow.__dataclass_fields__))
            wr.writeheader()
            for r in self.rows:
                wr.writerow(asdict(r))
        meta = {"attack": self.attack, "model": self.model, "setting": self.setting, "dataset": self.dataset}
        (directory / "aggregates.json").write_text(json.dumps({**meta, **self.aggregates}, indent=2))

    @classmethod
    def read(cls, directory) -> "EvalReport":
        directory = Path(directory)
        meta = json.loads((directory / "aggregates.json").read_text())
        rows = []
        with (directory / "per_image.csv").open() as fh:
            for rec in csv.DictReader(fh):
                rows.append(ImageRow(rec["id"], *(float(rec[k]) for k in list(ImageRow.__dataclass_fields__)[1:])))
        return cls(meta["attack"], meta["model"], meta["setting"], meta["dataset"], rows)

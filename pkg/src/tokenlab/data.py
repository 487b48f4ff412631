"""Synthetic dataset generation and the raw image container.

Images are 8-bit RGB in a tiny documented binary container (header +
pixel bytes, little-endian) with a CSV manifest, so loading needs no
decoder and files are bit-exact across platforms.

Each image carries one of ``classes`` oriented-bar patterns inside a
window at a random position over a noisy background. A difficulty tier
varies window size, contrast, and noise, so class evidence ranges from
large and crisp to small and buried — giving a trained sparsifier genuine
input-dependent structure (easy images can be solved from few tokens).

Container layout (all little-endian):
    magic b"TLIM" | u8 version=1 | u8 channels | u16 height | u16 width |
    channels*height*width pixel bytes (channel-major).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"TLIM"
IMAGE_VERSION = 1
SPLITS = ("train", "holdout", "test")

# difficulty tiers: (min window, max window, contrast, background noise sigma)
TIERS = (
    (18, 24, 0.42, 0.02),
    (13, 18, 0.30, 0.05),
    (9, 13, 0.20, 0.09),
)


def save_image_raw(path, img_u8):
    img_u8 = np.asarray(img_u8, dtype=np.uint8)
    if img_u8.ndim != 3:
        raise ValueError("expected (channels, height, width)")
    c, h, w = img_u8.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<BBHH", IMAGE_VERSION, c, h, w))
        fh.write(img_u8.tobytes())


def load_image_raw(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"{path}: not an image container (magic {magic!r})")
        version, c, h, w = struct.unpack("<BBHH", fh.read(6))
        if version != IMAGE_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        data = fh.read(c * h * w)
        if len(data) != c * h * w:
            raise ValueError(f"{path}: truncated pixel payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(c, h, w)


@dataclass
class DatasetManifest:
    root: Path
    records: list          # (filename, label, split)
    num_classes: int
    image_size: int
    channels: int = 3

    def select(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        return [(f, y) for f, y, s in self.records if s == split]

    def counts(self):
        return {s: sum(1 for r in self.records if r[2] == s) for s in SPLITS}


def write_manifest(manifest: DatasetManifest, path=None):
    path = path or manifest.root / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label", "split"])
        for f, y, s in manifest.records:
            w.writerow([f, y, s])


def load_manifest(root):
    root = Path(root)
    path = root / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    records = []
    labels = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            label = int(row["label"])
            split = row["split"]
            if split not in SPLITS:
                raise ValueError(f"manifest row with unknown split '{split}'")
            labels.add(label)
            records.append((row["file"], label, split))
    sample = load_image_raw(root / records[0][0])
    return DatasetManifest(
        root=root,
        records=records,
        num_classes=max(labels) + 1,
        image_size=sample.shape[-1],
        channels=sample.shape[0],
    )


def _class_tint(label, classes):
    ang = 2.0 * math.pi * label / classes
    tint = np.array([
        0.55 + 0.45 * math.cos(ang),
        0.55 + 0.45 * math.cos(ang + 2.0 * math.pi / 3.0),
        0.55 + 0.45 * math.cos(ang + 4.0 * math.pi / 3.0),
    ])
    return tint / tint.max()


def render_image(label, classes, size, rng):
    """One sample: tinted oriented bars in a window over noise."""
    tier = TIERS[int(rng.integers(len(TIERS)))]
    smin, smax, contrast, sigma = tier
    win = int(rng.integers(smin, smax + 1))
    win = min(win, size - 2)
    r0 = int(rng.integers(1, size - win))
    c0 = int(rng.integers(1, size - win))
    theta = math.pi * (label % 5) / 5.0
    cycles = 2.0 if label < classes / 2 else 4.0
    phase = rng.uniform(0.0, 2.0 * math.pi)

    img = 0.5 + rng.normal(0.0, sigma, size=(3, size, size))
    yy, xx = np.mgrid[0:win, 0:win]
    u = (xx * math.cos(theta) + yy * math.sin(theta)) / win
    bars = np.sign(np.sin(2.0 * math.pi * cycles * u + phase))
    tint = _class_tint(label, classes)
    img[:, r0:r0 + win, c0:c0 + win] += contrast * bars[None] * tint[:, None, None]
    return np.clip(img, 0.0, 1.0)


def gen_dataset(out_dir, classes=10, per_class=200, image_size=32, seed=0,
                splits=(0.7, 0.1, 0.2)) -> DatasetManifest:
    """Write a synthetic labelled dataset; byte-identical per seed."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if image_size < 8:
        raise ValueError("image_size too small")
    if abs(sum(splits) - 1.0) > 1e-9 or len(splits) != 3:
        raise ValueError("splits must be three fractions summing to 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    idx = 0
    for label in range(classes):
        n_train = int(round(per_class * splits[0]))
        n_holdout = int(round(per_class * splits[1]))
        for j in range(per_class):
            split = "train" if j < n_train else ("holdout" if j < n_train + n_holdout else "test")
            img = render_image(label, classes, image_size, rng)
            u8 = np.round(img * 255.0).astype(np.uint8)
            fname = f"img_{idx:05d}.tli"
            save_image_raw(out_dir / fname, u8)
            records.append((fname, label, split))
            idx += 1
    manifest = DatasetManifest(out_dir, records, classes, image_size)
    write_manifest(manifest)
    return manifest


def load_split(manifest: DatasetManifest, split, limit=None, seed=None):
    """(images float32 in [0,1], labels, ids). ``ids`` index the manifest.

    With ``limit`` set, a seeded subsample keeps class balance by
    interleaving; deterministic per (manifest, limit, seed).
    """
    entries = [(i, f, y) for i, (f, y, s) in enumerate(manifest.records) if s == split]
    if not entries:
        raise ValueError(f"split '{split}' is empty")
    if limit is not None and limit < len(entries):
        rng = np.random.default_rng(0 if seed is None else seed)
        pick = rng.permutation(len(entries))[:limit]
        entries = [entries[i] for i in sorted(pick)]
    images = np.zeros((len(entries), manifest.channels, manifest.image_size, manifest.image_size),
                      dtype=np.float32)
    labels = np.zeros(len(entries), dtype=np.int64)
    ids = np.zeros(len(entries), dtype=np.int64)
    for row, (i, f, y) in enumerate(entries):
        images[row] = load_image_raw(manifest.root / f).astype(np.float32) / 255.0
        labels[row] = y
        ids[row] = i
    return images, labels, ids

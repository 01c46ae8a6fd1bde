"""Task datasets: manifest ingestion, few-shot subsetting, ten-crop augmentation.

Manifest layout (JSON)::

    {
      "name": "caltech101",
      "overlap": "subset",            # subset | intersect | disjoint | unknown
      "source_ref": "IN",             # optional
      "classes": ["accordion", ...],  # manifest order is class-index order
      "root": "images",               # class-per-directory tree, relative to manifest
      "splits": {"train": "train.txt", "val": "val.txt", "test": "test.txt"}
    }

Each split listing holds one ``<class>/<file>`` path per line, relative to
``root``. A sample's identity is that path with the file suffix removed, so a
dataset re-serialized under a different codec keeps its identities.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path, PurePosixPath

import numpy as np

from .errors import ConfigError, CropError, IngestError, InsufficientDataError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".npy", ".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp")


class Overlap(str, enum.Enum):
    SUBSET = "subset"
    INTERSECT = "intersect"
    DISJOINT = "disjoint"
    UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class Sample:
    uid: str
    image: np.ndarray
    label: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.uid == other.uid
            and self.label == other.label
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )

    def __hash__(self):
        return hash((self.uid, self.label))


@dataclass(frozen=True)
class TaskDataset:
    name: str
    classes: tuple
    train: tuple
    val: tuple
    test: tuple
    overlap: Overlap = Overlap.UNKNOWN
    source_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "overlap", Overlap(self.overlap))
        for split in SPLITS:
            object.__setattr__(self, split, tuple(getattr(self, split)))
        self.validate()

    def validate(self):
        n = len(self.classes)
        seen = set()
        for split in SPLITS:
            for s in getattr(self, split):
                if not 0 <= s.label < n:
                    raise IngestError(f"{split} sample {s.uid!r} has label {s.label} outside {n} classes")
                if s.uid in seen:
                    raise IngestError(f"sample {s.uid!r} appears in more than one split")
                seen.add(s.uid)
        counts = self.train_counts()
        for c, k in enumerate(counts):
            if k == 0:
                raise IngestError(f"class {self.classes[c]!r} has no train samples")

    def split(self, name):
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def train_counts(self):
        counts = [0] * len(self.classes)
        for s in self.train:
            counts[s.label] += 1
        return counts

    @property
    def image_shape(self):
        return self.train[0].image.shape

    def arrays(self, split):
        """Stack a split into ``(images, labels)`` arrays."""
        samples = self.split(split)
        if not samples:
            shape = self.image_shape
            return np.zeros((0, *shape)), np.zeros(0, dtype=np.int64)
        return (
            np.stack([s.image for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
        )

    def with_splits(self, **splits):
        kwargs = {k: getattr(self, k) for k in ("name", "classes", "train", "val", "test", "overlap", "source_ref")}
        kwargs.update(splits)
        return TaskDataset(**kwargs)


@dataclass(frozen=True)
class FewShotSpec:
    ic: int
    n_subsets: int = 5
    base_seed: int = 0

    def __post_init__(self):
        if self.ic < 1:
            raise ConfigError("ic must be >= 1")
        if self.n_subsets < 1:
            raise ConfigError("n_subsets must be >= 1")


@dataclass(frozen=True)
class CropSet:
    crops: tuple
    origin: str | None = None

    def __post_init__(self):
        if len(self.crops) != 10:
            raise CropError(f"expected 10 crops, got {len(self.crops)}")

    def stack(self):
        return np.stack(self.crops)


# --------------------------------------------------------------------------
# codec


def read_image(path):
    path = Path(path)
    if path.suffix.lower() == ".npy":
        img = np.load(path)
        img = np.asarray(img, dtype=np.float64)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.dtype == np.uint16:
            img = arr.astype(np.float64) / 65535.0
        elif arr.dtype == bool:
            img = arr.astype(np.float64)
        else:
            img = arr.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise IngestError(f"{path}: expected an H x W x C image, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise IngestError(f"{path}: pixel values outside [0, 1]")
    return img


def write_image(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".npy":
        np.save(path, np.asarray(image, dtype=np.float64))
        return
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# manifest ingestion


def _strip_suffix(rel):
    p = PurePosixPath(rel)
    return str(p.with_suffix("")) if p.suffix.lower() in IMAGE_SUFFIXES else str(p)


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestError(f"manifest not found: {manifest_path}")
    try:
        meta = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("name", "classes", "splits"):
        if key not in meta:
            raise IngestError(f"{manifest_path}: missing field {key!r}")
    base = manifest_path.parent
    root = base / meta.get("root", ".")
    classes = [str(c) for c in meta["classes"]]
    if len(set(classes)) != len(classes):
        raise IngestError("duplicate class names in manifest")
    index = {c: i for i, c in enumerate(classes)}
    try:
        overlap = Overlap(meta.get("overlap", "unknown"))
    except ValueError as exc:
        raise IngestError(f"unknown overlap tag {meta.get('overlap')!r}") from exc

    splits = {}
    for split in SPLITS:
        listing = meta["splits"].get(split)
        if listing is None:
            raise IngestError(f"manifest has no {split} listing")
        listing_path = base / listing
        if not listing_path.is_file():
            raise IngestError(f"missing split file: {listing_path}")
        samples = []
        for line in listing_path.read_text().splitlines():
            rel = line.strip()
            if not rel or rel.startswith("#"):
                continue
            cls = PurePosixPath(rel).parts[0]
            if cls not in index:
                raise IngestError(f"{split} listing names class {cls!r} absent from the manifest")
            if not (root / cls).is_dir():
                raise IngestError(f"class directory missing from tree: {root / cls}")
            img_path = root / rel
            if not img_path.is_file():
                raise IngestError(f"{split} listing names a missing file: {img_path}")
            samples.append(Sample(_strip_suffix(rel), read_image(img_path), index[cls]))
        splits[split] = samples

    return TaskDataset(
        name=str(meta["name"]),
        classes=classes,
        overlap=overlap,
        source_ref=meta.get("source_ref"),
        **splits,
    )


def save_dataset(ds, directory, suffix=".npy"):
    """Write ``ds`` as a manifest + class tree + split listings; return the manifest path."""
    directory = Path(directory)
    root = directory / "images"
    listings = {}
    for split in SPLITS:
        lines = []
        for s in ds.split(split):
            rel = s.uid + suffix
            cls = PurePosixPath(rel).parts[0]
            if cls != ds.classes[s.label]:
                raise IngestError(f"sample {s.uid!r} is not stored under its class directory")
            write_image(root / rel, s.image)
            lines.append(rel)
        (directory / f"{split}.txt").write_text("\n".join(lines) + "\n")
        listings[split] = f"{split}.txt"
    for c in ds.classes:
        (root / c).mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": ds.name,
        "overlap": ds.overlap.value,
        "source_ref": ds.source_ref,
        "classes": list(ds.classes),
        "root": "images",
        "splits": listings,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# --------------------------------------------------------------------------
# few-shot subsets


def make_fewshot_subsets(ds, spec):
    counts = ds.train_counts()
    for c, k in enumerate(counts):
        if k < spec.ic:
            raise InsufficientDataError(ds.classes[c], k, spec.ic)
    by_class = [[] for _ in ds.classes]
    for idx, s in enumerate(ds.train):
        by_class[s.label].append(idx)
    subsets = []
    for k in range(spec.n_subsets):
        rng = np.random.default_rng(np.random.SeedSequence([spec.base_seed, spec.ic, k]))
        chosen = []
        for members in by_class:
            pick = rng.choice(len(members), size=spec.ic, replace=False)
            chosen.extend(members[p] for p in pick)
        chosen.sort()
        subsets.append(ds.with_splits(train=[ds.train[i] for i in chosen]))
    return subsets


# --------------------------------------------------------------------------
# ten-crop augmentation


def default_crop_side(image_shape):
    return max(1, int(math.floor(0.875 * min(image_shape[0], image_shape[1]))))


def crop_anchors(h, w, crop):
    return [
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
        ((h - crop) // 2, (w - crop) // 2),
    ]


def ten_crop(image, crop=None, origin=None):
    image = np.asarray(image)
    h, w = image.shape[:2]
    if crop is None:
        crop = default_crop_side(image.shape)
    if crop < 1 or crop > min(h, w):
        raise CropError(f"crop {crop} does not fit a {h}x{w} image")
    base = [image[r:r + crop, c:c + crop] for r, c in crop_anchors(h, w, crop)]
    mirrored = [b[:, ::-1] for b in base]
    return CropSet(tuple(base + mirrored), origin)


def ten_crop_batch(images, crop):
    """Crop a stack ``(N, H, W, C)`` into ``(N * 10, crop, crop, C)``; rows of one image are adjacent."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    if crop < 1 or crop > min(h, w):
        raise CropError(f"crop {crop} does not fit a {h}x{w} image")
    parts = [images[:, r:r + crop, c:c + crop] for r, c in crop_anchors(h, w, crop)]
    parts += [p[:, :, ::-1] for p in parts]
    out = np.stack(parts, axis=1)
    return np.ascontiguousarray(out.reshape(n * 10, crop, crop, images.shape[3]))


# --------------------------------------------------------------------------
# synthetic tasks


def _smooth_pattern(rng, side, channels, n_blobs=4):
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    img = np.zeros((side, side, channels))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-1, 1, channels)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img += bump[:, :, None] * amp
    return img


def make_synthetic_task(
    name="synthetic",
    n_classes=3,
    n_train=20,
    n_val=5,
    n_test=5,
    side=16,
    channels=3,
    noise=0.1,
    seed=0,
    overlap=Overlap.UNKNOWN,
    source_ref=None,
):
    """Class-prototype images plus Gaussian pixel noise, clipped to [0, 1].

    ``n_train`` / ``n_val`` / ``n_test`` are per-class counts and may be a list
    giving one count per class.
    """
    rng = np.random.default_rng(seed)
    protos = [0.5 + 0.35 * np.tanh(_smooth_pattern(rng, side, channels)) for _ in range(n_classes)]
    classes = [f"c{c}" for c in range(n_classes)]

    def per_class(v):
        return list(v) if isinstance(v, (list, tuple)) else [v] * n_classes

    splits = {}
    for split, counts in zip(SPLITS, (per_class(n_train), per_class(n_val), per_class(n_test))):
        samples = []
        for c, k in enumerate(counts):
            for i in range(k):
                img = np.clip(protos[c] + noise * rng.normal(size=protos[c].shape), 0.0, 1.0)
                samples.append(Sample(f"{classes[c]}/{split}_{i:05d}", img, c))
        splits[split] = samples
    return TaskDataset(name=name, classes=classes, overlap=overlap, source_ref=source_ref, **splits)

"""Image folders, patch sampling and multi-view batch assembly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .corruption import CorruptionSpec, apply_spec, sample_spec

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class IngestionError(RuntimeError):
    pass


class DataConfigError(ValueError):
    pass


def read_image(path, colorspace="rgb"):
    """Load an image file as float64 (H, W, C) in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("RGB" if colorspace == "rgb" else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    arr = to_uint8(np.asarray(img))
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def check_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3) or min(img.shape[:2]) < 1:
        raise DataConfigError(f"bad image shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise DataConfigError("image values must be finite and in [0, 1]")
    return img


@dataclass
class DatasetManifest:
    root: Path
    files: list  # relative names, sorted
    splits: dict  # name -> split tag
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, tag):
        return [f for f in self.files if self.splits[f] == tag]

    def load(self, name):
        if name not in self._cache:
            self._cache[name] = read_image(self.root / name)
        return self._cache[name]

    def to_jsonl(self):
        return "".join(json.dumps({"file": f, "split": self.splits[f]}) + "\n" for f in self.files)


def _name_hash(name):
    return hashlib.sha256(name.encode()).hexdigest()


def parse_split_rule(rule):
    """Accept ``{"train": 0.9, "val": 0.1}`` or a string like ``"train=90,val=10"``."""
    if rule is None:
        return {"train": 1.0}
    if isinstance(rule, str):
        rule = {k.strip(): float(v) for k, v in (part.split("=") for part in rule.split(","))}
    total = sum(rule.values())
    if total <= 0 or any(v < 0 for v in rule.values()):
        raise DataConfigError(f"bad split rule {rule}")
    return {k: v / total for k, v in rule.items()}


def scan_dataset(root, split_rule=None, verify=True):
    """Index a folder of images and assign splits.

    Files are ordered by a hash of their name and the split fractions are
    applied to that ordering, so counts are exact and the assignment does not
    depend on directory listing order.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset folder {root} does not exist")
    files = sorted(p.name for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestionError(f"no images found in {root}")
    if verify:
        for f in files:
            read_image(root / f)
    rule = parse_split_rule(split_rule)
    ordered = sorted(files, key=_name_hash)
    splits, start, acc = {}, 0, 0.0
    tags = list(rule)
    for i, tag in enumerate(tags):
        acc += rule[tag]
        stop = len(ordered) if i == len(tags) - 1 else int(round(acc * len(ordered)))
        for f in ordered[start:stop]:
            splits[f] = tag
        start = stop
    return DatasetManifest(root, files, splits)


def augment(img, rng):
    """Random flips and 90 degree rotation."""
    if rng.uniform() < 0.5:
        img = img[:, ::-1]
    if rng.uniform() < 0.5:
        img = img[::-1, :]
    return np.ascontiguousarray(np.rot90(img, k=int(rng.integers(4))))


def sample_patch(manifest, patch, rng, split="train", augment_patch=False):
    names = manifest.split(split) or manifest.files
    smallest = min(min(manifest.load(n).shape[:2]) for n in names)
    if patch > smallest:
        raise DataConfigError(f"patch {patch} exceeds smallest image dimension {smallest}")
    img = manifest.load(names[int(rng.integers(len(names)))])
    h, w = img.shape[:2]
    top = int(rng.integers(h - patch + 1))
    left = int(rng.integers(w - patch + 1))
    crop = img[top : top + patch, left : left + patch]
    if augment_patch:
        crop = augment(crop, rng)
    return np.ascontiguousarray(crop)


@dataclass
class ViewSet:
    views: list
    specs: list
    masks: list = None
    clean: np.ndarray = None

    def __post_init__(self):
        if len(self.views) < 2:
            raise DataConfigError("a ViewSet needs at least two views")
        if len(self.views) != len(self.specs):
            raise DataConfigError("views and specs differ in length")
        shape = self.views[0].shape
        if any(v.shape != shape for v in self.views):
            raise DataConfigError("views differ in shape")
        if self.clean is not None and self.clean.shape != shape:
            raise DataConfigError("clean image shape differs from views")

    @property
    def k(self):
        return len(self.views)

    def stripped(self):
        """Copy without the clean image, as handed to self-supervised losses."""
        return replace(self, clean=None)


def make_viewset(clean, pool, k, rng):
    if k < 2:
        raise DataConfigError(f"need k >= 2 views, got {k}")
    specs = [sample_spec(pool, rng) for _ in range(k)]
    views, masks = [], []
    for spec in specs:
        v, m = apply_spec(clean, spec)
        views.append(v)
        masks.append(m)
    return ViewSet(views, specs, masks, clean)


def batch_viewsets(manifest, pool, batch, k, patch, rng, augment_patch=False):
    return [
        make_viewset(sample_patch(manifest, patch, rng, augment_patch=augment_patch), pool, k, rng)
        for _ in range(batch)
    ]


def step_rng(seed, step, stream=0):
    """Independent generator for one (seed, step, stream) triple."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(step), int(stream)])


def spec_from_json(line):
    return CorruptionSpec.from_dict(json.loads(line))

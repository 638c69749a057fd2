"""Datasets: synthetic face-like identities, image folders, and verification pairs.

Images are kept as uint8 arrays of shape (N, H, W, 3). Every sample has a
relative path ``<identity>/<file>`` so in-memory synthetic sets, their
exported folders and pair files all refer to samples the same way.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from tmloss.errors import IngestionError, ParameterError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".pgm", ".webp"}


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    paths: list[str]
    class_names: list[str]
    split: str = "train"
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8 (N, H, W, 3), got {self.images.dtype} {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.paths)):
            raise ValueError("images, labels and paths differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices, split: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count,
                              [self.paths[i] for i in indices], list(self.class_names),
                              split or self.split)

    def index_of(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.paths)}


@dataclass
class PairList:
    entries: list[tuple[str, str, bool]]

    def __post_init__(self):
        same = [e[2] for e in self.entries]
        if not any(same) or all(same):
            raise ParameterError("a pair list needs at least one positive and one negative pair")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def issame(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=bool)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

def _class_prototype(rng: np.random.Generator) -> dict:
    """Landmark-like layout: head ellipse, eyes, brows, nose, mouth, two marks."""
    skin = rng.uniform(90, 220, 3)
    background = rng.uniform(0, 255, 3)
    eye_dx, eye_y = rng.uniform(0.2, 0.42), rng.uniform(-0.35, -0.05)
    eye_r = rng.uniform(0.07, 0.16, 2)
    eye_color = rng.uniform(0, 255, 3)
    brow_tilt = rng.uniform(-0.5, 0.5)
    shapes = [
        ("ellipse", (0.0, 0.0), (rng.uniform(0.6, 0.85), rng.uniform(0.75, 0.95)), 0.0, skin),
        ("ellipse", (-eye_dx, eye_y), tuple(eye_r), 0.0, eye_color),
        ("ellipse", (eye_dx, eye_y), tuple(eye_r), 0.0, eye_color),
        ("rect", (-eye_dx, eye_y - rng.uniform(0.15, 0.25)), (rng.uniform(0.08, 0.18), 0.035), brow_tilt,
         rng.uniform(0, 120, 3)),
        ("rect", (eye_dx, eye_y - rng.uniform(0.15, 0.25)), (rng.uniform(0.08, 0.18), 0.035), -brow_tilt,
         rng.uniform(0, 120, 3)),
        ("ellipse", (rng.uniform(-0.08, 0.08), rng.uniform(0.0, 0.2)), (rng.uniform(0.04, 0.1), rng.uniform(0.1, 0.2)),
         rng.uniform(-0.4, 0.4), skin * rng.uniform(0.5, 0.8)),
        ("ellipse", (rng.uniform(-0.1, 0.1), rng.uniform(0.35, 0.55)), (rng.uniform(0.12, 0.32), rng.uniform(0.04, 0.1)),
         rng.uniform(-0.3, 0.3), rng.uniform(0, 255, 3)),
    ]
    for _ in range(2):
        shapes.append(("ellipse", tuple(rng.uniform(-0.6, 0.6, 2)), tuple(rng.uniform(0.05, 0.14, 2)),
                       rng.uniform(-1.5, 1.5), rng.uniform(0, 255, 3)))
    return {"background": background, "shapes": shapes}


def _render(proto: dict, size: int, affine: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Rasterise a prototype seen through ``coords = affine @ pixel + shift``."""
    axis = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    x = affine[0, 0] * xx + affine[0, 1] * yy + shift[0]
    y = affine[1, 0] * xx + affine[1, 1] * yy + shift[1]
    img = np.broadcast_to(proto["background"], (size, size, 3)).astype(np.float64)
    softness = 2.0 / size
    for kind, (cx, cy), (rx, ry), angle, color in proto["shapes"]:
        c, s = math.cos(angle), math.sin(angle)
        u = c * (x - cx) + s * (y - cy)
        v = -s * (x - cx) + c * (y - cy)
        if kind == "ellipse":
            dist = (np.sqrt((u / rx) ** 2 + (v / ry) ** 2) - 1.0) * min(rx, ry)
        else:
            dist = np.maximum(np.abs(u) - rx, np.abs(v) - ry)
        alpha = np.clip(0.5 - dist / softness, 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + np.asarray(color) * alpha
    return img


def synth_generate(n_classes: int, per_class: int, image_size: int, seed: int,
                   max_rotation: float = 0.12, max_shift: float = 0.06, scale_jitter: float = 0.05,
                   brightness_jitter: float = 0.1, noise_std: float = 6.0) -> LabeledDataset:
    """Seeded synthetic identities: one prototype per class, perturbed per sample.

    Each sample applies a small random rotation/scale/translation to the
    prototype, a global brightness factor and Gaussian pixel noise.
    """
    if n_classes < 2 or per_class < 2:
        raise ParameterError("synth_generate needs n_classes >= 2 and per_class >= 2")
    if image_size < 16:
        raise ParameterError(f"image_size {image_size} too small for the primitive layout (minimum 16)")
    rng = np.random.default_rng(seed)
    protos = [_class_prototype(rng) for _ in range(n_classes)]
    images = np.empty((n_classes * per_class, image_size, image_size, 3), dtype=np.uint8)
    labels, paths = [], []
    names = [f"id_{k:04d}" for k in range(n_classes)]
    n = 0
    for k, proto in enumerate(protos):
        for j in range(per_class):
            angle = rng.uniform(-max_rotation, max_rotation)
            zoom = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
            c, s = math.cos(angle), math.sin(angle)
            affine = np.array([[c, -s], [s, c]]) * zoom
            shift = rng.uniform(-max_shift, max_shift, 2)
            img = _render(proto, image_size, affine, shift)
            img = img * (1.0 + rng.uniform(-brightness_jitter, brightness_jitter))
            img = img + rng.normal(0.0, noise_std, img.shape)
            images[n] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            labels.append(k)
            paths.append(f"{names[k]}/{j:04d}.png")
            n += 1
    return LabeledDataset(images, np.array(labels), n_classes, paths, names)


def split_holdout(dataset: LabeledDataset, fraction: float = 0.2) -> tuple[LabeledDataset, LabeledDataset]:
    """Per class, the last ``fraction`` of samples (at least one) form the holdout."""
    train_idx, hold_idx = [], []
    for k in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == k)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            train_idx.extend(idx)
            continue
        n_hold = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        train_idx.extend(idx[:-n_hold])
        hold_idx.extend(idx[-n_hold:])
    return dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(hold_idx), "holdout")


# --------------------------------------------------------------------------
# per-image transforms
# --------------------------------------------------------------------------

def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 (or NxHxWx3) -> float32 channel-first, ``(v - 127.5) / 128``."""
    image = np.asarray(image)
    out = (image.astype(np.float32) - np.float32(127.5)) / np.float32(128.0)
    return np.ascontiguousarray(np.moveaxis(out, -1, -3))


def augment_flip(image: np.ndarray, rng: Optional[np.random.Generator] = None, force: Optional[bool] = None) -> np.ndarray:
    """Horizontal mirror with probability 0.5 (or always/never via ``force``)."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    return image[:, ::-1] if flip else image


def flip_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independently flip each image of an (N, H, W, 3) batch with probability 0.5."""
    mask = rng.random(len(images)) < 0.5
    out = images.copy()
    out[mask] = images[mask, :, ::-1]
    return out


# --------------------------------------------------------------------------
# pairs
# --------------------------------------------------------------------------

def make_pairs(holdout: LabeledDataset, n_pos: int, n_neg: int, seed: int) -> PairList:
    """Sample distinct same-class and cross-class pairs without replacement."""
    by_class = [np.flatnonzero(holdout.labels == k) for k in range(holdout.class_count)]
    usable = [idx for idx in by_class if len(idx) >= 1]
    if len(usable) < 2 or not any(len(idx) >= 2 for idx in usable):
        raise ParameterError("make_pairs needs at least two classes and a class with two samples")
    rng = np.random.default_rng(seed)

    positives = [(int(a), int(b)) for idx in by_class for i, a in enumerate(idx) for b in idx[i + 1:]]
    if n_pos > len(positives):
        raise ParameterError(f"requested {n_pos} positive pairs but only {len(positives)} exist")
    chosen_pos = [positives[i] for i in rng.choice(len(positives), size=n_pos, replace=False)]

    n = len(holdout)
    n_neg_available = n * (n - 1) // 2 - len(positives)
    if n_neg > n_neg_available:
        raise ParameterError(f"requested {n_neg} negative pairs but only {n_neg_available} exist")
    chosen_neg: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    if n_neg > n_neg_available // 2:
        pool = [(i, j) for i in range(n) for j in range(i + 1, n) if holdout.labels[i] != holdout.labels[j]]
        chosen_neg = [pool[i] for i in rng.choice(len(pool), size=n_neg, replace=False)]
    else:
        while len(chosen_neg) < n_neg:
            i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
            if holdout.labels[i] == holdout.labels[j] or (i, j) in seen:
                continue
            seen.add((i, j))
            chosen_neg.append((i, j))

    entries = [(holdout.paths[a], holdout.paths[b], True) for a, b in chosen_pos]
    entries += [(holdout.paths[a], holdout.paths[b], False) for a, b in chosen_neg]
    order = rng.permutation(len(entries))
    return PairList([entries[i] for i in order])


def write_pairs(pairs: PairList, path) -> None:
    lines = [f"{a}\t{b}\t{int(same)}\n" for a, b, same in pairs.entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_pairs(path) -> PairList:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pair file not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise IngestionError(f"{path}:{lineno}: expected 'path_a<TAB>path_b<TAB>0|1'")
        entries.append((parts[0], parts[1], parts[2] == "1"))
    return PairList(entries)


# --------------------------------------------------------------------------
# folder layout
# --------------------------------------------------------------------------

def export_folder(dataset: LabeledDataset, root, force: bool = False) -> Path:
    """Write ``root/<identity>/<file>.png`` for every sample (lossless PNG)."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {root} is not empty (use --force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    for image, rel in zip(dataset.images, dataset.paths):
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image, mode="RGB").save(target, format="PNG")
    return root


def load_folder(root, size: Optional[tuple[int, int]] = None) -> LabeledDataset:
    """Read ``root/<identity>/<images>``; identities are indexed in sorted order.

    Files without an image suffix are skipped with a warning (listed in
    ``dataset.skipped``). An image that fails to decode raises
    :class:`IngestionError`. ``size`` = (height, width) resizes every image.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels, paths, names, skipped = [], [], [], [], []
    for k, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        for f in sorted(p for p in cdir.iterdir() if p.is_file()):
            rel = f"{cdir.name}/{f.name}"
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                log.warning("skipping non-image file %s", f)
                skipped.append(rel)
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if size is not None and (im.height, im.width) != tuple(size):
                        im = im.resize((size[1], size[0]), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.uint8)
            except (OSError, UnidentifiedImageError) as exc:
                raise IngestionError(f"cannot read image {f}: {exc}") from exc
            images.append(arr)
            labels.append(k)
            paths.append(rel)
    if not images:
        raise IngestionError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise IngestionError(f"images under {root} have differing sizes {sorted(shapes)}; pass a size")
    ds = LabeledDataset(np.stack(images), np.array(labels), len(class_dirs), paths, names)
    ds.skipped = skipped
    return ds

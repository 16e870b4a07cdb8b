"""EndoVis-layout dataset indexing, splitting, loading and toy-data synthesis.

Layout::

    root/sequence_<k>/images/frame_<n>.png   RGB
    root/sequence_<k>/masks/frame_<n>.png    8-bit class ids
    root/manifest.json                       class names + split selections
"""

from __future__ import annotations

import json
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DataError, ValidationError
from .metrics import CLASS_NAMES

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MANIFEST = "manifest.json"
DEFAULT_SIZE = (320, 256)  # width, height

_SEQ_RE = re.compile(r"^sequence_(\d+)$")
_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


class Frame(NamedTuple):
    sequence_id: int
    frame_id: int
    image_path: Path
    mask_path: Path


@dataclass
class DatasetIndex:
    frames: list
    class_names: tuple = CLASS_NAMES
    root: Path | None = None
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def keys(self):
        return [(f.sequence_id, f.frame_id) for f in self.frames]

    def subset(self, frames):
        return DatasetIndex(list(frames), self.class_names, self.root, self.manifest)


class Selection(NamedTuple):
    """Inclusive run of frame ids within one sequence."""

    sequence_id: int
    start: int
    end: int


@dataclass
class SplitSpec:
    test_sequences: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        sels = [Selection(int(s["sequence"]), int(s["start"]), int(s["end"])) for s in d.get("test", [])]
        return cls(sels, int(d.get("seed", 0)))

    def to_dict(self):
        return {
            "test": [{"sequence": s.sequence_id, "start": s.start, "end": s.end} for s in self.test_sequences],
            "seed": self.seed,
        }


def _numbered(directory, pattern):
    out = {}
    for p in directory.iterdir():
        m = pattern.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def read_manifest(root):
    path = Path(root) / MANIFEST
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid manifest: {exc}") from exc


def load_dataset(root, check_values=True) -> DatasetIndex:
    """Index every (image, mask) pair under ``root`` in (sequence, frame) order.

    Orphans and out-of-range mask values are collected and reported together.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root does not exist: {root}")
    manifest = read_manifest(root)
    class_names = tuple(manifest.get("class_names", CLASS_NAMES))
    frames, problems = [], []
    for seq_id, seq_dir in sorted(_numbered(root, _SEQ_RE).items()):
        if not seq_dir.is_dir():
            continue
        img_dir, mask_dir = seq_dir / "images", seq_dir / "masks"
        images = _numbered(img_dir, _FRAME_RE) if img_dir.is_dir() else {}
        masks = _numbered(mask_dir, _FRAME_RE) if mask_dir.is_dir() else {}
        for fid in sorted(images.keys() - masks.keys()):
            problems.append(f"orphan image (no mask): {images[fid]}")
        for fid in sorted(masks.keys() - images.keys()):
            problems.append(f"orphan mask (no image): {masks[fid]}")
        for fid in sorted(images.keys() & masks.keys()):
            frames.append(Frame(seq_id, fid, images[fid], masks[fid]))
    if check_values:
        for f in frames:
            arr = _read_mask(f.mask_path)
            if arr.size and int(arr.max()) >= len(class_names):
                problems.append(f"mask value {int(arr.max())} out of range [0,{len(class_names) - 1}]: {f.mask_path}")
    if problems:
        raise ValidationError("invalid dataset:\n  " + "\n  ".join(problems))
    if not frames:
        raise ValidationError(f"no frames found under {root}")
    return DatasetIndex(frames, class_names, root, manifest)


def split(index: DatasetIndex, spec: SplitSpec):
    """Partition ``index`` into (train, test); test is the union of the selected runs."""
    keys = set(index.keys())
    chosen = set()
    for sel in spec.test_sequences:
        if sel.end < sel.start:
            raise ValidationError(f"empty selection {sel}")
        run = {(sel.sequence_id, fid) for fid in range(sel.start, sel.end + 1)}
        missing = sorted(run - keys)
        if missing:
            raise ValidationError(f"selection {tuple(sel)} refers to missing frames {missing[:5]}")
        if run & chosen:
            raise ValidationError(f"selection {tuple(sel)} overlaps an earlier selection")
        chosen |= run
    train = [f for f in index.frames if (f.sequence_id, f.frame_id) not in chosen]
    test = [f for f in index.frames if (f.sequence_id, f.frame_id) in chosen]
    return index.subset(train), index.subset(test)


def manifest_split(index: DatasetIndex):
    return split(index, SplitSpec.from_dict(index.manifest.get("split", {})))


def _open(path):
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def _read_mask(path):
    img = _open(path)
    if img.mode not in ("L", "P", "I", "I;16"):
        raise DataError(f"mask must be single-channel, got mode {img.mode}: {path}")
    return np.asarray(img)


def normalize(image: Image.Image) -> torch.Tensor:
    arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, np.float32)) / np.array(IMAGENET_STD, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; ``size`` is (width, height)."""
    img = Image.fromarray(mask.astype(np.uint8), mode="L")
    return np.asarray(img.resize(tuple(size), Image.NEAREST))


def load_sample(entry: Frame, target_size=DEFAULT_SIZE):
    """Return ``(image [3,H,W] float32, mask [H,W] int64)`` at ``target_size`` (width, height)."""
    image = _open(entry.image_path).convert("RGB")
    if image.size != tuple(target_size):
        image = image.resize(tuple(target_size), Image.BILINEAR)
    mask = _read_mask(entry.mask_path)
    if mask.shape[::-1] != tuple(target_size):
        mask = resize_mask(mask, target_size)
    return normalize(image), torch.from_numpy(mask.astype(np.int64))


def make_batches(index, batch_size=8, shuffle=True, seed=0) -> Iterator[list]:
    """Yield lists of positions into ``index.frames``; the last batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = list(range(len(index)))
    if shuffle:
        random.Random(seed).shuffle(order)
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def load_batch(index, positions, target_size=DEFAULT_SIZE, workers=1):
    """Decode frames in parallel; result order follows ``positions``."""
    load = lambda p: load_sample(index.frames[p], target_size)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(load, positions))
    else:
        samples = [load(p) for p in positions]
    return torch.stack([s[0] for s in samples]), torch.stack([s[1] for s in samples])


def iter_batches(index, batch_size=8, shuffle=False, seed=0, target_size=DEFAULT_SIZE, workers=1):
    for positions in make_batches(index, batch_size, shuffle, seed):
        images, masks = load_batch(index, positions, target_size, workers)
        yield images, masks, positions


class SampleCache:
    """Decoded samples kept in memory, for small datasets revisited every epoch."""

    def __init__(self, index, target_size=DEFAULT_SIZE):
        self.index, self.target_size = index, tuple(target_size)
        self._items = {}

    def batch(self, positions):
        for p in positions:
            if p not in self._items:
                self._items[p] = load_sample(self.index.frames[p], self.target_size)
        return (torch.stack([self._items[p][0] for p in positions]),
                torch.stack([self._items[p][1] for p in positions]))


# -- toy data -----------------------------------------------------------------

TOY_COLORS = {
    1: (220, 40, 40),
    2: (40, 200, 60),
    3: (40, 80, 230),
    4: (235, 210, 30),
    5: (200, 50, 210),
    6: (30, 210, 210),
    7: (250, 250, 250),
}
_SHAPES = ("rectangle", "ellipse", "triangle")


def _draw_shape(draws, kind, box, fills):
    x0, y0, x1, y1 = box
    for draw, fill in zip(draws, fills):
        if kind == "rectangle":
            draw.rectangle(box, fill=fill)
        elif kind == "ellipse":
            draw.ellipse(box, fill=fill)
        else:
            draw.polygon([(x0, y1), ((x0 + x1) // 2, y0), (x1, y1)], fill=fill)


def synthesize_toy_dataset(root, n_frames=20, image_size=(64, 64), seed=0,
                           shapes_per_frame=2, frames_per_sequence=10, test_fraction=0.2):
    """Write a deterministic shapes-on-texture dataset in the EndoVis layout.

    Shapes cycle through class ids 1..7 across the whole set, so any 4 or
    more frames (at 2 shapes each) cover every foreground class. A manifest
    holding the class table and a held-out split (the trailing frames of
    each sequence) is written alongside.
    """
    w, h = image_size
    if w % 32 or h % 32:
        raise ValidationError(f"image_size must be divisible by 32, got {w}x{h}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    cls = 0
    test = []
    n_seq = math.ceil(n_frames / frames_per_sequence) if n_frames else 0
    for s in range(n_seq):
        seq = s + 1
        count = min(frames_per_sequence, n_frames - s * frames_per_sequence)
        (root / f"sequence_{seq}" / "images").mkdir(parents=True, exist_ok=True)
        (root / f"sequence_{seq}" / "masks").mkdir(parents=True, exist_ok=True)
        for fid in range(1, count + 1):
            base = np.array([150, 90, 90]) + rng.integers(-20, 21, size=3)
            tex = rng.normal(0, 12, size=(h, w, 1)) + rng.normal(0, 4, size=(h, w, 3))
            img = Image.fromarray(np.clip(base + tex, 0, 255).astype(np.uint8), "RGB")
            mask = Image.new("L", (w, h), 0)
            draws = (ImageDraw.Draw(img), ImageDraw.Draw(mask))
            for _ in range(shapes_per_frame):
                cid = cls % 7 + 1
                cls += 1
                sw = int(rng.integers(w // 4, w // 2 + 1))
                sh = int(rng.integers(h // 4, h // 2 + 1))
                x0 = int(rng.integers(0, w - sw))
                y0 = int(rng.integers(0, h - sh))
                kind = _SHAPES[int(rng.integers(len(_SHAPES)))]
                _draw_shape(draws, kind, (x0, y0, x0 + sw, y0 + sh), (TOY_COLORS[cid], cid))
            img.save(root / f"sequence_{seq}" / "images" / f"frame_{fid:03d}.png")
            mask.save(root / f"sequence_{seq}" / "masks" / f"frame_{fid:03d}.png")
        n_test = int(round(count * test_fraction))
        if n_test:
            test.append({"sequence": seq, "start": count - n_test + 1, "end": count})
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"class_names": list(CLASS_NAMES), "split": {"test": test, "seed": seed}}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return load_dataset(root)

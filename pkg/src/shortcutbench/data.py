"""Synthetic two-factor images with a controllable label co-occurrence.

``y1`` (the task) picks the glyph orientation: a horizontal bar for 0, a
vertical bar for 1. ``y2`` (the confounder) picks the stroke thickness, 1 px
or 3 px. Thickness changes the total ink by a factor of three and is
linearly decodable from raw pixels; orientation has to be read off the
spatial layout, so it is the harder of the two features.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEIGHT = WIDTH = 16

_MAGIC = b"CBD1"
_HEADER = struct.Struct("<4sIHH")


class FormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass(frozen=True)
class GlyphParams:
    """Rendering knobs. ``bar_length`` sets how hard orientation is to read."""

    height: int = HEIGHT
    width: int = WIDTH
    bar_length: int = 4
    jitter: int = 2
    noise: float = 0.1
    thin: int = 1
    thick: int = 3

    def __post_init__(self):
        if self.bar_length <= self.thick:
            raise ValueError("bar_length must exceed the thick stroke or orientation is lost")
        reach = max(self.bar_length, self.thick) // 2 + self.jitter + 1
        if min(self.height, self.width) // 2 < reach:
            raise ValueError("glyph does not fit the canvas at this jitter")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise amplitude must be in [0, 1]")


DEFAULT_GLYPH = GlyphParams()


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    y1: int
    y2: int
    id: int = 0


@dataclass(frozen=True)
class CoOccurrenceSpec:
    """Cell counts indexed ``counts[y2][y1]``."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        flat = [c for row in self.counts for c in row]
        if len(self.counts) != 2 or any(len(r) != 2 for r in self.counts):
            raise ValueError("co-occurrence spec must be 2 x 2")
        if any(int(c) != c or c < 0 for c in flat):
            raise ValueError(f"counts must be non-negative integers, got {self.counts}")
        if sum(flat) == 0:
            raise ValueError("co-occurrence spec is empty")

    @classmethod
    def symmetric(cls, diag: int, off: int) -> "CoOccurrenceSpec":
        return cls(((diag, off), (off, diag)))

    @classmethod
    def balanced(cls, total: int) -> "CoOccurrenceSpec":
        if total % 4:
            raise ValueError(f"balanced total must be divisible by 4, got {total}")
        return cls.symmetric(total // 4, total // 4)

    @property
    def total(self) -> int:
        return sum(c for row in self.counts for c in row)

    @property
    def diag_fraction(self) -> float:
        return (self.counts[0][0] + self.counts[1][1]) / self.total

    def inverted(self) -> "CoOccurrenceSpec":
        """Swap the ``y1`` columns: diagonal cells become off-diagonal."""
        (a, b), (c, d) = self.counts
        return CoOccurrenceSpec(((b, a), (d, c)))

    def scaled(self, total: int) -> "CoOccurrenceSpec":
        """Same cell proportions at a new total (largest-remainder rounding)."""
        flat = np.array([c for row in self.counts for c in row], dtype=float)
        raw = flat / flat.sum() * total
        out = np.floor(raw).astype(int)
        order = np.argsort(-(raw - out), kind="stable")
        out[order[: total - out.sum()]] += 1
        return CoOccurrenceSpec(((int(out[0]), int(out[1])), (int(out[2]), int(out[3]))))


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    y1: np.ndarray  # (N,) uint8
    y2: np.ndarray
    ids: np.ndarray  # (N,) int64
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            self.images = self.images.reshape(-1, HEIGHT, WIDTH)
        self.y1 = np.asarray(self.y1, dtype=np.uint8)
        self.y2 = np.asarray(self.y2, dtype=np.uint8)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.images)
        if not (len(self.y1) == len(self.y2) == len(self.ids) == n):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.y1[i]), int(self.y2[i]), int(self.ids[i]))

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.y1[index], self.y2[index], self.ids[index],
                       self.name if name is None else name)

    def cell_counts(self) -> np.ndarray:
        """Realised 2 x 2 counts, ``[y2][y1]``."""
        out = np.zeros((2, 2), dtype=np.int64)
        np.add.at(out, (self.y2.astype(int), self.y1.astype(int)), 1)
        return out

    def cell_index(self, y1: int, y2: int) -> np.ndarray:
        return np.flatnonzero((self.y1 == y1) & (self.y2 == y2))

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.images, other.images) and np.array_equal(self.y1, other.y1)
                and np.array_equal(self.y2, other.y2) and np.array_equal(self.ids, other.ids))


def concat(parts: list[Dataset], name: str = "") -> Dataset:
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.y1 for p in parts]),
                   np.concatenate([p.y2 for p in parts]),
                   np.concatenate([p.ids for p in parts]), name)


def _glyph(y1: int, y2: int, rng: np.random.Generator, g: GlyphParams) -> np.ndarray:
    img = np.zeros((g.height, g.width), dtype=np.float32)
    t = g.thick if y2 else g.thin
    cy = g.height // 2 + int(rng.integers(-g.jitter, g.jitter + 1))
    cx = g.width // 2 + int(rng.integers(-g.jitter, g.jitter + 1))
    half = g.bar_length // 2
    n = g.bar_length
    along = slice(cx - half, cx - half + n) if y1 == 0 else slice(cy - half, cy - half + n)
    across = slice(cy - t // 2, cy - t // 2 + t) if y1 == 0 else slice(cx - t // 2, cx - t // 2 + t)
    if y1 == 0:
        img[across, along] = 1.0
    else:
        img[along, across] = 1.0
    return img


def synth_image(y1: int, y2: int, noise_seed, id: int = 0,
                glyph: GlyphParams = DEFAULT_GLYPH) -> Sample:
    """Render one glyph. Same labels and seed give the same pixels."""
    if y1 not in (0, 1) or y2 not in (0, 1):
        raise ValueError(f"labels must be binary, got ({y1}, {y2})")
    rng = np.random.default_rng(noise_seed)
    img = _glyph(y1, y2, rng, glyph)
    img += rng.uniform(-glyph.noise, glyph.noise, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(img, y1, y2, id)


def sample_dataset(spec: CoOccurrenceSpec, seed, name: str = "", first_id: int = 0,
                   glyph: GlyphParams = DEFAULT_GLYPH) -> Dataset:
    """Exactly ``spec.counts`` samples per cell, in a seeded random order."""
    root = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed])
    labels = [(y1, y2) for y2 in (0, 1) for y1 in (0, 1) for _ in range(spec.counts[y2][y1])]
    n = len(labels)
    order = np.random.default_rng(root.spawn(1)[0]).permutation(n) if n else np.arange(0)
    labels = [labels[i] for i in order]
    seeds = root.spawn(n + 1)[1:]
    images = np.empty((n, glyph.height, glyph.width), dtype=np.float32)
    for i, ((y1, y2), s) in enumerate(zip(labels, seeds)):
        images[i] = synth_image(y1, y2, s, glyph=glyph).image
    y1 = np.array([a for a, _ in labels], dtype=np.uint8)
    y2 = np.array([b for _, b in labels], dtype=np.uint8)
    return Dataset(images, y1, y2, np.arange(first_id, first_id + n), name)


@dataclass
class SplitBundle:
    train: Dataset
    validation: Dataset
    inverted: Dataset
    balanced: Dataset
    specs: dict[str, CoOccurrenceSpec] = field(default_factory=dict)

    NAMES = ("train", "validation", "inverted", "balanced")

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES]


def make_split_bundle(train_spec: CoOccurrenceSpec, val_fraction: float = 0.2,
                      test_counts: tuple[int, int] = (800, 800), seed: int = 0,
                      glyph: GlyphParams = DEFAULT_GLYPH) -> SplitBundle:
    """Correlated train/validation pool plus inverted and balanced test sets.

    Validation is carved out of the correlated pool cell by cell. The test
    sets are freshly generated. Ids are renumbered to consecutive, disjoint
    ranges in the order train, validation, inverted, balanced.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_inv, n_bal = test_counts
    if n_inv <= 0 or n_bal <= 0:
        raise ValueError("test set sizes must be positive")
    ss = np.random.SeedSequence([seed, 0xB0])
    s_pool, s_split, s_inv, s_bal = ss.spawn(4)

    pool = sample_dataset(train_spec, [int(x) for x in s_pool.generate_state(2)], glyph=glyph)
    rng = np.random.default_rng(s_split)
    tr_idx, va_idx = [], []
    val_counts = [[0, 0], [0, 0]]
    for y2 in (0, 1):
        for y1 in (0, 1):
            idx = pool.cell_index(y1, y2)
            k = int(round(len(idx) * val_fraction))
            picked = rng.permutation(idx)
            va_idx.extend(picked[:k])
            tr_idx.extend(picked[k:])
            val_counts[y2][y1] = k
    if not tr_idx or not va_idx:
        raise ValueError("split leaves train or validation empty")
    # keep the pool's shuffled order inside each part
    train = pool.subset(np.sort(tr_idx), "train")
    validation = pool.subset(np.sort(va_idx), "validation")

    inv_spec = train_spec.inverted().scaled(n_inv)
    bal_spec = CoOccurrenceSpec.balanced(n_bal)
    inverted = sample_dataset(inv_spec, [int(x) for x in s_inv.generate_state(2)], "inverted", glyph=glyph)
    balanced = sample_dataset(bal_spec, [int(x) for x in s_bal.generate_state(2)], "balanced", glyph=glyph)

    start = 0
    for part in (train, validation, inverted, balanced):
        part.ids = np.arange(start, start + len(part), dtype=np.int64)
        start += len(part)
    specs = {
        "pool": train_spec,
        "train": CoOccurrenceSpec(tuple(tuple(int(c) for c in r) for r in train.cell_counts())),
        "validation": CoOccurrenceSpec(tuple(tuple(r) for r in val_counts)),
        "inverted": inv_spec,
        "balanced": bal_spec,
    }
    return SplitBundle(train, validation, inverted, balanced, specs)


def rebalance_oversample(train: Dataset, seed) -> Dataset:
    """Oversample every label cell, with replacement, up to the largest cell."""
    counts = train.cell_counts()
    if np.any(counts == 0):
        raise ValueError(f"cannot oversample an empty cell; counts [y2][y1] = {counts.tolist()}")
    target = int(counts.max())
    rng = np.random.default_rng(seed)
    extra = []
    for y2 in (0, 1):
        for y1 in (0, 1):
            idx = train.cell_index(y1, y2)
            if len(idx) < target:
                extra.append(rng.choice(idx, size=target - len(idx), replace=True))
    index = np.concatenate([np.arange(len(train)), *extra]) if extra else np.arange(len(train))
    return train.subset(index, train.name)


def pearson_labels(ds: Dataset) -> float:
    return float(np.corrcoef(ds.y1.astype(float), ds.y2.astype(float))[0, 1])


# -- CBD1 file format ----------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    n = len(ds)
    h, w = (ds.images.shape[1:] if n else (HEIGHT, WIDTH))
    rec = np.dtype([("y1", "u1"), ("y2", "u1"), ("px", "<f4", (h * w,))])
    body = np.empty(n, dtype=rec)
    if n:
        body["y1"] = ds.y1
        body["y2"] = ds.y2
        body["px"] = ds.images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, h, w))
        fh.write(body.tobytes())


def load_dataset(path, first_id: int = 0, name: str = "") -> Dataset:
    """Read a CBD1 file. Ids are not stored; they are numbered from ``first_id``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    rec = np.dtype([("y1", "u1"), ("y2", "u1"), ("px", "<f4", (h * w,))])
    expected = _HEADER.size + n * rec.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=rec, offset=_HEADER.size, count=n)
    if n and (body["y1"].max() > 1 or body["y2"].max() > 1):
        raise FormatError(f"{path}: labels must be binary")
    return Dataset(body["px"].reshape(n, h, w).copy(), body["y1"].copy(), body["y2"].copy(),
                   np.arange(first_id, first_id + n), name)

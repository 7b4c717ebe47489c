"""Dataset manifests, stratified splits, k-fold partitions and array loading."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .imageio import load_image, map_box, preprocess
from .tensor import Rng

POSITIVE_LABEL = "female"
CUE_FIELDS = ("cue_x", "cue_y", "cue_w", "cue_h")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    cue: tuple | None = None  # (x, y, w, h) in source-image pixels


def class_table(labels):
    """Sorted unique labels, with "female" moved to index 0 when present."""
    classes = sorted(set(labels))
    if POSITIVE_LABEL in classes:
        classes.remove(POSITIVE_LABEL)
        classes.insert(0, POSITIVE_LABEL)
    return classes


@dataclass
class DatasetManifest:
    entries: list
    root: str = "."
    classes: list = field(default=None)

    def __post_init__(self):
        self.entries = list(self.entries)
        seen = set()
        for e in self.entries:
            if not e.label:
                raise DataError(f"empty label for {e.path!r}")
            if e.path in seen:
                raise DataError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
        if self.classes is None:
            self.classes = class_table(e.label for e in self.entries)
        else:
            self.classes = list(self.classes)
            unknown = {e.label for e in self.entries} - set(self.classes)
            if unknown:
                raise DataError(f"labels missing from class table: {sorted(unknown)}")

    def __len__(self):
        return len(self.entries)

    def class_index(self, label):
        return self.classes.index(label)

    def label_indices(self):
        lookup = {c: i for i, c in enumerate(self.classes)}
        return [lookup[e.label] for e in self.entries]

    def counts(self):
        out = {c: 0 for c in self.classes}
        for e in self.entries:
            out[e.label] += 1
        return out

    def subset(self, indices):
        return DatasetManifest([self.entries[i] for i in indices], self.root, self.classes)

    def resolve(self, entry):
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)


def read_manifest(path):
    """Parse a manifest CSV; relative paths resolve against its directory."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not rows:
        raise DataError(f"manifest {path} is empty")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["path", "label"]:
        raise DataError(f"manifest header must start with path,label; got {header}")
    has_cue = tuple(header[2:6]) == CUE_FIELDS
    if len(header) > 2 and not has_cue:
        raise DataError(f"unexpected manifest columns {header[2:]}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        cue = None
        if has_cue and any(c.strip() for c in row[2:6]):
            try:
                cue = tuple(float(c) for c in row[2:6])
            except ValueError:
                raise DataError(f"{path}:{lineno}: cue box is not numeric") from None
        entries.append(ManifestEntry(row[0].strip(), row[1].strip(), cue))
    return DatasetManifest(entries, os.path.dirname(os.path.abspath(path)))


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_manifest(manifest, path):
    """Write ``manifest`` as CSV with paths relative to the file's directory."""
    out_dir = os.path.dirname(os.path.abspath(path))
    has_cue = any(e.cue is not None for e in manifest.entries)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", *CUE_FIELDS] if has_cue else ["path", "label"])
        for e in manifest.entries:
            rel = os.path.relpath(os.path.abspath(manifest.resolve(e)), out_dir)
            row = [rel.replace(os.sep, "/"), e.label]
            if has_cue:
                row += [_fmt(v) for v in e.cue] if e.cue is not None else [""] * 4
            w.writerow(row)


# ---------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    train: float = 0.64
    validation: float = 0.16
    test: float = 0.20
    seed: int = 0

    def validate(self):
        fracs = (self.train, self.validation, self.test)
        if any(not f > 0 for f in fracs):
            raise DataError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions sum to {sum(fracs)}, not 1")


def _by_class(manifest):
    groups = {c: [] for c in manifest.classes}
    for i, e in enumerate(manifest.entries):
        groups[e.label].append(i)
    return groups


def _cut(frac, count):
    # the epsilon keeps exact products such as 0.16 * 14000 from flooring low
    return int(math.floor(frac * count + 1e-9))


def stratified_split(manifest, spec=None):
    """Per-class seeded shuffle cut into (train, validation, test).

    Validation and test take floor(frac * count) items each; the
    remainder goes to train.  Each output keeps the input's order.
    """
    spec = spec or SplitSpec()
    spec.validate()
    rng = Rng(spec.seed)
    assign = np.zeros(len(manifest), dtype=np.int8)
    for ci, (label, idx) in enumerate(_by_class(manifest).items()):
        if not idx:
            continue
        if len(idx) < 3:
            raise DataError(f"class {label!r} has {len(idx)} samples; a 3-way split needs >= 3")
        order = np.asarray(idx)[rng.stream("split", ci).permutation(len(idx))]
        n_val = _cut(spec.validation, len(idx))
        n_test = _cut(spec.test, len(idx))
        assign[order[:n_val]] = 1
        assign[order[n_val:n_val + n_test]] = 2
    return tuple(manifest.subset(np.flatnonzero(assign == k)) for k in range(3))


def kfold(manifest, k=5, seed=0):
    """Stratified k-fold: each class's shuffle is dealt round-robin into folds.

    The dealing for each class starts where the previous class left off, so
    total fold sizes also differ by at most one.
    """
    if k < 2:
        raise DataError(f"k-fold needs k >= 2, got {k}")
    rng = Rng(seed)
    fold_of = np.zeros(len(manifest), dtype=np.int64)
    offset = 0
    for ci, (label, idx) in enumerate(_by_class(manifest).items()):
        if not idx:
            continue
        if len(idx) < k:
            raise DataError(f"class {label!r} has {len(idx)} samples; {k}-fold needs >= {k}")
        order = np.asarray(idx)[rng.stream("kfold", ci).permutation(len(idx))]
        fold_of[order] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    pairs = []
    for f in range(k):
        pairs.append((manifest.subset(np.flatnonzero(fold_of != f)),
                      manifest.subset(np.flatnonzero(fold_of == f))))
    return pairs


# ---------------------------------------------------------------- arrays


@dataclass
class ArrayDataset:
    """Preprocessed images as a (N, C, S, S) float64 array plus labels."""

    x: np.ndarray
    y: np.ndarray
    classes: list
    paths: list = field(default_factory=list)
    cues: list = field(default_factory=list)  # boxes in S x S coordinates, or None

    def __len__(self):
        return len(self.y)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        pick = lambda seq: [seq[i] for i in indices] if seq else []
        return ArrayDataset(self.x[indices], self.y[indices], self.classes,
                            pick(self.paths), pick(self.cues))


def load_dataset(manifest, resolution, channels=1, equalize=True):
    """Decode, preprocess and stack every manifest image."""
    if channels not in (1, 3):
        raise ShapeError(f"channels must be 1 or 3, got {channels}", axis="channel")
    n = len(manifest)
    x = np.empty((n, channels, resolution, resolution))
    cues = []
    for i, e in enumerate(manifest.entries):
        img = load_image(manifest.resolve(e))
        prep = preprocess(img, resolution, equalize)
        x[i] = prep.pixels / 255.0
        cues.append(None if e.cue is None else map_box(e.cue, img.width, img.height, resolution))
    y = np.asarray(manifest.label_indices(), dtype=np.int64)
    return ArrayDataset(x, y, list(manifest.classes), [e.path for e in manifest.entries], cues)

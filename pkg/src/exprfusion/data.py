"""Per-frame datasets: file formats, manifests, length-64 windows, batches and
synthetic fixtures.

File formats
------------
Feature file (binary, little-endian)::

    magic b"EXFFEAT\\0" | version u32 | rows u64 | cols u64 | rows*cols float64

``cols`` is 888 for precomputed backbone features, or 112*112*3 for raw
frames (HWC order, values in [0, 1]) consumed by the conv stub.

Label file (text): one integer code per line, ``-1`` marks an unlabeled frame.

Manifest (text): one video per line,
``video_id<TAB>frame_count<TAB>features_path<TAB>labels_path``, paths relative
to the manifest's directory. Lines starting with ``#`` are comments, except
the directives ``# exprfusion-manifest <version>`` and ``# split: <tag>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import ConfigError, DataError
from .metrics import IGNORE_INDEX, NUM_CLASSES
from .tensor import make_rng

SEQ_LEN = 64
FEATURE_DIM = 888
IMAGE_WIDTH = 112 * 112 * 3
FEATURE_MAGIC = b"EXFFEAT\0"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


class ExpressionLabel(IntEnum):
    NEUTRAL = 0
    ANGER = 1
    DISGUST = 2
    FEAR = 3
    HAPPINESS = 4
    SADNESS = 5
    SURPRISE = 6
    OTHER = 7


LABEL_NAMES = tuple(label.name.capitalize() for label in ExpressionLabel)

# 8 videos x 512 frames = 64 full windows
STANDARD_FIXTURE = {"num_videos": 8, "frames_per_video": 512, "noise": 0.1}


def write_features(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {arr.shape}")
    header = FEATURE_MAGIC + struct.pack("<IQQ", FEATURE_VERSION, *arr.shape)
    atomic_write_bytes(path, header + np.ascontiguousarray(arr).tobytes())


_HEADER_SIZE = len(FEATURE_MAGIC) + struct.calcsize("<IQQ")


def read_feature_header(path) -> tuple[int, int]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER_SIZE)
    except OSError as exc:
        raise DataError(f"{path}: cannot read feature file ({exc.strerror})") from exc
    if len(head) < _HEADER_SIZE or head[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    version, rows, cols = struct.unpack("<IQQ", head[len(FEATURE_MAGIC):])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    size = path.stat().st_size
    if size != _HEADER_SIZE + 8 * rows * cols:
        raise DataError(f"{path}: expected {rows}x{cols} values, file holds {(size - _HEADER_SIZE) // 8}")
    return rows, cols


def read_features(path) -> np.ndarray:
    rows, cols = read_feature_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER_SIZE)
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.astype(np.float64).reshape(rows, cols)


def write_labels(path, labels: Sequence[int]) -> None:
    atomic_write_text(path, "".join(f"{int(c)}\n" for c in labels))


def read_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read label file ({exc.strerror})") from exc
    out = np.empty(len(lines), dtype=np.int64)
    for i, line in enumerate(lines):
        try:
            code = int(line.strip())
        except ValueError:
            raise DataError(f"{path}:{i + 1}: malformed label {line!r}") from None
        if code != IGNORE_INDEX and not 0 <= code < NUM_CLASSES:
            raise DataError(f"{path}:{i + 1}: label {code} out of range")
        out[i] = code
    return out


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    frame_count: int
    features_path: Path
    labels_path: Path


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    path: Path | None = None
    width: int | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def total_frames(self) -> int:
        return sum(e.frame_count for e in self.entries)

    def read_video(self, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
        return read_features(entry.features_path), read_labels(entry.labels_path)

    def videos(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for e in self.entries:
            feats, labels = self.read_video(e)
            yield e.video_id, feats, labels


@dataclass(frozen=True)
class SampleRecord:
    video_id: str
    frame_index: int
    payload: np.ndarray
    label: int


def iter_records(manifest: DatasetManifest) -> Iterator[SampleRecord]:
    for video_id, feats, labels in manifest.videos():
        for i in range(len(labels)):
            yield SampleRecord(video_id, i, feats[i], int(labels[i]))


def load_manifest(path, widths: Sequence[int] | None = (FEATURE_DIM, IMAGE_WIDTH)) -> DatasetManifest:
    """Parse and eagerly validate a manifest and every file it references.

    ``widths`` lists the accepted feature-file widths; None accepts any width
    as long as every video agrees.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    manifest = DatasetManifest(path=path)
    seen = set()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("exprfusion-manifest"):
                version = body.split()[-1]
                if version != str(MANIFEST_VERSION):
                    raise DataError(f"{path}:{lineno}: unsupported manifest version {version}")
            elif body.startswith("split:"):
                manifest.split = body.split(":", 1)[1].strip()
            continue
        fields = raw.rstrip("\n").split("\t")
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        video_id, count, feat_rel, label_rel = fields
        try:
            frame_count = int(count)
        except ValueError:
            raise DataError(f"{path}:{lineno}: frame count {count!r} is not an integer") from None
        if frame_count < 1:
            raise DataError(f"{path}:{lineno}: frame count must be positive")
        if video_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate video id {video_id!r}")
        seen.add(video_id)
        feat_path = (path.parent / feat_rel).resolve()
        label_path = (path.parent / label_rel).resolve()
        for p in (feat_path, label_path):
            if not p.is_file():
                raise DataError(f"{path}:{lineno}: missing file {p}")
        rows, cols = read_feature_header(feat_path)
        if widths is not None and cols not in widths:
            raise DataError(f"{feat_path}: width {cols} not in accepted widths {tuple(widths)}")
        if manifest.width is not None and cols != manifest.width:
            raise DataError(f"{path}:{lineno}: width {cols} differs from earlier videos ({manifest.width})")
        manifest.width = cols
        n_labels = len(read_labels(label_path))
        if rows != frame_count or n_labels != frame_count:
            raise DataError(
                f"{path}:{lineno}: declared {frame_count} frames, features have {rows}, labels have {n_labels}"
            )
        manifest.entries.append(ManifestEntry(video_id, frame_count, feat_path, label_path))
    return manifest


def write_manifest(path, entries: Sequence[ManifestEntry], split: str = "train") -> None:
    path = Path(path)
    lines = [f"# exprfusion-manifest {MANIFEST_VERSION}", f"# split: {split}"]
    for e in entries:
        feat = Path(e.features_path)
        lab = Path(e.labels_path)
        feat = feat.relative_to(path.parent) if feat.is_absolute() and feat.is_relative_to(path.parent) else feat
        lab = lab.relative_to(path.parent) if lab.is_absolute() and lab.is_relative_to(path.parent) else lab
        lines.append(f"{e.video_id}\t{e.frame_count}\t{feat}\t{lab}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class FeatureSequence:
    """One window: ``SEQ_LEN`` frames of one video, zero-padded at the tail."""

    video_id: str
    start_frame: int
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    @property
    def real_frames(self) -> int:
        return int(self.mask.sum())


def window_video(video_id: str, features: np.ndarray, labels: np.ndarray,
                 seq_len: int = SEQ_LEN) -> list[FeatureSequence]:
    n, width = features.shape
    out = []
    for start in range(0, n, seq_len):
        stop = min(start + seq_len, n)
        real = stop - start
        feats = np.zeros((seq_len, width))
        labs = np.full(seq_len, IGNORE_INDEX, dtype=np.int64)
        mask = np.zeros(seq_len, dtype=bool)
        feats[:real] = features[start:stop]
        labs[:real] = labels[start:stop]
        mask[:real] = True
        out.append(FeatureSequence(video_id, start, feats, labs, mask))
    return out


def window_sequences(manifest: DatasetManifest, seq_len: int = SEQ_LEN) -> list[FeatureSequence]:
    """Non-overlapping windows per video, in manifest then frame order."""
    windows = []
    for video_id, feats, labels in manifest.videos():
        windows.extend(window_video(video_id, feats, labels, seq_len))
    return windows


def flatten_windows(windows: Sequence[FeatureSequence]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Invert windowing: real positions per video, concatenated in order."""
    parts: dict[str, list[FeatureSequence]] = {}
    for w in windows:
        parts.setdefault(w.video_id, []).append(w)
    out = {}
    for vid, ws in parts.items():
        ws = sorted(ws, key=lambda w: w.start_frame)
        out[vid] = (
            np.concatenate([w.features[w.mask] for w in ws]),
            np.concatenate([w.labels[w.mask] for w in ws]),
        )
    return out


@dataclass
class SequenceBatch:
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def stack_windows(windows: Sequence[FeatureSequence]) -> SequenceBatch:
    return SequenceBatch(
        np.stack([w.features for w in windows]),
        np.stack([w.labels for w in windows]),
        np.stack([w.mask for w in windows]),
    )


def make_batches(windows: Sequence[FeatureSequence], batch_size: int,
                 rng: np.random.Generator | None) -> Iterator[SequenceBatch]:
    """One epoch of batches; shuffled with ``rng`` unless it is None."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    for start in range(0, len(order), batch_size):
        yield stack_windows([windows[i] for i in order[start:start + batch_size]])


def batch_stream(windows: Sequence[FeatureSequence], batch_size: int,
                 rng: np.random.Generator, count: int) -> list[SequenceBatch]:
    """``count`` batches drawn from as many shuffled epochs as needed."""
    if not windows:
        raise DataError("no windows to draw batches from")
    out: list[SequenceBatch] = []
    while len(out) < count:
        for batch in make_batches(windows, batch_size, rng):
            out.append(batch)
            if len(out) == count:
                break
    return out


def _check_distribution(class_probs) -> np.ndarray:
    if class_probs is None:
        return np.full(NUM_CLASSES, 1.0 / NUM_CLASSES)
    p = np.asarray(class_probs, dtype=np.float64)
    if p.shape != (NUM_CLASSES,) or (p < 0).any() or not np.isfinite(p).all():
        raise ConfigError("class distribution must be 8 nonnegative finite weights")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"class distribution must sum to 1, got {p.sum()}")
    return p / p.sum()


def class_means(feature_dim: int = FEATURE_DIM, kind: str = "block", class_seed: int = 0) -> np.ndarray:
    """Per-class mean vectors.

    ``block``: class c is 1.0 on its own contiguous block of
    ``feature_dim // 8`` features and 0 elsewhere (nonnegative, mutually
    orthogonal). ``gaussian``: standard-normal vectors drawn from ``class_seed``.
    """
    if kind == "block":
        width = feature_dim // NUM_CLASSES
        if width < 1:
            raise ConfigError(f"block means need feature_dim >= {NUM_CLASSES}")
        means = np.zeros((NUM_CLASSES, feature_dim))
        for c in range(NUM_CLASSES):
            means[c, c * width:(c + 1) * width] = 1.0
        return means
    if kind == "gaussian":
        return make_rng(class_seed).standard_normal((NUM_CLASSES, feature_dim))
    raise ConfigError(f"unknown class-mean layout {kind!r}")


def generate_fixture(out_dir, class_probs=None, frames_per_video: int = 512, num_videos: int = 8,
                     noise: float = 0.1, seed: int = 0, means: str = "block", class_seed: int = 0,
                     feature_dim: int = FEATURE_DIM, split: str = "train",
                     name: str = "manifest.tsv") -> DatasetManifest:
    """Write a synthetic class-conditional Gaussian dataset and its manifest.

    Each frame's label is drawn from ``class_probs``; its features are that
    class's mean plus isotropic noise of standard deviation ``noise``.
    """
    p = _check_distribution(class_probs)
    if frames_per_video < 1 or num_videos < 0:
        raise ConfigError("frames_per_video must be positive and num_videos nonnegative")
    if noise < 0:
        raise ConfigError(f"noise must be nonnegative, got {noise}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_mu = class_means(feature_dim, means, class_seed)
    rng = make_rng(seed)
    entries = []
    for v in range(num_videos):
        video_id = f"{split}_{v:03d}"
        labels = rng.choice(NUM_CLASSES, size=frames_per_video, p=p)
        feats = class_mu[labels]
        if noise > 0:
            feats = feats + noise * rng.standard_normal(feats.shape)
        feat_path = out_dir / f"{video_id}.feat"
        label_path = out_dir / f"{video_id}.labels"
        write_features(feat_path, feats)
        write_labels(label_path, labels)
        entries.append(ManifestEntry(video_id, frames_per_video, feat_path, label_path))
    manifest_path = out_dir / name
    write_manifest(manifest_path, entries, split)
    return load_manifest(manifest_path, widths=None)

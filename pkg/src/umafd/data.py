"""Dataset ingestion, clip decoding, random RGB/depth pairing and a synthetic generator.

Dataset layout on disk::

    <root>/manifest.csv        clip_id,modality,split,label,frame_dir
    <root>/<frame_dir>/frame_00000.png, frame_00001.png, ...

RGB frames are 8-bit 3-channel PNGs, depth frames 16-bit single-channel PNGs.
"""

from __future__ import annotations

import csv
import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from umafd.errors import ConfigError, DataError, FileError, SchemaError

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("clip_id", "modality", "split", "label", "frame_dir")
FRAME_PATTERN = "frame_{:05d}.png"

DEFAULT_T = 8
DEFAULT_SIZE = 256


class Modality(str, enum.Enum):
    RGB = "rgb"
    DEPTH = "depth"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    modality: Modality
    split: Split
    label: int | None
    frame_dir: Path

    def __post_init__(self):
        if self.label is None and (self.modality is Modality.RGB or self.split is Split.TEST):
            raise SchemaError(f"clip {self.clip_id!r}: label required for {self.modality.value} {self.split.value}")
        if self.label not in (None, 0, 1):
            raise SchemaError(f"clip {self.clip_id!r}: label must be 0 or 1, got {self.label!r}")


class ClipTensor:
    """A (3, T, H, W) clip in [0, 1], optionally decoded on first access."""

    def __init__(self, data=None, modality=Modality.RGB, label=None, loader=None, record=None):
        if data is None and loader is None:
            raise ValueError("ClipTensor needs data or a loader")
        self._data = data
        self._loader = loader
        self.modality = Modality(modality)
        self.label = label
        self.record = record

    @property
    def data(self) -> torch.Tensor:
        if self._data is None:
            self._data = self._loader()
        return self._data

    @property
    def loaded(self) -> bool:
        return self._data is not None

    def __repr__(self):
        shape = tuple(self._data.shape) if self._data is not None else "lazy"
        return f"ClipTensor({self.modality.value}, label={self.label}, shape={shape})"


@dataclass
class PairedBatch:
    rgb: ClipTensor
    depth: ClipTensor

    def __post_init__(self):
        if self.rgb.modality is not Modality.RGB or self.depth.modality is not Modality.DEPTH:
            raise DataError("PairedBatch needs one RGB clip and one depth clip")


@dataclass(frozen=True)
class SynthConfig:
    n_train_pairs: int = 200
    n_test_depth: int = 80
    T: int = DEFAULT_T
    H: int = 64
    W: int = 64
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_train_pairs <= 0 or self.n_test_depth <= 0:
            raise ConfigError("synthetic clip counts must be > 0")
        if min(self.T, self.H, self.W) < 8:
            raise ConfigError("synthetic dimensions must be >= 8")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")


# --------------------------------------------------------------------------- manifest


def _parse_enum(enum_cls, value, what, row_no):
    try:
        return enum_cls(value.strip().lower())
    except ValueError:
        raise SchemaError(f"manifest row {row_no}: unknown {what} {value!r}") from None


def load_manifest(root) -> list[ClipRecord]:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileError(f"missing manifest: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise SchemaError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        for row_no, row in enumerate(reader, start=2):
            modality = _parse_enum(Modality, row["modality"], "modality", row_no)
            split = _parse_enum(Split, row["split"], "split", row_no)
            raw = (row["label"] or "").strip()
            if raw not in ("", "0", "1"):
                raise SchemaError(f"manifest row {row_no}: label must be 0, 1 or empty, got {raw!r}")
            label = int(raw) if raw else None
            frame_dir = root / row["frame_dir"]
            if not frame_dir.is_dir():
                raise FileError(f"manifest row {row_no}: frame_dir does not exist: {frame_dir}")
            records.append(ClipRecord(row["clip_id"], modality, split, label, frame_dir))
    return records


def write_manifest(root, records: Iterable[ClipRecord]) -> Path:
    root = Path(root)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            rel = Path(os.path.relpath(rec.frame_dir, root)).as_posix() + "/"
            label = "" if rec.label is None else str(rec.label)
            writer.writerow([rec.clip_id, rec.modality.value, rec.split.value, label, rel])
    return path


def split_counts(records: Iterable[ClipRecord]) -> dict[tuple[str, str], int]:
    counts: dict[tuple[str, str], int] = {}
    for rec in records:
        key = (rec.split.value, rec.modality.value)
        counts[key] = counts.get(key, 0) + 1
    return counts


# --------------------------------------------------------------------------- decoding


def sample_indices(n_frames: int, T: int) -> list[int]:
    """Uniformly spaced frame indices; repeats the last frame when the clip is short."""
    if n_frames < 1:
        raise DataError("cannot sample from an empty clip")
    if n_frames < T:
        return list(range(n_frames)) + [n_frames - 1] * (T - n_frames)
    if T == 1:
        return [0]
    return [(i * (n_frames - 1)) // (T - 1) for i in range(T)]


def _list_frames(frame_dir: Path) -> list[Path]:
    if not frame_dir.is_dir():
        raise DataError(f"frame directory does not exist: {frame_dir}")
    frames = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() == ".png")
    if not frames:
        raise DataError(f"no frames in {frame_dir}")
    return frames


def _read_frame(path: Path, modality: Modality) -> np.ndarray:
    """Return an (C, h, w) float64 array scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if modality is Modality.RGB:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
                return arr.transpose(2, 0, 1)
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            return arr[None]
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"unreadable frame {path}: {exc}") from exc


def decode_clip(record: ClipRecord, T: int = DEFAULT_T, H: int = DEFAULT_SIZE, W: int = DEFAULT_SIZE) -> ClipTensor:
    frames = _list_frames(Path(record.frame_dir))
    idx = sample_indices(len(frames), T)
    cache: dict[int, np.ndarray] = {}
    stack = []
    for i in idx:
        if i not in cache:
            cache[i] = _read_frame(frames[i], record.modality)
        stack.append(cache[i])
    arr = torch.from_numpy(np.stack(stack, axis=1).astype(np.float32))  # (C, T, h, w)
    if arr.shape[-2:] != (H, W):
        arr = F.interpolate(arr, size=(H, W), mode="bilinear", align_corners=False)
    if arr.shape[0] == 1:
        arr = arr.expand(3, -1, -1, -1).contiguous()
    arr = arr.clamp_(0.0, 1.0)
    if not torch.isfinite(arr).all():
        raise DataError(f"non-finite values decoding {record.clip_id}")
    return ClipTensor(arr, record.modality, record.label, record=record)


def decode_many(records: Sequence[ClipRecord], T: int, H: int, W: int, workers: int = 0) -> list[ClipTensor]:
    """Decode clips, optionally in a thread pool; output order always matches input order."""
    fn = lambda r: decode_clip(r, T, H, W)  # noqa: E731
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, records))
    return [fn(r) for r in records]


@dataclass
class AccessAudit:
    depth_train_tensor_reads: int = 0
    depth_train_label_reads: int = 0


class ClipDataset:
    """Records plus a decode cache, with counters on depth-train tensor and label access."""

    def __init__(self, records: Sequence[ClipRecord], T=DEFAULT_T, H=DEFAULT_SIZE, W=DEFAULT_SIZE, root=None):
        self.records = list(records)
        self.T, self.H, self.W = T, H, W
        self.root = None if root is None else Path(root)
        self.audit = AccessAudit()
        self._cache: dict[str, torch.Tensor] = {}

    @classmethod
    def from_root(cls, root, T=DEFAULT_T, H=DEFAULT_SIZE, W=DEFAULT_SIZE):
        return cls(load_manifest(root), T, H, W, root=root)

    def select(self, modality: Modality, split: Split) -> list[ClipRecord]:
        return [r for r in self.records if r.modality is modality and r.split is split]

    @staticmethod
    def _is_depth_train(rec):
        return rec.modality is Modality.DEPTH and rec.split is Split.TRAIN

    def tensor(self, rec: ClipRecord) -> torch.Tensor:
        if self._is_depth_train(rec):
            self.audit.depth_train_tensor_reads += 1
        key = f"{rec.modality.value}/{rec.clip_id}"
        if key not in self._cache:
            self._cache[key] = decode_clip(rec, self.T, self.H, self.W).data
        return self._cache[key]

    def label(self, rec: ClipRecord) -> int | None:
        if self._is_depth_train(rec):
            self.audit.depth_train_label_reads += 1
        return rec.label

    def clip(self, rec: ClipRecord) -> ClipTensor:
        # depth-train labels never ride along on the tensor; use label() to read them
        label = None if self._is_depth_train(rec) else rec.label
        return ClipTensor(modality=rec.modality, label=label, loader=lambda: self.tensor(rec), record=rec)

    def preload(self, records: Sequence[ClipRecord], workers: int = 0) -> None:
        todo = [r for r in records if f"{r.modality.value}/{r.clip_id}" not in self._cache]
        for rec, ct in zip(todo, decode_many(todo, self.T, self.H, self.W, workers)):
            self._cache[f"{rec.modality.value}/{rec.clip_id}"] = ct.data


# --------------------------------------------------------------------------- pairing


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def make_pairs(
    rgb: Sequence[ClipRecord],
    depth: Sequence[ClipRecord],
    seed: int,
    source: ClipDataset | None = None,
) -> list[PairedBatch]:
    """Randomly pair RGB and depth records for one epoch of min(|rgb|, |depth|) batches.

    Each side is shuffled by its own permutation drawn from ``seed``.  Tensors
    are lazy: nothing is decoded until ``batch.rgb.data`` / ``batch.depth.data``
    is touched.
    """
    if not rgb or not depth:
        raise DataError("make_pairs needs at least one RGB and one depth record")
    for rec in rgb:
        if rec.label is None:
            raise DataError(f"RGB record {rec.clip_id!r} is unlabeled")
    rng = np.random.default_rng(seed)
    rgb_perm = rng.permutation(len(rgb))
    depth_perm = rng.permutation(len(depth))
    n = min(len(rgb), len(depth))

    def wrap(rec):
        if source is not None:
            return source.clip(rec)
        label = None if rec.modality is Modality.DEPTH and rec.split is Split.TRAIN else rec.label
        return ClipTensor(modality=rec.modality, label=label, loader=lambda: decode_clip(rec).data, record=rec)

    return [PairedBatch(wrap(rgb[rgb_perm[i]]), wrap(depth[depth_perm[i]])) for i in range(n)]


# --------------------------------------------------------------------------- synthetic data


@dataclass
class SynthScene:
    label: int
    kind: str  # "fall", "horizontal" or "static"
    centers: np.ndarray  # (T, 2) blob centre (row, col) per frame
    radius: float
    rgb_color: np.ndarray = field(repr=False)
    texture: np.ndarray = field(repr=False)  # (3, H, W)
    depth_near: float = 0.35
    depth_far: float = 0.8


def _blob(H, W, center, radius):
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return np.exp(-d2 / (2.0 * (radius / 1.5) ** 2))


def _texture(rng, H, W):
    rows = np.arange(H)[:, None] / H
    cols = np.arange(W)[None, :] / W
    fr, fc = rng.uniform(2.0, 6.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    pattern = 0.5 + 0.25 * np.sin(2 * np.pi * fr * rows + phase[0]) + 0.25 * np.sin(2 * np.pi * fc * cols + phase[1])
    tint = rng.uniform(0.1, 0.4, size=3)
    return tint[:, None, None] * pattern[None]  # max 0.4 < blob brightness


def make_scene(rng: np.random.Generator, label: int, T: int, H: int, W: int) -> SynthScene:
    radius = max(1.0, min(H, W) / 8.0)
    margin = radius + 1.0
    if label == 1:
        kind = "fall"
        disp = rng.uniform(0.3, 0.5) * H
        y0 = rng.uniform(margin, max(margin, H - margin - disp))
        y1 = min(y0 + disp, H - 1.0)
        x0 = x1 = rng.uniform(2 * margin, W - 2 * margin) if W > 4 * margin else W / 2
    else:
        kind = "horizontal" if rng.random() < 0.5 else "static"
        y0 = y1 = rng.uniform(2 * margin, H - 2 * margin) if H > 4 * margin else H / 2
        if kind == "horizontal":
            span = rng.uniform(0.3, 0.5) * W
            x0 = rng.uniform(margin, max(margin, W - margin - span))
            x1 = x0 + span
            if rng.random() < 0.5:
                x0, x1 = x1, x0
        else:
            x0 = x1 = rng.uniform(2 * margin, W - 2 * margin) if W > 4 * margin else W / 2
    t = np.linspace(0.0, 1.0, T)
    centers = np.stack([y0 + (y1 - y0) * t, x0 + (x1 - x0) * t], axis=1)
    return SynthScene(
        label=label,
        kind=kind,
        centers=centers,
        radius=radius,
        rgb_color=rng.uniform(0.75, 1.0, size=3),
        texture=_texture(rng, H, W),
        depth_near=float(rng.uniform(0.25, 0.45)),
        depth_far=0.8,
    )


def render_rgb(scene: SynthScene, H: int, W: int) -> np.ndarray:
    """(T, H, W, 3) float frames: coloured blob over a textured background."""
    frames = []
    for c in scene.centers:
        g = _blob(H, W, c, scene.radius)[None]
        img = scene.texture * (1.0 - g) + scene.rgb_color[:, None, None] * g
        frames.append(img.transpose(1, 2, 0))
    return np.stack(frames)


def render_depth(scene: SynthScene, H: int, W: int) -> np.ndarray:
    """(T, H, W) float frames: intensity proportional to distance, blob nearer than a flat background."""
    frames = []
    for c in scene.centers:
        g = _blob(H, W, c, scene.radius)
        frames.append(scene.depth_far * (1.0 - g) + scene.depth_near * g)
    return np.stack(frames)


def _noisy(frames, rng, noise_level):
    if noise_level > 0:
        frames = frames + rng.normal(0.0, noise_level, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def _write_frames(frame_dir: Path, frames: np.ndarray, modality: Modality) -> None:
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        if modality is Modality.RGB:
            img = Image.fromarray(np.round(f * 255.0).astype(np.uint8), mode="RGB")
        else:
            img = Image.fromarray(np.round(f * 65535.0).astype(np.uint16))
        img.save(frame_dir / FRAME_PATTERN.format(i))


def _balanced_labels(rng, n):
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    rng.shuffle(labels)
    return labels.tolist()


def synth_generate(cfg: SynthConfig, out) -> Path:
    """Render a paired-modality dataset under ``out`` and return the root."""
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise FileError(f"cannot write dataset to {root}: {exc}") from exc

    rng = np.random.default_rng(cfg.seed)
    T, H, W = cfg.T, cfg.H, cfg.W
    records = []
    try:
        for i, label in enumerate(_balanced_labels(rng, cfg.n_train_pairs)):
            scene = make_scene(rng, label, T, H, W)
            for modality, frames in (
                (Modality.RGB, render_rgb(scene, H, W)),
                (Modality.DEPTH, render_depth(scene, H, W)),
            ):
                clip_id = f"s{i:05d}_{modality.value}"
                frame_dir = root / "train" / modality.value / clip_id
                _write_frames(frame_dir, _noisy(frames, rng, cfg.noise_level), modality)
                records.append(ClipRecord(clip_id, modality, Split.TRAIN, label, frame_dir))
        for i, label in enumerate(_balanced_labels(rng, cfg.n_test_depth)):
            scene = make_scene(rng, label, T, H, W)
            clip_id = f"t{i:05d}_depth"
            frame_dir = root / "test" / "depth" / clip_id
            _write_frames(frame_dir, _noisy(render_depth(scene, H, W), rng, cfg.noise_level), Modality.DEPTH)
            records.append(ClipRecord(clip_id, Modality.DEPTH, Split.TEST, label, frame_dir))
        write_manifest(root, records)
    except OSError as exc:
        raise FileError(f"failed writing synthetic dataset: {exc}") from exc
    return root


def vertical_displacement_rule(clip: np.ndarray, modality: Modality) -> int:
    """Hand-written fall rule: 1 iff the blob's weighted centroid moves down.

    ``clip`` is (3, T, H, W) in [0, 1].  Used to check the synthetic task is learnable.
    """
    gray = clip.mean(axis=0)
    if modality is Modality.RGB:
        weight = np.clip(gray - 0.5, 0.0, None)
    else:
        weight = np.clip(np.median(gray, axis=(1, 2), keepdims=True) - gray, 0.0, None)
    rows = np.arange(gray.shape[1])[None, :, None]
    mass = weight.sum(axis=(1, 2))
    cy = (weight * rows).sum(axis=(1, 2)) / np.maximum(mass, 1e-12)
    return int(cy[-1] - cy[0] > 0.5)


__all__ = [
    "AccessAudit",
    "ClipDataset",
    "ClipRecord",
    "ClipTensor",
    "Modality",
    "PairedBatch",
    "Split",
    "SynthConfig",
    "decode_clip",
    "decode_many",
    "epoch_seed",
    "load_manifest",
    "make_pairs",
    "sample_indices",
    "synth_generate",
    "vertical_displacement_rule",
    "write_manifest",
]

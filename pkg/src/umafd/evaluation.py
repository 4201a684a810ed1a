"""Metrics, the three experimental protocols, the V-01..V-06 ablation ladder and embedding export."""

from __future__ import annotations

import csv
import enum
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from umafd.data import ClipDataset, Modality, Split
from umafd.errors import DataError, ShapeError
from umafd.losses import LOSS_NAMES, WeightMode
from umafd.trainer import TrainConfig, fit, load_checkpoint, read_meta

log = logging.getLogger(__name__)

THRESHOLD = 0.5
METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "auc")
REPORT_HEADER = ("protocol", "seed", *METRIC_FIELDS)
ABLATION_HEADER = ("stage", *METRIC_FIELDS)


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise DataError("no samples to evaluate")
    return s, y


def confusion(scores, labels, threshold: float = THRESHOLD) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with prediction positive iff score > threshold."""
    s, y = _as_arrays(scores, labels)
    pred = s > threshold
    pos = y == 1
    return (
        int(np.sum(pred & pos)),
        int(np.sum(pred & ~pos)),
        int(np.sum(~pred & ~pos)),
        int(np.sum(~pred & pos)),
    )


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Uses the Mann-Whitney rank form with mid-ranks for ties.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    undefined: tuple[str, ...] = ()

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_FIELDS]

    def table_row(self) -> str:
        """Percentages to two decimals, in table column order."""
        return " ".join(f"{100 * v:.2f}" for v in self.as_row())


def metrics(scores, labels, threshold: float = THRESHOLD) -> MetricsReport:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    total = tp + fp + tn + fn
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    try:
        area = auc(scores, labels)
    except DataError:
        undefined.append("auc")
        area = 0.0
    return MetricsReport((tp + tn) / total, precision, recall, f1, area, tp, fp, tn, fn, tuple(undefined))


# --------------------------------------------------------------------------- protocols


class Protocol(str, enum.Enum):
    BASELINE = "baseline"
    UMAFD = "umafd"
    SUPERVISED_TARGET = "supervised-target"


@dataclass
class ProtocolResult:
    protocol: Protocol
    metrics: MetricsReport
    seed: int
    config: dict = field(default_factory=dict)
    checkpoint: Path | None = None
    scores: np.ndarray | None = field(default=None, repr=False)


def protocol_train_config(protocol: Protocol, cfg: TrainConfig) -> TrainConfig:
    protocol = Protocol(protocol)
    if protocol is Protocol.BASELINE:
        return cfg.__class__(**{**_fields(cfg), "enabled_losses": frozenset({"cls"}), "depth_supervised": False})
    if protocol is Protocol.SUPERVISED_TARGET:
        return cfg.__class__(**{**_fields(cfg), "enabled_losses": frozenset({"cls"}), "depth_supervised": True})
    return cfg.__class__(**{**_fields(cfg), "depth_supervised": False})


def _fields(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def depth_test_scores(model, dataset: ClipDataset):
    test = sorted(dataset.select(Modality.DEPTH, Split.TEST), key=lambda r: r.clip_id)
    if not test:
        raise DataError("dataset has no depth test clips")
    clips = torch.stack([dataset.tensor(r) for r in test])
    return model.scores(clips).double().numpy(), np.array([r.label for r in test])


def evaluate_checkpoint(checkpoint, dataset: ClipDataset) -> MetricsReport:
    state = load_checkpoint(checkpoint)
    scores, labels = depth_test_scores(state.model, dataset)
    return metrics(scores, labels)


def run_protocol(protocol, dataset: ClipDataset, run_cfg, out_dir, init_from=None, resume: bool = True) -> ProtocolResult:
    """Train under one protocol and evaluate on the depth test split.

    ``run_cfg`` is a :class:`umafd.config.RunConfig`.
    """
    protocol = Protocol(protocol)
    tcfg = protocol_train_config(protocol, run_cfg.train)
    if protocol is Protocol.SUPERVISED_TARGET:
        missing = [r.clip_id for r in dataset.select(Modality.DEPTH, Split.TRAIN) if r.label is None]
        if missing:
            raise DataError(f"supervised-target needs depth training labels; {len(missing)} clips unlabeled (e.g. {missing[0]})")
    out_dir = Path(out_dir)
    result = fit(dataset, tcfg, out_dir, run_cfg.backbone, init_from=init_from, resume=resume)
    scores, labels = depth_test_scores(result.state.model if result.checkpoint.name == "ckpt_final.bin" else load_checkpoint(result.checkpoint).model, dataset)
    return ProtocolResult(protocol, metrics(scores, labels), tcfg.seed, tcfg.echo(), result.checkpoint, scores)


def write_report(path, results: Sequence[ProtocolResult], with_median: bool | None = None) -> Path:
    path = Path(path)
    with_median = len(results) > 1 if with_median is None else with_median
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in results:
            w.writerow([r.protocol.value, r.seed, *(repr(v) for v in r.metrics.as_row())])
        if with_median and results:
            med = [statistics.median(getattr(r.metrics, k) for r in results) for k in METRIC_FIELDS]
            w.writerow([results[0].protocol.value, "median", *(repr(v) for v in med)])
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- ablation

ABLATION_STAGES: tuple[tuple[str, tuple[str, ...], WeightMode], ...] = (
    ("V-01", ("cls",), WeightMode.FIXED),
    ("V-02", ("cls", "modality"), WeightMode.FIXED),
    ("V-03", ("cls", "modality", "pseudo"), WeightMode.FIXED),
    ("V-04", ("cls", "modality", "pseudo", "bridge"), WeightMode.FIXED),
    ("V-05", ("cls", "modality", "pseudo", "bridge", "triplet"), WeightMode.FIXED),
    ("V-06", ("cls", "modality", "pseudo", "bridge", "triplet"), WeightMode.ADAPTIVE),
)


@dataclass
class AblationRow:
    stage: str
    result: ProtocolResult
    enabled_losses: tuple[str, ...]
    weight_mode: WeightMode
    init_from: Path | None
    skipped: bool = False


def _stage_done(stage_dir: Path) -> Path | None:
    final = stage_dir / "ckpt_final.bin"
    if not final.exists():
        return None
    best = stage_dir / "ckpt_best.bin"
    return best if best.exists() else final


def ablation(dataset: ClipDataset, run_cfg, out_dir) -> list[AblationRow]:
    """Run the six-stage ladder; each stage starts from the previous stage's chosen checkpoint.

    Stages whose directory already holds a final checkpoint are evaluated, not retrained.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRow] = []
    prev: Path | None = None
    for stage, losses, mode in ABLATION_STAGES:
        stage_dir = out_dir / stage
        tcfg = run_cfg.train.__class__(
            **{**_fields(run_cfg.train), "enabled_losses": frozenset(losses), "weight_mode": mode, "depth_supervised": False}
        )
        done = _stage_done(stage_dir)
        if done is not None:
            log.info("%s: reusing %s", stage, done)
            state = load_checkpoint(done)
            scores, labels = depth_test_scores(state.model, dataset)
            echo = read_meta(done)["train"]
            result = ProtocolResult(Protocol.UMAFD if stage != "V-01" else Protocol.BASELINE, metrics(scores, labels), tcfg.seed, echo, done, scores)
            rows.append(AblationRow(stage, result, losses, mode, prev, skipped=True))
            prev = done
            continue
        log.info("%s: training with %s (%s weights)", stage, ",".join(losses), mode.value)
        fr = fit(dataset, tcfg, stage_dir, run_cfg.backbone, init_from=prev, resume=True)
        model = fr.state.model if fr.checkpoint.name == "ckpt_final.bin" else load_checkpoint(fr.checkpoint).model
        scores, labels = depth_test_scores(model, dataset)
        proto = Protocol.BASELINE if stage == "V-01" else Protocol.UMAFD
        result = ProtocolResult(proto, metrics(scores, labels), tcfg.seed, tcfg.echo(), fr.checkpoint, scores)
        rows.append(AblationRow(stage, result, losses, mode, prev))
        prev = fr.checkpoint
    return rows


def write_ablation(path, rows: Sequence[AblationRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.stage, *(repr(v) for v in r.result.metrics.as_row())])
    return path


# --------------------------------------------------------------------------- embeddings


def export_embeddings(checkpoint, dataset: ClipDataset, out) -> Path:
    """One CSV row per test clip, ordered by clip_id: clip_id, modality, label, e0..e{d-1}."""
    state = load_checkpoint(checkpoint)
    test = sorted((r for r in dataset.records if r.split is Split.TEST), key=lambda r: (r.clip_id, r.modality.value))
    if not test:
        raise DataError("dataset has no test clips to export")
    clips = torch.stack([dataset.tensor(r) for r in test])
    emb = state.model.embeddings(clips).double().numpy()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "modality", "label", *(f"e{i}" for i in range(emb.shape[1]))])
        for rec, vec in zip(test, emb):
            w.writerow([rec.clip_id, rec.modality.value, rec.label, *(repr(float(v)) for v in vec)])
    return out


__all__ = [
    "ABLATION_STAGES",
    "LOSS_NAMES",
    "MetricsReport",
    "Protocol",
    "ProtocolResult",
    "ablation",
    "auc",
    "confusion",
    "evaluate_checkpoint",
    "export_embeddings",
    "metrics",
    "run_protocol",
    "write_ablation",
    "write_report",
]

"""Training loop: pairing, forward, loss assembly, momentum SGD, XBM upkeep, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from umafd.backbone import BackboneConfig, forward_features
from umafd.data import ClipDataset, Modality, PairedBatch, Split, epoch_seed, make_pairs
from umafd.errors import ConfigError, DataError
from umafd.heads import loss_weights
from umafd.idm import bridge_loss
from umafd.losses import (
    LOSS_NAMES,
    LossBundle,
    LossWeights,
    WeightMode,
    cls_loss,
    modality_loss,
    pseudo_labels,
    pseudo_loss,
    total_loss,
    xbm_triplet_loss,
)
from umafd.model import UMAFDModel, build_model, parameter_checksum
from umafd.xbm import XBMEntry, XBMMemory

log = logging.getLogger(__name__)

LOG_HEADER = ["step", *LOSS_NAMES, "total", "w1", "w2", "w3", "w4", "w5", "pseudo_count"]
CKPT_PATTERN = "ckpt_epoch_{:03d}"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    base_lr: float = 1e-4
    lr_decay_epoch: int = 60
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    tau: float = 0.7
    margin: float = 0.3
    xbm_capacity: int = 128
    weight_mode: WeightMode = WeightMode.FIXED
    lambdas: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    enabled_losses: frozenset[str] = frozenset(LOSS_NAMES)
    seed: int = 0
    grl_lambda: float = 1.0
    val_fraction: float = 0.0
    depth_supervised: bool = False
    triplet_normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "enabled_losses", frozenset(self.enabled_losses))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        unknown = self.enabled_losses - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses: {sorted(unknown)}")
        if "cls" not in self.enabled_losses:
            raise ConfigError("the cls loss is always enabled")
        if not 0.5 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0.5, 1], got {self.tau}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.base_lr < 0:
            raise ConfigError("epochs and base_lr must be >= 0")
        if self.margin <= 0 or self.grl_lambda <= 0 or self.xbm_capacity <= 0:
            raise ConfigError("margin, grl_lambda and xbm_capacity must be > 0")
        if len(self.lambdas) != len(LOSS_NAMES) or min(self.lambdas) < 0:
            raise ConfigError("lambdas must be five non-negative numbers")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    @property
    def source_only(self) -> bool:
        """True when nothing but the RGB classification loss is trained."""
        return self.enabled_losses == {"cls"} and not self.depth_supervised

    def echo(self) -> dict:
        d = asdict(self)
        d["weight_mode"] = self.weight_mode.value
        d["enabled_losses"] = [n for n in LOSS_NAMES if n in self.enabled_losses]
        d["lambdas"] = list(self.lambdas)
        return d


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule; the product is formed in decimal so 1e-4 * 0.1 gives exactly 1e-5."""
    if not 0 <= epoch < max(cfg.epochs, 1):
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.lr_decay_epoch:
        return cfg.base_lr
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.lr_decay_factor)))


class MomentumSGD:
    """v <- m*v - lr*g ; theta <- theta + v.  Parameters without a gradient see g = 0."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v.mul_(self.momentum)
            if p.grad is not None:
                v.add_(p.grad, alpha=-lr)
            p.add_(v)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return [v.clone() for v in self.velocity]

    def load_state_dict(self, state):
        for v, s in zip(self.velocity, state):
            v.copy_(s)


@dataclass
class TrainState:
    model: UMAFDModel
    optimizer: MomentumSGD
    memory: XBMMemory
    epoch: int = 0  # next epoch to run
    step: int = 0
    label_source: Callable | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, bcfg: BackboneConfig, cfg: TrainConfig) -> "TrainState":
        model = build_model(bcfg, cfg.seed, cfg.grl_lambda)
        return cls(model, MomentumSGD(model.parameters(), cfg.momentum), XBMMemory(cfg.xbm_capacity))

    def checksum(self) -> str:
        return parameter_checksum(self.model)


class NonFiniteLossError(DataError):
    pass


def _label_tensor(label) -> torch.Tensor:
    if label is None:
        raise DataError("RGB clip without a label reached the classification loss")
    return torch.tensor([float(label)])


def compute_losses(batch: PairedBatch, state: TrainState, cfg: TrainConfig):
    """Forward pass and the five loss terms; returns (bundle, weights, entries_to_push)."""
    model = state.model
    enabled = cfg.enabled_losses
    depth = None if cfg.source_only else batch.depth.data
    feats = forward_features(model, batch.rgb.data, depth, use_idm="bridge" in enabled)
    zero = feats.emb_rgb.new_zeros(())
    bundle = LossBundle(zero, zero, zero, zero, zero)

    y_rgb = batch.rgb.label
    bundle.cls = cls_loss(model.classifier(feats.emb_rgb), _label_tensor(y_rgb))
    if cfg.source_only:
        return bundle, LossWeights(WeightMode.FIXED, torch.tensor(cfg.lambdas)), []

    s_depth = model.classifier(feats.emb_depth)
    if cfg.depth_supervised:
        y_depth = state.label_source(batch.depth.record) if state.label_source else batch.depth.label
        bundle.cls = bundle.cls + cls_loss(s_depth, _label_tensor(y_depth))

    mask, plabels = pseudo_labels(s_depth, cfg.tau)
    bundle.pseudo_count = int(mask.sum())
    if "pseudo" in enabled:
        bundle.pseudo = pseudo_loss(s_depth, cfg.tau)
    if "modality" in enabled:
        probs = model.modality(torch.cat([feats.emb_rgb, feats.emb_depth]))
        bundle.modality = modality_loss(probs, torch.tensor([1.0, 0.0]))
    if "bridge" in enabled:
        bundle.bridge = bridge_loss(feats.feat_rgb, feats.feat_depth, feats.feat_inter, feats.coeffs)

    entries = []
    if "triplet" in enabled:
        anchors = torch.cat([feats.emb_rgb, feats.emb_depth])
        labels = torch.tensor([int(y_rgb), int(plabels[0])])
        bundle.triplet = xbm_triplet_loss(
            anchors, labels, state.memory.snapshot(), cfg.margin, normalize=cfg.triplet_normalize
        )
        entries.append(XBMEntry.make(feats.emb_rgb[0], int(y_rgb), Modality.RGB, state.step))
        if plabels[0] >= 0:
            entries.append(XBMEntry.make(feats.emb_depth[0], int(plabels[0]), Modality.DEPTH, state.step))

    if cfg.weight_mode is WeightMode.ADAPTIVE:
        mean_emb = 0.5 * (feats.emb_rgb + feats.emb_depth)
        weights = LossWeights(WeightMode.ADAPTIVE, loss_weights(model.weighter, mean_emb)[0])
    else:
        weights = LossWeights(WeightMode.FIXED, torch.tensor(cfg.lambdas))
    return bundle, weights, entries


def train_step(batch: PairedBatch, state: TrainState, cfg: TrainConfig, lr: float | None = None):
    """One optimisation step on one paired batch.  Returns (state, bundle, weights)."""
    if lr is None:
        lr = lr_schedule(min(state.epoch, max(cfg.epochs - 1, 0)), cfg)
    bundle, weights, entries = compute_losses(batch, state, cfg)
    for name in LOSS_NAMES:
        if not torch.isfinite(getattr(bundle, name)):
            raise NonFiniteLossError(f"non-finite {name} loss at step {state.step}: {float(getattr(bundle, name).detach())}")
    total = total_loss(bundle, weights)
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step(lr)
    state.memory.push(entries)
    state.step += 1
    return state, bundle, weights


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path_stem: Path, meta: dict) -> Path:
    path_stem = Path(path_stem)
    blob = path_stem.with_name(path_stem.name + ".bin")
    payload = {
        "model": state.model.state_dict(),
        "velocity": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "memory": [(e.embedding, e.label, e.modality.value, e.step) for e in state.memory.snapshot()],
    }
    torch.save(payload, blob)
    meta = {**meta, "epoch": state.epoch, "step": state.step, "checksum": state.checksum()}
    blob.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return blob


def read_meta(blob) -> dict:
    return json.loads(Path(blob).with_suffix(".meta.json").read_text())


def load_checkpoint(blob, state: TrainState | None = None, bcfg: BackboneConfig | None = None) -> TrainState:
    blob = Path(blob)
    try:
        payload = torch.load(blob, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a grab-bag of types for corrupt files
        raise DataError(f"unreadable checkpoint {blob}: {exc}") from exc
    if state is None:
        meta = read_meta(blob)
        bcfg = bcfg or BackboneConfig(**meta["backbone"])
        tcfg = TrainConfig(**_train_kwargs(meta["train"]))
        state = TrainState.fresh(bcfg, tcfg)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["velocity"])
    state.epoch, state.step = payload["epoch"], payload["step"]
    state.memory.clear()
    state.memory.push(XBMEntry(e, lab, Modality(m), s) for e, lab, m, s in payload["memory"])
    return state


def _train_kwargs(echo: dict) -> dict:
    d = dict(echo)
    d["lambdas"] = tuple(d["lambdas"])
    d["enabled_losses"] = frozenset(d["enabled_losses"])
    return d


def _latest_epoch_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(out_dir.glob("ckpt_epoch_*.bin"))
    return found[-1] if found else None


# --------------------------------------------------------------------------- fit


def _write_log_rows(path: Path, rows, truncate_after: int | None = None) -> None:
    if truncate_after is not None and path.exists():
        with open(path, newline="") as fh:
            kept = [r for r in csv.reader(fh)][1:]
        kept = [r for r in kept if int(r[0]) < truncate_after]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            w.writerows(kept)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_HEADER)
        w.writerows(rows)


def log_row(step: int, bundle: LossBundle, weights: LossWeights) -> list:
    vals = [float(getattr(bundle, n).detach()) for n in LOSS_NAMES]
    w = [float(x) for x in weights.values.detach()]
    total = sum(a * b for a, b in zip(vals, w))
    return [step, *(repr(v) for v in vals), repr(total), *(repr(x) for x in w), bundle.pseudo_count]


def validation_split(records, fraction: float, seed: int):
    """Deterministically hold out ceil(fraction*n) RGB training records."""
    if fraction <= 0:
        return list(records), []
    n_val = max(1, math.ceil(fraction * len(records)))
    perm = np.random.default_rng([seed, 7919]).permutation(len(records))
    val_idx = set(perm[:n_val].tolist())
    return [r for i, r in enumerate(records) if i not in val_idx], [r for i, r in enumerate(records) if i in val_idx]


def accuracy_on(model: UMAFDModel, dataset: ClipDataset, records) -> float:
    if not records:
        return float("nan")
    clips = torch.stack([dataset.tensor(r) for r in records])
    scores = model.scores(clips)
    labels = torch.tensor([r.label for r in records])
    return float(((scores > 0.5).long() == labels).float().mean())


@dataclass
class FitResult:
    checkpoint: Path
    state: TrainState
    steps: int
    best_val: float | None = None


def fit(
    dataset: ClipDataset,
    cfg: TrainConfig,
    out_dir,
    bcfg: BackboneConfig = BackboneConfig(),
    init_from=None,
    resume: bool = True,
    stop_after_epoch: int | None = None,
    on_step: Callable | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs and return the checkpoint to evaluate.

    Writes ``ckpt_epoch_%03d.bin/.meta.json`` after every epoch, ``ckpt_final``
    at the end, ``ckpt_best`` when a validation split is configured, and the
    per-step ``train_log.csv``.  With ``resume`` an existing epoch checkpoint in
    ``out_dir`` is picked up and training continues after it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = dataset.select(Modality.RGB, Split.TRAIN)
    depth = dataset.select(Modality.DEPTH, Split.TRAIN)
    if not rgb:
        raise DataError("dataset has no RGB training clips")
    if not depth:
        raise DataError("dataset has no depth training clips")
    if any(r.label is None for r in rgb):
        raise DataError("every RGB training clip needs a label")
    if cfg.depth_supervised and any(dataset.label(r) is None for r in depth):
        raise DataError("supervised-target training needs labels on every depth training clip")
    train_rgb, val_rgb = validation_split(rgb, cfg.val_fraction, cfg.seed)

    meta = {"backbone": asdict(bcfg), "train": cfg.echo(), "seed": cfg.seed}
    state = TrainState.fresh(bcfg, cfg)
    state.label_source = dataset.label
    if init_from is not None:
        state.model.load_state_dict(load_checkpoint(init_from, bcfg=bcfg).model.state_dict())

    log_path = out_dir / "train_log.csv"
    latest = _latest_epoch_checkpoint(out_dir) if resume else None
    best_val = None
    if latest is not None:
        load_checkpoint(latest, state)
        best_val = read_meta(latest).get("best_val")
        _write_log_rows(log_path, [], truncate_after=state.step)
        log.info("resuming from %s (epoch %d, step %d)", latest.name, state.epoch, state.step)
    else:
        for stale in out_dir.glob("ckpt_*"):
            stale.unlink()
        if log_path.exists():
            log_path.unlink()

    if not cfg.source_only:
        dataset.preload(depth)
    dataset.preload(train_rgb)

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        lr = lr_schedule(epoch, cfg)
        state.memory.clear()
        rows = []
        for batch in make_pairs(train_rgb, depth, epoch_seed(cfg.seed, epoch), dataset):
            _, bundle, weights = train_step(batch, state, cfg, lr)
            rows.append(log_row(state.step - 1, bundle, weights))
            if on_step is not None:
                on_step(state, bundle, weights)
        state.epoch += 1
        _write_log_rows(log_path, rows)
        epoch_meta = dict(meta)
        if val_rgb:
            acc = accuracy_on(state.model, dataset, val_rgb)
            epoch_meta["val_accuracy"] = acc
            if best_val is None or acc > best_val:
                best_val = acc
                save_checkpoint(state, out_dir / "ckpt_best", {**epoch_meta, "best_val": best_val})
        epoch_meta["best_val"] = best_val
        save_checkpoint(state, out_dir / CKPT_PATTERN.format(epoch), epoch_meta)
        log.info("epoch %d/%d done (step %d)", epoch + 1, cfg.epochs, state.step)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            return FitResult(out_dir / (CKPT_PATTERN.format(epoch) + ".bin"), state, state.step, best_val)

    final = save_checkpoint(state, out_dir / "ckpt_final", {**meta, "best_val": best_val})
    chosen = out_dir / "ckpt_best.bin" if val_rgb and (out_dir / "ckpt_best.bin").exists() else final
    return FitResult(chosen, state, state.step, best_val)


def copy_checkpoint(src, dst_stem) -> Path:
    src = Path(src)
    dst = Path(dst_stem).with_suffix(".bin")
    shutil.copyfile(src, dst)
    shutil.copyfile(src.with_suffix(".meta.json"), dst.with_suffix(".meta.json"))
    return dst


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

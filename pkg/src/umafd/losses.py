"""The five loss terms and their fixed-weight / adaptive compositions.

Loss order everywhere: (cls, pseudo, modality, bridge, triplet).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from umafd.errors import ConfigError, DataError, ShapeError
from umafd.idm import bridge_loss  # noqa: F401  (re-exported: one of the five terms)
from umafd.xbm import stack_entries

LOSS_NAMES = ("cls", "pseudo", "modality", "bridge", "triplet")


def _bce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if probs.shape != targets.shape:
        raise ShapeError(f"scores {tuple(probs.shape)} and labels {tuple(targets.shape)} differ in shape")
    if probs.numel() == 0:
        raise DataError("cross-entropy over an empty batch")
    y = targets.to(probs.dtype)
    return -(y * torch.log(probs) + (1 - y) * torch.log1p(-probs)).mean()


def cls_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid scores against 0/1 labels."""
    return _bce(scores, torch.as_tensor(labels, device=scores.device))


def _check_tau(tau: float):
    if not 0.5 < tau <= 1.0:
        raise ConfigError(f"pseudo-label threshold tau must be in (0.5, 1], got {tau}")


def pseudo_labels(scores: torch.Tensor, tau: float):
    """Return (mask, labels): label 1 where score >= tau, 0 where score <= 1 - tau, -1 elsewhere."""
    _check_tau(tau)
    s = scores.detach()
    hi = s >= tau
    lo = s <= 1 - tau
    labels = torch.full(s.shape, -1, dtype=torch.long)
    labels[hi] = 1
    labels[lo] = 0
    return hi | lo, labels


def pseudo_loss(scores: torch.Tensor, tau: float) -> torch.Tensor:
    mask, labels = pseudo_labels(scores, tau)
    if not mask.any():
        return scores.new_zeros(())
    return _bce(scores[mask], labels[mask])


def modality_loss(probs_rgb: torch.Tensor, modality_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of P(RGB) against y_d (1 = RGB, 0 = depth)."""
    return _bce(probs_rgb, torch.as_tensor(modality_labels, device=probs_rgb.device))


def _pairwise_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def xbm_triplet_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    memory=(),
    margin: float = 0.3,
    include_batch: bool = True,
    normalize: bool = False,
) -> torch.Tensor:
    """Batch-hard triplet hinge of current anchors against memory (and the rest of the batch).

    Anchors with label < 0 (no pseudo label) are skipped.  For each anchor the
    hardest positive is the farthest same-label candidate and the hardest
    negative the nearest different-label candidate; the hinge is averaged over
    anchors that have both.
    """
    if margin <= 0:
        raise ConfigError(f"triplet margin must be > 0, got {margin}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if embeddings.dim() != 2 or labels.shape != embeddings.shape[:1]:
        raise ShapeError("xbm_triplet_loss expects (N, d) embeddings and (N,) labels")
    keep = labels >= 0
    anchors, a_labels = embeddings[keep], labels[keep]
    if anchors.shape[0] == 0:
        return embeddings.new_zeros(())

    if isinstance(memory, tuple) and len(memory) == 2 and isinstance(memory[0], torch.Tensor):
        mem_emb, mem_labels = memory
    else:
        mem_emb, mem_labels = stack_entries(list(memory), embeddings.shape[1], embeddings.dtype)
    mem_emb = mem_emb.to(embeddings.dtype).detach()
    if normalize:
        anchors = F.normalize(anchors, dim=1)
        mem_emb = F.normalize(mem_emb, dim=1)
    cand = [mem_emb]
    cand_labels = [mem_labels]
    n_mem = mem_emb.shape[0]
    if include_batch:
        cand.append(anchors)
        cand_labels.append(a_labels)
    cand, cand_labels = torch.cat(cand), torch.cat(cand_labels)
    if cand.shape[0] == 0:
        return embeddings.new_zeros(())

    dist = _pairwise_dist(anchors, cand)
    same = a_labels[:, None] == cand_labels[None, :]
    not_self = torch.ones_like(same)
    if include_batch:
        idx = torch.arange(anchors.shape[0])
        not_self[idx, n_mem + idx] = False
    pos_mask = same & not_self
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.any():
        return embeddings.new_zeros(())
    inf = torch.finfo(dist.dtype).max
    d_pos = torch.where(pos_mask, dist, torch.full_like(dist, -inf)).amax(1)
    d_neg = torch.where(neg_mask, dist, torch.full_like(dist, inf)).amin(1)
    hinge = torch.relu(d_pos - d_neg + margin)
    return hinge[valid].mean()


@dataclass
class LossBundle:
    cls: torch.Tensor
    pseudo: torch.Tensor
    modality: torch.Tensor
    bridge: torch.Tensor
    triplet: torch.Tensor
    pseudo_count: int = 0

    def as_vector(self) -> torch.Tensor:
        vals = [torch.as_tensor(getattr(self, n)) for n in LOSS_NAMES]
        dtype = vals[0].dtype
        for v in vals[1:]:
            dtype = torch.promote_types(dtype, v.dtype)
        return torch.stack([v.to(dtype) for v in vals])

    def values(self) -> dict[str, float]:
        return {n: float(torch.as_tensor(getattr(self, n)).detach()) for n in LOSS_NAMES}

    @classmethod
    def zeros(cls, like: torch.Tensor | None = None) -> "LossBundle":
        z = torch.zeros(()) if like is None else like.new_zeros(())
        return cls(*(z.clone() for _ in LOSS_NAMES))


class WeightMode(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


@dataclass
class LossWeights:
    mode: WeightMode
    values: torch.Tensor  # lambdas (FIXED) or P from the weight head (ADAPTIVE)

    def __post_init__(self):
        self.mode = WeightMode(self.mode)
        self.values = torch.as_tensor(self.values)
        if self.values.shape != (len(LOSS_NAMES),):
            raise ShapeError(f"loss weights must have {len(LOSS_NAMES)} entries")
        if self.mode is WeightMode.FIXED and (self.values < 0).any():
            raise ConfigError(f"fixed loss weights must be >= 0, got {self.values.tolist()}")

    @classmethod
    def fixed(cls, lambdas=(1.0, 1.0, 1.0, 1.0, 1.0)) -> "LossWeights":
        return cls(WeightMode.FIXED, torch.tensor(lambdas, dtype=torch.float64))


def total_loss(bundle: LossBundle, weights: LossWeights) -> torch.Tensor:
    vec = bundle.as_vector()
    return (vec * weights.values.to(vec.dtype)).sum()

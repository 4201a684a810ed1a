"""Label classifier, modality discriminator (behind a gradient reversal layer) and loss-weight head."""

from __future__ import annotations

import torch
from torch import nn

from umafd.errors import ConfigError, ShapeError

LOGIT_CLAMP = 15.0
N_LOSSES = 5


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl_apply(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam <= 0:
        raise ConfigError(f"GRL lambda must be > 0, got {lam}")
    return GradReverse.apply(x, lam)


def clamp_logits(logits: torch.Tensor) -> torch.Tensor:
    return logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def _check_embedding(emb: torch.Tensor, dim: int):
    if emb.shape[-1] != dim:
        raise ShapeError(f"embedding length {emb.shape[-1]} != embedding_dim {dim}")


def init_head(module: nn.Module, std: float = 0.01) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, std)
            nn.init.zeros_(m.bias)


class ClassifierHead(nn.Module):
    def __init__(self, embedding_dim: int):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.fc = nn.Linear(embedding_dim, 1)

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        _check_embedding(emb, self.embedding_dim)
        return clamp_logits(self.fc(emb).squeeze(-1))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(emb))


class ModalityHead(nn.Module):
    """Predicts P(modality = RGB); the GRL makes upstream features ascend its loss."""

    def __init__(self, embedding_dim: int, hidden: int | None = None, grl_lambda: float = 1.0):
        super().__init__()
        if grl_lambda <= 0:
            raise ConfigError(f"grl_lambda must be > 0, got {grl_lambda}")
        hidden = hidden or max(embedding_dim // 2, 1)
        self.embedding_dim = embedding_dim
        self.grl_lambda = grl_lambda
        self.net = nn.Sequential(nn.Linear(embedding_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        _check_embedding(emb, self.embedding_dim)
        return clamp_logits(self.net(grl_apply(emb, self.grl_lambda)).squeeze(-1))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(emb))


class WeightHead(nn.Module):
    def __init__(self, embedding_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(embedding_dim // 2, 1)
        self.embedding_dim = embedding_dim
        self.net = nn.Sequential(
            nn.Linear(embedding_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, N_LOSSES),
        )

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        _check_embedding(emb, self.embedding_dim)
        return torch.softmax(self.net(emb), dim=-1)


def classify(head: ClassifierHead, emb: torch.Tensor) -> torch.Tensor:
    return head(emb)


def discriminate_modality(head: ModalityHead, emb: torch.Tensor) -> torch.Tensor:
    return head(emb)


def loss_weights(head: WeightHead, emb: torch.Tensor) -> torch.Tensor:
    """Simplex weights for the five losses; ``emb`` is detached so the backbone is untouched."""
    return head(emb.detach())

"""The full network: shared backbone, IDM, and the three heads."""

from __future__ import annotations

import hashlib

import torch
from torch import nn

from umafd.backbone import BackboneConfig, Tiny3D
from umafd.heads import ClassifierHead, ModalityHead, WeightHead, init_head
from umafd.idm import IDM


class UMAFDModel(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), grl_lambda: float = 1.0):
        super().__init__()
        d = cfg.embedding_dim
        self.cfg = cfg
        self.backbone = Tiny3D(cfg)
        self.idm = IDM(self.backbone.hidden_channels)
        self.classifier = ClassifierHead(d)
        self.modality = ModalityHead(d, grl_lambda=grl_lambda)
        self.weighter = WeightHead(d)

    def reset_parameters(self) -> None:
        for m in self.backbone.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        init_head(self.classifier, std=self.cfg.head_init_std)
        init_head(self.modality, std=0.01)
        init_head(self.weighter, std=0.01)

    @torch.no_grad()
    def scores(self, clips: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
        """Fall probability for a stack of (N, 3, T, H, W) clips, RGB stream path only."""
        out = []
        for i in range(0, clips.shape[0], batch_size):
            x = clips[i : i + batch_size]
            out.append(self.classifier(self.backbone.embed(self.backbone.trunk(self.backbone.stem(x)))))
        return torch.cat(out) if out else torch.zeros(0)

    @torch.no_grad()
    def embeddings(self, clips: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
        out = []
        for i in range(0, clips.shape[0], batch_size):
            x = clips[i : i + batch_size]
            out.append(self.backbone.embed(self.backbone.trunk(self.backbone.stem(x))))
        return torch.cat(out)


def build_model(cfg: BackboneConfig, seed: int, grl_lambda: float = 1.0) -> UMAFDModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UMAFDModel(cfg, grl_lambda)
        model.reset_parameters()
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

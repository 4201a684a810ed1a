"""Shared 3D-convolutional feature extractor with an IDM insertion point after stage 1."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from umafd.errors import ConfigError, ShapeError


INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class BackboneConfig:
    stage1_channels: int = 16
    embedding_dim: int = 64
    n_stages: int = 3
    idm_enabled: bool = True
    head_init_std: float = 0.01

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if self.n_stages < 2:
            raise ConfigError("n_stages must be >= 2 (IDM sits between stage 1 and stage 2)")
        if self.head_init_std < 0:
            raise ConfigError("head_init_std must be >= 0")
        if self.stage1_channels < 2:
            raise ConfigError("stage1_channels must be >= 2")


class Tiny3D(nn.Module):
    """Reference backbone.

    Inputs in [0, 1] are centred by a fixed shift of 0.5 first.

    stage 1:      conv3d(k=3, stride (1,2,2)) + ReLU       -> hidden map F_h
    stages 2..n:  conv3d(k=3, stride (1,2,2)) + ReLU, channels doubling
    then global average pool and a linear projection to ``embedding_dim``.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.stage1_channels
        self.stage1 = nn.Sequential(nn.Conv3d(3, c, 3, stride=(1, 2, 2), padding=1), nn.ReLU())
        layers = []
        for _ in range(cfg.n_stages - 1):
            layers += [nn.Conv3d(c, 2 * c, 3, stride=(1, 2, 2), padding=1), nn.ReLU()]
            c *= 2
        self.stages = nn.Sequential(*layers)
        self.hidden_channels = cfg.stage1_channels
        self.out_channels = c
        self.proj = nn.Linear(c, cfg.embedding_dim)

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != 3:
            raise ShapeError(f"expected clips shaped (B, 3, T, H, W), got {tuple(x.shape)}")
        return self.stage1(x - INPUT_SHIFT)

    def trunk(self, fh: torch.Tensor) -> torch.Tensor:
        return self.stages(fh)

    def embed(self, fmap: torch.Tensor) -> torch.Tensor:
        return pooled_embedding(fmap, self.proj)


def pooled_embedding(fmap: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """Global spatio-temporal average of a (B, C, T, H, W) map followed by ``proj``."""
    if fmap.dim() != 5:
        raise ShapeError(f"pooled_embedding expects a 5-axis map, got {fmap.dim()} axes")
    if fmap.shape[1] != proj.in_features:
        raise ShapeError(f"feature map has {fmap.shape[1]} channels, projection expects {proj.in_features}")
    return proj(fmap.mean(dim=(2, 3, 4)))


@dataclass
class FeatureBundle:
    feat_rgb: torch.Tensor
    feat_depth: torch.Tensor | None
    emb_rgb: torch.Tensor
    emb_depth: torch.Tensor | None
    feat_inter: torch.Tensor | None = None
    emb_inter: torch.Tensor | None = None
    coeffs: torch.Tensor | None = None  # (B, 2): columns a_rgb, a_depth

    @property
    def n_streams(self) -> int:
        return sum(f is not None for f in (self.feat_rgb, self.feat_depth, self.feat_inter))


def _as_batch(x) -> torch.Tensor:
    data = getattr(x, "data", x)
    if not isinstance(data, torch.Tensor):
        raise ShapeError(f"expected a tensor, got {type(data).__name__}")
    return data.unsqueeze(0) if data.dim() == 4 else data


def forward_features(model, rgb, depth=None, use_idm: bool | None = None) -> FeatureBundle:
    """Run RGB, depth and (optionally) the intermediate stream through shared weights.

    ``model`` is anything with ``backbone`` (Tiny3D-like) and ``idm`` attributes.
    ``rgb`` / ``depth`` are ClipTensors or tensors shaped (3,T,H,W) or (B,3,T,H,W).
    With ``depth=None`` only the RGB stream is computed.
    """
    net = model.backbone
    if use_idm is None:
        use_idm = net.cfg.idm_enabled
    xr = _as_batch(rgb)
    if depth is None:
        fmap = net.trunk(net.stem(xr))
        return FeatureBundle(fmap, None, net.embed(fmap), None)

    xd = _as_batch(depth)
    if xr.shape != xd.shape:
        raise ShapeError(f"rgb {tuple(xr.shape)} and depth {tuple(xd.shape)} batches differ in shape")
    b = xr.shape[0]
    fh = net.stem(torch.cat([xr, xd]))
    fh_r, fh_d = fh[:b], fh[b:]
    coeffs = None
    if use_idm:
        fh_i, coeffs = model.idm(fh_r, fh_d)
        fh = torch.cat([fh, fh_i])
    fmap = net.trunk(fh)
    emb = net.embed(fmap)
    bundle = FeatureBundle(fmap[:b], fmap[b : 2 * b], emb[:b], emb[b : 2 * b])
    if use_idm:
        bundle.feat_inter, bundle.emb_inter, bundle.coeffs = fmap[2 * b :], emb[2 * b :], coeffs
    return bundle


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

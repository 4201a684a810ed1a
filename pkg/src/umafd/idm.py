"""Intermediate domain module and the bridge feature loss."""

from __future__ import annotations

import torch
from torch import nn

from umafd.errors import ShapeError


class IDM(nn.Module):
    """Learned convex mixture of RGB and depth hidden maps.

    descriptor(F) = [avgpool(F); maxpool(F)]            (2*C)
    A = softmax(MLP(FC(desc_rgb) + FC(desc_depth)))     (2,)   one FC shared by both modalities
    F_inter = a_rgb * F_rgb + a_depth * F_depth
    """

    def __init__(self, channels: int):
        super().__init__()
        half = max(channels // 2, 1)
        self.channels = channels
        self.fc = nn.Linear(2 * channels, channels)
        self.mlp = nn.Sequential(nn.Linear(channels, half), nn.ReLU(), nn.Linear(half, 2))

    @staticmethod
    def descriptor(fh: torch.Tensor) -> torch.Tensor:
        flat = fh.flatten(2)
        return torch.cat([flat.mean(dim=2), flat.amax(dim=2)], dim=1)

    def coefficients(self, fh_rgb: torch.Tensor, fh_depth: torch.Tensor) -> torch.Tensor:
        logits = self.mlp(self.fc(self.descriptor(fh_rgb)) + self.fc(self.descriptor(fh_depth)))
        return torch.softmax(logits, dim=1)

    def forward(self, fh_rgb: torch.Tensor, fh_depth: torch.Tensor):
        if fh_rgb.shape != fh_depth.shape:
            raise ShapeError(f"IDM inputs differ in shape: {tuple(fh_rgb.shape)} vs {tuple(fh_depth.shape)}")
        if fh_rgb.dim() < 3 or fh_rgb.shape[1] != self.channels:
            raise ShapeError(f"IDM expects (B, {self.channels}, ...) maps, got {tuple(fh_rgb.shape)}")
        coeffs = self.coefficients(fh_rgb, fh_depth)
        a_rgb = coeffs[:, 0].reshape(-1, *([1] * (fh_rgb.dim() - 1)))
        # algebraically a_rgb*F_r + a_depth*F_d; exact when F_r == F_d
        fh_inter = fh_depth + a_rgb * (fh_rgb - fh_depth)
        return fh_inter, coeffs


def idm_forward(idm: IDM, fh_rgb: torch.Tensor, fh_depth: torch.Tensor):
    return idm(fh_rgb, fh_depth)


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Per-sample Euclidean norm; exactly 0 (with 0 gradient) for an all-zero sample."""
    sq = v.pow(2).flatten(1).sum(dim=1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def bridge_loss(feat_rgb, feat_depth, feat_inter, coeffs, n: int | None = None) -> torch.Tensor:
    """(1/n) * sum_i sum_k a_i^k * ||F_i^k - F_i^inter||_2 over k in {rgb, depth}."""
    if not (feat_rgb.shape == feat_depth.shape == feat_inter.shape):
        raise ShapeError("bridge_loss needs three feature maps of one shape")
    b = feat_rgb.shape[0]
    if coeffs.shape != (b, 2):
        raise ShapeError(f"coeffs must be ({b}, 2), got {tuple(coeffs.shape)}")
    n = b if n is None else n
    d_rgb = _safe_norm(feat_rgb - feat_inter)
    d_depth = _safe_norm(feat_depth - feat_inter)
    return (coeffs[:, 0] * d_rgb + coeffs[:, 1] * d_depth).sum() / n

"""Tracking-by-detection head.

A small strided conv encoder produces a C-channel cell grid; a transformer
model predictor conditioned on two labeled reference frames emits a per-target
weight vector plus refined current-frame features; the weight vector scores
cells by dot product and a four-branch conv decoder regresses edge distances.
The box comes from the argmax cell.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import Box
from .config import Profile
from .errors import ShapeError


def sincos_positions(grid_h: int, grid_w: int, channels: int,
                     device=None) -> torch.Tensor:
    """Fixed 2D sin/cos position table, (grid_h*grid_w, channels)."""
    if channels % 4 != 0:
        raise ShapeError("position encoding needs channels divisible by 4")
    half = channels // 2
    freqs = torch.exp(
        torch.arange(0, half, 2, dtype=torch.float64) * (-math.log(100.0) / half)
    )
    ys, xs = torch.meshgrid(
        torch.arange(grid_h, dtype=torch.float64),
        torch.arange(grid_w, dtype=torch.float64),
        indexing="ij",
    )
    out = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        arg = coord[:, None] * freqs[None, :]
        out.append(torch.sin(arg))
        out.append(torch.cos(arg))
    table = torch.cat(out, dim=1).to(torch.float32)
    if device is not None:
        table = table.to(device)
    return table


class FrameEncoder(nn.Module):
    """Strided conv stack, total stride 14, receptive field 77 px.

    No normalization layers: keeps every output cell a pure function of its
    receptive field (and of that cell alone), which the locality property
    and batch independence both rely on.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.stem = nn.Conv2d(3, 32, kernel_size=7, stride=7)
        self.conv2 = nn.Conv2d(32, channels, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv4 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.stride = 14

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        if images.shape[-1] % self.stride or images.shape[-2] % self.stride:
            raise ShapeError(
                f"image size {tuple(images.shape[-2:])} not a multiple of stride {self.stride}"
            )
        x = F.relu(self.stem(images))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return self.conv4(x)


def label_stack(cls_map: torch.Tensor, reg_map: torch.Tensor,
                valid_mask: torch.Tensor) -> torch.Tensor:
    """(B,6,H,W) raw label planes: score map, masked edge distances, mask."""
    if cls_map.shape != valid_mask.shape or reg_map.shape[-2:] != cls_map.shape[-2:]:
        raise ShapeError("label plane grids disagree")
    m = valid_mask.to(reg_map.dtype)
    return torch.cat([cls_map.unsqueeze(1), reg_map * m.unsqueeze(1),
                      m.unsqueeze(1)], dim=1)


class LabelEncoder(nn.Module):
    """Lifts the 6 raw label planes to C channels for additive injection."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.proj = nn.Conv2d(6, channels, kernel_size=3, padding=1)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.dim() != 4 or labels.shape[1] != 6:
            raise ShapeError(f"expected (B,6,H,W) label planes, got {tuple(labels.shape)}")
        return self.proj(labels)


class ModelPredictor(nn.Module):
    """Transformer over [ref1 | ref2 | current | query] tokens.

    The query token's output is the per-target weight vector; the outputs at
    the current-frame positions are the refined current features.
    """

    def __init__(self, channels: int = 64, heads: int = 4, layers: int = 2):
        super().__init__()
        self.channels = channels
        layer = nn.TransformerEncoderLayer(
            d_model=channels, nhead=heads, dim_feedforward=4 * channels,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers,
                                             enable_nested_tensor=False)
        self.segment = nn.Parameter(torch.zeros(4, channels))
        self.query = nn.Parameter(torch.zeros(channels))
        nn.init.normal_(self.segment, std=0.02)
        nn.init.normal_(self.query, std=0.02)

    def forward(self, ref_feats: torch.Tensor, cur_feat: torch.Tensor):
        if ref_feats.dim() != 5 or ref_feats.shape[1] != 2:
            raise ShapeError(f"expected (B,2,C,H,W) references, got {tuple(ref_feats.shape)}")
        if cur_feat.shape != ref_feats[:, 0].shape:
            raise ShapeError("reference and current grids disagree")
        B, _, C, H, W = ref_feats.shape
        pos = sincos_positions(H, W, C, device=cur_feat.device).to(cur_feat.dtype)
        seg = self.segment.to(cur_feat.dtype)

        def tokens(feat, k):
            t = feat.flatten(2).transpose(1, 2)  # (B, HW, C)
            return t + pos.unsqueeze(0) + seg[k].view(1, 1, C)

        q = (self.query.to(cur_feat.dtype) + seg[3]).view(1, 1, C).expand(B, 1, C)
        seq = torch.cat(
            [tokens(ref_feats[:, 0], 0), tokens(ref_feats[:, 1], 1),
             tokens(cur_feat, 2), q], dim=1,
        )
        out = self.encoder(seq)
        omega = out[:, -1, :]
        z_cur = out[:, 2 * H * W: 3 * H * W, :].transpose(1, 2).reshape(B, C, H, W)
        return omega, z_cur


class RegDec(nn.Module):
    """Four independent conv branches, one per box edge, softplus outputs."""

    def __init__(self, channels: int = 64, hidden: int = 32):
        super().__init__()
        self.branches = nn.ModuleList()
        for _ in range(4):
            self.branches.append(nn.Sequential(
                nn.Conv2d(channels, hidden, kernel_size=3, padding=1),
                nn.ReLU(),
                nn.Conv2d(hidden, 1, kernel_size=3, padding=1),
            ))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softplus(torch.cat([b(x) for b in self.branches], dim=1))


def classify(omega: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Per-cell dot product of the target weights with the feature grid."""
    if omega.shape[-1] != z.shape[-3]:
        raise ShapeError(
            f"weight length {omega.shape[-1]} vs {z.shape[-3]} feature channels"
        )
    if omega.dim() == 1:
        return torch.einsum("c,chw->hw", omega, z)
    return torch.einsum("bc,bchw->bhw", omega, z)


def modulate(omega: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Score map broadcast back over the channels: the regression input."""
    p = classify(omega, z)
    return p.unsqueeze(-3) * z


def decode_box(cls_map: torch.Tensor, reg_map: torch.Tensor, stride: int):
    """Box at the argmax cell (ties: smallest row-major index) plus its score."""
    if cls_map.dim() != 2 or reg_map.shape != (4,) + tuple(cls_map.shape):
        raise ShapeError(
            f"cls {tuple(cls_map.shape)} and reg {tuple(reg_map.shape)} disagree"
        )
    H, W = cls_map.shape
    cls_map = cls_map.detach()
    reg_map = reg_map.detach()
    flat = int(torch.argmax(cls_map.reshape(-1)).item())
    i, j = divmod(flat, W)
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    l, t, r, b = (float(v) for v in reg_map[:, i, j])
    peak = float(cls_map[i, j])
    x0, x1 = cx - l * stride, cx + r * stride
    y0, y1 = cy - t * stride, cy + b * stride
    # softplus keeps extents positive; keep the function total on raw inputs
    if x1 <= x0:
        x1 = x0 + 1e-6
    if y1 <= y0:
        y1 = y0 + 1e-6
    return Box(x0, y0, x1, y1), peak


class TrackingHead(nn.Module):
    """Encoder + label encoder + predictor + regression decoder in one place.

    An optional linear tail on the weight vector (installed by pretraining)
    rides along; identity-shaped, it leaves shapes unchanged.
    """

    def __init__(self, profile: Profile):
        super().__init__()
        self.profile = profile
        self.encoder = FrameEncoder(profile.channels)
        self.label_encoder = LabelEncoder(profile.channels)
        self.predictor = ModelPredictor(profile.channels)
        self.regdec = RegDec(profile.channels)
        self.projnet = None

    def install_projnet(self, projnet: nn.Module) -> None:
        self.projnet = projnet

    def encode_frame(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def build_reference(self, feat: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != labels.shape[-2:]:
            raise ShapeError("feature and label grids disagree")
        return feat + self.label_encoder(labels)

    def predict(self, ref_feats: torch.Tensor, cur_feat: torch.Tensor):
        omega, z_cur = self.predictor(ref_feats, cur_feat)
        if self.projnet is not None:
            omega = self.projnet(omega)
        return omega, z_cur

    def head_outputs(self, omega: torch.Tensor, z: torch.Tensor):
        p = classify(omega, z)
        d = self.regdec(modulate(omega, z))
        return p, d

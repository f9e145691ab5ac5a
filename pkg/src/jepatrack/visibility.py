"""Occlusion-aware point tracking and visibility fusion.

A small iterative point tracker (frozen after its own supervised stage)
follows query points through an 8-frame window.  Trainable side modules
ride on top of it: a prior encoder injecting box knowledge into two window
frames, a ladder of light transformer blocks reading the tracker's
intermediate tokens, a visibility head classifying each point as
on-target-and-unoccluded, and an ensemble that folds per-point Gaussian
energy maps back into the tracking features.  The tracker's own weights
never receive gradients from this stage.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import Box
from .errors import DomainError, ShapeError
from .losses import hinge_cls_loss, reg_giou_loss
from .trackhead import classify, modulate, sincos_positions

log = logging.getLogger(__name__)

WINDOW = 8
LOCAL_OFFSETS = 7      # 7x7 correlation lattice
LOCAL_SPACING = 3.0    # px between lattice samples
GLOBAL_GRID = 9        # pooled full-frame correlation grid


def sample_query_points(box: Box, n: int, rng) -> torch.Tensor:
    """n points uniform inside the box, (n, 2) as (x, y) pixels."""
    if n < 1:
        raise DomainError(f"need at least one query point, got {n}")
    xs = rng.uniform(box.x0, box.x1, size=n)
    ys = rng.uniform(box.y0, box.y1, size=n)
    return torch.from_numpy(np.stack([xs, ys], axis=1)).float()


def sample_fmap(fmap: torch.Tensor, pts: torch.Tensor, stride: float) -> torch.Tensor:
    """Bilinear reads of a (C, h, w) map at pixel coordinates (..., 2)."""
    C, h, w = fmap.shape
    shape = pts.shape[:-1]
    flat = pts.reshape(1, 1, -1, 2).clone()
    # pixel -> cell coords -> normalized grid coords (align_corners=False)
    u = flat[..., 0] / stride - 0.5
    v = flat[..., 1] / stride - 0.5
    gx = (2.0 * u + 1.0) / w - 1.0
    gy = (2.0 * v + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(fmap.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out.reshape(C, -1).t().reshape(*shape, C)


class PointTrackerCore(nn.Module):
    """Iterative point tracker over an 8-frame window.

    Per (point, frame) tokens mix the point's appearance vector, a local
    7x7 correlation patch, a pooled full-frame correlation (so large hops
    between window slots stay findable), and coordinate/time encodings.
    A joint transformer over all point-frame tokens emits coordinate and
    appearance updates, applied for a fixed number of refinement passes.
    Carries its own visibility head, trained on plain line-of-sight
    visibility during its supervised stage.
    """

    def __init__(self, feat_dim: int = 32, token_dim: int = 64):
        super().__init__()
        self.feat_dim = feat_dim
        self.token_dim = token_dim
        self.stride = 2
        self.conv1 = nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, feat_dim, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(feat_dim, feat_dim, kernel_size=3, padding=1)

        n_local = LOCAL_OFFSETS * LOCAL_OFFSETS
        n_global = GLOBAL_GRID * GLOBAL_GRID
        self.token_in = nn.Linear(feat_dim + n_local + n_global + 4, token_dim)
        self.time_embed = nn.Parameter(torch.zeros(WINDOW, token_dim))
        nn.init.normal_(self.time_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=token_dim, nhead=4, dim_feedforward=2 * token_dim,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.mixer = nn.TransformerEncoder(layer, num_layers=2,
                                           enable_nested_tensor=False)
        self.coord_head = nn.Linear(token_dim, 2)
        self.appear_head = nn.Linear(token_dim, feat_dim)
        self.vis_mlp = nn.Sequential(
            nn.Linear(feat_dim, 32), nn.ReLU(), nn.Linear(32, 1),
        )
        offs = (torch.arange(LOCAL_OFFSETS) - LOCAL_OFFSETS // 2) * LOCAL_SPACING
        oy, ox = torch.meshgrid(offs, offs, indexing="ij")
        self.register_buffer("local_offsets",
                             torch.stack([ox.reshape(-1), oy.reshape(-1)], dim=1))

    def encode_maps(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected (T,3,H,W) frames, got {tuple(frames.shape)}")
        x = F.relu(self.conv1(frames))
        x = F.relu(self.conv2(x))
        return self.conv3(x)

    def _tokens(self, fmaps, coords, appear, image_size):
        T, P, _ = coords.shape
        pooled = F.adaptive_avg_pool2d(fmaps, GLOBAL_GRID)  # (T,F,g,g)
        scale = 1.0 / math.sqrt(self.feat_dim)
        feats = []
        for t in range(T):
            pts = coords[t].unsqueeze(1) + self.local_offsets.unsqueeze(0)  # (P,49,2)
            local = sample_fmap(fmaps[t], pts, self.stride)                 # (P,49,F)
            corr_l = torch.einsum("pkf,pf->pk", local, appear[t]) * scale
            glob = pooled[t].reshape(self.feat_dim, -1)                     # (F,81)
            corr_g = appear[t] @ glob * scale                               # (P,81)
            rel = (coords[t] - coords[0]) / image_size
            absn = coords[t] / image_size
            feats.append(torch.cat([appear[t], corr_l, corr_g, rel, absn], dim=1))
        tokens = self.token_in(torch.stack(feats))            # (T,P,D)
        tokens = tokens + self.time_embed[:T].unsqueeze(1)
        return tokens

    def refine_once(self, fmaps, coords, appear, image_size):
        T, P, _ = coords.shape
        tokens = self._tokens(fmaps, coords, appear, image_size)
        mixed = self.mixer(tokens.reshape(1, T * P, -1)).reshape(T, P, -1)
        d_coord = self.coord_head(mixed)
        d_appear = self.appear_head(mixed)
        return coords + d_coord, appear + d_appear

    def track(self, fmaps: torch.Tensor, seeds: torch.Tensor, iters: int,
              image_size: int) -> dict:
        """Refine seed points through the window for `iters` passes.

        Returns final coords (T,P,2), final appearance tokens (T,P,F), the
        per-pass token states for the ladder, and per-pass coords for
        training supervision.
        """
        if fmaps.shape[0] != WINDOW:
            raise ShapeError(f"window must hold {WINDOW} frames, got {fmaps.shape[0]}")
        if iters < 0:
            raise DomainError("iteration count must be non-negative")
        T = fmaps.shape[0]
        P = seeds.shape[0]
        q0 = sample_fmap(fmaps[0], seeds, self.stride)        # (P,F)
        appear = q0.unsqueeze(0).expand(T, P, self.feat_dim).contiguous()
        coords = seeds.unsqueeze(0).expand(T, P, 2).contiguous()
        token_states, coord_states = [], []
        for _ in range(iters):
            coords, appear = self.refine_once(fmaps, coords, appear, image_size)
            token_states.append(appear)
            coord_states.append(coords)
        return {
            "coords": coords,
            "tokens": appear,
            "token_states": token_states,
            "coord_states": coord_states,
            "seed_tokens": q0,
        }

    def visibility(self, tokens: torch.Tensor) -> torch.Tensor:
        """The tracker's own line-of-sight visibility probability."""
        return torch.sigmoid(self.vis_mlp(tokens)).squeeze(-1)


class PriorEncoder(nn.Module):
    """Lifts raw box-label planes onto the tracker's feature grid."""

    def __init__(self, feat_dim: int = 32):
        super().__init__()
        self.proj = nn.Conv2d(6, feat_dim, kernel_size=3, padding=1)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.dim() != 4 or labels.shape[1] != 6:
            raise ShapeError(f"expected (B,6,h,w) label planes, got {tuple(labels.shape)}")
        return self.proj(labels)


def inject_prior(fmaps: torch.Tensor, priors: dict, encoder: PriorEncoder) -> torch.Tensor:
    """Add encoded box priors to selected window frames; others untouched."""
    out = fmaps.clone()
    for idx, labels in priors.items():
        if labels.shape[-2:] != fmaps.shape[-2:]:
            raise ShapeError(
                f"prior grid {tuple(labels.shape[-2:])} vs feature grid "
                f"{tuple(fmaps.shape[-2:])}"
            )
        out[idx] = out[idx] + encoder(labels.unsqueeze(0))[0]
    return out


class LadderAdapter(nn.Module):
    """Side path over the tracker's per-pass token states.

    Each pass's tokens go through a shared light transformer, get reduced,
    and are summed; a zero-initialized mixer maps the sum back to token
    width, so at initialization the output equals the frozen tracker's own
    final tokens and training only ever adds a correction.
    """

    def __init__(self, feat_dim: int = 32, reduced: int = 16):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_model=feat_dim, nhead=4, dim_feedforward=2 * feat_dim,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.light = nn.TransformerEncoder(layer, num_layers=2,
                                           enable_nested_tensor=False)
        self.reduce = nn.Linear(feat_dim, reduced)
        self.mix = nn.Linear(reduced, feat_dim)
        nn.init.zeros_(self.mix.weight)
        nn.init.zeros_(self.mix.bias)

    def forward(self, token_states: list, final_tokens: torch.Tensor) -> torch.Tensor:
        if not token_states:
            raise DomainError("ladder needs at least one refinement pass")
        total = None
        for state in token_states:
            T, P, Fdim = state.shape
            refined = self.light(state.reshape(1, T * P, Fdim)).reshape(T, P, Fdim)
            part = self.reduce(refined)
            total = part if total is None else total + part
        return self.mix(total) + final_tokens


class VisibilityHead(nn.Module):
    """Object-aware per-point visibility: on the target and unoccluded."""

    def __init__(self, feat_dim: int = 32, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feat_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(tokens)).squeeze(-1)


def map_points_to_energy(coords: torch.Tensor, visible: torch.Tensor,
                         grid: int, stride: float, sigma: float = 1.0) -> torch.Tensor:
    """Per-point Gaussian maps on the head grid, (P, grid, grid).

    A visible point contributes a bump peaking at its cell; an invisible
    point contributes the complement (1 at distance, 0 at its cell).
    Coordinates outside the image are clamped to the border and logged.
    """
    if coords.dim() != 2 or coords.shape[1] != 2:
        raise ShapeError(f"expected (P,2) coords, got {tuple(coords.shape)}")
    if visible.shape != coords.shape[:1]:
        raise ShapeError("one visibility flag per point required")
    size = grid * stride
    outside = (coords < 0) | (coords >= size)
    if outside.any():
        log.debug("clamping %d point coordinates outside the image",
                  int(outside.any(dim=1).sum()))
    pts = coords.clamp(min=0.0, max=size - 1e-3)
    u = pts[:, 0] / stride - 0.5
    v = pts[:, 1] / stride - 0.5
    ii = torch.arange(grid, dtype=coords.dtype, device=coords.device)
    jj = torch.arange(grid, dtype=coords.dtype, device=coords.device)
    d2 = (ii.view(1, -1, 1) - v.view(-1, 1, 1)) ** 2 \
        + (jj.view(1, 1, -1) - u.view(-1, 1, 1)) ** 2
    bump = torch.exp(-d2 / (2.0 * sigma * sigma))
    # invisible channel is the literal complement of the visible one
    return torch.where(visible.view(-1, 1, 1), bump, 1.0 - bump)


class FusionNet(nn.Module):
    """Joint transformer over projected energy tokens and feature tokens."""

    def __init__(self, num_points: int, channels: int, heads: int = 4,
                 layers: int = 2):
        super().__init__()
        self.project = nn.Conv2d(num_points, channels, kernel_size=1)
        layer = nn.TransformerEncoderLayer(
            d_model=channels, nhead=heads, dim_feedforward=2 * channels,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers,
                                             enable_nested_tensor=False)
        self.segment = nn.Parameter(torch.zeros(2, channels))
        nn.init.normal_(self.segment, std=0.02)

    def forward(self, energy: torch.Tensor, z_cur: torch.Tensor) -> torch.Tensor:
        if energy.shape[-2:] != z_cur.shape[-2:]:
            raise ShapeError(
                f"energy grid {tuple(energy.shape[-2:])} vs feature grid "
                f"{tuple(z_cur.shape[-2:])}"
            )
        B, C, H, W = z_cur.shape
        e = self.project(energy)
        pos = sincos_positions(H, W, C, device=z_cur.device).to(z_cur.dtype)
        et = e.flatten(2).transpose(1, 2) + pos + self.segment[0]
        zt = z_cur.flatten(2).transpose(1, 2) + pos + self.segment[1]
        out = self.encoder(torch.cat([et, zt], dim=1))
        return out[:, : H * W].transpose(1, 2).reshape(B, C, H, W)


class EnsembleNet(nn.Module):
    """Residual combiner; zero-initialized so it starts as the identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Conv2d(2 * channels, channels, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=1),
        )
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, fused: torch.Tensor, z_cur: torch.Tensor) -> torch.Tensor:
        if fused.shape != z_cur.shape:
            raise ShapeError(
                f"fused {tuple(fused.shape)} vs features {tuple(z_cur.shape)}"
            )
        return z_cur + self.mlp(torch.cat([fused, z_cur], dim=1))


def weighted_total(components: dict, weights: dict) -> torch.Tensor:
    """Weighted sum over named loss components; reported parts sum to it."""
    total = None
    for name, value in components.items():
        term = weights[name] * value
        total = term if total is None else total + term
    return total


def dual_supervision_loss(omega, fused, refined, cls_target, reg_target,
                          reg_mask, regdec, weights: dict):
    """Localization supervision through both the energy-fused features and
    the refined features, each with its own classification/regression weight.

    weights keys: cls_refined, cls_fused, reg_refined, reg_fused.  Returns
    the tensor total for backprop plus a report whose per-component floats
    recombine to its "total" entry exactly.
    """
    p_fused = classify(omega, fused)
    p_refined = classify(omega, refined)
    d_fused = regdec(modulate(omega, fused))
    d_refined = regdec(modulate(omega, refined))
    components = {
        "cls_refined": hinge_cls_loss(p_refined, cls_target),
        "cls_fused": hinge_cls_loss(p_fused, cls_target),
        "reg_refined": reg_giou_loss(d_refined, reg_target, reg_mask),
        "reg_fused": reg_giou_loss(d_fused, reg_target, reg_mask),
    }
    total = weighted_total(components, weights)
    parts = {k: float(v.detach()) for k, v in components.items()}
    report = dict(parts)
    report["total"] = sum(weights[k] * parts[k] for k in parts)
    return total, report


class VisibilityModule(nn.Module):
    """Frozen point tracker plus all trainable side modules, in one bundle."""

    def __init__(self, num_points: int, channels: int, feat_dim: int = 32,
                 refine_iters: int = 4):
        super().__init__()
        self.core = PointTrackerCore(feat_dim)
        self.prior_encoder = PriorEncoder(feat_dim)
        self.ladder = LadderAdapter(feat_dim)
        self.vis_head = VisibilityHead(feat_dim)
        self.fusion = FusionNet(num_points, channels)
        self.ensemble = EnsembleNet(channels)
        self.refine_iters = refine_iters
        self.num_points = num_points

    def freeze_core(self) -> None:
        for p in self.core.parameters():
            p.requires_grad_(False)

    def adapter_modules(self) -> dict:
        return {
            "prior_encoder": self.prior_encoder,
            "ladder": self.ladder,
            "vis_head": self.vis_head,
            "fusion": self.fusion,
            "ensemble": self.ensemble,
        }

    def adapter_parameters(self):
        for m in self.adapter_modules().values():
            yield from m.parameters()

    def assess_window(self, frames: torch.Tensor, seeds: torch.Tensor,
                      priors: dict, image_size: int) -> dict:
        """Track seeds through the window and judge per-point visibility.

        priors maps window indices to (6,h,w) label planes at the tracker's
        grid.  Returns coords (T,P,2), visibility probabilities (T,P), and
        binary states at threshold 0.5.
        """
        fmaps = self.core.encode_maps(frames)
        if priors:
            fmaps = inject_prior(
                fmaps, {k: v for k, v in priors.items()}, self.prior_encoder
            )
        tracked = self.core.track(fmaps, seeds, self.refine_iters, image_size)
        if tracked["token_states"]:
            cond = self.ladder(tracked["token_states"], tracked["tokens"])
        else:
            cond = tracked["tokens"]
        vis_prob = self.vis_head(cond)
        return {
            "coords": tracked["coords"],
            "vis_prob": vis_prob,
            "vis_binary": vis_prob > 0.5,
            "tokens": tracked["tokens"],
            "token_states": tracked["token_states"],
            "coord_states": tracked["coord_states"],
            "core_vis_prob": self.core.visibility(tracked["tokens"]),
        }

    def fuse(self, z_cur: torch.Tensor, coords: torch.Tensor,
             visible: torch.Tensor, stride: float, sigma: float = 1.0):
        """Energy-map fusion for one frame; returns (fused, refined)."""
        grid = z_cur.shape[-1]
        energy = map_points_to_energy(coords, visible, grid, stride, sigma)
        e = energy.unsqueeze(0).to(z_cur.dtype)
        fused = self.fusion(e, z_cur)
        refined = self.ensemble(fused, z_cur)
        return fused, refined


def dump_point_tracks(coords: torch.Tensor, vis_prob: torch.Tensor,
                      frame_ids, path: str) -> None:
    """Per-frame per-point track dump: frame, point, x, y, visibility."""
    T, P, _ = coords.shape
    lines = ["frame,point,x,y,visible"]
    for t in range(T):
        for p in range(P):
            lines.append(
                f"{frame_ids[t]},{p},{coords[t, p, 0]:.3f},{coords[t, p, 1]:.3f},"
                f"{vis_prob[t, p]:.4f}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

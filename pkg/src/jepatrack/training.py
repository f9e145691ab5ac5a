"""Training stages on synthetic sequences.

Stage 0 trains the tracking head and the point tracker from scratch with
direct supervision.  The embedding-prediction stage then pretrains a copy
of the head's predictor against the frozen original (jepa module), after
which the head is fine-tuned with localization losses.  Stage 2 trains the
visibility-side adapters on replayed tracker windows while the point
tracker and the head stay frozen.
"""

from __future__ import annotations

import json
import time

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import Box
from .config import RunConfig
from .errors import DomainError
from .jepa import JepaData, parameter_digest
from .losses import hinge_cls_loss, reg_giou_loss
from .metrics import iou
from .runtime import box_label_planes
from .synthdata import SyntheticSequence, benchmark_set, mix_sequence
from .trackhead import TrackingHead, decode_box
from .visibility import (
    VisibilityModule,
    dual_supervision_loss,
    sample_query_points,
)

# conditioning slots inside an 8-frame training window
REF_SLOTS = (0, 4)
CUR_SLOT = 7

# desk-scale recipe constants (not part of the published configuration)
HEAD_CLS_WEIGHT = 100.0
POINT_VIS_WEIGHT = 10.0
POINT_PASS_DECAY = 0.8
VIS_BCE_WEIGHT = 20.0


# --------------------------------------------------------------------------
# window assembly


def _to_tensor(frame_u8: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frame_u8.astype(np.float32) / 255.0).permute(2, 0, 1)


def head_windows(sequences) -> list:
    """Non-overlapping 8-frame windows with (ref, ref, current) slots."""
    out = []
    for seq in sequences:
        for off in range(0, seq.num_frames - 7, 8):
            out.append({"seq": seq, "ids": tuple(off + s for s in
                                                 REF_SLOTS + (CUR_SLOT,))})
    if not out:
        raise DomainError("no sequences long enough for an 8-frame window")
    return out


def collate_head(windows, profile, cfg: RunConfig):
    refs_img, ref_labels, cur_img, cls_t, reg_t, mask_t = [], [], [], [], [], []
    g, s = profile.grid, profile.stride
    for w in windows:
        seq, (r1, r2, c) = w["seq"], w["ids"]
        refs_img.append(torch.stack([_to_tensor(seq.frames[r1]),
                                     _to_tensor(seq.frames[r2])]))
        ref_labels.append(torch.stack([
            box_label_planes(seq.box(r1), g, s, cfg.sigma_cls),
            box_label_planes(seq.box(r2), g, s, cfg.sigma_cls),
        ]))
        cur_img.append(_to_tensor(seq.frames[c]))
        planes = box_label_planes(seq.box(c), g, s, cfg.sigma_cls)
        cls_t.append(planes[0])
        reg_t.append(planes[1:5])
        mask_t.append(planes[5] > 0.5)
    return {
        "refs_img": torch.stack(refs_img),
        "ref_labels": torch.stack(ref_labels),
        "cur_img": torch.stack(cur_img),
        "cls": torch.stack(cls_t),
        "reg": torch.stack(reg_t),
        "mask": torch.stack(mask_t),
    }


def head_forward(head: TrackingHead, batch):
    B = batch["cur_img"].shape[0]
    flat_refs = batch["refs_img"].reshape(B * 2, *batch["refs_img"].shape[2:])
    flat_feats = head.encode_frame(flat_refs)
    flat_labels = batch["ref_labels"].reshape(B * 2, *batch["ref_labels"].shape[2:])
    ref_feats = head.build_reference(flat_feats, flat_labels)
    ref_feats = ref_feats.reshape(B, 2, *ref_feats.shape[1:])
    cur_feat = head.encode_frame(batch["cur_img"])
    omega, z_cur = head.predict(ref_feats, cur_feat)
    return head.head_outputs(omega, z_cur)


def head_loss(head: TrackingHead, batch, cfg: RunConfig):
    p, d = head_forward(head, batch)
    l_cls = hinge_cls_loss(p, batch["cls"], cfg.target_threshold)
    l_reg = reg_giou_loss(d, batch["reg"], batch["mask"])
    total = HEAD_CLS_WEIGHT * l_cls + l_reg
    return total, float(l_cls.detach()), float(l_reg.detach())


def holdout_box_iou(head: TrackingHead, windows, profile, cfg: RunConfig,
                    limit: int = 64) -> float:
    """Mean IoU of decoded boxes against ground truth on held-out windows."""
    head.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, min(limit, len(windows)), 8):
            chunk = windows[i: i + 8]
            batch = collate_head(chunk, profile, cfg)
            p, d = head_forward(head, batch)
            for b, w in enumerate(chunk):
                box, _ = decode_box(p[b], d[b], profile.stride)
                total += iou(box, w["seq"].box(w["ids"][2]))
                n += 1
    head.train()
    return total / max(n, 1)


def train_teacher_head(head: TrackingHead, sequences, cfg: RunConfig,
                       seed: int, log_path: str | None = None) -> dict:
    """Stage 0: supervised head training from scratch."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    profile = cfg.spec
    windows = head_windows(sequences)
    rng.shuffle(windows)
    n_hold = max(1, len(windows) // 10)
    hold, train = windows[:n_hold], windows[n_hold:]
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr_stage0)
    head.train()
    records = []
    start = time.time()
    for step in range(cfg.stage0_steps):
        idx = rng.choice(len(train), size=min(cfg.stage0_batch, len(train)),
                         replace=False)
        batch = collate_head([train[i] for i in idx], profile, cfg)
        loss, l_cls, l_reg = head_loss(head, batch, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.stage0_steps - 1:
            records.append({"step": step, "loss": float(loss.detach()),
                            "cls": l_cls, "reg": l_reg})
    report = {
        "stage": "stage0-head",
        "steps": cfg.stage0_steps,
        "final_loss": records[-1]["loss"] if records else None,
        "holdout_iou": holdout_box_iou(head, hold, profile, cfg),
        "seconds": time.time() - start,
        "records": records,
    }
    if log_path:
        with open(log_path, "w") as fh:
            json.dump(report, fh, indent=1)
    return report


# --------------------------------------------------------------------------
# point-tracker supervision


def replay_schedule(seq: SyntheticSequence, frame_step: int) -> list:
    """Window frame-id tuples as the online FIFO would commit them, with
    ground-truth-visibility-driven duplication."""
    fifo = [0] * 8
    out = [tuple(fifo)]
    last_unocc = 0
    for t in range(frame_step, seq.num_frames, frame_step):
        if seq.visibility[t] >= 0.5:
            fifo = fifo[1:] + [t]
            last_unocc = t
        else:
            fifo = fifo[1:] + [last_unocc]
        out.append(tuple(fifo))
    return out


def point_windows(sequences, frame_step: int) -> list:
    """Mix of consecutive windows and FIFO-replayed windows."""
    out = []
    for seq in sequences:
        if seq.num_frames >= 8:
            for off in range(0, seq.num_frames - 7, 8):
                out.append({"seq": seq, "ids": tuple(range(off, off + 8))})
        if seq.num_frames > frame_step:
            for ids in replay_schedule(seq, frame_step)[1:]:
                out.append({"seq": seq, "ids": ids})
    if not out:
        raise DomainError("no sequences usable as point-tracker windows")
    return out


def jittered_box(box: Box, image_size: int, rng) -> Box:
    """Noisy copy of a box, the way an online tracker's prediction drifts."""
    w, h = box.width, box.height
    dx = rng.uniform(-0.15, 0.15) * w
    dy = rng.uniform(-0.15, 0.15) * h
    sw = rng.uniform(0.85, 1.25)
    sh = rng.uniform(0.85, 1.25)
    cx, cy = box.center
    nw, nh = max(4.0, w * sw), max(4.0, h * sh)
    x0 = np.clip(cx + dx - nw / 2, 0, image_size - 4)
    y0 = np.clip(cy + dy - nh / 2, 0, image_size - 4)
    x1 = min(image_size, x0 + nw)
    y1 = min(image_size, y0 + nh)
    return Box(float(x0), float(y0), float(x1), float(y1))


def point_window_sample(window, num_points: int, rng):
    """Seeds plus ground-truth tracks for one window."""
    seq, ids = window["seq"], window["ids"]
    t0 = ids[0]
    seed_box = jittered_box(seq.box(t0), seq.image_size, rng)
    seeds = sample_query_points(seed_box, num_points, rng)
    tracks = seq.point_tracks(t0, seeds.numpy())
    sel = list(ids)
    frames = torch.stack([_to_tensor(seq.frames[t]) for t in sel])
    gt_pos = torch.from_numpy(tracks["positions"][sel]).float()
    gt_opt = torch.from_numpy(tracks["optical_visibility"][sel]).float()
    gt_obj = torch.from_numpy(tracks["object_visibility"][sel]).float()
    return {
        "frames": frames,
        "seeds": seeds,
        "gt_pos": gt_pos,
        "gt_opt": gt_opt,
        "gt_obj": gt_obj,
        "ids": ids,
        "seq": seq,
    }


def point_tracker_loss(core, sample, refine_iters: int, image_size: int):
    out = core.track(core.encode_maps(sample["frames"]), sample["seeds"],
                     refine_iters, image_size)
    coord_loss = torch.zeros(())
    M = len(out["coord_states"])
    for m, coords in enumerate(out["coord_states"]):
        weight = POINT_PASS_DECAY ** (M - 1 - m)
        coord_loss = coord_loss + weight * (coords - sample["gt_pos"]).abs().mean()
    vis_prob = core.visibility(out["tokens"])
    vis_loss = F.binary_cross_entropy(vis_prob.clamp(1e-6, 1 - 1e-6),
                                      sample["gt_opt"])
    return coord_loss + POINT_VIS_WEIGHT * vis_loss, out, float(vis_loss.detach())


def point_holdout_error(core, windows, cfg: RunConfig, image_size: int,
                        rng, limit: int = 32):
    """Final-pass coordinate error (px) and line-of-sight accuracy."""
    core.eval()
    errs, hits, total = [], 0, 0
    with torch.no_grad():
        for w in windows[:limit]:
            sample = point_window_sample(w, cfg.num_points, rng)
            out = core.track(core.encode_maps(sample["frames"]),
                             sample["seeds"], cfg.refine_iters, image_size)
            err = (out["coords"] - sample["gt_pos"]).norm(dim=-1)
            vis = sample["gt_opt"] > 0.5
            if vis.any():
                errs.append(float(err[vis].mean()))
            pred = core.visibility(out["tokens"]) > 0.5
            hits += int((pred == (sample["gt_opt"] > 0.5)).sum())
            total += pred.numel()
    core.train()
    return float(np.mean(errs)) if errs else float("nan"), hits / max(total, 1)


def train_point_tracker(core, sequences, cfg: RunConfig, seed: int,
                        log_path: str | None = None) -> dict:
    """Stage 0: supervise the point tracker on ground-truth tracks."""
    torch.manual_seed(seed + 1)
    rng = np.random.default_rng(seed + 1)
    image_size = cfg.spec.image_size
    windows = point_windows(sequences, cfg.frame_step)
    rng.shuffle(windows)
    n_hold = max(1, len(windows) // 10)
    hold, train = windows[:n_hold], windows[n_hold:]
    opt = torch.optim.AdamW(core.parameters(), lr=cfg.lr_point)
    core.train()
    records = []
    start = time.time()
    for step in range(cfg.point_steps):
        idx = rng.choice(len(train), size=min(cfg.point_batch, len(train)),
                         replace=False)
        losses, vis_losses = [], []
        opt.zero_grad()
        for i in idx:
            sample = point_window_sample(train[i], cfg.num_points, rng)
            loss, _, v = point_tracker_loss(core, sample, cfg.refine_iters,
                                            image_size)
            losses.append(loss)
            vis_losses.append(v)
        total = torch.stack(losses).mean()
        total.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.point_steps - 1:
            records.append({"step": step, "loss": float(total.detach()),
                            "vis_bce": float(np.mean(vis_losses))})
    err, acc = point_holdout_error(core, hold, cfg, image_size,
                                   np.random.default_rng(seed + 2))
    report = {
        "stage": "stage0-points",
        "steps": cfg.point_steps,
        "final_loss": records[-1]["loss"] if records else None,
        "holdout_px_error": err,
        "holdout_vis_accuracy": acc,
        "seconds": time.time() - start,
        "records": records,
    }
    if log_path:
        with open(log_path, "w") as fh:
            json.dump(report, fh, indent=1)
    return report


# --------------------------------------------------------------------------
# embedding-prediction data


def precompute_jepa_windows(head: TrackingHead, cfg: RunConfig,
                            seed: int) -> JepaData:
    """Frozen-encoder features for pretraining windows, streamed one
    sequence at a time so frame buffers never accumulate."""
    profile = cfg.spec
    g, s = profile.grid, profile.stride
    head.eval()
    refs_out, curs_out = [], []
    with torch.no_grad():
        for i in range(cfg.jepa_sequences):
            seq = mix_sequence(profile.image_size, i, seed)
            ids = tuple(REF_SLOTS) + (CUR_SLOT,)
            imgs = torch.stack([_to_tensor(seq.frames[t]) for t in ids])
            feats = head.encode_frame(imgs)
            labels = torch.stack([
                box_label_planes(seq.box(ids[0]), g, s, cfg.sigma_cls),
                box_label_planes(seq.box(ids[1]), g, s, cfg.sigma_cls),
            ])
            ref = head.build_reference(feats[:2], labels)
            refs_out.append(ref)
            curs_out.append(feats[2])
            seq.release_frames()
    return JepaData(torch.stack(refs_out), torch.stack(curs_out),
                    cfg.jepa_holdout, seed)


# --------------------------------------------------------------------------
# head fine-tuning (shared by pretrained and baseline rows)


def finetune_head(head: TrackingHead, sequences, cfg: RunConfig, seed: int,
                  steps: int | None = None) -> dict:
    """Localization fine-tune of predictor + box decoder; the encoder and
    label encoder stay frozen so the pretrained feature space persists."""
    torch.manual_seed(seed + 3)
    rng = np.random.default_rng(seed + 3)
    profile = cfg.spec
    windows = head_windows(sequences)
    rng.shuffle(windows)
    n_hold = max(1, len(windows) // 10)
    hold, train = windows[:n_hold], windows[n_hold:]
    for p in head.encoder.parameters():
        p.requires_grad_(False)
    for p in head.label_encoder.parameters():
        p.requires_grad_(False)
    params = [p for p in head.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_head)
    head.train()
    n_steps = cfg.head_steps if steps is None else steps
    records = []
    start = time.time()
    for step in range(n_steps):
        idx = rng.choice(len(train), size=min(cfg.head_batch, len(train)),
                         replace=False)
        batch = collate_head([train[i] for i in idx], profile, cfg)
        loss, l_cls, l_reg = head_loss(head, batch, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == n_steps - 1:
            records.append({"step": step, "loss": float(loss.detach()),
                            "cls": l_cls, "reg": l_reg})
    for p in head.encoder.parameters():
        p.requires_grad_(True)
    for p in head.label_encoder.parameters():
        p.requires_grad_(True)
    return {
        "stage": "head-finetune",
        "steps": n_steps,
        "final_loss": records[-1]["loss"] if records else None,
        "holdout_iou": holdout_box_iou(head, hold, profile, cfg),
        "seconds": time.time() - start,
        "records": records,
    }


# --------------------------------------------------------------------------
# stage 2: visibility adapters


def dual_weights(cfg: RunConfig) -> dict:
    return {
        "cls_refined": cfg.occ_w_cls_track,
        "cls_fused": cfg.occ_w_cls_point,
        "reg_refined": cfg.occ_w_reg_track,
        "reg_fused": cfg.occ_w_reg_point,
    }


def visibility_window_loss(vismod: VisibilityModule, head: TrackingHead,
                           sample, cfg: RunConfig):
    """One replayed window: visibility supervision on every slot plus
    dual localization supervision on the newest slot."""
    profile = cfg.spec
    seq, ids = sample["seq"], sample["ids"]
    priors = {
        cfg.prior_frames[0]: _point_prior(seq.box(ids[cfg.prior_frames[0]]),
                                          vismod, profile.image_size),
        cfg.prior_frames[1]: _point_prior(seq.box(ids[cfg.prior_frames[1]]),
                                          vismod, profile.image_size),
    }
    out = vismod.assess_window(sample["frames"], sample["seeds"], priors,
                               profile.image_size)
    vis_loss = F.binary_cross_entropy(
        out["vis_prob"].clamp(1e-6, 1 - 1e-6), sample["gt_obj"])

    cur_id = ids[-1]
    mid = ids[cfg.prior_frames[1]]
    g, s = profile.grid, profile.stride
    with torch.no_grad():
        ref_imgs = torch.stack([_to_tensor(seq.frames[0]),
                                _to_tensor(seq.frames[mid])])
        ref_labels = torch.stack([
            box_label_planes(seq.box(0), g, s, cfg.sigma_cls),
            box_label_planes(seq.box(mid), g, s, cfg.sigma_cls),
        ])
        ref_feats = head.build_reference(head.encode_frame(ref_imgs),
                                         ref_labels).unsqueeze(0)
        cur_feat = head.encode_frame(_to_tensor(seq.frames[cur_id]).unsqueeze(0))
        omega, z_cur = head.predict(ref_feats, cur_feat)

    fused, refined = vismod.fuse(z_cur, out["coords"][-1],
                                 out["vis_binary"][-1], s, cfg.sigma_energy)
    planes = box_label_planes(seq.box(cur_id), g, s, cfg.sigma_cls)
    dual, parts = dual_supervision_loss(
        omega, fused, refined, planes[0].unsqueeze(0),
        planes[1:5].unsqueeze(0), (planes[5] > 0.5).unsqueeze(0),
        head.regdec, dual_weights(cfg),
    )
    total = dual + VIS_BCE_WEIGHT * vis_loss
    return total, {"vis_bce": float(vis_loss.detach()), **parts}, out


def _point_prior(box: Box, vismod: VisibilityModule, image_size: int):
    stride = vismod.core.stride
    return box_label_planes(box, image_size // stride, stride)


def visibility_corpus(cfg: RunConfig, seed: int) -> list:
    """Longer sequences containing real occlusion events for stage 2."""
    return benchmark_set(cfg.spec.image_size, cfg.occ_sequences, seed + 17,
                         num_frames=24)


def visibility_accuracy(vismod: VisibilityModule, head: TrackingHead,
                        windows, cfg: RunConfig, rng) -> dict:
    """Object-aware accuracy of the adapted head vs the frozen core head."""
    vismod.eval()
    hit_a, hit_c, total = 0, 0, 0
    with torch.no_grad():
        for w in windows:
            sample = point_window_sample(w, cfg.num_points, rng)
            ids = sample["ids"]
            seq = sample["seq"]
            priors = {
                cfg.prior_frames[0]: _point_prior(
                    seq.box(ids[cfg.prior_frames[0]]), vismod,
                    cfg.spec.image_size),
                cfg.prior_frames[1]: _point_prior(
                    seq.box(ids[cfg.prior_frames[1]]), vismod,
                    cfg.spec.image_size),
            }
            out = vismod.assess_window(sample["frames"], sample["seeds"],
                                       priors, cfg.spec.image_size)
            gt = sample["gt_obj"] > 0.5
            hit_a += int(((out["vis_prob"] > 0.5) == gt).sum())
            hit_c += int(((out["core_vis_prob"] > 0.5) == gt).sum())
            total += gt.numel()
    vismod.train()
    return {
        "adapted_accuracy": hit_a / max(total, 1),
        "core_accuracy": hit_c / max(total, 1),
        "points": total,
    }


def train_visibility_adapters(vismod: VisibilityModule, head: TrackingHead,
                              sequences, cfg: RunConfig, seed: int,
                              log_path: str | None = None) -> dict:
    """Stage 2: adapters only; the point tracker and head stay frozen."""
    torch.manual_seed(seed + 5)
    rng = np.random.default_rng(seed + 5)
    vismod.freeze_core()
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    core_digest = parameter_digest(vismod.core)
    head_digest = parameter_digest(head)

    windows = point_windows(sequences, cfg.frame_step)
    rng.shuffle(windows)
    n_hold = max(1, len(windows) // 10)
    hold, train = windows[:n_hold], windows[n_hold:]
    opt = torch.optim.AdamW(vismod.adapter_parameters(), lr=cfg.lr_occ)
    vismod.train()
    vismod.core.eval()
    records = []
    start = time.time()
    for step in range(cfg.occ_steps):
        idx = rng.choice(len(train), size=min(cfg.occ_batch, len(train)),
                         replace=False)
        losses, vis_parts = [], []
        opt.zero_grad()
        for i in idx:
            sample = point_window_sample(train[i], cfg.num_points, rng)
            loss, parts, _ = visibility_window_loss(vismod, head, sample, cfg)
            losses.append(loss)
            vis_parts.append(parts["vis_bce"])
        total = torch.stack(losses).mean()
        total.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.occ_steps - 1:
            records.append({"step": step, "loss": float(total.detach()),
                            "vis_bce": float(np.mean(vis_parts))})
    assert parameter_digest(vismod.core) == core_digest
    assert parameter_digest(head) == head_digest
    acc = visibility_accuracy(vismod, head, hold,
                              cfg, np.random.default_rng(seed + 6))
    for p in head.parameters():
        p.requires_grad_(True)
    report = {
        "stage": "stage2-visibility",
        "steps": cfg.occ_steps,
        "final_loss": records[-1]["loss"] if records else None,
        "seconds": time.time() - start,
        "records": records,
        **acc,
    }
    if log_path:
        with open(log_path, "w") as fh:
            json.dump(report, fh, indent=1)
    return report

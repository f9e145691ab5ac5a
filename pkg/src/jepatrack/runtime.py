"""Online tracking loop.

One Tracker owns one sequence: it keeps the two label-conditioned reference
slots (first frame fixed, second rolling on confident predictions), a FIFO
of frames feeding the point-visibility module every N-th frame, and the
per-point coordinate state that seeds the next window.  Frames judged
occluded never enter the FIFO; the last unoccluded frame is duplicated in
their place so the window always holds trackable content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .boxes import Box
from .config import Profile, RunConfig
from .errors import DomainError, InitializationError, ParseError, StateError
from .synthdata import encode_cls_label, encode_reg_label
from .trackhead import TrackingHead, decode_box, label_stack
from .visibility import VisibilityModule, sample_query_points

RESULT_VERSION = 1


@dataclass
class FrameRecord:
    frame_index: int
    box: Box
    peak_score: float
    visible_fraction: float
    fusion_active: bool


class TrackResult:
    """One record per input frame, in order.

    `meta` carries provenance (config hash, profile, checkpoint hash,
    sequence path) so downstream evaluation can refuse mismatched pairs.
    """

    def __init__(self, records=None, meta=None):
        self.records = list(records or [])
        self.meta = dict(meta or {})

    def append(self, record: FrameRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def boxes(self):
        return [r.box for r in self.records]

    def scores(self):
        return [r.peak_score for r in self.records]

    def save(self, path: str) -> None:
        payload = {
            "version": RESULT_VERSION,
            "meta": self.meta,
            "records": [
                {
                    "frame": r.frame_index,
                    "box": list(r.box.as_tuple()),
                    "peak_score": r.peak_score,
                    "visible_fraction": r.visible_fraction,
                    "fusion_active": r.fusion_active,
                }
                for r in self.records
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "TrackResult":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("version") != RESULT_VERSION:
            raise ParseError(f"unsupported track result version in {path}")
        records = [
            FrameRecord(
                frame_index=r["frame"],
                box=Box(*r["box"]),
                peak_score=r["peak_score"],
                visible_fraction=r["visible_fraction"],
                fusion_active=r["fusion_active"],
            )
            for r in payload["records"]
        ]
        return cls(records, payload.get("meta"))


def box_label_planes(box: Box, grid: int, stride: float,
                     sigma: float = 1.0) -> torch.Tensor:
    """(6, grid, grid) raw label planes for a box on an arbitrary grid."""
    cls = torch.from_numpy(encode_cls_label(box, grid, stride, sigma))
    reg, mask = encode_reg_label(box, grid, stride)
    return label_stack(cls.unsqueeze(0), torch.from_numpy(reg).unsqueeze(0),
                       torch.from_numpy(mask).unsqueeze(0))[0]


class Tracker:
    """Stateful single-object tracker; strictly sequential per sequence."""

    def __init__(self, head: TrackingHead, vismod: VisibilityModule | None,
                 profile: Profile, cfg: RunConfig, seed: int = 0):
        self.head = head.eval()
        self.vismod = vismod.eval() if vismod is not None else None
        self.profile = profile
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._initialized = False

    # -- helpers ---------------------------------------------------------

    @property
    def window_frame_ids(self):
        return [e["frame_id"] for e in self._fifo]

    def _image_tensor(self, frame) -> torch.Tensor:
        if isinstance(frame, np.ndarray):
            if frame.dtype == np.uint8:
                frame = frame.astype(np.float32) / 255.0
            t = torch.from_numpy(frame).permute(2, 0, 1).float()
        else:
            t = frame.float()
        S = self.profile.image_size
        if t.shape != (3, S, S):
            raise InitializationError(
                f"frame shape {tuple(t.shape)} does not match the "
                f"{S}x{S} profile"
            )
        return t

    def _head_labels(self, box: Box) -> torch.Tensor:
        return box_label_planes(box, self.profile.grid, self.profile.stride,
                                self.cfg.sigma_cls)

    def _point_prior(self, box: Box) -> torch.Tensor:
        stride = self.vismod.core.stride
        return box_label_planes(box, self.profile.image_size // stride, stride)

    def _priors_for(self, slot0_frame_id: int) -> dict:
        first = self._pred_boxes.get(slot0_frame_id, self._last_confident_box)
        a, b = self.cfg.prior_frames
        return {a: self._point_prior(first),
                b: self._point_prior(self._last_confident_box)}

    def _assess(self, entries, seeds):
        frames = torch.stack([e["image"] for e in entries])
        priors = self._priors_for(entries[0]["frame_id"])
        res = self.vismod.assess_window(frames, seeds, priors,
                                        self.profile.image_size)
        self.point_log.append({
            "frame_ids": [e["frame_id"] for e in entries],
            "coords": res["coords"].detach().clone(),
            "vis_prob": res["vis_prob"].detach().clone(),
        })
        return res

    # -- lifecycle -------------------------------------------------------

    def init(self, frame, box: Box) -> None:
        img = self._image_tensor(frame)
        if not box.inside_image(self.profile.image_size):
            raise DomainError(f"initial box {box.as_tuple()} leaves the image")
        with torch.no_grad():
            feat = self.head.encode_frame(img.unsqueeze(0))[0]
            ref = self.head.build_reference(
                feat.unsqueeze(0), self._head_labels(box).unsqueeze(0))[0]
        # slot 0 is pinned to the first frame for the whole run
        self._refs = [ref, ref.clone()]
        self._pred_boxes = {0: box}
        self._last_confident_box = box
        self._last_unoccluded = {"frame_id": 0, "image": img}
        self._fifo = [{"frame_id": 0, "image": img} for _ in range(8)]
        self._low_vis_streak = 0
        self._t = 0
        self.fusion_active = False
        self.visible_fraction = 1.0
        self.result = TrackResult()
        self.point_log = []

        if self.vismod is not None:
            seeds = sample_query_points(box, self.vismod.num_points, self.rng)
            with torch.no_grad():
                res = self._assess(self._fifo, seeds)
            self._window_coords = res["coords"]
            self._energy_coords = res["coords"][-1]
            self._energy_vis = res["vis_binary"][-1]
            self.visible_fraction = float(res["vis_binary"][-1].float().mean())
            # too few visible points: run without fusion until a later
            # window clears the bar
            self.fusion_active = (
                self.visible_fraction >= self.cfg.vis_init_threshold
            )
        self.result.append(FrameRecord(0, box, 1.0, self.visible_fraction,
                                       self.fusion_active))
        self._initialized = True

    def _entry_update(self, frame_id: int, img: torch.Tensor) -> None:
        probe = self._fifo[1:] + [{"frame_id": frame_id, "image": img}]
        seeds = self._window_coords[1]
        res = self._assess(probe, seeds)
        vf = float(res["vis_binary"][-1].float().mean())
        self.visible_fraction = vf
        if vf < self.cfg.occlusion_trigger:
            # incoming frame looks occluded: duplicate the last unoccluded
            # frame instead and refresh state against the committed window
            dup = dict(self._last_unoccluded)
            committed = self._fifo[1:] + [dup]
            res_c = self._assess(committed, seeds)
            self._fifo = committed
            self._window_coords = res_c["coords"]
            self._low_vis_streak += 1
        else:
            self._fifo = probe
            self._window_coords = res["coords"]
            self._last_unoccluded = {"frame_id": frame_id, "image": img}
            self._low_vis_streak = 0
        # energy always reflects the true assessment of the incoming frame
        self._energy_coords = res["coords"][-1]
        self._energy_vis = res["vis_binary"][-1]
        if not self.fusion_active and vf >= self.cfg.vis_init_threshold:
            self.fusion_active = True

    def step(self, frame):
        if not self._initialized:
            raise StateError("tracker used before init")
        self._t += 1
        t = self._t
        img = self._image_tensor(frame)
        with torch.no_grad():
            is_entry = (t % self.cfg.frame_step == 0)
            if is_entry and self.vismod is not None:
                self._entry_update(t, img)

            feat = self.head.encode_frame(img.unsqueeze(0))[0]
            refs = torch.stack(self._refs).unsqueeze(0)
            omega, z_cur = self.head.predict(refs, feat.unsqueeze(0))
            if self.fusion_active and self.vismod is not None:
                _, z_used = self.vismod.fuse(
                    z_cur, self._energy_coords, self._energy_vis,
                    self.profile.stride, self.cfg.sigma_energy,
                )
            else:
                z_used = z_cur
            p, d = self.head.head_outputs(omega, z_used)
            box, peak = decode_box(p[0], d[0], self.profile.stride)
            box = box.clipped(self.profile.image_size)
            self._pred_boxes[t] = box
            if peak >= self.cfg.conf_threshold:
                ref = self.head.build_reference(
                    feat.unsqueeze(0), self._head_labels(box).unsqueeze(0))[0]
                self._refs[1] = ref
                self._last_confident_box = box

            if (is_entry and self.vismod is not None
                    and self._low_vis_streak >= self.cfg.resample_patience):
                fresh = sample_query_points(box, self.vismod.num_points, self.rng)
                self._window_coords = fresh.unsqueeze(0).expand(
                    8, self.vismod.num_points, 2).contiguous()
                self._low_vis_streak = 0

        self.result.append(FrameRecord(t, box, peak, self.visible_fraction,
                                       self.fusion_active))
        return box, peak

    def run(self, frames, init_box: Box) -> TrackResult:
        """Track a whole clip; one record per frame, first frame included."""
        self.init(frames[0], init_box)
        for frame in frames[1:]:
            self.step(frame)
        return self.result

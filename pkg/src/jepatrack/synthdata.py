"""Synthetic desk scenes: a textured target sliding over a static background
with distractor objects and scripted occlusion windows.

Scenes are fully described by (config, seed): motion paths are analytic,
rendering is deterministic, and every derived quantity (masks, visibility,
point tracks) can be recomputed from the saved annotations.  Pixel-center
convention throughout: pixel (row r, col c) samples the point (c+.5, r+.5),
and a rect (x0, y0, x1, y1) owns the half-open region [x0,x1) x [y0,y1).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .boxes import Box, intersection_area, union_box
from .errors import DomainError, ParseError, UnsupportedVersionError

ANNOTATION_VERSION = 1


@dataclass
class SynthConfig:
    image_size: int = 126
    num_frames: int = 8
    min_size: float = 0.18      # target side as fraction of image
    max_size: float = 0.34
    min_speed: float = 0.5      # px per frame
    max_speed: float = 3.0
    num_distractors: int = 2
    distractor_speed: float = 2.0
    distractor_near: bool = False
    occlusion: str = "none"     # none | full | partial
    occlusion_coverage: float = 0.7
    occlusion_start: int = -1   # -1 picks the middle of the sequence
    occlusion_length: int = 3
    checker_cell: int = 5
    texture_amp: float = 0.12   # per-block background color jitter
    texture_block: int = 14

    def __post_init__(self):
        if self.occlusion not in ("none", "full", "partial"):
            raise DomainError(f"unknown occlusion mode {self.occlusion!r}")
        if self.texture_amp < 0.0 or self.texture_block < 1:
            raise DomainError("texture needs amp >= 0 and block >= 1")
        if self.num_frames < 1:
            raise DomainError("num_frames must be positive")
        if not 0.0 < self.min_size <= self.max_size < 1.0:
            raise DomainError("target size fractions must satisfy 0 < min <= max < 1")


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions into [lo, hi] by reflection at both walls."""
    span = hi - lo
    if span <= 0:
        raise DomainError("reflection interval is empty")
    q = np.mod(p - lo, 2.0 * span)
    return lo + np.where(q <= span, q, 2.0 * span - q)


def _path(start, velocity, num_frames, lo_x, hi_x, lo_y, hi_y):
    """Constant-velocity top-left path with wall bounces, shape (T, 2)."""
    t = np.arange(num_frames, dtype=np.float64)
    raw = np.asarray(start, dtype=np.float64)[None, :] + t[:, None] * np.asarray(
        velocity, dtype=np.float64
    )[None, :]
    out = np.empty_like(raw)
    out[:, 0] = _reflect(raw[:, 0], lo_x, hi_x)
    out[:, 1] = _reflect(raw[:, 1], lo_y, hi_y)
    return out


def _rect_mask(rect, size):
    """Boolean (size, size) mask of pixels whose center falls in rect."""
    x0, y0, x1, y1 = rect
    cols = np.arange(size) + 0.5
    rows = np.arange(size) + 0.5
    mx = (cols >= x0) & (cols < x1)
    my = (rows >= y0) & (rows < y1)
    return my[:, None] & mx[None, :]


def _paint_rect(img, rect, color):
    mask = _rect_mask(rect, img.shape[0])
    img[mask] = color


def _paint_checker(img, rect, color_a, color_b, cell):
    x0, y0, x1, y1 = rect
    size = img.shape[0]
    mask = _rect_mask(rect, size)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return
    # checker phase anchored to the rect corner so the pattern moves with it
    local_r = np.floor(rows + 0.5 - y0).astype(np.int64)
    local_c = np.floor(cols + 0.5 - x0).astype(np.int64)
    phase = ((local_r // cell) + (local_c // cell)) % 2
    img[rows, cols] = np.where(phase[:, None] == 0, color_a, color_b)


def _in_rect(x, y, rect):
    x0, y0, x1, y1 = rect
    return (x0 <= x < x1) and (y0 <= y < y1)


class SyntheticSequence:
    """One generated scene plus everything needed to supervise on it."""

    def __init__(self, config: SynthConfig, seed: int, target_path, target_size,
                 distractor_paths, distractor_sizes, occluder_rects,
                 background, target_colors, distractor_colors, occluder_color,
                 target_colors_end=None, distractor_colors_end=None):
        self.config = config
        self.seed = seed
        self.target_path = np.asarray(target_path, dtype=np.float64)
        self.target_size = tuple(float(v) for v in target_size)
        self.distractor_paths = [np.asarray(p, dtype=np.float64) for p in distractor_paths]
        self.distractor_sizes = [tuple(float(v) for v in s) for s in distractor_sizes]
        # occluder_rects[t] is a list of (x0, y0, x1, y1) active at frame t
        self.occluder_rects = occluder_rects
        self.background = background
        self.target_colors = target_colors
        self.distractor_colors = distractor_colors
        # *_end pairs are the colors at the final frame; None keeps them static
        self.target_colors_end = target_colors_end
        self.distractor_colors_end = distractor_colors_end
        self.occluder_color = occluder_color
        self._frames = None
        self._visibility = None

    # ---- geometry ----

    @property
    def num_frames(self) -> int:
        return self.target_path.shape[0]

    @property
    def image_size(self) -> int:
        return self.config.image_size

    def box(self, t: int) -> Box:
        x, y = self.target_path[t]
        w, h = self.target_size
        return Box(x, y, x + w, y + h)

    @property
    def boxes(self):
        return [self.box(t) for t in range(self.num_frames)]

    def distractor_box(self, k: int, t: int) -> Box:
        x, y = self.distractor_paths[k][t]
        w, h = self.distractor_sizes[k]
        return Box(x, y, x + w, y + h)

    # ---- rendering ----

    def _colors_at(self, start, end, t):
        if end is None or self.num_frames <= 1:
            return start
        u = t / (self.num_frames - 1.0)
        return tuple((1.0 - u) * np.asarray(s) + u * np.asarray(e)
                     for s, e in zip(start, end))

    def render_frame(self, t: int) -> np.ndarray:
        img = self.background.copy()
        for k in range(len(self.distractor_paths)):
            b = self.distractor_box(k, t)
            end = None if self.distractor_colors_end is None \
                else self.distractor_colors_end[k]
            ca, cb = self._colors_at(self.distractor_colors[k], end, t)
            _paint_checker(img, b.as_tuple(), ca, cb, self.config.checker_cell)
        tb = self.box(t)
        ca, cb = self._colors_at(self.target_colors, self.target_colors_end, t)
        _paint_checker(img, tb.as_tuple(), ca, cb, self.config.checker_cell)
        for rect in self.occluder_rects[t]:
            _paint_rect(img, rect, self.occluder_color)
        return img

    @property
    def frames(self) -> np.ndarray:
        """uint8 (T, H, W, 3); lazily rendered once."""
        if self._frames is None:
            stack = [self.render_frame(t) for t in range(self.num_frames)]
            self._frames = np.stack(
                [np.clip(np.round(f * 255.0), 0, 255).astype(np.uint8) for f in stack]
            )
        return self._frames

    def frames_float(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0

    def release_frames(self) -> None:
        """Drop the rendered cache; large corpora stream through memory."""
        self._frames = None

    # ---- derived ground truth ----

    def target_mask(self, t: int) -> np.ndarray:
        return _rect_mask(self.box(t).as_tuple(), self.image_size)

    def occluder_mask(self, t: int) -> np.ndarray:
        mask = np.zeros((self.image_size, self.image_size), dtype=bool)
        for rect in self.occluder_rects[t]:
            mask |= _rect_mask(rect, self.image_size)
        return mask

    @property
    def visibility(self) -> np.ndarray:
        """Per-frame fraction of target pixels not covered by an occluder."""
        if self._visibility is None:
            out = np.empty(self.num_frames, dtype=np.float64)
            for t in range(self.num_frames):
                tm = self.target_mask(t)
                total = int(tm.sum())
                if total == 0:
                    out[t] = 0.0
                    continue
                hidden = int((tm & self.occluder_mask(t)).sum())
                out[t] = 1.0 - hidden / total
            self._visibility = out
        return self._visibility

    def attributes(self, t: int) -> dict:
        near = False
        expanded = self._expanded_target(t)
        for k in range(len(self.distractor_paths)):
            if intersection_area(expanded, self.distractor_box(k, t)) > 0.0:
                near = True
                break
        return {
            "occluded": bool(self.visibility[t] < 1.0),
            "distractor_near": near,
        }

    def _expanded_target(self, t: int) -> Box:
        b = self.box(t)
        cx, cy = b.center
        return Box(cx - b.width, cy - b.height, cx + b.width, cy + b.height)

    # ---- surfaces and point tracks ----

    def surface_at(self, t: int, x: float, y: float, include_occluders=True):
        """Topmost surface at a point; draw order is background < distractors
        (ascending index) < target < occluders."""
        if include_occluders:
            for rect in self.occluder_rects[t]:
                if _in_rect(x, y, rect):
                    return ("occluder",)
        if _in_rect(x, y, self.box(t).as_tuple()):
            return ("target",)
        for k in reversed(range(len(self.distractor_paths))):
            if _in_rect(x, y, self.distractor_box(k, t).as_tuple()):
                return ("distractor", k)
        return ("background",)

    def _surface_displacement(self, surface, t0: int, t: int):
        if surface[0] == "target":
            return self.target_path[t] - self.target_path[t0]
        if surface[0] == "distractor":
            p = self.distractor_paths[surface[1]]
            return p[t] - p[t0]
        return np.zeros(2, dtype=np.float64)

    def point_tracks(self, t0: int, points_xy: np.ndarray) -> dict:
        """Propagate points attached at frame t0 through the scene.

        Attachment ignores occluders (they come and go); each point rides the
        topmost persistent surface under it.  Returns positions (T, P, 2),
        optical visibility (surface is topmost and in image) and object-aware
        visibility (on the target and unoccluded), both (T, P) in {0, 1}.
        """
        pts = np.asarray(points_xy, dtype=np.float64)
        T, P, S = self.num_frames, pts.shape[0], self.image_size
        surfaces = [
            self.surface_at(t0, float(x), float(y), include_occluders=False)
            for x, y in pts
        ]
        positions = np.zeros((T, P, 2), dtype=np.float64)
        optical = np.zeros((T, P), dtype=np.float64)
        objectv = np.zeros((T, P), dtype=np.float64)
        for t in range(T):
            for p in range(P):
                surf = surfaces[p]
                pos = pts[p] + self._surface_displacement(surf, t0, t)
                positions[t, p] = pos
                x, y = float(pos[0]), float(pos[1])
                in_image = (0.0 <= x < S) and (0.0 <= y < S)
                top = self.surface_at(t, x, y) if in_image else None
                vis = in_image and (top == surf)
                optical[t, p] = float(vis)
                objectv[t, p] = float(vis and surf[0] == "target")
        return {
            "positions": positions,
            "optical_visibility": optical,
            "object_visibility": objectv,
            "surfaces": surfaces,
        }


def generate_sequence(config: SynthConfig, seed: int) -> SyntheticSequence:
    rng = np.random.default_rng(seed)
    S = config.image_size
    T = config.num_frames

    w = float(rng.uniform(config.min_size, config.max_size) * S)
    h = float(rng.uniform(config.min_size, config.max_size) * S)
    margin = 1.0
    start = np.array([
        rng.uniform(margin, S - margin - w),
        rng.uniform(margin, S - margin - h),
    ])
    speed = rng.uniform(config.min_speed, config.max_speed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    target_path = _path(start, vel, T, margin, S - margin - w, margin, S - margin - h)

    distractor_paths, distractor_sizes = [], []
    for k in range(config.num_distractors):
        dw = float(rng.uniform(config.min_size, config.max_size) * S * 0.8)
        dh = float(rng.uniform(config.min_size, config.max_size) * S * 0.8)
        if config.distractor_near and k == 0:
            # launch alongside the target so their paths stay entangled
            offset = np.array([w * 1.1, 0.0])
            dstart = np.clip(start + offset, margin, [S - margin - dw, S - margin - dh])
            dvel = vel + rng.uniform(-0.5, 0.5, size=2)
        else:
            dstart = np.array([
                rng.uniform(margin, S - margin - dw),
                rng.uniform(margin, S - margin - dh),
            ])
            dangle = rng.uniform(0.0, 2.0 * np.pi)
            dvel = config.distractor_speed * np.array([np.cos(dangle), np.sin(dangle)])
        distractor_paths.append(
            _path(dstart, dvel, T, margin, S - margin - dw, margin, S - margin - dh)
        )
        distractor_sizes.append((dw, dh))

    occluder_rects = [[] for _ in range(T)]
    if config.occlusion != "none" and T >= 2:
        length = max(1, min(config.occlusion_length, T - 1))
        start_t = config.occlusion_start
        if start_t < 0:
            start_t = max(1, (T - length) // 2)
        start_t = min(start_t, T - length)
        active = range(start_t, start_t + length)
        if config.occlusion == "full":
            boxes = [Box(target_path[t, 0], target_path[t, 1],
                         target_path[t, 0] + w, target_path[t, 1] + h) for t in active]
            swept = boxes[0]
            for b in boxes[1:]:
                swept = union_box(swept, b)
            pad = 2.0
            rect = (swept.x0 - pad, swept.y0 - pad, swept.x1 + pad, swept.y1 + pad)
            for t in active:
                occluder_rects[t].append(rect)
        else:
            scale = float(np.sqrt(config.occlusion_coverage))
            ow, oh = w * scale, h * scale
            for t in active:
                cx = target_path[t, 0] + w / 2.0
                cy = target_path[t, 1] + h / 2.0
                occluder_rects[t].append(
                    (cx - ow / 2.0, cy - oh / 2.0, cx + ow / 2.0, cy + oh / 2.0)
                )

    # appearance: smooth gradient background with static furniture rects
    c0 = rng.uniform(0.1, 0.5, size=3)
    c1 = rng.uniform(0.1, 0.5, size=3)
    ramp = np.linspace(0.0, 1.0, S, dtype=np.float64)
    background = (
        c0[None, None, :]
        + (c1 - c0)[None, None, :] * (0.5 * (ramp[:, None, None] + ramp[None, :, None]))
    ).astype(np.float64)
    for _ in range(3):
        fw, fh = rng.uniform(0.08, 0.2, size=2) * S
        fx = rng.uniform(0, S - fw)
        fy = rng.uniform(0, S - fh)
        _paint_rect(background, (fx, fy, fx + fw, fy + fh), rng.uniform(0.15, 0.55, size=3))
    if config.texture_amp > 0.0:
        # block-level color jitter keeps the background locally flat but makes
        # distant patches distinguishable in feature space
        blocks = S // config.texture_block + 1
        field = rng.uniform(-config.texture_amp, config.texture_amp, size=(blocks, blocks, 3))
        tiles = np.kron(field, np.ones((config.texture_block, config.texture_block, 1)))
        background = np.clip(background + tiles[:S, :S], 0.0, 1.0)

    def checker_colors():
        light = rng.uniform(0.5, 1.0, size=3)
        dark = np.clip(light - rng.uniform(0.3, 0.55, size=3), 0.0, 1.0)
        return light, dark

    def drifted(pair):
        # shared per-channel offset, bounded by headroom: contrast between the
        # two checker colors is preserved exactly, only the hue wanders
        light, dark = pair
        lo = -np.minimum(config.color_drift, dark)
        hi = np.minimum(config.color_drift, 1.0 - light)
        delta = rng.uniform(lo, hi)
        return light + delta, dark + delta

    def pair_sep(a, b):
        return (np.abs(a[0] - b[0]).sum() + np.abs(a[1] - b[1]).sum())

    # target and distractors share one appearance family, so no fixed color
    # rule separates them; a minimum color margin at both ends of the drift
    # keeps each scene solvable by matching against the reference frames
    target_colors = checker_colors()
    target_colors_end = drifted(target_colors)
    distractor_colors, distractor_colors_end = [], []
    for _ in range(config.num_distractors):
        for _ in range(40):
            cand = checker_colors()
            cand_end = drifted(cand)
            if min(pair_sep(cand, target_colors),
                   pair_sep(cand_end, target_colors_end)) >= 0.6:
                break
        distractor_colors.append(cand)
        distractor_colors_end.append(cand_end)
    occluder_color = rng.uniform(0.45, 0.6, size=3)

    return SyntheticSequence(
        config, seed, target_path, (w, h), distractor_paths, distractor_sizes,
        occluder_rects, background, target_colors, distractor_colors, occluder_color,
    )


# ---- label encoding for the grid head ----

def encode_cls_label(box: Box, grid: int, stride: int, sigma: float = 1.0) -> np.ndarray:
    """Gaussian bump on the cell grid, peak exactly 1 at the center cell."""
    cx, cy = box.center
    ci = int(np.clip(np.floor(cy / stride), 0, grid - 1))
    cj = int(np.clip(np.floor(cx / stride), 0, grid - 1))
    ii, jj = np.mgrid[0:grid, 0:grid]
    d2 = (ii - ci) ** 2 + (jj - cj) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def encode_reg_label(box: Box, grid: int, stride: int):
    """Per-cell distances to the four box edges, in stride units.

    Returns (reg, mask): reg is (4, grid, grid) ordered (l, t, r, b) and mask
    marks cells whose center lies strictly inside the box, the only cells the
    regression targets are meaningful for.
    """
    xs = (np.arange(grid) + 0.5) * stride
    ys = (np.arange(grid) + 0.5) * stride
    gx, gy = np.meshgrid(xs, ys)          # gx varies along columns
    l = (gx - box.x0) / stride
    t = (gy - box.y0) / stride
    r = (box.x1 - gx) / stride
    b = (box.y1 - gy) / stride
    reg = np.stack([l, t, r, b]).astype(np.float32)
    mask = (l > 0) & (t > 0) & (r > 0) & (b > 0)
    return reg, mask


def gt_target_cells(box: Box, grid: int, stride: int) -> np.ndarray:
    """Cells whose center pixel the target surface covers (occlusion ignored)."""
    xs = (np.arange(grid) + 0.5) * stride
    ys = (np.arange(grid) + 0.5) * stride
    mx = (xs >= box.x0) & (xs < box.x1)
    my = (ys >= box.y0) & (ys < box.y1)
    return my[:, None] & mx[None, :]


# ---- persistence ----

def save_sequence(seq: SyntheticSequence, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    frames = seq.frames
    for t in range(seq.num_frames):
        Image.fromarray(frames[t]).save(os.path.join(directory, f"frame_{t:04d}.png"))
    ann = {
        "version": ANNOTATION_VERSION,
        "seed": seq.seed,
        "config": dataclasses.asdict(seq.config),
        "target_path": seq.target_path.tolist(),
        "target_size": list(seq.target_size),
        "distractor_paths": [p.tolist() for p in seq.distractor_paths],
        "distractor_sizes": [list(s) for s in seq.distractor_sizes],
        "occluder_rects": [[list(r) for r in rects] for rects in seq.occluder_rects],
        "target_colors": [list(c) for c in seq.target_colors],
        "distractor_colors": [[list(a), list(b)] for a, b in seq.distractor_colors],
        "occluder_color": list(seq.occluder_color),
        "boxes": [list(b.as_tuple()) for b in seq.boxes],
        "visibility": seq.visibility.tolist(),
        "attributes": [seq.attributes(t) for t in range(seq.num_frames)],
    }
    with open(os.path.join(directory, "annotations.json"), "w") as fh:
        json.dump(ann, fh)


def load_sequence(directory: str) -> SyntheticSequence:
    path = os.path.join(directory, "annotations.json")
    if not os.path.exists(path):
        raise ParseError(f"no annotations.json under {directory}")
    with open(path) as fh:
        ann = json.load(fh)
    version = ann.get("version")
    if version != ANNOTATION_VERSION:
        raise UnsupportedVersionError(
            f"annotation version {version!r} not supported (expected {ANNOTATION_VERSION})"
        )
    config = SynthConfig(**ann["config"])
    frames = []
    for t in range(config.num_frames):
        fp = os.path.join(directory, f"frame_{t:04d}.png")
        if not os.path.exists(fp):
            raise ParseError(f"missing frame file {fp}")
        frames.append(np.asarray(Image.open(fp).convert("RGB")))
    seq = SyntheticSequence(
        config,
        ann["seed"],
        np.asarray(ann["target_path"]),
        ann["target_size"],
        [np.asarray(p) for p in ann["distractor_paths"]],
        ann["distractor_sizes"],
        [[tuple(r) for r in rects] for rects in ann["occluder_rects"]],
        None,  # background only needed for re-rendering
        [np.asarray(c) for c in ann["target_colors"]],
        [(np.asarray(a), np.asarray(b)) for a, b in ann["distractor_colors"]],
        np.asarray(ann["occluder_color"]),
    )
    seq._frames = np.stack(frames)
    return seq


# ---- corpus builders ----

def mix_sequence(image_size: int, index: int, base_seed: int,
                 num_frames: int = 8) -> SyntheticSequence:
    """One sequence of the supervised-stage mix: mostly clean, some occluded."""
    r = index % 5
    if r == 3:
        cfg = SynthConfig(image_size=image_size, num_frames=num_frames,
                          occlusion="partial", occlusion_coverage=0.7,
                          max_speed=4.0)
    elif r == 4:
        cfg = SynthConfig(image_size=image_size, num_frames=num_frames,
                          occlusion="full", occlusion_length=2, max_speed=6.0,
                          min_speed=3.0)
    else:
        cfg = SynthConfig(image_size=image_size, num_frames=num_frames,
                          distractor_near=(r == 2), max_speed=4.0)
    return generate_sequence(cfg, base_seed * 100003 + index)


def training_mix(image_size: int, count: int, base_seed: int, num_frames: int = 8):
    """Sequence mix for supervised stages: mostly clean, some occluded."""
    return [mix_sequence(image_size, i, base_seed, num_frames)
            for i in range(count)]


def benchmark_set(image_size: int, count: int, base_seed: int, num_frames: int = 24):
    """Evaluation sequences: longer, with a tagged occlusion-heavy subset."""
    out = []
    for i in range(count):
        heavy = (i % 2 == 1)
        if heavy:
            cfg = SynthConfig(
                image_size=image_size, num_frames=num_frames,
                occlusion="full" if i % 4 == 1 else "partial",
                occlusion_coverage=0.85, occlusion_start=num_frames // 3,
                occlusion_length=3, min_speed=3.0, max_speed=6.0,
            )
        else:
            cfg = SynthConfig(image_size=image_size, num_frames=num_frames,
                              max_speed=4.0, distractor_near=(i % 4 == 2))
        out.append(generate_sequence(cfg, base_seed * 50021 + i))
    return out


def recovery_set(image_size: int, count: int, base_seed: int,
                 num_frames: int = 40, occlusion_length: int = 21):
    """Long full-occlusion sequences: the target vanishes behind a cover for
    20+ frames, keeps moving, and re-emerges with enough tail frames left to
    measure how fast a tracker re-locks."""
    if occlusion_length < 20:
        raise DomainError("recovery sequences need a >= 20 frame occlusion")
    out = []
    for i in range(count):
        cfg = SynthConfig(
            image_size=image_size, num_frames=num_frames,
            occlusion="full", occlusion_start=8,
            occlusion_length=occlusion_length, min_speed=2.0, max_speed=4.0,
            min_size=0.18, max_size=0.3,
        )
        out.append(generate_sequence(cfg, base_seed * 70001 + i))
    return out

"""Command-line front end: every pipeline stage as one subcommand.

Stage order::

    synth --> train-stage0 --> pretrain-jepa --> train-head --> train-visibility
                                                      |               |
                                                      +----> track <--+
                                                               |
                                                             eval

`ablate` orchestrates the pretraining/visibility variants end to end and
emits a mean+/-std comparison table over seeds.

Every command echoes its full configuration, the config hash, and the root
seed into a JSON manifest next to its outputs, together with content hashes
of all file inputs and outputs.  Checkpoints are versioned archives; each
later stage verifies the stage tag of the artifact it consumes and fails
with the name of the missing prerequisite command otherwise.  All errors
exit nonzero with a single `error[<category>]: <message>` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import (PATH_FIELDS, RunConfig, apply_overrides, config_hash,
                     load_config)
from .errors import (InitializationError, JepatrackError, ParseError,
                     PrerequisiteError)
from .jepa import ProjNet, build_student, pretrain
from .metrics import aggregate_reports, eval_sequence
from .runtime import Tracker, TrackResult
from .synthdata import (benchmark_set, load_sequence, recovery_set,
                        save_sequence, training_mix)
from .trackhead import ModelPredictor, TrackingHead
from .training import (finetune_head, precompute_jepa_windows,
                       train_point_tracker, train_teacher_head,
                       train_visibility_adapters, visibility_corpus)
from .visibility import VisibilityModule

HEAD_PARTS = ("encoder", "label_encoder", "predictor", "regdec")
ADAPTER_PARTS = ("prior_encoder", "ladder", "vis_head", "fusion", "ensemble")


# --------------------------------------------------------------------------
# configuration plumbing


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group(
        "configuration", "YAML file plus per-key override flags")
    group.add_argument("--config", default=None, metavar="FILE",
                       help="YAML run configuration")
    for f in dataclasses.fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"),
                           dest="cfg_" + f.name, default=None, metavar="V",
                           help=f"override config key {f.name}")


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            overrides[f.name] = raw
    return apply_overrides(cfg, overrides) if overrides else cfg


def config_echo(cfg: RunConfig) -> dict:
    data = dataclasses.asdict(cfg)
    data["prior_frames"] = list(cfg.prior_frames)
    return data


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]


def write_manifest(path: str, command: str, cfg: RunConfig,
                   inputs: dict, outputs: dict, extra: dict | None = None):
    manifest = {
        "command": command,
        "config": config_echo(cfg),
        "config_hash": config_hash(cfg),
        "root_seed": cfg.seed,
        "inputs": {k: {"path": p, "hash": file_hash(p)}
                   for k, p in inputs.items()},
        "outputs": {k: {"path": p, "hash": file_hash(p)}
                    for k, p in outputs.items()},
    }
    if extra:
        manifest.update(extra)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def clean_report(report):
    """Copy with wall-clock timing removed, so report files are
    reproducible byte for byte."""
    if isinstance(report, dict):
        return {k: clean_report(v) for k, v in report.items() if k != "seconds"}
    if isinstance(report, list):
        return [clean_report(v) for v in report]
    return report


def write_report(path: str, report: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(clean_report(report), fh, indent=1, sort_keys=True)


def _ensure_dirs(cfg: RunConfig) -> None:
    for d in (cfg.checkpoint_dir, cfg.report_dir):
        os.makedirs(d, exist_ok=True)


# --------------------------------------------------------------------------
# checkpoint <-> model glue


def checkpoint_meta(cfg: RunConfig, stage: str, **extra) -> dict:
    meta = {"stage": stage, "profile": cfg.profile,
            "config_hash": config_hash(cfg), "seed": cfg.seed}
    meta.update(extra)
    return meta


def check_profile(meta: dict, cfg: RunConfig, path: str) -> None:
    if meta.get("profile") != cfg.profile:
        raise InitializationError(
            f"{path} was produced under profile {meta.get('profile')!r}, "
            f"this run is configured for {cfg.profile!r}"
        )


def require_artifact(path: str, producer: str) -> None:
    if not os.path.exists(path):
        raise PrerequisiteError(
            f"missing artifact {path}; run `{producer}` first"
        )


def collect_head(head: TrackingHead) -> dict:
    state = {}
    for name in HEAD_PARTS:
        state.update(ckpt.collect_state(getattr(head, name), f"trackhead/{name}"))
    if head.projnet is not None:
        state.update(ckpt.collect_state(head.projnet, "trackhead/projnet"))
    return state


def head_from_state(state: dict, cfg: RunConfig) -> TrackingHead:
    head = TrackingHead(cfg.spec)
    for name in HEAD_PARTS:
        ckpt.load_into(getattr(head, name), state, f"trackhead/{name}")
    if ckpt.has_prefix(state, "trackhead/projnet"):
        projnet = ProjNet(cfg.spec.channels)
        ckpt.load_into(projnet, state, "trackhead/projnet")
        head.install_projnet(projnet)
    return head


def collect_vis_core(vismod: VisibilityModule) -> dict:
    return ckpt.collect_state(vismod.core, "pointvis/core")


def collect_vis_adapters(vismod: VisibilityModule) -> dict:
    state = {}
    for name in ADAPTER_PARTS:
        state.update(ckpt.collect_state(getattr(vismod, name),
                                        f"pointvis/{name}"))
    return state


def vismod_from_state(state: dict, cfg: RunConfig,
                      adapters: bool) -> VisibilityModule:
    vismod = VisibilityModule(cfg.num_points, cfg.spec.channels,
                              refine_iters=cfg.refine_iters)
    ckpt.load_into(vismod.core, state, "pointvis/core")
    if adapters:
        for name in ADAPTER_PARTS:
            ckpt.load_into(getattr(vismod, name), state, f"pointvis/{name}")
    return vismod


# --------------------------------------------------------------------------
# stage implementations (shared by the commands, `ablate`, and tests)


def do_synth(cfg: RunConfig, out_dir: str, kind: str, count: int,
             num_frames: int | None = None) -> list:
    size = cfg.spec.image_size
    if kind == "mix":
        seqs = training_mix(size, count, cfg.seed, num_frames or 8)
    elif kind == "benchmark":
        seqs = benchmark_set(size, count, cfg.seed, num_frames or 24)
    elif kind == "recovery":
        seqs = recovery_set(size, count, cfg.seed, num_frames or 40)
    else:
        raise ParseError(f"unknown corpus kind {kind!r}")
    os.makedirs(out_dir, exist_ok=True)
    dirs = []
    for i, seq in enumerate(seqs):
        d = os.path.join(out_dir, f"seq_{i:04d}")
        save_sequence(seq, d)
        dirs.append(d)
    return dirs


def do_stage0(cfg: RunConfig, out_path: str) -> dict:
    torch.manual_seed(cfg.seed)
    head = TrackingHead(cfg.spec)
    vismod = VisibilityModule(cfg.num_points, cfg.spec.channels,
                              refine_iters=cfg.refine_iters)
    head_seqs = training_mix(cfg.spec.image_size, cfg.stage0_sequences, cfg.seed)
    report_head = train_teacher_head(head, head_seqs, cfg, cfg.seed)
    point_seqs = benchmark_set(cfg.spec.image_size, cfg.point_sequences,
                               cfg.seed + 29, num_frames=24)
    report_point = train_point_tracker(vismod.core, point_seqs, cfg, cfg.seed)
    state = collect_head(head)
    state.update(collect_vis_core(vismod))
    meta = checkpoint_meta(cfg, "stage0",
                           holdout_iou=report_head["holdout_iou"],
                           holdout_px_error=report_point["holdout_px_error"])
    ckpt.save_checkpoint(out_path, state, meta)
    return {"head": report_head, "points": report_point}


def do_jepa(cfg: RunConfig, teacher_path: str, out_path: str,
            log_path: str | None = None) -> dict:
    require_artifact(teacher_path, "train-stage0")
    state, meta = ckpt.load_checkpoint(teacher_path)
    ckpt.require_stage(meta, "stage0", teacher_path)
    check_profile(meta, cfg, teacher_path)
    head = head_from_state(state, cfg)
    data = precompute_jepa_windows(head, cfg, cfg.seed)
    student = build_student(head.predictor, cfg.spec.channels,
                            cfg.expander_factor)
    student, records, summary = pretrain(head.predictor, student, data, cfg,
                                         log_path=log_path)
    out_state = dict(state)
    out_state.update(ckpt.collect_state(student.predictor, "jepa/student"))
    out_state.update(ckpt.collect_state(student.projnet, "jepa/projnet"))
    out_state.update(ckpt.collect_state(student.expander, "jepa/expander"))
    meta_out = checkpoint_meta(
        cfg, "jepa", parent_hash=file_hash(teacher_path),
        windows=int(data.refs.shape[0]),
        holdout_l_inv_first=summary["holdout_first"][0],
        holdout_l_inv_last=summary["holdout_last"][0],
        min_omega_exp_std=summary["min_omega_exp_std"],
    )
    ckpt.save_checkpoint(out_path, out_state, meta_out)
    return {"summary": summary, "records": records}


def do_head(cfg: RunConfig, in_path: str, out_path: str) -> dict:
    require_artifact(in_path, "pretrain-jepa (or train-stage0 for the baseline)")
    state, meta = ckpt.load_checkpoint(in_path)
    stage = meta.get("stage")
    if stage not in ("stage0", "jepa"):
        raise PrerequisiteError(
            f"{in_path} holds stage {stage!r}; train-head consumes a "
            "pretrain-jepa checkpoint (or a train-stage0 one as baseline)"
        )
    check_profile(meta, cfg, in_path)
    head = head_from_state(state, cfg)
    variant = "baseline"
    if stage == "jepa":
        variant = "pretrained"
        predictor = ModelPredictor(cfg.spec.channels)
        ckpt.load_into(predictor, state, "jepa/student")
        head.predictor = predictor
        if cfg.use_projnet:
            projnet = ProjNet(cfg.spec.channels)
            ckpt.load_into(projnet, state, "jepa/projnet")
            head.install_projnet(projnet)
    seqs = training_mix(cfg.spec.image_size, cfg.stage0_sequences, cfg.seed + 11)
    report = finetune_head(head, seqs, cfg, cfg.seed)
    out_state = {k: v for k, v in state.items() if k.startswith("pointvis/")}
    out_state.update(collect_head(head))
    meta_out = checkpoint_meta(cfg, "head", parent_hash=file_hash(in_path),
                               variant=variant,
                               holdout_iou=report["holdout_iou"])
    ckpt.save_checkpoint(out_path, out_state, meta_out)
    report = dict(report)
    report["variant"] = variant
    return report


def do_visibility(cfg: RunConfig, in_path: str, out_path: str) -> dict:
    require_artifact(in_path, "train-head")
    state, meta = ckpt.load_checkpoint(in_path)
    ckpt.require_stage(meta, "head", in_path)
    check_profile(meta, cfg, in_path)
    head = head_from_state(state, cfg)
    vismod = vismod_from_state(state, cfg, adapters=False)
    seqs = visibility_corpus(cfg, cfg.seed)
    report = train_visibility_adapters(vismod, head, seqs, cfg, cfg.seed)
    out_state = dict(state)
    out_state.update(collect_vis_adapters(vismod))
    meta_out = checkpoint_meta(cfg, "full", parent_hash=file_hash(in_path),
                               adapted_accuracy=report["adapted_accuracy"],
                               core_accuracy=report["core_accuracy"])
    ckpt.save_checkpoint(out_path, out_state, meta_out)
    return report


def load_tracker(cfg: RunConfig, ckpt_path: str, seed: int | None = None) -> Tracker:
    require_artifact(ckpt_path, "train-head or train-visibility")
    state, meta = ckpt.load_checkpoint(ckpt_path)
    check_profile(meta, cfg, ckpt_path)
    head = head_from_state(state, cfg)
    vismod = None
    if meta.get("stage") == "full":
        vismod = vismod_from_state(state, cfg, adapters=True)
    return Tracker(head, vismod, cfg.spec, cfg,
                   seed=cfg.seed if seed is None else seed)


def do_track(cfg: RunConfig, ckpt_path: str, seq_dir: str,
             out_path: str) -> TrackResult:
    seq = load_sequence(seq_dir)
    if seq.image_size != cfg.spec.image_size:
        raise InitializationError(
            f"sequence {seq_dir} is {seq.image_size}px, profile "
            f"{cfg.profile!r} expects {cfg.spec.image_size}px"
        )
    tracker = load_tracker(cfg, ckpt_path)
    result = tracker.run(list(seq.frames), seq.box(0))
    result.meta = {
        "config_hash": config_hash(cfg),
        "profile": cfg.profile,
        "checkpoint": file_hash(ckpt_path),
        "sequence": os.path.abspath(seq_dir),
        "fusion": tracker.vismod is not None,
    }
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    result.save(out_path)
    if tracker.vismod is not None:
        dump_path = os.path.splitext(out_path)[0] + ".points.csv"
        dump_point_log(tracker.point_log, dump_path)
    return result


def dump_point_log(point_log, path: str) -> None:
    """Structured text dump of every window assessment: one row per
    (assessment, window slot, query point)."""
    lines = ["assessment,frame,point,x,y,visible"]
    for a, entry in enumerate(point_log):
        coords, vis = entry["coords"], entry["vis_prob"]
        for t, frame_id in enumerate(entry["frame_ids"]):
            for p in range(coords.shape[1]):
                x, y = coords[t, p].tolist()
                lines.append(f"{a},{frame_id},{p},{x:.3f},{y:.3f},"
                             f"{vis[t, p].item():.4f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def do_eval(cfg: RunConfig, result_paths: list, out_path: str,
            sequence: str | None = None) -> dict:
    if not result_paths:
        raise ParseError("eval needs at least one track result file")
    if sequence is not None and len(result_paths) != 1:
        raise ParseError("--sequence only applies to a single result file")
    per_seq = []
    for rp in result_paths:
        result = TrackResult.load(rp)
        prof = result.meta.get("profile")
        if prof is not None and prof != cfg.profile:
            raise InitializationError(
                f"{rp} was tracked under profile {prof!r}, eval is "
                f"configured for {cfg.profile!r}"
            )
        seq_dir = sequence or result.meta.get("sequence")
        if not seq_dir:
            raise ParseError(f"{rp} names no sequence; pass --sequence")
        seq = load_sequence(seq_dir)
        gt = [seq.box(t) for t in range(seq.num_frames)]
        per_seq.append({
            "result": rp,
            "report": eval_sequence(result.boxes(), gt,
                                    cfg.precision_threshold,
                                    cfg.norm_precision_threshold),
        })
    agg = aggregate_reports(e["report"] for e in per_seq)
    payload = {
        "aggregate": json.loads(agg.to_json()),
        "sequences": {e["result"]: e["report"].scalars() for e in per_seq},
    }
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    with open(os.path.splitext(out_path)[0] + ".curves.csv", "w") as fh:
        fh.write(agg.curves_csv())
    return payload


# --------------------------------------------------------------------------
# ablation matrix


ABLATION_ROWS = ("baseline", "inv-only", "inv+cov", "inv+cov+vis")


def evaluate_tracker(cfg: RunConfig, head: TrackingHead,
                     vismod: VisibilityModule | None, sequences) -> dict:
    """Benchmark metrics for one model over a sequence list, with the
    occlusion-heavy subset reported separately."""
    reports, heavy = [], []
    for seq in sequences:
        tracker = Tracker(head, vismod, cfg.spec, cfg, seed=cfg.seed)
        result = tracker.run(list(seq.frames), seq.box(0))
        gt = [seq.box(t) for t in range(seq.num_frames)]
        reports.append(eval_sequence(result.boxes(), gt,
                                     cfg.precision_threshold,
                                     cfg.norm_precision_threshold))
        heavy.append(bool(seq.visibility.min() < 0.5))
    agg = aggregate_reports(reports)
    out = {"all": agg.scalars(), "sequences": len(reports)}
    heavy_reports = [r for r, h in zip(reports, heavy) if h]
    if heavy_reports:
        out["occlusion_heavy"] = aggregate_reports(heavy_reports).scalars()
        out["occlusion_heavy_count"] = len(heavy_reports)
    return out


def run_ablation_seed(cfg: RunConfig, seed: int, workdir: str,
                      benchmark, rows=ABLATION_ROWS) -> dict:
    """Train every requested variant from one stage-0 model and score it."""
    scfg = apply_overrides(cfg, {"seed": seed})
    os.makedirs(workdir, exist_ok=True)
    stage0_path = os.path.join(workdir, "stage0.ckpt")
    if not os.path.exists(stage0_path):
        do_stage0(scfg, stage0_path)

    out = {}
    if "baseline" in rows:
        base_path = os.path.join(workdir, "head_baseline.ckpt")
        if not os.path.exists(base_path):
            do_head(scfg, stage0_path, base_path)
        tracker = load_tracker(scfg, base_path)
        out["baseline"] = evaluate_tracker(scfg, tracker.head, None, benchmark)

    if "inv-only" in rows:
        icfg = apply_overrides(scfg, {"beta": 0.0})
        inv_ckpt = os.path.join(workdir, "jepa_inv.ckpt")
        inv_head = os.path.join(workdir, "head_inv.ckpt")
        if not os.path.exists(inv_head):
            do_jepa(icfg, stage0_path, inv_ckpt)
            do_head(icfg, inv_ckpt, inv_head)
        tracker = load_tracker(icfg, inv_head)
        out["inv-only"] = evaluate_tracker(icfg, tracker.head, None, benchmark)

    need_cov = "inv+cov" in rows or "inv+cov+vis" in rows
    if need_cov:
        cov_ckpt = os.path.join(workdir, "jepa_cov.ckpt")
        cov_head = os.path.join(workdir, "head_cov.ckpt")
        if not os.path.exists(cov_head):
            do_jepa(scfg, stage0_path, cov_ckpt)
            do_head(scfg, cov_ckpt, cov_head)
    if "inv+cov" in rows:
        tracker = load_tracker(scfg, cov_head)
        out["inv+cov"] = evaluate_tracker(scfg, tracker.head, None, benchmark)
    if "inv+cov+vis" in rows:
        full_path = os.path.join(workdir, "full.ckpt")
        if not os.path.exists(full_path):
            do_visibility(scfg, cov_head, full_path)
        tracker = load_tracker(scfg, full_path)
        out["inv+cov+vis"] = evaluate_tracker(scfg, tracker.head,
                                              tracker.vismod, benchmark)
    return out


def summarize_ablation(per_seed: list) -> dict:
    """mean +/- std per row per metric over seeds."""
    table = {}
    for row in per_seed[0]:
        table[row] = {}
        for split in ("all", "occlusion_heavy"):
            if split not in per_seed[0][row]:
                continue
            metrics = per_seed[0][row][split]
            table[row][split] = {
                m: {
                    "mean": float(np.mean([s[row][split][m] for s in per_seed])),
                    "std": float(np.std([s[row][split][m] for s in per_seed])),
                }
                for m in metrics
            }
    return table


def format_ablation_table(table: dict) -> str:
    metrics = ("suc", "pr", "npr", "ao", "op50")
    lines = []
    for split in ("all", "occlusion_heavy"):
        rows = [r for r in table if split in table[r]]
        if not rows:
            continue
        lines.append(f"[{split}]")
        header = "row".ljust(14) + "".join(m.rjust(16) for m in metrics)
        lines.append(header)
        for row in rows:
            cells = [
                f"{table[row][split][m]['mean']:.3f}+/-{table[row][split][m]['std']:.3f}".rjust(16)
                for m in metrics
            ]
            lines.append(row.ljust(14) + "".join(cells))
    return "\n".join(lines)


def do_ablate(cfg: RunConfig, out_dir: str, num_seeds: int,
              benchmark_count: int, rows=ABLATION_ROWS) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    benchmark = benchmark_set(cfg.spec.image_size, benchmark_count,
                              cfg.seed + 7919, num_frames=24)
    per_seed = []
    for k in range(num_seeds):
        seed = cfg.seed + k
        workdir = os.path.join(out_dir, f"seed{seed}")
        per_seed.append(run_ablation_seed(cfg, seed, workdir, benchmark, rows))
    table = summarize_ablation(per_seed)
    payload = {"rows": table, "per_seed": per_seed,
               "seeds": [cfg.seed + k for k in range(num_seeds)],
               "benchmark_sequences": benchmark_count}
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
        fh.write(format_ablation_table(table) + "\n")
    return payload


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = build_config(args)
    out_dir = args.out or os.path.join(cfg.data_dir, args.kind)
    dirs = do_synth(cfg, out_dir, args.kind, args.count, args.frames)
    outputs = {os.path.basename(d): os.path.join(d, "annotations.json")
               for d in dirs}
    write_manifest(os.path.join(out_dir, "manifest.json"), "synth", cfg,
                   {}, outputs, extra={"kind": args.kind, "count": args.count})
    print(f"wrote {len(dirs)} sequences under {out_dir}")
    return 0


def cmd_train_stage0(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    out_path = args.out or os.path.join(cfg.checkpoint_dir, "stage0.ckpt")
    reports = do_stage0(cfg, out_path)
    report_path = os.path.join(cfg.report_dir, "stage0.json")
    write_report(report_path, reports)
    write_manifest(os.path.join(cfg.report_dir, "stage0.manifest.json"),
                   "train-stage0", cfg, {},
                   {"checkpoint": out_path, "report": report_path})
    print(f"stage0 done: holdout_iou={reports['head']['holdout_iou']:.3f} "
          f"point_px={reports['points']['holdout_px_error']:.2f} -> {out_path}")
    return 0


def cmd_pretrain_jepa(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    teacher = args.teacher or os.path.join(cfg.checkpoint_dir, "stage0.ckpt")
    out_path = args.out or os.path.join(cfg.checkpoint_dir, "jepa.ckpt")
    log_path = os.path.join(cfg.report_dir, "jepa_steps.jsonl")
    report = do_jepa(cfg, teacher, out_path, log_path=log_path)
    report_path = os.path.join(cfg.report_dir, "jepa.json")
    write_report(report_path, report)
    write_manifest(os.path.join(cfg.report_dir, "jepa.manifest.json"),
                   "pretrain-jepa", cfg, {"teacher": teacher},
                   {"checkpoint": out_path, "report": report_path})
    first = report["summary"]["holdout_first"]
    last = report["summary"]["holdout_last"]
    print(f"pretraining done: holdout l_inv {first[0]:.4f} -> {last[0]:.4f}, "
          f"min omega_exp std {report['summary']['min_omega_exp_std']:.2e} "
          f"-> {out_path}")
    return 0


def cmd_train_head(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    default_in = os.path.join(cfg.checkpoint_dir, "jepa.ckpt")
    in_path = args.checkpoint or default_in
    out_path = args.out or os.path.join(cfg.checkpoint_dir, "head.ckpt")
    report = do_head(cfg, in_path, out_path)
    report_path = os.path.join(cfg.report_dir, "head.json")
    write_report(report_path, report)
    write_manifest(os.path.join(cfg.report_dir, "head.manifest.json"),
                   "train-head", cfg, {"checkpoint": in_path},
                   {"checkpoint": out_path, "report": report_path})
    print(f"head fine-tune ({report['variant']}) done: "
          f"holdout_iou={report['holdout_iou']:.3f} -> {out_path}")
    return 0


def cmd_train_visibility(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    in_path = args.checkpoint or os.path.join(cfg.checkpoint_dir, "head.ckpt")
    out_path = args.out or os.path.join(cfg.checkpoint_dir, "full.ckpt")
    report = do_visibility(cfg, in_path, out_path)
    report_path = os.path.join(cfg.report_dir, "visibility.json")
    write_report(report_path, report)
    write_manifest(os.path.join(cfg.report_dir, "visibility.manifest.json"),
                   "train-visibility", cfg, {"checkpoint": in_path},
                   {"checkpoint": out_path, "report": report_path})
    print(f"visibility adapters done: adapted={report['adapted_accuracy']:.3f} "
          f"core={report['core_accuracy']:.3f} -> {out_path}")
    return 0


def cmd_track(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    name = os.path.basename(os.path.normpath(args.sequence))
    out_path = args.out or os.path.join(cfg.report_dir, f"track_{name}.json")
    result = do_track(cfg, args.checkpoint, args.sequence, out_path)
    write_manifest(os.path.splitext(out_path)[0] + ".manifest.json", "track",
                   cfg, {"checkpoint": args.checkpoint,
                         "sequence": os.path.join(args.sequence,
                                                  "annotations.json")},
                   {"result": out_path})
    print(f"tracked {len(result)} frames -> {out_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    _ensure_dirs(cfg)
    paths = []
    for p in args.results:
        if os.path.isdir(p):
            paths.extend(sorted(
                os.path.join(p, f) for f in os.listdir(p)
                if f.startswith("track_") and f.endswith(".json")
                and ".manifest." not in f
            ))
        else:
            paths.append(p)
    out_path = args.out or os.path.join(cfg.report_dir, "eval.json")
    payload = do_eval(cfg, paths, out_path, sequence=args.sequence)
    write_manifest(os.path.splitext(out_path)[0] + ".manifest.json", "eval",
                   cfg, {f"result{i}": p for i, p in enumerate(paths)},
                   {"report": out_path})
    agg = payload["aggregate"]
    print("eval: " + "  ".join(
        f"{k}={agg[k]:.3f}" for k in ("suc", "pr", "npr", "ao", "op50")))
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out_dir = args.out or os.path.join(cfg.report_dir, "ablation")
    rows = tuple(args.rows.split(",")) if args.rows else ABLATION_ROWS
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ParseError(f"unknown ablation rows {sorted(unknown)}; "
                         f"choose from {list(ABLATION_ROWS)}")
    payload = do_ablate(cfg, out_dir, args.seeds, args.benchmark_count, rows)
    write_manifest(os.path.join(out_dir, "manifest.json"), "ablate", cfg, {},
                   {"table": os.path.join(out_dir, "ablation.json")},
                   extra={"seeds": payload["seeds"]})
    print(format_ablation_table(payload["rows"]))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jepatrack",
        description="Synthetic-scale tracker training and evaluation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus on disk")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--kind", default="benchmark",
                   choices=("mix", "benchmark", "recovery"))
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--frames", type=int, default=None,
                   help="frames per sequence (kind-specific default)")
    add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-stage0",
                       help="supervised tracking head + point tracker")
    p.add_argument("--out", default=None, help="checkpoint path")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_stage0)

    p = sub.add_parser("pretrain-jepa",
                       help="self-supervised predictor pretraining")
    p.add_argument("--teacher", default=None, help="stage0 checkpoint")
    p.add_argument("--out", default=None, help="checkpoint path")
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain_jepa)

    p = sub.add_parser("train-head",
                       help="localization fine-tune of the pretrained head")
    p.add_argument("--checkpoint", default=None,
                   help="jepa checkpoint (or stage0 for the baseline variant)")
    p.add_argument("--out", default=None, help="checkpoint path")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("train-visibility",
                       help="occlusion adapters over the frozen core and head")
    p.add_argument("--checkpoint", default=None, help="head checkpoint")
    p.add_argument("--out", default=None, help="checkpoint path")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_visibility)

    p = sub.add_parser("track", help="run the online tracker on a sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True,
                   help="sequence directory written by `synth`")
    p.add_argument("--out", default=None, help="result JSON path")
    add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score track results against ground truth")
    p.add_argument("--results", nargs="+", required=True,
                   help="track result files and/or directories of them")
    p.add_argument("--sequence", default=None,
                   help="ground-truth sequence dir (single result only)")
    p.add_argument("--out", default=None, help="report JSON path")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="train and score the pretraining/visibility matrix")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--benchmark-count", type=int, default=50)
    p.add_argument("--rows", default=None,
                   help="comma-separated subset of "
                        + ",".join(ABLATION_ROWS))
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except JepatrackError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

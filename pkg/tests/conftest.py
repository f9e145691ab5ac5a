"""Session fixtures for the acceptance suite.

The trained-model criteria judge a full three-seed pipeline (teacher,
pretraining with and without the covariance term, fine-tuned heads,
visibility adapters) that takes a while to build on one CPU core.  The
fixture trains it once and caches every artifact under .cache/acceptance,
keyed by the config hash, so later runs only re-read the per-seed
evaluation summaries.  Delete the cache directory (or point
JEPATRACK_TEST_CACHE somewhere fresh) to force a retrain.
"""

from __future__ import annotations

import json
import os
import time

import pytest
import torch

ACCEPT_SEEDS = (0, 1, 2)
BENCHMARK_COUNT = 50
RECOVERY_COUNT = 10


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the per-criterion verdicts after the test tally, where
    capture cannot swallow them."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance")
    lines = getattr(mod, "LINES", None) if mod else None
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def acceptance_config(seed: int = 0):
    from jepatrack.config import RunConfig

    return RunConfig(profile="small", seed=seed)


def cache_root() -> str:
    from jepatrack.config import config_hash

    base = os.environ.get(
        "JEPATRACK_TEST_CACHE",
        os.path.join(os.path.dirname(__file__), os.pardir, ".cache", "acceptance"),
    )
    return os.path.join(os.path.abspath(base), config_hash(acceptance_config(0)))


def _timed(workdir: str, name: str, fn):
    """Run one pipeline stage and persist its wall time immediately, so a
    resumed build keeps the numbers for stages it skips."""
    tpath = os.path.join(workdir, "timings.json")
    times = {}
    if os.path.exists(tpath):
        with open(tpath) as fh:
            times = json.load(fh)
    start = time.time()
    fn()
    times[name] = time.time() - start
    with open(tpath, "w") as fh:
        json.dump(times, fh, indent=1, sort_keys=True)


def _stage_paths(workdir: str) -> dict:
    names = ("stage0", "jepa_inv", "jepa_cov", "head_baseline",
             "head_inv", "head_cov", "full")
    return {n: os.path.join(workdir, f"{n}.ckpt") for n in names}


def build_seed(seed: int, workdir: str, benchmark, recovery) -> dict:
    """Train every model variant for one seed and score it; returns the
    evaluation payload that gets cached as evaluation.json."""
    from jepatrack import checkpoint as ckpt
    from jepatrack.cli import (do_head, do_jepa, do_stage0, do_visibility,
                               evaluate_tracker, load_tracker)
    from jepatrack.config import apply_overrides
    from jepatrack.metrics import occlusion_recovery

    scfg = apply_overrides(acceptance_config(), {"seed": seed})
    icfg = apply_overrides(scfg, {"beta": 0.0})
    os.makedirs(workdir, exist_ok=True)
    paths = _stage_paths(workdir)

    if not os.path.exists(paths["stage0"]):
        _timed(workdir, "stage0", lambda: do_stage0(scfg, paths["stage0"]))
    if not os.path.exists(paths["jepa_inv"]):
        _timed(workdir, "jepa_inv",
               lambda: do_jepa(icfg, paths["stage0"], paths["jepa_inv"]))
    if not os.path.exists(paths["jepa_cov"]):
        _timed(workdir, "jepa_cov",
               lambda: do_jepa(scfg, paths["stage0"], paths["jepa_cov"]))
    if not os.path.exists(paths["head_baseline"]):
        _timed(workdir, "head_baseline",
               lambda: do_head(scfg, paths["stage0"], paths["head_baseline"]))
    if not os.path.exists(paths["head_inv"]):
        _timed(workdir, "head_inv",
               lambda: do_head(icfg, paths["jepa_inv"], paths["head_inv"]))
    if not os.path.exists(paths["head_cov"]):
        _timed(workdir, "head_cov",
               lambda: do_head(scfg, paths["jepa_cov"], paths["head_cov"]))
    if not os.path.exists(paths["full"]):
        _timed(workdir, "visibility",
               lambda: do_visibility(scfg, paths["head_cov"], paths["full"]))

    with open(os.path.join(workdir, "timings.json")) as fh:
        timings = json.load(fh)

    info = {"seed": seed, "timings": timings, "metrics": {}}
    for key in ("jepa_inv", "jepa_cov", "full"):
        _, meta = ckpt.load_checkpoint(paths[key])
        info[f"{key}_meta"] = meta

    variants = (
        ("baseline", paths["head_baseline"], False),
        ("inv_only", paths["head_inv"], False),
        ("inv_cov", paths["head_cov"], False),
        ("full", paths["full"], True),
    )
    for name, path, with_vis in variants:
        cfg = icfg if name == "inv_only" else scfg
        tracker = load_tracker(cfg, path)
        vismod = tracker.vismod if with_vis else None
        info["metrics"][name] = evaluate_tracker(cfg, tracker.head,
                                                 vismod, benchmark)

    from jepatrack.runtime import Tracker

    tracker = load_tracker(scfg, paths["full"])
    flags = []
    for seq in recovery:
        runner = Tracker(tracker.head, tracker.vismod, scfg.spec, scfg,
                         seed=scfg.seed)
        result = runner.run(list(seq.frames), seq.box(0))
        gt = [seq.box(t) for t in range(seq.num_frames)]
        flags.append(occlusion_recovery(result.boxes(), gt,
                                        seq.visibility.tolist()))
        seq.release_frames()
    info["recovery"] = {"flags": flags,
                        "rate": sum(flags) / max(len(flags), 1)}
    return info


@pytest.fixture(scope="session")
def trained_pipeline():
    """Per-seed evaluation payloads for the trained-model criteria.

    Trains and evaluates anything missing from the cache; with a warm cache
    this only loads three JSON files.
    """
    from jepatrack.synthdata import benchmark_set, recovery_set

    root = cache_root()
    os.makedirs(root, exist_ok=True)
    cfg = acceptance_config()
    benchmark, recovery = None, None
    out = {}
    torch.set_num_threads(1)
    for seed in ACCEPT_SEEDS:
        workdir = os.path.join(root, f"seed{seed}")
        epath = os.path.join(workdir, "evaluation.json")
        if not os.path.exists(epath):
            if benchmark is None:
                # one fixed benchmark and one fixed recovery pool across
                # training seeds, so seed-to-seed gaps measure the model
                benchmark = benchmark_set(cfg.spec.image_size,
                                          BENCHMARK_COUNT,
                                          cfg.seed + 7919, num_frames=24)
                recovery = recovery_set(cfg.spec.image_size, RECOVERY_COUNT,
                                        cfg.seed + 104729)
            info = build_seed(seed, workdir, benchmark, recovery)
            with open(epath, "w") as fh:
                json.dump(info, fh, indent=1, sort_keys=True)
        with open(epath) as fh:
            out[seed] = json.load(fh)
    return out

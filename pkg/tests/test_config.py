import numpy as np
import pytest
import torch

from jepatrack.boxes import Box, intersection_area, union_box
from jepatrack.checkpoint import (
    collect_state,
    has_prefix,
    load_checkpoint,
    load_into,
    require_stage,
    save_checkpoint,
)
from jepatrack.config import (
    PROFILES,
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    make_config,
    save_config,
)
from jepatrack.errors import (
    ConfigurationError,
    DomainError,
    ParseError,
    PrerequisiteError,
    UnsupportedVersionError,
)


def test_box_validation_and_helpers():
    with pytest.raises(DomainError):
        Box(10, 10, 10, 20)
    b = Box(10, 20, 40, 60)
    assert b.width == 30 and b.height == 40
    assert b.center == (25, 40)
    assert b.diagonal == pytest.approx(50.0)
    assert b.area == 1200
    assert b.contains_point(10, 20) and not b.contains_point(9, 20)
    assert intersection_area(b, Box(30, 50, 50, 70)) == 100
    assert intersection_area(b, Box(41, 61, 50, 70)) == 0
    u = union_box(b, Box(0, 0, 5, 5))
    assert u.as_tuple() == (0, 0, 40, 60)
    assert b.shifted(1, 2).as_tuple() == (11, 22, 41, 62)
    assert Box(-5, -5, 200, 90).clipped(126).as_tuple() == (0, 0, 126, 90)


def test_profiles():
    assert PROFILES["default"].image_size == 252
    assert PROFILES["default"].grid == 18
    assert PROFILES["small"].image_size == 126
    assert PROFILES["small"].grid == 9
    for p in PROFILES.values():
        assert p.image_size == p.grid * p.stride


def test_runconfig_defaults():
    cfg = RunConfig()
    assert cfg.alpha == 25.0 and cfg.beta == 1.0
    assert cfg.rho_max == 0.2
    assert (cfg.occ_w_cls_track, cfg.occ_w_cls_point) == (200.0, 100.0)
    assert (cfg.occ_w_reg_track, cfg.occ_w_reg_point) == (1.0, 0.5)
    assert cfg.precision_threshold == 20.0
    assert cfg.norm_precision_threshold == 0.2
    assert cfg.frame_step == 8 and cfg.window_size == 8
    assert cfg.vis_init_threshold == 0.85
    assert cfg.lr_predictor == 1e-4
    assert cfg.lr_projnet == 1e-3 and cfg.lr_expander == 1e-3
    assert cfg.prior_frames == (0, 3)
    assert cfg.refine_iters == 4


def test_runconfig_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(profile="huge")
    with pytest.raises(ConfigurationError):
        RunConfig(rho_max=1.5)
    with pytest.raises(ConfigurationError):
        RunConfig(prior_frames=(0, 9))
    with pytest.raises(ConfigurationError):
        make_config({"alhpa": 25})


def test_config_yaml_round_trip(tmp_path):
    cfg = RunConfig(profile="small", seed=5, alpha=10.0, prior_frames=(0, 2))
    path = str(tmp_path / "run.yaml")
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_overrides_and_hash():
    cfg = RunConfig(profile="small")
    cfg2 = apply_overrides(cfg, {"alpha": "30", "prior_frames": "0,2"})
    assert cfg2.alpha == 30.0
    assert cfg2.prior_frames == (0, 2)
    assert config_hash(cfg2) != config_hash(cfg)
    assert config_hash(cfg) == config_hash(RunConfig(profile="small"))


def test_checkpoint_round_trip(tmp_path):
    lin = torch.nn.Linear(4, 3)
    other = torch.nn.Conv2d(2, 2, 1)
    state = {}
    state.update(collect_state(lin, "head/lin"))
    state.update(collect_state(other, "occ/conv"))
    meta = {"stage": "stage0", "config_hash": "abc"}
    path = str(tmp_path / "ck.zip")
    save_checkpoint(path, state, meta)

    got_state, got_meta = load_checkpoint(path)
    assert got_meta["stage"] == "stage0"
    assert has_prefix(got_state, "head/lin")
    assert not has_prefix(got_state, "head/missing")

    lin2 = torch.nn.Linear(4, 3)
    load_into(lin2, got_state, "head/lin")
    assert torch.equal(lin2.weight, lin.weight)
    assert torch.equal(lin2.bias, lin.bias)

    with pytest.raises(PrerequisiteError):
        load_into(lin2, got_state, "nope")
    require_stage(got_meta, "stage0", path)
    with pytest.raises(PrerequisiteError):
        require_stage(got_meta, "jepa", path)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.zip"
    p.write_bytes(b"not a zip")
    with pytest.raises(ParseError):
        load_checkpoint(str(p))

    import json
    import zipfile
    q = tmp_path / "old.zip"
    with zipfile.ZipFile(q, "w") as zf:
        zf.writestr("meta.json", json.dumps({"format_version": 99}))
        buf = __import__("io").BytesIO()
        np.savez(buf, x=np.zeros(2))
        zf.writestr("tensors.npz", buf.getvalue())
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(str(q))

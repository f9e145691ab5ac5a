import math

import numpy as np
import pytest
import torch

from jepatrack.boxes import Box
from jepatrack.config import PROFILES
from jepatrack.errors import ShapeError
from jepatrack.synthdata import encode_cls_label, encode_reg_label
from jepatrack.trackhead import (
    FrameEncoder,
    LabelEncoder,
    ModelPredictor,
    RegDec,
    TrackingHead,
    classify,
    decode_box,
    label_stack,
    modulate,
    sincos_positions,
)

torch.manual_seed(0)


def test_encoder_shapes_and_determinism():
    enc = FrameEncoder(64)
    x = torch.rand(2, 3, 126, 126)
    y = enc(x)
    assert y.shape == (2, 64, 9, 9)
    assert torch.equal(y, enc(x))
    y2 = enc(torch.rand(1, 3, 252, 252))
    assert y2.shape == (1, 64, 18, 18)
    assert torch.isfinite(enc(torch.zeros(1, 3, 126, 126))).all()
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 3, 100, 100))
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 1, 126, 126))


def test_encoder_locality():
    """A patched region may only touch cells whose receptive field hits it."""
    enc = FrameEncoder(64).eval()
    x = torch.rand(1, 3, 126, 126)
    x2 = x.clone()
    r0, r1 = 70, 84   # patched pixel rows [70, 84)
    c0, c1 = 28, 42
    x2[:, :, r0:r1, c0:c1] = 0.0
    with torch.no_grad():
        a, b = enc(x), enc(x2)
    diff = (a - b).abs().amax(dim=(0, 1))  # (9, 9) per-cell deviation
    # output cell j sees input pixels [14j-35, 14j+41]
    for i in range(9):
        rows_hit = (14 * i - 35 < r1) and (14 * i + 41 >= r0)
        for j in range(9):
            cols_hit = (14 * j - 35 < c1) and (14 * j + 41 >= c0)
            if not (rows_hit and cols_hit):
                assert diff[i, j].item() == 0.0, (i, j)
    assert diff.max().item() > 0.0


def test_encoder_batch_independence():
    enc = FrameEncoder(64).eval()
    a = torch.rand(1, 3, 126, 126)
    b = torch.rand(1, 3, 126, 126)
    with torch.no_grad():
        batched = enc(torch.cat([a, b]))
        single_a = enc(a)
        single_b = enc(b)
    assert torch.allclose(batched[0], single_a[0], atol=1e-6)
    assert torch.allclose(batched[1], single_b[0], atol=1e-6)


def test_label_stack_and_encoder():
    cls = torch.rand(2, 9, 9)
    reg = torch.rand(2, 4, 9, 9)
    mask = torch.rand(2, 9, 9) > 0.5
    planes = label_stack(cls, reg, mask)
    assert planes.shape == (2, 6, 9, 9)
    assert torch.equal(planes[:, 0], cls)
    assert torch.equal(planes[:, 5], mask.float())
    assert (planes[:, 1:5][~mask.unsqueeze(1).expand(-1, 4, -1, -1)] == 0).all()
    le = LabelEncoder(64)
    out = le(planes)
    assert out.shape == (2, 64, 9, 9)
    with pytest.raises(ShapeError):
        le(torch.rand(1, 5, 9, 9))


def test_label_encoder_translation_equivariance():
    le = LabelEncoder(64).eval()
    x = torch.rand(1, 6, 9, 9)
    shifted = torch.zeros_like(x)
    shifted[:, :, 1:, :] = x[:, :, :-1, :]
    with torch.no_grad():
        base = le(x)
        moved = le(shifted)
    # interior rows see fully shifted content: moved[i] == base[i-1] away
    # from both borders (padding enters at the first and last output rows)
    assert torch.allclose(moved[:, :, 2:-1, :], base[:, :, 1:-2, :], atol=1e-6)


def test_predictor_shapes():
    pred = ModelPredictor(64)
    refs = torch.rand(2, 2, 64, 9, 9)
    cur = torch.rand(2, 64, 9, 9)
    omega, z = pred(refs, cur)
    assert omega.shape == (2, 64)
    assert z.shape == (2, 64, 9, 9)
    with pytest.raises(ShapeError):
        pred(torch.rand(2, 3, 64, 9, 9), cur)
    with pytest.raises(ShapeError):
        pred(refs, torch.rand(2, 64, 8, 8))


def test_predictor_batch_independence_and_permutation():
    pred = ModelPredictor(64).eval()
    refs = torch.rand(2, 2, 64, 9, 9)
    cur = torch.rand(2, 64, 9, 9)
    with torch.no_grad():
        om, z = pred(refs, cur)
        om0, z0 = pred(refs[:1], cur[:1])
        om1, z1 = pred(refs[1:], cur[1:])
        om_sw, z_sw = pred(refs.flip(0), cur.flip(0))
    assert torch.allclose(om[0], om0[0], atol=1e-5)
    assert torch.allclose(om[1], om1[0], atol=1e-5)
    assert torch.allclose(z[0], z0[0], atol=1e-5)
    assert torch.allclose(om_sw.flip(0), om, atol=1e-5)
    assert torch.allclose(z_sw.flip(0), z, atol=1e-5)


def test_positions_distinct():
    pos = sincos_positions(9, 9, 64)
    assert pos.shape == (81, 64)
    d = torch.cdist(pos, pos)
    d.fill_diagonal_(1.0)
    assert d.min() > 1e-3  # all cells get distinct codes


def test_classify_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(100):
        C, H, W = 8, 4, 5
        omega = torch.tensor(rng.standard_normal(C))
        z = torch.tensor(rng.standard_normal((C, H, W)))
        p = classify(omega, z)
        for i in range(H):
            for j in range(W):
                want = sum(omega[c].item() * z[c, i, j].item() for c in range(C))
                assert abs(p[i, j].item() - want) < 1e-6


def test_classify_basis_case_and_batch():
    omega = torch.zeros(8)
    omega[3] = 1.0
    z = torch.zeros(8, 4, 4)
    z[3, 2, 1] = 1.0
    p = classify(omega, z)
    assert p[2, 1] == 1.0
    assert p.sum() == 1.0
    assert classify(torch.zeros(8), torch.rand(8, 4, 4)).abs().max() == 0.0
    pb = classify(omega.unsqueeze(0), z.unsqueeze(0))
    assert torch.equal(pb[0], p)
    with pytest.raises(ShapeError):
        classify(torch.zeros(7), z)


def test_modulate_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        C, H, W = 6, 3, 4
        omega = torch.tensor(rng.standard_normal(C))
        z = torch.tensor(rng.standard_normal((C, H, W)))
        m = modulate(omega, z)
        p = classify(omega, z)
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    want = p[i, j].item() * z[c, i, j].item()
                    assert abs(m[c, i, j].item() - want) < 1e-6


def test_regdec_shape_and_positivity():
    rd = RegDec(64)
    out = rd(torch.randn(2, 64, 9, 9))
    assert out.shape == (2, 4, 9, 9)
    assert (out > 0).all()


def test_regdec_zero_model_gives_constant_bias_response():
    rd = RegDec(64).eval()
    omega = torch.zeros(2, 64)
    z = torch.rand(2, 64, 9, 9)
    with torch.no_grad():
        out = rd(modulate(omega, z))
    assert torch.allclose(out[0], out[1], atol=1e-7)


def test_decode_box_hand_example():
    p = torch.zeros(9, 9)
    p[4, 5] = 2.5
    d = torch.ones(4, 9, 9)
    d[:, 4, 5] = 2.0
    box, peak = decode_box(p, d, stride=14)
    assert peak == 2.5
    assert box.as_tuple() == pytest.approx((49.0, 35.0, 105.0, 91.0))


def test_decode_box_tie_break_row_major():
    p = torch.ones(5, 5)
    d = torch.ones(4, 5, 5)
    box, peak = decode_box(p, d, stride=14)
    cx, cy = box.center
    assert (cx, cy) == pytest.approx((0.5 * 14, 0.5 * 14))  # cell (0, 0)
    p2 = torch.zeros(5, 5)
    p2[2, 1] = p2[2, 3] = 7.0
    box2, _ = decode_box(p2, d, stride=14)
    assert box2.center[0] == pytest.approx(1.5 * 14)  # column 1 wins


def test_decode_box_total_on_degenerate_reg():
    p = torch.zeros(3, 3)
    d = torch.zeros(4, 3, 3)
    box, _ = decode_box(p, d, stride=14)
    assert box.width > 0 and box.height > 0


def test_label_round_trip_through_decode():
    rng = np.random.default_rng(12)
    stride, grid = 14, 9
    for _ in range(100):
        x0, y0 = rng.uniform(2, 60, size=2)
        w, h = rng.uniform(18, 50, size=2)
        box = Box(x0, y0, min(x0 + w, 124.0), min(y0 + h, 124.0))
        cls = torch.tensor(encode_cls_label(box, grid, stride))
        reg, mask = encode_reg_label(box, grid, stride)
        got, peak = decode_box(cls, torch.tensor(reg), stride)
        assert peak == 1.0
        for a, b in zip(got.as_tuple(), box.as_tuple()):
            assert abs(a - b) < 1e-3  # argmax cell is valid -> exact recovery
        assert abs(got.center[0] - box.center[0]) <= stride
        assert abs(got.center[1] - box.center[1]) <= stride


def test_tracking_head_end_to_end():
    head = TrackingHead(PROFILES["small"])
    imgs = torch.rand(3, 3, 126, 126)
    feats = head.encode_frame(imgs)
    box = Box(30.0, 40.0, 80.0, 90.0)
    cls = torch.tensor(encode_cls_label(box, 9, 14)).unsqueeze(0)
    reg, mask = encode_reg_label(box, 9, 14)
    planes = label_stack(cls, torch.tensor(reg).unsqueeze(0),
                         torch.tensor(mask).unsqueeze(0))
    ref = head.build_reference(feats[:1], planes)
    refs = torch.stack([ref, ref], dim=1)
    omega, z = head.predict(refs, feats[2:3])
    p, d = head.head_outputs(omega, z)
    assert p.shape == (1, 9, 9)
    assert d.shape == (1, 4, 9, 9)
    bx, peak = decode_box(p[0], d[0], stride=14)
    assert bx.width > 0
    loss = p.square().mean() + d.square().mean()
    loss.backward()
    groups = [head.encoder.stem.weight, head.label_encoder.proj.weight,
              head.predictor.query, head.regdec.branches[0][0].weight]
    for g in groups:
        assert g.grad is not None and torch.isfinite(g.grad).all()


def test_tracking_head_gradient_probe():
    """Central-difference check on a handful of parameters across the stack."""
    torch.manual_seed(1)
    head = TrackingHead(PROFILES["small"]).double()
    imgs = torch.rand(2, 3, 126, 126, dtype=torch.float64)
    box = Box(30.0, 40.0, 80.0, 90.0)
    cls = torch.tensor(encode_cls_label(box, 9, 14), dtype=torch.float64)
    reg, mask = encode_reg_label(box, 9, 14)
    planes = label_stack(cls.unsqueeze(0), torch.tensor(reg, dtype=torch.float64).unsqueeze(0),
                         torch.tensor(mask).unsqueeze(0))

    def loss_value():
        feats = head.encode_frame(imgs)
        ref = head.build_reference(feats[:1], planes)
        omega, z = head.predict(torch.stack([ref, ref], dim=1), feats[1:2])
        p, d = head.head_outputs(omega, z)
        return p.square().mean() + d.mean()

    params = [
        ("stem", head.encoder.stem.weight, (0, 0, 3, 3)),
        ("labels", head.label_encoder.proj.weight, (5, 2, 1, 1)),
        ("query", head.predictor.query, (7,)),
        ("regdec", head.regdec.branches[1][2].weight, (0, 4, 1, 1)),
    ]
    loss = loss_value()
    loss.backward()
    step = 1e-4
    for name, tensor, idx in params:
        analytic = tensor.grad[idx].item()
        with torch.no_grad():
            orig = tensor[idx].item()
            tensor[idx] = orig + step
            hi = loss_value().item()
            tensor[idx] = orig - step
            lo = loss_value().item()
            tensor[idx] = orig
        fd = (hi - lo) / (2 * step)
        denom = max(abs(fd), abs(analytic), 1e-10)
        assert abs(fd - analytic) / denom < 1e-4, (name, analytic, fd)

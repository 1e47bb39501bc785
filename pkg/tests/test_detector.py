import math

import numpy as np
import pytest
import torch

from itfa.detector import (
    DELTA_CLAMP,
    Detector,
    DetectorConfig,
    DimensionError,
    StageError,
    classify_cosine,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    images_to_tensor,
)


def test_encode_decode_identity():
    g = torch.Generator().manual_seed(0)
    ref = torch.rand(50, 2, generator=g) * 40
    ref = torch.cat([ref, ref + 2 + torch.rand(50, 2, generator=g) * 20], 1).double()
    gt = torch.rand(50, 2, generator=g) * 40
    gt = torch.cat([gt, gt + 2 + torch.rand(50, 2, generator=g) * 20], 1).double()
    torch.testing.assert_close(decode_boxes(encode_boxes(gt, ref), ref), gt)
    assert torch.equal(decode_boxes(torch.zeros(50, 4, dtype=torch.float64), ref), ref)


def test_doubling_width_encodes_log2():
    ref = torch.tensor([[10.0, 10.0, 20.0, 20.0]])
    d = encode_boxes(torch.tensor([[5.0, 10.0, 25.0, 20.0]]), ref)
    torch.testing.assert_close(d, torch.tensor([[0.0, 0.0, math.log(2), 0.0]]))


def test_decode_clamps_large_deltas():
    ref = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    out = decode_boxes(torch.tensor([[0.0, 0.0, 100.0, 0.0]]), ref)
    assert torch.isfinite(out).all()
    assert (out[0, 2] - out[0, 0]).item() == pytest.approx(10 * math.exp(DELTA_CLAMP), rel=1e-5)


def test_anchor_layout(det_cfg):
    a = generate_anchors(det_cfg)
    assert a.shape == (8 * 8 * det_cfg.num_anchors, 4)
    centers = (a[:, :2] + a[:, 2:]) / 2
    torch.testing.assert_close(centers[0], torch.tensor([4.0, 4.0]))
    torch.testing.assert_close(centers[det_cfg.num_anchors], torch.tensor([12.0, 4.0]))


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_cosine_scale_invariance_and_bounds(alpha):
    g = torch.Generator().manual_seed(1)
    f, W = torch.randn(64, 32, generator=g), torch.randn(7, 32, generator=g)
    torch.testing.assert_close(classify_cosine(alpha * f, W, 20.0), classify_cosine(f, W, 20.0), atol=1e-5, rtol=0)
    assert classify_cosine(f, W, 20.0).abs().max() <= 20.0


def test_cosine_zero_feature():
    assert torch.equal(classify_cosine(torch.zeros(2, 8), torch.randn(3, 8), 20.0), torch.zeros(2, 3))


def test_cosine_has_no_bias_dependence(det_cfg):
    cfg = DetectorConfig(classifier="cosine")
    m = Detector(cfg, 6)
    f = torch.randn(4, cfg.roi_dim)
    before = m.classify(f)
    with torch.no_grad():
        m.cls["base"].b.add_(5.0)
    assert torch.equal(before, m.classify(f))


@pytest.mark.parametrize("num_base", [2, 6, 30])
def test_agnostic_regressor_contract(num_base):
    m = Detector(DetectorConfig(regressor="agnostic"), num_base)
    f = torch.randn(100, m.cfg.roi_dim)
    ref = m.regress_boxes(f)
    assert ref.shape == (100, 4)
    for hint in range(num_base + 4):
        assert torch.equal(m.regress_boxes(f, class_hint=hint), ref)


def test_specific_regressor():
    m = Detector(DetectorConfig(regressor="specific"), 6)
    f = torch.randn(5, m.cfg.roi_dim)
    assert m.all_class_deltas(f).shape == (5, 7, 4)
    with pytest.raises(ValueError):
        m.regress_boxes(f)
    torch.testing.assert_close(m.regress_boxes(f, 2), m.all_class_deltas(f)[:, 2])
    assert torch.equal(m.regress_boxes(f, 8), torch.zeros(5, 4))


def test_stage_handling(det_cfg):
    m = Detector(det_cfg, 6)
    assert m.stage == "base" and m.joint_width == 7
    with pytest.raises(StageError):
        m.classify(torch.randn(1, det_cfg.roi_dim), "novel")
    with pytest.raises(StageError):
        m.joint_predict(torch.zeros(1, 64, 8, 8), [torch.tensor([[0.0, 0, 8, 8]])])
    m.add_novel_branch(3)
    assert m.stage == "branched" and m.joint_width == 10
    with pytest.raises(StageError):
        m.add_novel_branch(3)
    names = {n for n, _ in m.named_parameters()}
    assert {"roi.novel.fc1.W", "roi.novel.fc2.b", "cls.novel.W", "cls.base.W", "reg.W"} <= names


def test_joint_forward_shapes(det_cfg):
    m = Detector(det_cfg, 6)
    m.add_novel_branch(3)
    m.eval()
    z = m.backbone_forward(images_to_tensor([np.zeros((64, 64, 3), np.float32)] * 2))
    props = m.rpn_forward(z)
    out = m.joint_predict(z, [p.boxes for p in props])
    n = sum(len(p.boxes) for p in props)
    assert out.probabilities.shape == (n, 10)
    torch.testing.assert_close(out.probabilities.sum(1), torch.ones(n))


def test_dimension_errors(det_cfg):
    m = Detector(det_cfg, 6)
    with pytest.raises(DimensionError):
        m.backbone_forward(torch.zeros(1, 3, 32, 32))
    with pytest.raises(DimensionError):
        m.backbone_forward(torch.zeros(64, 64))


def test_seeded_init_is_deterministic(det_cfg):
    a, b = Detector(det_cfg, 6, seed=3), Detector(det_cfg, 6, seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))

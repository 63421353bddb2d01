import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from superface.flops import count_flops
from superface.geometry import identity_grid
from superface.student import (AppearanceDistributor, Student, StudentConfig,
                               distribute_appearance)
from superface.teacher import ShapeMismatch, TeacherConfig


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_depth_constant_volume_is_recovered_exactly(depth, seed):
    g = torch.Generator().manual_seed(seed)
    plane = torch.rand(2, 4, 5, 5, generator=g, dtype=torch.float64)
    vol = plane[:, :, None].expand(2, 4, depth, 5, 5)
    dist = AppearanceDistributor(depth, 5, 5).double()
    with torch.no_grad():
        dist.logits.normal_(generator=g)
    assert torch.allclose(dist(vol), plane, atol=1e-12)


def test_distributor_weights_are_convex_and_functional_form_agrees():
    d = AppearanceDistributor(3, 4, 4)
    with torch.no_grad():
        d.logits.uniform_(-2, 2)
    w = d.weights()
    assert torch.allclose(w.sum(0), torch.ones(4, 4)) and (w >= 0).all()
    vol = torch.rand(1, 2, 3, 4, 4)
    assert torch.allclose(d(vol), distribute_appearance(vol, w))
    # single-slice oracle: a one-hot depth weight picks that slice
    onehot = torch.zeros(3, 4, 4)
    onehot[2] = 1
    assert torch.equal(distribute_appearance(vol, onehot), vol[:, :, 2])
    with pytest.raises(ShapeMismatch):
        d(torch.rand(1, 2, 5, 4, 4))


def test_student_forward_shapes_and_range():
    cfg = StudentConfig.for_teacher(TeacherConfig(), identities=("a", "b"))
    s = Student(cfg)
    y = s(torch.rand(2, 16, 16, 16), torch.rand(2, 15, 2) - .5, torch.rand(2, 15, 2) - .5)
    assert y.shape == (2, 3, 64, 64) and 0 <= y.min() and y.max() <= 1
    with pytest.raises(ShapeMismatch):
        s(torch.rand(2, 8, 16, 16), torch.zeros(2, 15, 2), torch.zeros(2, 15, 2))
    with pytest.raises(ShapeMismatch):
        s(torch.rand(2, 16, 16, 16), torch.zeros(2, 14, 2), torch.zeros(2, 15, 2))


def test_equal_keypoints_warp_is_identity():
    cfg = StudentConfig.for_teacher(TeacherConfig(), identities=("a",))
    s = Student(cfg)
    app = torch.rand(1, 16, 16, 16)
    kp = torch.rand(1, 15, 2) - 0.5
    _, aux = s(app, kp, kp, return_aux=True)
    assert (aux["warped"] - app).abs().max() < 1e-5
    assert torch.allclose(aux["grid"], identity_grid((16, 16))[None], atol=1e-6)


def test_appearance_cache_round_trip():
    cfg = StudentConfig.for_teacher(TeacherConfig(), identities=("a", "b"))
    s = Student(cfg)
    vol = torch.rand(16, 8, 16, 16)
    s.set_identity("b", volume=vol)
    with torch.no_grad():
        s.distributor.logits.normal_()
    live = s.appearance(torch.tensor([1]))
    s.cache_appearance()
    s.eval()
    assert torch.equal(s.appearance(torch.tensor([1])), live)
    state = s.state_dict()
    s2 = Student(cfg)
    s2.load_state_dict(state)
    s2.eval()
    assert torch.equal(s2.appearance(torch.tensor([1])), live)


def test_keypoint_head_output():
    cfg = StudentConfig.for_teacher(TeacherConfig())
    s = Student(cfg)
    p = s.predict_keypoints(torch.rand(3, 3, 64, 64), torch.rand(3, 3, 64, 64))
    assert p.shape == (3, 15, 2) and p.abs().max() <= 1.5
    s.kp_head.zero_init()
    assert torch.equal(s.predict_keypoints(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)),
                       torch.zeros(1, 15, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        StudentConfig(mode="other")
    with pytest.raises(ValueError):
        StudentConfig(gen_channels=(16, 8))


@pytest.mark.parametrize("preset", [TeacherConfig.toy, TeacherConfig.large_toy,
                                    TeacherConfig.full_scale])
def test_flops_ratio_for_shipped_pairs(preset):
    t = preset()
    s = StudentConfig.for_teacher(t)
    ratio = count_flops(s).total_macs / count_flops(t).total_macs
    assert ratio <= 0.011

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from superface.geometry import identity_grid
from superface.priors import canonical_face_68, edge_table_68, rasterize_mesh
from superface.teacher import (MultiScaleDiscriminator, PriorMismatch, ShapeMismatch, Teacher,
                               TeacherConfig, candidate_flows, combine_flows, warp_volume)


def tiny_config(**kw):
    base = dict(resolution=16, k=3, feat_channels=4, depth=2, enc_channels=(4, 4, 4),
                mem_channels=(4, 4, 4, 4), mem_hidden=8, landmark_embed=8,
                dmn_channels=(4, 4), gen_channels=(8, 4, 4), disc_channels=(4, 4))
    base.update(kw)
    return TeacherConfig(**base)


def tiny_inputs(cfg, batch=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    R = cfg.resolution
    lm = torch.as_tensor(canonical_face_68() * 0.6, dtype=dtype).expand(batch, 68, 3).clone()
    mesh = torch.as_tensor(rasterize_mesh(lm[0].numpy(), edge_table_68(), (R, R)).raster,
                           dtype=dtype).expand(batch, 3, R, R).clone()
    src = torch.rand(batch, 3, R, R, generator=g, dtype=dtype)
    drv = torch.rand(batch, 3, R, R, generator=g, dtype=dtype)
    local = lm[:, 48:68]
    return src, mesh, lm, drv, mesh, lm + 0.01, local


def test_identity_grid_warp_reproduces_features():
    feat = torch.randn(2, 4, 3, 5, 6)
    out = warp_volume(feat, identity_grid((3, 5, 6))[None].expand(2, 3, 5, 6, 3))
    assert (out - feat).abs().max() < 1e-5


def test_integer_shift_warp():
    feat = torch.randn(1, 2, 2, 8, 8, dtype=torch.float64)
    grid = identity_grid((2, 8, 8), torch.float64)[None].clone()
    grid[..., 0] += 2 / 8  # sample one pixel to the right
    out = warp_volume(feat, grid)
    assert torch.allclose(out[..., :-1], feat[..., 1:], atol=1e-12)
    assert torch.allclose(out[..., -1], feat[..., -1], atol=1e-12)  # border padding


def test_warp_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        warp_volume(torch.zeros(1, 2, 2, 4, 4), identity_grid((2, 4, 5))[None])


@given(st.integers(0, 10 ** 6))
def test_dense_motion_is_convex_combination_of_candidates(seed):
    cfg = tiny_config()
    torch.manual_seed(seed)
    t = Teacher(cfg).double()
    kp_s = torch.rand(2, cfg.k, 3, dtype=torch.float64) * 1.6 - 0.8
    kp_d = torch.rand(2, cfg.k, 3, dtype=torch.float64) * 1.6 - 0.8
    m = t.dense_motion(kp_s, kp_d)
    spatial = (cfg.depth, cfg.feat_size, cfg.feat_size)
    assert (m.weights.sum(1) - 1).abs().max() < 1e-5
    assert m.weights.min() >= 0
    # brute force: loop over voxels and candidates explicitly
    base = identity_grid(spatial, torch.float64).numpy()
    w = m.weights.detach().numpy()
    ks, kd = kp_s.numpy(), kp_d.numpy()
    expected = np.zeros(m.grid.shape)
    for b in range(2):
        for j in range(cfg.k + 1):
            shift = 0.0 if j == 0 else ks[b, j - 1] - kd[b, j - 1]
            expected[b] += w[b, j][..., None] * (base + shift)
    assert np.abs(m.grid.detach().numpy() - expected).max() < 1e-6
    assert torch.isfinite(m.grid).all()


def test_candidate_flow_zero_is_identity():
    kp = torch.rand(1, 4, 3)
    c = candidate_flows(kp, kp, (2, 3, 3))
    assert torch.equal(c[:, 0], identity_grid((2, 3, 3))[None])
    assert torch.allclose(c[:, 1:], identity_grid((2, 3, 3))[None, None].expand_as(c[:, 1:]))


def test_composition_identity_warp():
    cfg = tiny_config()
    t = Teacher(cfg)
    kp = torch.rand(1, cfg.k, 3) - 0.5
    spatial = (cfg.depth, cfg.feat_size, cfg.feat_size)
    onehot = torch.zeros(1, cfg.k + 1, *spatial)
    onehot[:, 0] = 1
    feat = torch.randn(1, *cfg.volume_shape)
    m = t.dense_motion(kp, kp, weights_override=onehot)
    assert (t.warp(feat, m) - feat).abs().max() < 1e-5
    # same keypoints make every candidate the identity, so any convex weights work
    m2 = t.dense_motion(kp, kp)
    assert (t.warp(feat, m2) - feat).abs().max() < 1e-5


def test_forward_shapes_and_keypoint_invariants():
    cfg = tiny_config()
    t = Teacher(cfg).double()
    src, sm, sl, drv, dm, dl, loc = tiny_inputs(cfg)
    out = t(src, sm, sl, drv, dm, dl, local=loc)
    assert out["y"].shape == (2, 3, 16, 16)
    assert 0 <= out["y"].min() and out["y"].max() <= 1
    assert out["feature"].shape == (2, *cfg.volume_shape)
    R = out["kp_src"].rotation
    assert (R.transpose(-1, -2) @ R - torch.eye(3, dtype=R.dtype)).abs().max() < 1e-4
    assert out["kp_src"].composed.abs().max() <= 1.5
    assert torch.equal(out["kp_drv_used"].canonical, out["kp_src"].canonical)
    assert out["motion"].grid.shape == (2, cfg.depth, cfg.feat_size, cfg.feat_size, 3)


def test_prior_and_shape_errors():
    cfg = tiny_config()
    t = Teacher(cfg)
    x = torch.rand(1, 3, 16, 16)
    with pytest.raises(ShapeMismatch):
        t.encode_appearance(torch.rand(1, 3, 32, 32))
    with pytest.raises(PriorMismatch):
        t.predict_keypoints(x, None, torch.zeros(1, 68, 3))
    with pytest.raises(PriorMismatch):
        t.predict_keypoints(x, torch.zeros(1, 3, 16, 16), None)
    with pytest.raises(PriorMismatch):
        t.predict_keypoints(x, torch.zeros(1, 3, 8, 8), torch.zeros(1, 68, 3))
    # ablated priors are not required
    t2 = Teacher(tiny_config(early_infusion=False, late_infusion=False))
    assert t2.predict_keypoints(x).canonical.shape == (1, 3, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        TeacherConfig(resolution=60)
    with pytest.raises(ValueError):
        TeacherConfig(downsample=3)
    with pytest.raises(ValueError):
        TeacherConfig(k=0)


def test_discriminator_map_sizes():
    d = MultiScaleDiscriminator(2, (16, 32))
    maps = d(torch.rand(2, 3, 64, 64))
    assert [tuple(m.shape) for m in maps] == [(2, 1, 16, 16), (2, 1, 8, 8)]


def _fd_check(module_params, readout, n_entries=6, eps=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled entries."""
    g = torch.Generator().manual_seed(seed)
    loss = readout()
    grads = torch.autograd.grad(loss, module_params, allow_unused=True)
    ana, num = [], []
    with torch.no_grad():
        for p, gr in zip(module_params, grads):
            flat = p.view(-1)
            for i in torch.randint(flat.numel(), (min(n_entries, flat.numel()),), generator=g):
                old = flat[i].item()
                flat[i] = old + eps
                up = readout().item()
                flat[i] = old - eps
                down = readout().item()
                flat[i] = old
                num.append((up - down) / (2 * eps))
                ana.append(0.0 if gr is None else gr.view(-1)[i].item())
    ana, num = np.array(ana), np.array(num)
    return np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)


@pytest.mark.parametrize("group", ["encoder", "mem", "dmn", "generator"])
def test_end_to_end_gradients_match_finite_differences(group):
    torch.manual_seed(0)
    cfg = tiny_config()
    t = Teacher(cfg).double()
    with torch.no_grad():
        # move away from the near-degenerate init where source and driving keypoints coincide
        t.mem.out.weight.normal_(0, 0.3)
    inputs = tiny_inputs(cfg)
    weight = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

    def readout():
        return (t(*inputs[:6], local=inputs[6])["y"] * weight).sum()

    params = [p for p in getattr(t, group).parameters() if p.requires_grad]
    err = _fd_check(params, readout)
    assert err < 1e-3, err

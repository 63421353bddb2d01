import math

import numpy as np
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from superface.geometry import (Affine2D, euler_to_matrix, identity_grid, matrix_to_euler,
                                rotation_from_6d, similarity_procrustes, to_normalized, to_pixels)

angles = st.floats(-1.2, 1.2)


@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)).filter(
    lambda a: np.linalg.matrix_rank(a.reshape(4, 2, 3)[0]) == 2 and
    all(np.linalg.matrix_rank(r.reshape(2, 3), tol=1e-2) == 2 for r in a)))
def test_6d_rotation_is_orthonormal(x):
    R = rotation_from_6d(torch.as_tensor(x))
    eye = torch.eye(3, dtype=R.dtype)
    assert (R.transpose(-1, -2) @ R - eye).abs().max() < 1e-4
    assert torch.allclose(torch.det(R), torch.ones(4, dtype=R.dtype), atol=1e-6)


@given(angles, angles, angles)
def test_euler_round_trip(yaw, pitch, roll):
    R = torch.as_tensor(euler_to_matrix(yaw, pitch, roll))
    back = matrix_to_euler(R).numpy()
    assert np.allclose(back, [yaw, pitch, roll], atol=1e-6)


def test_euler_axes():
    # positive yaw moves +z toward +x
    R = euler_to_matrix(math.pi / 2, 0, 0)
    assert np.allclose(R @ [0, 0, 1], [1, 0, 0], atol=1e-12)
    R = euler_to_matrix(0, 0, math.pi / 2)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@given(angles, angles, angles, st.floats(0.5, 2.0),
       arrays(np.float64, 3, elements=st.floats(-0.5, 0.5)))
def test_procrustes_recovers_similarity(yaw, pitch, roll, s, t):
    src = torch.as_tensor(np.random.default_rng(0).normal(size=(20, 3)))
    R = torch.as_tensor(euler_to_matrix(yaw, pitch, roll))
    dst = s * src @ R.T + torch.as_tensor(t)
    s2, R2, t2 = similarity_procrustes(src, dst)
    assert abs(float(s2) - s) < 1e-8
    assert torch.allclose(R2, R, atol=1e-8) and torch.allclose(t2, torch.as_tensor(t), atol=1e-8)


def test_procrustes_batched_matches_per_item(rng):
    src = torch.as_tensor(rng.normal(size=(5, 20, 3)))
    dst = torch.as_tensor(rng.normal(size=(5, 20, 3)))
    s, R, t = similarity_procrustes(src, dst)
    assert s.shape == (5,) and R.shape == (5, 3, 3) and t.shape == (5, 3)
    for i in range(5):
        si, Ri, ti = similarity_procrustes(src[i], dst[i])
        assert torch.allclose(s[i], si) and torch.allclose(R[i], Ri) and torch.allclose(t[i], ti)


def test_identity_grid_matches_pixel_centers():
    g = identity_grid((2, 4))
    assert g.shape == (2, 4, 2)
    assert torch.allclose(g[0, :, 0], torch.tensor([-0.75, -0.25, 0.25, 0.75]))
    assert torch.allclose(g[:, 0, 1], torch.tensor([-0.5, 0.5]))
    g3 = identity_grid((2, 3, 4))
    assert g3.shape == (2, 3, 4, 3)
    assert torch.allclose(g3[:, 0, 0, 2], torch.tensor([-0.5, 0.5]))


@given(arrays(np.float64, (7, 2), elements=st.floats(-1, 1)))
def test_pixel_conversion_round_trip(xy):
    assert np.allclose(to_normalized(to_pixels(xy, (32, 48)), (32, 48)), xy, atol=1e-12)


def test_affine_image_moves_content_with_points():
    img = torch.zeros(1, 1, 32, 32)
    img[0, 0, 8, 8] = 1.0  # pixel (x=8, y=8)
    T = Affine2D(np.eye(2), np.array([0.5, 0.25]))  # +8 px in x, +4 px in y
    out = T.apply_image(img)
    assert out[0, 0, 12, 16] == 1.0 and out.sum() == 1.0
    p = to_normalized(np.array([8.0, 8.0]), (32, 32))
    assert np.allclose(to_pixels(T.apply_points(p), (32, 32)), [16, 12])


def test_affine_landmarks_keep_depth(rng):
    T = Affine2D.random(rng)
    pts = rng.uniform(-1, 1, (5, 3))
    out = T.apply_landmarks(pts)
    assert np.array_equal(out[:, 2], pts[:, 2])
    tout = T.apply_landmarks(torch.as_tensor(pts))
    assert np.allclose(tout.numpy(), out)
    assert np.array_equal(Affine2D.identity().apply_landmarks(pts), pts)

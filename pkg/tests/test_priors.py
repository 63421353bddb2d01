import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from superface.priors import (REGIONS_68, GalleryProvider, LandmarkSet3D, NoFaceDetected,
                              UnknownRegion, canonical_face_68, detect_priors, edge_table_68,
                              extract_local, project_orthographic, rasterize_mesh,
                              read_edge_file, read_landmark_file, write_edge_file,
                              write_landmark_file)
from superface.toydata import FrameParams, Identity, render_face


def _pix_to_norm(i, n):
    return (2 * i + 1) / n - 1


def test_bresenham_segment_on_8x8():
    # endpoints at pixel centers (1, 1) and (6, 3); covered pixels enumerated by hand
    pts = np.zeros((2, 3))
    pts[0, :2] = _pix_to_norm(1, 8), _pix_to_norm(1, 8)
    pts[1, :2] = _pix_to_norm(6, 8), _pix_to_norm(3, 8)
    m = rasterize_mesh(pts, [(0, 1)], (8, 8)).raster
    expected = {(1, 1), (2, 1), (3, 2), (4, 2), (5, 3), (6, 3)}
    ys, xs = np.nonzero(m[0])
    assert set(zip(xs.tolist(), ys.tolist())) == expected
    assert m.min() >= 0 and m.max() <= 1
    assert np.array_equal(m[0], m[1]) and np.array_equal(m[0], m[2])


def test_translation_equivariance():
    lm = 0.5 * canonical_face_68()
    edges = edge_table_68()
    a = rasterize_mesh(lm, edges, (64, 64)).raster
    shifted = lm.copy()
    shifted[:, 0] += 0.25
    b = rasterize_mesh(shifted, edges, (64, 64)).raster
    # W/8 = 8 pixels; the face stays inside the frame so no cropping happens
    assert np.array_equal(b[:, :, 8:], a[:, :, :-8])
    assert not a[:, :, -8:].any()


def test_empty_edge_table_gives_zero_raster():
    m = rasterize_mesh(canonical_face_68(), np.zeros((0, 2), int), (16, 16))
    assert m.raster.shape == (3, 16, 16) and not m.raster.any()


def test_edge_index_out_of_range():
    with pytest.raises(IndexError):
        rasterize_mesh(np.zeros((2, 3)), [(0, 2)], (8, 8))


@given(st.randoms(use_true_random=False))
def test_raster_invariant_to_edge_permutation_and_direction(r):
    lm = canonical_face_68()
    edges = [tuple(e) for e in edge_table_68()]
    r.shuffle(edges)
    edges = [(b, a) if r.random() < 0.5 else (a, b) for a, b in edges]
    ref = rasterize_mesh(lm, edge_table_68(), (48, 48)).raster
    assert np.array_equal(rasterize_mesh(lm, edges, (48, 48)).raster, ref)


def test_project_orthographic_examples():
    assert np.allclose(project_orthographic(np.array([[0.1, -0.2, 0.9]])), [[0.1, -0.2]])
    assert project_orthographic(np.zeros((0, 3))).shape == (0, 2)


@given(arrays(np.float64, (15, 3), elements=st.floats(-1, 1)))
def test_project_is_column_slice(p):
    out = project_orthographic(p)
    assert np.array_equal(out, np.stack([p[:, 0], p[:, 1]], axis=1))


@given(arrays(np.float64, st.tuples(st.integers(0, 20), st.just(2)), elements=st.floats(-1, 1)))
def test_project_after_lift_is_identity(p2):
    lifted = np.concatenate([p2, np.zeros((len(p2), 1))], axis=1)
    assert np.array_equal(project_orthographic(lifted), p2)


def test_extract_local_regions():
    lm = LandmarkSet3D(canonical_face_68())
    mouth = extract_local(lm, "mouth")
    assert mouth.indices == tuple(range(48, 68))
    assert np.array_equal(mouth.landmarks, lm.points[48:68])
    eyes = extract_local(lm, "eyes")
    assert not set(eyes.indices) & set(mouth.indices)
    custom = extract_local(lm, "custom", custom=[30, 8, 3])
    assert np.array_equal(custom.landmarks, lm.points[[30, 8, 3]])
    with pytest.raises(UnknownRegion):
        extract_local(lm, "nose")
    with pytest.raises(UnknownRegion):
        extract_local(lm, "custom", custom=[70])


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet3D(np.full((68, 3), 2.0))
    with pytest.raises(ValueError):
        LandmarkSet3D(np.zeros((10, 3)))
    with pytest.raises(ValueError):
        LandmarkSet3D(np.zeros((68, 3)), confidence=1.5)
    LandmarkSet3D(np.zeros((10, 3)), topology_id="other")


def test_detect_priors_exact_and_deterministic(rng):
    ident = Identity.sample(rng)
    img, lm = render_face(ident, FrameParams(yaw=0.2, mouth_open=0.5), 64)
    gal = GalleryProvider()
    gal.register(img, LandmarkSet3D(lm))
    mesh, got = detect_priors(img, gal)
    assert np.abs(got.points - lm).max() < 1e-6
    assert np.abs(got.points).max() <= 1.0
    mesh2, got2 = detect_priors(img.copy(), gal)
    assert np.array_equal(mesh.raster, mesh2.raster) and np.array_equal(got.points, got2.points)
    assert mesh.raster.any()


def test_blank_frame_has_no_face():
    gal = GalleryProvider()
    with pytest.raises(NoFaceDetected):
        detect_priors(np.zeros((3, 32, 32), np.float32), gal)


def test_landmark_and_edge_files_round_trip(tmp_path, rng):
    recs = [(0, rng.uniform(-1, 1, (68, 3))), (5, rng.uniform(-1, 1, (68, 3)))]
    write_landmark_file(tmp_path / "lm.txt", recs)
    back = read_landmark_file(tmp_path / "lm.txt")
    assert sorted(back) == ["0", "5"]
    assert np.allclose(back["5"].points, recs[1][1], atol=1e-7)
    write_edge_file(tmp_path / "e.txt", edge_table_68())
    assert np.array_equal(read_edge_file(tmp_path / "e.txt"), edge_table_68())


def test_region_tables_are_fixed():
    assert REGIONS_68["mouth"] == tuple(range(48, 68))
    assert REGIONS_68["eyes"] == tuple(range(36, 48))

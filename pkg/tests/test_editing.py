import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from superface.editing import (MASK_DILATION, AudioTooShort, AudioWindow, MaskSpec,
                               ResolutionMismatch, apply_mask, audio2lip, batch_masks,
                               compose_signals, ConditioningBundle, log_mel, make_mask, mask_box,
                               mask_landmarks, read_edit_script, train_audio2lip)
from superface.priors import (REGIONS_68, LandmarkSet3D, LocalSignal, canonical_face_68,
                              edge_table_68, extract_local, rasterize_mesh)
from superface.teacher import Teacher, TeacherConfig
from superface.toydata import FrameParams, Identity, render_face
from superface.training import audio_pairs


def _norm(i, n=16):
    return (2 * i + 1) / n - 1


def test_mask_geometry_oracle():
    lm = np.zeros((68, 3))
    mouth = list(REGIONS_68["mouth"])
    lm[mouth, 0], lm[mouth, 1] = _norm(5), _norm(5)
    lm[mouth[0], :2] = _norm(4), _norm(5)
    lm[mouth[1], :2] = _norm(7), _norm(6)
    # box spans x 4..7, y 5..6: width 3, height 1; grow by ceil(0.15 * 3) = 1 pixel
    box, dil = mask_box(lm, mouth, (16, 16))
    assert box == (3, 4, 8, 7) and dil == 1
    spec = make_mask(lm, "mouth", (16, 16))
    expected = np.zeros((1, 16, 16), np.float32)
    expected[0, 4:8, 3:9] = 1
    assert np.array_equal(spec.mask, expected) and spec.dilation == 1
    assert MASK_DILATION == 0.15


def test_mask_clipped_to_frame():
    lm = np.zeros((68, 3))
    lm[list(REGIONS_68["mouth"]), :2] = np.linspace(-1.2, 1.2, 20)[:, None]
    spec = make_mask(lm, "mouth", (16, 16))
    assert spec.mask.all()


def test_mask_must_be_binary():
    with pytest.raises(ValueError):
        MaskSpec("mouth", np.full((1, 4, 4), 0.5), 0)


def test_apply_mask_idempotent_and_untouched_outside(rng):
    img = rng.random((3, 32, 32)).astype(np.float32)
    mesh = rng.random((3, 32, 32)).astype(np.float32)
    spec = make_mask(canonical_face_68() * 0.6, "mouth", (32, 32))
    a, b = apply_mask(img, mesh, spec)
    a2, b2 = apply_mask(a, b, spec)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    out = spec.mask[0] == 0
    assert np.array_equal(a[:, out], img[:, out]) and not a[:, ~out].any()
    ta, tb = apply_mask(torch.as_tensor(img), torch.as_tensor(mesh), spec.mask)
    assert np.array_equal(ta.numpy(), a) and np.array_equal(tb.numpy(), b)
    with pytest.raises(ResolutionMismatch):
        apply_mask(img, mesh[:, :16], spec)


def test_batch_masks_match_single():
    lms = torch.as_tensor(np.stack([canonical_face_68() * s for s in (0.5, 0.7)]))
    bm = batch_masks(lms, "mouth", (32, 32))
    for i in range(2):
        assert np.array_equal(bm[i].numpy(), make_mask(lms[i].numpy(), "mouth", (32, 32)).mask)


def test_mask_landmarks_zeroes_region_rows():
    lm = torch.as_tensor(canonical_face_68())
    out = mask_landmarks(lm)
    mouth = list(REGIONS_68["mouth"])
    assert not out[mouth].any()
    keep = [i for i in range(68) if i not in mouth]
    assert torch.equal(out[keep], lm[keep])
    assert torch.equal(lm, torch.as_tensor(canonical_face_68()))  # input untouched


@pytest.fixture(scope="module")
def toy_teacher():
    torch.manual_seed(0)
    return Teacher(TeacherConfig(k=6, mem_channels=(8, 8, 8, 8), mem_hidden=16,
                                 landmark_embed=16, enc_channels=(8, 8, 8),
                                 gen_channels=(16, 8, 8), dmn_channels=(8,))).eval()


def test_masked_pixels_cannot_reach_global_keypoints(toy_teacher):
    """100 random faces and masks: perturbing any pixel inside the mask is invisible."""
    rng = np.random.default_rng(0)
    edges = edge_table_68()
    for trial in range(100):
        ident = Identity.sample(rng)
        fp = FrameParams(yaw=rng.uniform(-.4, .4), pitch=rng.uniform(-.2, .2),
                         mouth_open=rng.uniform(0, 1))
        img, lm = render_face(ident, fp, 64)
        mesh = rasterize_mesh(lm, edges, (64, 64)).raster
        region = "mouth" if trial % 2 == 0 else "eyes"
        spec = make_mask(lm, region, (64, 64), dilation=rng.uniform(0, 0.3))
        ys, xs = np.nonzero(spec.mask[0])
        j = rng.integers(len(ys))
        img2, mesh2 = img.copy(), mesh.copy()
        img2[:, ys[j], xs[j]] = rng.random(3)
        mesh2[:, ys[j], xs[j]] = 1 - mesh2[:, ys[j], xs[j]]
        lmm = torch.as_tensor(mask_landmarks(lm, region), dtype=torch.float32)[None]
        outs = []
        for im, me in ((img, mesh), (img2, mesh2)):
            a, b = apply_mask(torch.as_tensor(im)[None], torch.as_tensor(me)[None], spec)
            with torch.no_grad():
                outs.append(toy_teacher.predict_keypoints(a, b, lmm).composed)
        assert torch.equal(outs[0], outs[1])


def test_local_signal_drives_output_deterministically(toy_teacher):
    t = toy_teacher
    cfg = t.cfg
    torch.manual_seed(1)
    feat = torch.randn(1, *cfg.volume_shape)
    kp_s = torch.rand(1, cfg.k, 3) - 0.5
    kp_d = kp_s + 0.05
    lm = torch.as_tensor(canonical_face_68(), dtype=torch.float32)
    lm_open = torch.as_tensor(canonical_face_68(mouth_open=1.0), dtype=torch.float32)
    mouth = list(REGIONS_68["mouth"])

    def render(local):
        with torch.no_grad():
            m = t.dense_motion(kp_s, kp_d, local)
            return t.generate(t.warp(feat, m), local)

    a = render(lm[mouth][None])
    assert torch.equal(a, render(lm[mouth][None]))
    assert not torch.equal(a, render(lm_open[mouth][None]))


def test_bundle_round_trip():
    t = Teacher(TeacherConfig(k=4))
    x = torch.rand(1, 3, 64, 64)
    lm = torch.as_tensor(canonical_face_68(), dtype=torch.float32)[None]
    with torch.no_grad():
        kp = t.predict_keypoints(x, x, lm)
    loc = extract_local(LandmarkSet3D(canonical_face_68()), "mouth", frame_index=3)
    bundle = compose_signals(kp, loc)
    back = ConditioningBundle.from_dict(json.loads(json.dumps(bundle.to_dict())))
    for n in ("canonical", "rotation", "translation", "expression"):
        assert torch.allclose(getattr(back.keypoints, n).float(), getattr(kp, n))
    assert np.array_equal(back.local.landmarks, loc.landmarks)
    assert back.local.region == "mouth" and back.local.frame_index == 3
    assert back.local_tensor().shape == (1, 20, 3)
    with pytest.raises(ValueError):
        compose_signals(kp, LocalSignal("nose", np.zeros((1, 3)), 0, (0,)))


def test_log_mel_shape_and_errors():
    w = log_mel(np.zeros(16000))
    assert w.features.shape == (1 + (16000 - 400) // 160, 40)
    assert np.isfinite(w.features).all() and w.duration == 1.0
    with pytest.raises(AudioTooShort):
        log_mel(np.zeros(399))
    with pytest.raises(ValueError):
        log_mel(np.zeros(16000), rate=8000)
    with pytest.raises(ValueError):
        AudioWindow(np.zeros((0, 40)))


@pytest.fixture(scope="module")
def lip_model(tiny_toy):
    return train_audio2lip(audio_pairs(tiny_toy, "train"), steps=300)


def test_audio2lip_length_and_determinism(lip_model, tiny_toy):
    pairs = audio_pairs(tiny_toy, "train")
    w = log_mel(pairs[0][0])
    ref = LandmarkSet3D(canonical_face_68())
    a = audio2lip(w, lip_model, ref, 17)
    b = audio2lip(w, lip_model, ref, 17)
    assert len(a) == 17 and all(s.landmarks.shape == (20, 3) for s in a)
    assert all(np.array_equal(x.landmarks, y.landmarks) for x, y in zip(a, b))
    assert [s.frame_index for s in a] == list(range(17))
    m2 = train_audio2lip(pairs, steps=5, seed=3)
    m3 = train_audio2lip(pairs, steps=5, seed=3)
    assert all(torch.equal(p, q) for p, q in zip(m2.state_dict().values(), m3.state_dict().values()))


def test_silence_keeps_mouth_at_rest(lip_model):
    ref = LandmarkSet3D(canonical_face_68())
    sig = audio2lip(log_mel(np.zeros(32000)), lip_model, ref, 50)
    rest = ref.points[list(REGIONS_68["mouth"])]
    dev = max(np.abs(s.landmarks - rest).max() for s in sig)
    step = max(np.abs(a.landmarks - b.landmarks).max() for a, b in zip(sig[1:], sig[:-1]))
    assert dev < 0.05 and step < 0.05


@given(st.lists(st.fixed_dictionaries({"frame": st.integers(0, 100),
                                       "region": st.sampled_from(["mouth", "eyes"]),
                                       "source": st.sampled_from(["audio", "clip_b/landmarks.txt"])}),
                max_size=5))
def test_edit_script_round_trip(entries):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        p = f"{d}/edit.json"
        with open(p, "w") as f:
            json.dump(entries, f)
        got = read_edit_script(p)
    assert [(e.frame, e.region, e.source) for e in got] == \
        [(e["frame"], e["region"], e["source"]) for e in entries]


@pytest.mark.parametrize("bad", [{"frame": 0, "region": "nose", "source": "audio"},
                                 {"frame": 0, "region": "mouth"},
                                 {"frame": 0, "region": "mouth", "source": "audio", "x": 1}])
def test_edit_script_rejects_bad_entries(tmp_path, bad):
    p = tmp_path / "e.json"
    p.write_text(json.dumps([bad]))
    with pytest.raises(ValueError):
        read_edit_script(p)

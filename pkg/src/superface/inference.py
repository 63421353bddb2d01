"""Checkpoint-driven generation (video, audio, edit script) and evaluation."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_manifest
from .distill import load_student
from .editing import (AudioWindow, apply_mask, audio2lip, batch_masks, log_mel, mask_landmarks,
                      read_edit_script)
from .flops import count_flops
from .frames import list_frames, read_image, read_wav
from .landmarker import RegressorProvider, expression_descriptor, pose_from_landmarks
from .losses import RandomPyramidExtractor, perceptual
from .metrics import DownsampleEmbedder, EvalReport, akd, apd, csim, energy, entropy
from .priors import (REGIONS_68, LandmarkSet3D, NoFaceDetected, edge_table_68, rasterize_mesh,
                     read_landmark_file)
from .student import StudentConfig
from .toydata import ToyDataset
from .training import TeacherState

log = logging.getLogger(__name__)


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=torch.float32)


def meshes_for(landmarks: np.ndarray, size) -> np.ndarray:
    edges = edge_table_68()
    return np.stack([rasterize_mesh(lm, edges, size).raster for lm in landmarks]).astype(np.float32)


def clip_landmarks(clip_dir, frames: np.ndarray, landmarker) -> np.ndarray:
    """Landmarks for every frame: the clip's sidecar where present, else the regressor."""
    table = {}
    path = Path(clip_dir) / "landmarks.txt"
    if path.exists():
        table = {int(k): v.points for k, v in read_landmark_file(path).items()}
    reg = RegressorProvider(landmarker)
    out = []
    for i, fr in enumerate(frames):
        out.append(table[i] if i in table else reg.landmarks(fr).points)
    return np.stack(out).astype(np.float32)


class TeacherEngine:
    kind = "teacher"

    def __init__(self, directory):
        self.state = TeacherState.load(directory)
        self.model = self.state.teacher.eval()
        self.landmarker = self.state.landmarker.eval()
        self.cfg = self.model.cfg
        self.manifest = read_manifest(directory)

    def set_source(self, image: np.ndarray, landmarks: np.ndarray | None = None, identity=None):
        if landmarks is None:
            landmarks = RegressorProvider(self.landmarker).landmarks(image).points
        self.src = _t(image)[None]
        self.src_lm = _t(landmarks)[None]
        self.src_mesh = _t(meshes_for(self.src_lm.numpy(), image.shape[-2:]))

    @torch.no_grad()
    def drive(self, frames, landmarks, local=None, masked=None, chunk=16) -> np.ndarray:
        """Generate one frame per driving frame.

        ``masked`` (bool per frame) zeroes the local region in the driving
        inputs; ``local`` (N, R, 3) overrides the local signal.
        """
        frames, landmarks = _t(frames), _t(landmarks)
        n = len(frames)
        meshes = _t(meshes_for(landmarks.numpy(), frames.shape[-2:]))
        region = self.cfg.local_region
        if region:
            if local is None:
                local = landmarks[:, list(REGIONS_68[region])]
            local = _t(local)
            if masked is not None:
                flip = torch.as_tensor(np.asarray(masked, dtype=bool))
                m = batch_masks(landmarks, region, frames.shape[-2:]) * flip[:, None, None, None]
                frames, meshes = apply_mask(frames, meshes, m)
                landmarks = torch.where(flip[:, None, None], mask_landmarks(landmarks, region), landmarks)
        feature = self.model.encode_appearance(self.src)
        out = []
        for a in range(0, n, chunk):
            b = min(n, a + chunk)
            k = b - a
            res = self.model(self.src.expand(k, -1, -1, -1), self.src_mesh.expand(k, -1, -1, -1),
                             self.src_lm.expand(k, -1, -1), frames[a:b], meshes[a:b],
                             landmarks[a:b], local=None if local is None else local[a:b],
                             feature=feature.expand(k, -1, -1, -1, -1))
            out.append(res["y"])
        return torch.cat(out).numpy()


class StudentEngine:
    kind = "student"

    def __init__(self, directory, mode: str | None = None):
        self.model, self.landmarker, self.manifest = load_student(directory)
        self.cfg: StudentConfig = self.model.cfg
        self.mode = mode or self.cfg.mode
        self.teacher = None

    def attach_teacher(self, teacher: TeacherEngine):
        """Delivered-motion mode takes driving keypoints from the teacher."""
        self.teacher = teacher

    def set_source(self, image: np.ndarray, landmarks=None, identity=None):
        if identity not in self.model.identity_index:
            raise KeyError(f"student was not trained for identity {identity!r}")
        self.idx = torch.tensor([self.model.identity_index[identity]])
        if self.teacher is not None:
            self.teacher.set_source(image, landmarks)

    @torch.no_grad()
    def drive(self, frames, landmarks, local=None, masked=None, chunk=32) -> np.ndarray:
        frames, landmarks = _t(frames), _t(landmarks)
        meshes = _t(meshes_for(landmarks.numpy(), frames.shape[-2:]))
        app = self.model.appearance(self.idx)
        p_src = self.model.source_p2d[self.idx]
        out = []
        for a in range(0, len(frames), chunk):
            b = min(len(frames), a + chunk)
            if self.mode == "delivered-motion":
                if self.teacher is None:
                    raise RuntimeError("delivered-motion mode needs a teacher checkpoint")
                kp = self.teacher.model.predict_keypoints(frames[a:b], meshes[a:b], landmarks[a:b])
                ks = self.teacher.model.predict_keypoints(self.teacher.src, self.teacher.src_mesh,
                                                          self.teacher.src_lm)
                p_drv = kp.with_canonical(ks.canonical.expand(b - a, -1, -1)).composed[..., :2]
                p_s = ks.composed[..., :2].expand(b - a, -1, -1)
            else:
                p_drv = self.model.predict_keypoints(frames[a:b], meshes[a:b])
                p_s = p_src.expand(b - a, -1, -1)
            out.append(self.model(app.expand(b - a, -1, -1, -1), p_s, p_drv))
        return torch.cat(out).numpy()


def load_engine(directory, mode=None):
    kind = read_manifest(directory)["kind"]
    if kind == "teacher":
        return TeacherEngine(directory)
    if kind == "student":
        return StudentEngine(directory, mode)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def drive_video(engine, source: np.ndarray, source_lm, clip_dir, identity=None) -> np.ndarray:
    frames = np.stack([read_image(p) for p in list_frames(clip_dir)])
    lms = clip_landmarks(clip_dir, frames, engine.landmarker)
    engine.set_source(source, source_lm, identity)
    return engine.drive(frames, lms)


def drive_audio(engine: TeacherEngine, source: np.ndarray, source_lm, wav_path, fps=25.0) -> np.ndarray:
    """Hold the source pose; the mouth follows audio2lip."""
    if engine.kind != "teacher" or not engine.cfg.local_region:
        raise ValueError("audio driving needs a teacher trained with a local region")
    samples, rate = read_wav(wav_path)
    n = max(1, int(round(len(samples) / rate * fps)))
    engine.set_source(source, source_lm)
    ref = LandmarkSet3D(engine.src_lm[0].double().numpy())
    signals = audio2lip(log_mel(samples, rate), engine.state.audio2lip.eval(), ref, n)
    local = np.stack([s.landmarks for s in signals])
    frames = np.repeat(source[None], n, 0)
    lms = np.repeat(engine.src_lm.numpy(), n, 0)
    return engine.drive(frames, lms, local=local, masked=np.ones(n, bool))


def drive_edit(engine: TeacherEngine, source: np.ndarray, source_lm, clip_dir, script_path,
               wav_path=None) -> np.ndarray:
    """Driving video whose listed frames take their local region from another source."""
    if engine.kind != "teacher" or not engine.cfg.local_region:
        raise ValueError("edit scripts need a teacher trained with a local region")
    frames = np.stack([read_image(p) for p in list_frames(clip_dir)])
    lms = clip_landmarks(clip_dir, frames, engine.landmarker)
    engine.set_source(source, source_lm)
    region = engine.cfg.local_region
    idx = list(REGIONS_68[region])
    local = lms[:, idx].copy()
    masked = np.zeros(len(frames), bool)
    audio_local = None
    base = Path(script_path).parent
    for e in read_edit_script(script_path):
        if e.region != region:
            raise ValueError(f"model edits {region!r} only, script asks for {e.region!r}")
        if not 0 <= e.frame < len(frames):
            raise ValueError(f"edit frame {e.frame} outside the clip")
        if e.source == "audio":
            if wav_path is None:
                raise ValueError("edit script uses audio but no audio file was given")
            if audio_local is None:
                samples, rate = read_wav(wav_path)
                ref = LandmarkSet3D(lms[0].astype(np.float64))
                sig = audio2lip(log_mel(samples, rate), engine.state.audio2lip.eval(), ref, len(frames))
                audio_local = np.stack([s.landmarks for s in sig])
            local[e.frame] = audio_local[e.frame]
        else:
            table = read_landmark_file(base / e.source)
            key = str(e.frame) if str(e.frame) in table else sorted(table, key=int)[0]
            local[e.frame] = table[key].points[idx]
        masked[e.frame] = True
    return engine.drive(frames, lms, local=local, masked=masked)


# --- evaluation ----------------------------------------------------------------

def evaluate(checkpoints, data_root, split="test", out_dir=None, max_frames=None,
             teacher_for_delivery=None) -> EvalReport:
    """Self-reenactment on every clip of ``split``: source = first usable frame."""
    ds = ToyDataset(data_root, split)
    embedder = DownsampleEmbedder()
    extractor = RandomPyramidExtractor()
    report = EvalReport(provenance={"embedder": embedder.provider_id, "landmarker": "regressor",
                                    "split": split, "checkpoints": {}})
    flops = {}
    for ck in checkpoints:
        eng = load_engine(ck)
        name = Path(ck).name if Path(ck).name not in ("teacher", "student") else \
            f"{Path(ck).parent.name}/{Path(ck).name}"
        report.provenance["checkpoints"][name] = eng.manifest["config_hash"]
        if eng.kind == "teacher":
            flops[name] = count_flops(eng.cfg).total_macs
        else:
            flops[name] = count_flops(eng.cfg, own_appearance=eng.manifest["own_appearance"]).total_macs
            if teacher_for_delivery is not None and eng.mode == "delivered-motion":
                eng.attach_teacher(TeacherEngine(teacher_for_delivery))
            elif eng.mode == "delivered-motion":
                eng.mode = "standalone-motion"
        for c in ds.clips:
            if eng.kind == "student" and c.identity not in eng.model.identity_index:
                continue
            valid = np.flatnonzero(c.valid)
            if len(valid) < 2:
                continue
            src_i = valid[0]
            drv_i = valid[1:] if max_frames is None else valid[1:1 + max_frames]
            eng.set_source(c.frames[src_i], c.landmarks[src_i], c.identity)
            gen = eng.drive(c.frames[drv_i], c.landmarks[drv_i])
            report.add(f"{name}|{c.name}", clip_metrics(gen, c.frames[drv_i], c.frames[src_i],
                                                        c.landmarks[drv_i], eng.landmarker, embedder,
                                                        extractor))
    report.flops = flops
    if out_dir is not None:
        report.write(out_dir)
    return report


@torch.no_grad()
def clip_metrics(gen, drv, src, drv_lm, landmarker, embedder, extractor) -> dict:
    res = gen.shape[-2:]
    lg = landmarker(_t(gen)).double()
    lt = torch.as_tensor(drv_lm, dtype=torch.float64)
    return {
        "csim": float(np.mean([csim(embedder, g, src) for g in gen])),
        "akd": akd(lg.numpy(), lt.numpy(), res),
        "apd": float(np.mean([apd(a, b) for a, b in zip(pose_from_landmarks(lg).numpy(),
                                                          pose_from_landmarks(lt).numpy())])),
        "aed": float(np.mean(np.abs((expression_descriptor(lg) - expression_descriptor(lt)).numpy()))),
        "energy": float(np.mean([energy(g) for g in gen])),
        "entropy": float(np.mean([entropy(g) for g in gen])),
        "perceptual": float(perceptual(_t(gen), _t(drv), extractor)),
        "l1": float(np.mean(np.abs(gen - drv))),
    }

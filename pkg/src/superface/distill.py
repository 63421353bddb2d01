"""Delivered-knowledge records and student training.

A teacher run is replayed over driving clips of each identity; every usable
frame becomes one on-disk sample holding the driving frame, its mesh raster,
the teacher output, both projected keypoint sets and the teacher appearance
volume of the identity's source image.
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig
from .data import EmptyResult
from .frames import list_frames, read_image, write_image
from .landmarker import LandmarkRegressor, PoseEstimator
from .losses import (RandomPyramidExtractor, gan_hinge, head_pose, local_loss, perceptual,
                     reconstruction, total_student)
from .priors import (REGIONS_68, GalleryProvider, LandmarkSet3D, NoFaceDetected, detect_priors,
                     edge_table_68, project_orthographic, read_landmark_file)
from .student import Student, StudentConfig
from .teacher import MultiScaleDiscriminator
from .training import TeacherState, frozen, set_determinism

log = logging.getLogger(__name__)

SAMPLE_FILES = ("frame.png", "mesh.png", "y.png", "kp.json", "app.bin", "meta.json")


# --- app.bin -----------------------------------------------------------------

def write_array(path, arr: np.ndarray):
    """Row-major float32 with an 8-byte header: four little-endian uint16 (ndim, d0, d1, d2)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 3 or max(arr.shape, default=0) > 0xFFFF:
        raise ValueError("app.bin holds at most 3 dims of size < 65536")
    dims = list(arr.shape) + [0] * (3 - arr.ndim)
    with open(path, "wb") as f:
        f.write(struct.pack("<4H", arr.ndim, *dims))
        f.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    ndim, *dims = struct.unpack("<4H", raw[:8])
    shape = tuple(dims[:ndim])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(shape).astype(np.float32)


# --- samples -----------------------------------------------------------------

@dataclass
class DistillSample:
    source_id: str
    frame_index: int
    frame: np.ndarray  # 3 x H x W driving frame
    mesh: np.ndarray  # 3 x H x W driving mesh raster
    y: np.ndarray  # 3 x H x W teacher output
    p2d_src: np.ndarray  # k x 2
    p2d_drv: np.ndarray  # k x 2
    landmarks: np.ndarray  # 68 x 3 driving landmarks
    appearance: np.ndarray  # (C * D') x H' x W' teacher volume, depth folded into channels
    meta: dict = field(default_factory=dict)


def write_sample(directory, s: DistillSample):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "frame.png", s.frame)
    write_image(d / "mesh.png", s.mesh)
    write_image(d / "y.png", s.y)
    kp = {"p2d_src": np.round(s.p2d_src, 7).tolist(), "p2d_drv": np.round(s.p2d_drv, 7).tolist(),
          "landmarks": np.round(s.landmarks, 7).tolist()}
    (d / "kp.json").write_text(json.dumps(kp))
    write_array(d / "app.bin", s.appearance)
    meta = {"source_id": s.source_id, "frame_index": s.frame_index, **s.meta}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_sample(directory) -> DistillSample:
    d = Path(directory)
    kp = json.loads((d / "kp.json").read_text())
    meta = json.loads((d / "meta.json").read_text())
    return DistillSample(meta["source_id"], meta["frame_index"], read_image(d / "frame.png"),
                         read_image(d / "mesh.png"), read_image(d / "y.png"),
                         np.array(kp["p2d_src"], np.float32), np.array(kp["p2d_drv"], np.float32),
                         np.array(kp["landmarks"], np.float32), read_array(d / "app.bin"), meta)


def clip_provider(clip_dirs, fallback: LandmarkRegressor | None = None):
    """Gallery of the clips' landmark sidecars; unknown images go to ``fallback``."""
    gallery = GalleryProvider(fallback=None)
    for c in clip_dirs:
        c = Path(c)
        lm_path = c / "landmarks.txt"
        if not lm_path.exists():
            continue
        table = read_landmark_file(lm_path)
        frames = list_frames(c)
        for key, lm in table.items():
            gallery.register(read_image(frames[int(key)]), lm)
    if fallback is None:
        return gallery
    from .landmarker import RegressorProvider
    reg = RegressorProvider(fallback)

    class _Chain:
        provider_id = "gallery+regressor"

        def landmarks(self, image):
            try:
                return gallery.landmarks(image)
            except NoFaceDetected:
                if float(np.asarray(image).var()) < gallery.variance_threshold:
                    raise
                return reg.landmarks(image)

    return _Chain()


@torch.no_grad()
def teacher_deliver(teacher, source, src_mesh, src_lm, frames, meshes, lms):
    """Teacher outputs plus delivered knowledge for a chunk of driving frames."""
    n = len(frames)
    src = source.expand(n, -1, -1, -1)
    local = None
    if teacher.cfg.local_region:
        local = lms[:, list(REGIONS_68[teacher.cfg.local_region])]
    out = teacher(src, src_mesh.expand(n, -1, -1, -1), src_lm.expand(n, -1, -1), frames, meshes,
                  lms, local=local)
    return (out["y"], project_orthographic(out["kp_src"].composed),
            project_orthographic(out["kp_drv_used"].composed), out["feature"][:1])


def build_distill_set(teacher_dir, sources: dict, driving: dict, out_dir, seed=0,
                      frames_per_identity: int | None = None, chunk=16) -> int:
    """Write one sample per usable driving frame; returns the number written.

    ``sources`` maps identity -> source image path; ``driving`` maps identity
    -> list of clip directories.  Frames without a detectable face are
    skipped and counted in the manifest.
    """
    torch.manual_seed(seed)
    st = TeacherState.load(teacher_dir)
    teacher = st.teacher.eval()
    thash = read_manifest(teacher_dir)["config_hash"]
    res = st.cfg.resolution
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges = edge_table_68()
    n_written, skipped, records = 0, [], []
    for ident in sorted(sources):
        clips = [Path(c) for c in driving.get(ident, [])]
        src_path = Path(sources[ident])
        provider = clip_provider(clips + [src_path.parent], frozen(st.landmarker))
        src_img = read_image(src_path)
        src_mesh, src_lm = detect_priors(src_img, provider, edges)
        to_t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
        src_t, src_mesh_t, src_lm_t = to_t(src_img)[None], to_t(src_mesh.raster)[None], to_t(src_lm.points)[None]
        usable = []
        for c in clips:
            for j, p in enumerate(list_frames(c)):
                img = read_image(p)
                if img.shape[-1] != res:
                    raise ValueError(f"{p}: resolution {img.shape[-1]} != teacher {res}")
                try:
                    mesh, lm = detect_priors(img, provider, edges, frame_id=f"{c.name}/{j}")
                except NoFaceDetected:
                    skipped.append(f"{ident}:{c.name}/{p.name}")
                    continue
                usable.append((c.name, j, img, mesh.raster, lm.points))
        if frames_per_identity is not None:
            usable = usable[:frames_per_identity]
        for k0 in range(0, len(usable), chunk):
            part = usable[k0:k0 + chunk]
            fr = to_t(np.stack([u[2] for u in part]))
            me = to_t(np.stack([u[3] for u in part]))
            lm = to_t(np.stack([u[4] for u in part]))
            y, ps, pd, vol = teacher_deliver(teacher, src_t, src_mesh_t, src_lm_t, fr, me, lm)
            app = vol[0].reshape(-1, *vol.shape[-2:]).numpy()
            for i, (clip, j, img, mesh, lmk) in enumerate(part):
                name = f"{n_written:06d}"
                write_sample(out / name, DistillSample(
                    ident, j, img, mesh, y[i].numpy(), ps[i].numpy(), pd[i].numpy(),
                    np.asarray(lmk, np.float32), app,
                    {"clip": clip, "teacher_hash": thash, "seed": seed,
                     "source": str(src_path.name)}))
                records.append(name)
                n_written += 1
        # the student needs the clean source and its priors too
        ident_dir = out / "sources" / ident
        ident_dir.mkdir(parents=True, exist_ok=True)
        write_image(ident_dir / "source.png", src_img)
        write_image(ident_dir / "mesh.png", src_mesh.raster)
        (ident_dir / "landmarks.json").write_text(json.dumps(np.round(src_lm.points, 7).tolist()))
    manifest = {"count": n_written, "skipped": len(skipped), "skipped_frames": skipped,
                "identities": sorted(sources), "teacher_hash": thash, "seed": seed,
                "samples": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if n_written == 0:
        raise EmptyResult("no usable driving frames")
    return n_written


@dataclass
class DistillSet:
    """All samples of one distill directory as tensors."""

    identities: list
    ident: torch.Tensor  # N
    frames: torch.Tensor
    meshes: torch.Tensor
    y: torch.Tensor
    p2d_src: torch.Tensor
    p2d_drv: torch.Tensor
    landmarks: torch.Tensor
    volumes: torch.Tensor  # per identity, (C * D') x H' x W'
    sources: torch.Tensor  # per identity
    source_meshes: torch.Tensor
    source_p2d: torch.Tensor

    def __len__(self):
        return len(self.ident)


def load_distill_set(directory, limit_per_identity: int | None = None) -> DistillSet:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    ids = man["identities"]
    samples = [read_sample(d / n) for n in man["samples"]]
    if limit_per_identity is not None:
        kept, count = [], {}
        for s in samples:
            if count.get(s.source_id, 0) < limit_per_identity:
                kept.append(s)
                count[s.source_id] = count.get(s.source_id, 0) + 1
        samples = kept
    t = lambda xs: torch.as_tensor(np.stack(xs), dtype=torch.float32)
    first = {}
    for s in samples:
        first.setdefault(s.source_id, s)
    ids = [i for i in ids if i in first]
    return DistillSet(
        ids, torch.tensor([ids.index(s.source_id) for s in samples]),
        t([s.frame for s in samples]), t([s.mesh for s in samples]), t([s.y for s in samples]),
        t([s.p2d_src for s in samples]), t([s.p2d_drv for s in samples]),
        t([s.landmarks for s in samples]),
        t([first[i].appearance for i in ids]),
        t([read_image(d / "sources" / i / "source.png") for i in ids]),
        t([read_image(d / "sources" / i / "mesh.png") for i in ids]),
        t([first[i].p2d_src for i in ids]))


# --- training ------------------------------------------------------------------

@dataclass
class StudentRun:
    student: Student
    disc: MultiScaleDiscriminator
    landmarker: LandmarkRegressor
    ablate: tuple
    target: str
    disc_mode: str


def make_student(scfg: StudentConfig, ds: DistillSet, ablate=()) -> Student:
    student = Student(scfg, own_appearance="no-app" in ablate)
    for i, name in enumerate(ds.identities):
        student.set_identity(name, ds.volumes[i], ds.sources[i], ds.source_p2d[i])
    return student


def student_keypoints(run: StudentRun, ds: DistillSet, idx: torch.Tensor, sel: torch.Tensor):
    st = run.student
    if "no-nk" in run.ablate:
        ident = ds.ident[idx]
        p_src = st.predict_keypoints(ds.sources[ident], ds.source_meshes[ident])
        p_drv = st.predict_keypoints(ds.frames[idx], ds.meshes[idx])
        return p_src, p_drv
    return ds.p2d_src[idx], ds.p2d_drv[idx]


def distill_step(run: StudentRun, ds: DistillSet, idx: torch.Tensor, opt, opt_d, extractor,
                 estimator, weights, train=True):
    """One student update on samples ``idx``; returns the LossBreakdown."""
    st, disc = run.student, run.disc
    ident = ds.ident[idx]
    p_src, p_drv = student_keypoints(run, ds, idx, idx)
    out = st(st.appearance(ident), p_src, p_drv)
    target = ds.y[idx] if run.target == "teacher" else ds.frames[idx]
    terms = {
        "perceptual": perceptual(out, target, extractor),
        "gan": gan_hinge(None, disc(out), "generator"),
        "head_pose": head_pose(out, target, estimator),
        "reconstruction": reconstruction(out, target),
        "local": local_loss(out, target, ds.landmarks[idx], extractor, run.landmarker),
    }
    bd = total_student(terms, weights)
    if train:
        opt.zero_grad(set_to_none=True)
        bd.total.backward()
        opt.step()
        if opt_d is not None:
            d_loss = gan_hinge(disc(target), disc(out.detach()), "discriminator")
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
    return bd


def train_standalone_motion(student: Student, ds: DistillSet, steps=400, batch_size=16, lr=1e-3,
                            seed=0) -> float:
    """Fit the planar keypoint head to the delivered driving keypoints.

    Returns the final mean keypoint error (mean L2 over keypoints, normalized units).
    """
    g = torch.Generator().manual_seed(seed)
    head = student.kp_head
    head.train()
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    for _ in range(steps):
        idx = torch.randint(0, len(ds), (min(batch_size, len(ds)),), generator=g)
        pred = head(ds.frames[idx], ds.meshes[idx])
        loss = F.smooth_l1_loss(pred, ds.p2d_drv[idx], beta=0.01)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    return keypoint_error(student, ds)


@torch.no_grad()
def keypoint_error(student: Student, ds: DistillSet) -> float:
    was = student.kp_head.training
    student.kp_head.eval()
    pred = student.kp_head(ds.frames, ds.meshes)
    student.kp_head.train(was)
    return float((pred - ds.p2d_drv).norm(dim=-1).mean())


def distill_student(cfg: RunConfig, teacher_dir, out_dir=None, distill_dir=None,
                    progress=None) -> Path:
    """Build (or reuse) the distill set and train one student; returns its checkpoint dir."""
    from .toydata import ToyDataset
    dc = cfg.distill
    set_determinism(cfg.seed, cfg.deterministic)
    out = Path(out_dir or cfg.out_dir) / "student"
    distill_dir = Path(distill_dir or Path(out_dir or cfg.out_dir) / "distill_set")
    if not (distill_dir / "manifest.json").exists():
        ds_train = ToyDataset(cfg.data.root, "train")
        names = dc.identities or ds_train.identities
        sources, driving = {}, {}
        for name in names:
            clips = [Path(cfg.data.root) / c.name for c in ds_train.clips_of(name)]
            if not clips:
                raise ValueError(f"identity {name!r} has no training clips")
            first_valid = int(np.flatnonzero(ds_train.clips_of(name)[0].valid)[0])
            sources[name] = list_frames(clips[0])[first_valid]
            driving[name] = clips
        build_distill_set(teacher_dir, sources, driving, distill_dir, cfg.seed)
    ds = load_distill_set(distill_dir, dc.frames_per_identity)
    if dc.identities:
        missing = set(dc.identities) - set(ds.identities)
        if missing:
            raise ValueError(f"identities {sorted(missing)} not in the distill set")
    tstate = TeacherState.load(teacher_dir)
    ablate = tuple(sorted(dc.ablate))
    scfg = cfg.student_config(ds.identities)
    torch.manual_seed(cfg.seed)
    student = make_student(scfg, ds, ablate)
    if "no-disc" in ablate:
        tc = tstate.teacher.cfg
        disc = MultiScaleDiscriminator(tc.disc_scales, tc.disc_channels)
    else:
        disc = copy.deepcopy(tstate.disc)
    landmarker = frozen(tstate.landmarker)
    train_disc = "no-disc" in ablate or dc.disc_mode == "finetune"
    if not train_disc:
        frozen(disc)
    run = StudentRun(student, disc, landmarker, ablate, dc.target, dc.disc_mode)
    params = [p for n, p in student.named_parameters() if not n.startswith("kp_head")
              or "no-nk" in ablate]
    opt = torch.optim.Adam(params, lr=dc.lr, betas=cfg.optim.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.optim.lr, betas=cfg.optim.betas) \
        if train_disc else None
    extractor = RandomPyramidExtractor()
    estimator = PoseEstimator(landmarker)
    g = torch.Generator().manual_seed(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    student.train()
    with open(out / "train_log.jsonl", "w") as logf:
        for it in range(dc.steps):
            idx = torch.randint(0, len(ds), (min(cfg.data.batch_size, len(ds)),), generator=g)
            bd = distill_step(run, ds, idx, opt, opt_d, extractor, estimator, cfg.loss_weights)
            logf.write(bd.to_json(it) + "\n")
            if progress:
                progress(it, bd)
    if "no-nk" in ablate:
        with torch.no_grad():
            student.source_p2d.copy_(student.predict_keypoints(ds.sources, ds.source_meshes))
        kp_err = keypoint_error(student, ds)
    else:
        kp_err = train_standalone_motion(student, ds, dc.head_steps, seed=cfg.seed)
    student.eval()
    student.cache_appearance()
    state = {"student": student.state_dict(), "landmarker": landmarker.state_dict()}
    extra = {"student_config": scfg.to_dict(), "identities": ds.identities, "variant": list(ablate),
             "target": dc.target, "disc_mode": dc.disc_mode, "teacher_hash": tstate.cfg.hash(),
             "samples": len(ds), "keypoint_error": kp_err, "own_appearance": "no-app" in ablate}
    save_checkpoint(out, "student", state, cfg, extra)
    return out


def load_student(directory) -> tuple[Student, LandmarkRegressor, dict]:
    manifest, state, cfg = load_checkpoint(directory)
    if manifest["kind"] != "student":
        raise ValueError(f"{directory} holds a {manifest['kind']} checkpoint")
    scfg = StudentConfig(**manifest["student_config"])
    student = Student(scfg, own_appearance=manifest["own_appearance"])
    student.load_state_dict(state["student"])
    lm = LandmarkRegressor(resolution=scfg.resolution)
    lm.load_state_dict(state["landmarker"])
    return student.eval(), frozen(lm), manifest

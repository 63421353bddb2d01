"""Teacher training: SSR source pairs, masked driving inputs, the eight-term objective."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, cache_dir
from .data import FrameBank, PairSampler, Prefetcher, load_bank
from .editing import Audio2Lip, apply_mask, batch_masks, mask_landmarks, train_audio2lip
from .frames import read_wav
from .landmarker import LandmarkRegressor, PoseEstimator, train_landmarker
from .losses import (RandomPyramidExtractor, equivariance, expression_reg, gan_hinge, head_pose,
                     keypoint_spread, local_loss, perceptual, reconstruction, total_teacher)
from .priors import REGIONS_68
from .teacher import MultiScaleDiscriminator, Teacher
from .toydata import ToyDataset

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


def set_determinism(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def frozen(module):
    module.eval()
    module.requires_grad_(False)
    return module


def audio_pairs(root, split="train", identities=None):
    """(samples, per-frame mouth openness) for every clip with an audio track."""
    ds = ToyDataset(root, split)
    out = []
    for c in ds.clips:
        wav = Path(root) / c.name / "audio.wav"
        if c.mouth_open is None or not wav.exists():
            continue
        if identities is not None and c.identity not in identities:
            continue
        samples, _ = read_wav(wav)
        out.append((samples, c.mouth_open))
    return out


class TeacherState:
    """Everything a teacher run owns, with (de)serialization."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        tcfg = cfg.teacher_config()
        self.teacher = Teacher(tcfg)
        self.disc = MultiScaleDiscriminator(tcfg.disc_scales, tcfg.disc_channels)
        self.landmarker = LandmarkRegressor(resolution=cfg.resolution)
        self.audio2lip = Audio2Lip()
        betas = cfg.optim.betas
        self.opt_g = torch.optim.Adam(self.teacher.parameters(), lr=cfg.optim.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.optim.lr, betas=betas)
        self.iteration = 0

    def state_dict(self) -> dict:
        return dict(teacher=self.teacher.state_dict(), disc=self.disc.state_dict(),
                    landmarker=self.landmarker.state_dict(), audio2lip=self.audio2lip.state_dict(),
                    opt_g=self.opt_g.state_dict(), opt_d=self.opt_d.state_dict(),
                    iteration=self.iteration, torch_rng=torch.get_rng_state())

    def load_state_dict(self, s: dict):
        self.teacher.load_state_dict(s["teacher"])
        self.disc.load_state_dict(s["disc"])
        self.landmarker.load_state_dict(s["landmarker"])
        self.audio2lip.load_state_dict(s["audio2lip"])
        self.opt_g.load_state_dict(s["opt_g"])
        self.opt_d.load_state_dict(s["opt_d"])
        self.iteration = s["iteration"]
        torch.set_rng_state(s["torch_rng"])

    def save(self, directory, extra=None):
        meta = {"iteration": self.iteration, "teacher_config": self.cfg.teacher_config().to_dict()}
        meta.update(extra or {})
        return save_checkpoint(directory, "teacher", self.state_dict(), self.cfg, meta)

    @classmethod
    def load(cls, directory) -> "TeacherState":
        manifest, state, cfg = load_checkpoint(directory)
        if manifest["kind"] != "teacher":
            raise ValueError(f"{directory} holds a {manifest['kind']} checkpoint")
        st = cls(cfg)
        st.load_state_dict(state)
        return st


def teacher_step(st: TeacherState, batch: dict, extractor, estimator, train=True) -> tuple:
    """One generator + discriminator update.  Returns (LossBreakdown, disc loss)."""
    cfg, tcfg = st.cfg, st.teacher.cfg
    teacher, disc = st.teacher, st.disc
    src, drv, drv_lm = batch["src"], batch["drv"], batch["drv_lm"]
    drv_in, drv_mesh, drv_lm_in = drv, batch["drv_mesh"], drv_lm
    local = None
    if tcfg.local_region:
        region = tcfg.local_region
        flip = batch["mask_flip"]
        masks = batch_masks(drv_lm, region, drv.shape[-2:]) * flip[:, None, None, None].to(drv.dtype)
        drv_in, drv_mesh = apply_mask(drv, drv_mesh, masks)
        drv_lm_in = torch.where(flip[:, None, None], mask_landmarks(drv_lm, region), drv_lm)
        local = drv_lm[:, list(REGIONS_68[region])]
    no_ssr = "no-ssr" in cfg.train.ablate
    feature = teacher.encode_appearance(src if no_ssr else batch["src_low"])
    out = teacher(src, batch["src_mesh"], batch["src_lm"], drv_in, drv_mesh, drv_lm_in,
                  local=local, feature=feature)
    y = out["y"]
    flags = {}
    terms = {
        "perceptual": perceptual(y, drv, extractor),
        "gan": gan_hinge(None, disc(y), "generator"),
        "keypoint": keypoint_spread(out["kp_src"].canonical, cfg.train.keypoint_threshold),
        "expression": 0.5 * (expression_reg(out["kp_src"].expression)
                             + expression_reg(out["kp_drv"].expression)),
        "head_pose": head_pose(y, drv, estimator),
        "equivariance": equivariance(teacher.mem, src, batch["src_mesh"], batch["src_lm"],
                                     batch["transform"]),
        "reconstruction": reconstruction(y, drv),
        "local": local_loss(y, drv, drv_lm, extractor, estimator.landmarker, flags=flags),
    }
    bd = total_teacher(terms, st.cfg.loss_weights)
    if flags.get("landmarks_skipped"):
        bd.skipped.add("local-landmarks")
    d_loss = torch.zeros(())
    if train:
        st.opt_g.zero_grad(set_to_none=True)
        bd.total.backward()
        st.opt_g.step()
        d_loss = gan_hinge(disc(drv), disc(y.detach()), "discriminator")
        st.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        st.opt_d.step()
    return bd, float(d_loss.detach())


def _trim_log(path: Path, start: int):
    """Keep only records with iter < start, so a resumed run continues the numbering."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iter"] < start]
    path.write_text("".join(ln + "\n" for ln in keep))


def prepare_auxiliary(st: TeacherState, bank: FrameBank, cfg: RunConfig):
    """Fit the landmark regressor and the audio2lip model used alongside the teacher.

    With ``SUPERFACE_CACHE`` set, fitted models are reused across runs on the
    same data, steps and seed.
    """
    t0 = time.time()
    cached = None
    root = cache_dir()
    if root is not None:
        key = hashlib.sha256(json.dumps([
            (Path(cfg.data.root) / "split.json").read_text(), cfg.data.identities,
            cfg.train.landmarker_steps, cfg.train.audio2lip_steps, cfg.seed, cfg.resolution,
        ]).encode()).hexdigest()[:16]
        cached = root / f"auxiliary-{key}.pt"
        if cached.exists():
            s = torch.load(cached, map_location="cpu")
            st.landmarker.load_state_dict(s["landmarker"])
            st.audio2lip.load_state_dict(s["audio2lip"])
            log.info("auxiliary models loaded from %s", cached)
            return
    lm = train_landmarker(bank.frames, bank.landmarks, steps=cfg.train.landmarker_steps,
                          seed=cfg.seed)
    st.landmarker.load_state_dict(lm.state_dict())
    pairs = audio_pairs(cfg.data.root, "train", cfg.data.identities)
    if pairs and cfg.train.audio2lip_steps:
        a2l = train_audio2lip(pairs, steps=cfg.train.audio2lip_steps, seed=cfg.seed)
        st.audio2lip.load_state_dict(a2l.state_dict())
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"landmarker": st.landmarker.state_dict(),
                    "audio2lip": st.audio2lip.state_dict()}, cached)
    log.info("auxiliary models ready in %.1fs", time.time() - t0)


def train_teacher(cfg: RunConfig, out_dir=None, resume=False, progress=None) -> Path:
    """Train (or resume) a teacher; returns the checkpoint directory.

    ``progress(iteration, breakdown)`` is called after every update.
    """
    out = Path(out_dir or cfg.out_dir) / "teacher"
    set_determinism(cfg.seed, cfg.deterministic)
    bank = load_bank(cfg.data.root, "train", cfg.data.identities)
    if bank.resolution != cfg.resolution:
        raise ValueError(f"dataset resolution {bank.resolution} != config {cfg.resolution}")
    if resume and (out / "manifest.json").exists():
        st = TeacherState.load(out)
        if read_manifest(out)["config_hash"] != cfg.hash():
            log.warning("resuming with a config that differs from the checkpoint")
        st.cfg = cfg
    else:
        st = TeacherState(cfg)
        prepare_auxiliary(st, bank, cfg)
    frozen(st.landmarker)
    extractor = RandomPyramidExtractor()
    estimator = PoseEstimator(st.landmarker)
    degr = None if "no-ssr" in cfg.train.ablate else cfg.degradation
    sampler = PairSampler(bank, cfg.data.batch_size, cfg.seed, degr, cfg.train.mask_prob)
    workers = 0 if cfg.deterministic else cfg.data.workers
    log_path = out / LOG_NAME
    out.mkdir(parents=True, exist_ok=True)
    _trim_log(log_path, st.iteration)
    st.teacher.train()
    st.disc.train()
    with open(log_path, "a") as logf:
        for batch in Prefetcher(sampler, st.iteration, cfg.train.iterations, workers,
                                cfg.data.queue_size):
            it = batch["index"]
            bd, d_loss = teacher_step(st, batch, extractor, estimator)
            rec = json.loads(bd.to_json(it))
            rec["disc"] = d_loss
            logf.write(json.dumps(rec) + "\n")
            logf.flush()
            st.iteration = it + 1
            if progress:
                progress(it, bd)
            if st.iteration % cfg.train.checkpoint_every == 0 and st.iteration < cfg.train.iterations:
                st.save(out, {"identities": bank.identities})
    st.save(out, {"identities": bank.identities})
    return out


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]

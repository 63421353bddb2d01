"""Hermetic toy data: parametric face sketches with exact 68-point landmarks.

Each identity has fixed shape and color parameters; each clip moves the head
along smooth random trajectories and opens the mouth following a syllable
envelope that also drives a synthetic voice track.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .frames import read_image, write_clip, write_wav, list_frames, frame_name
from .geometry import euler_to_matrix
from .priors import (GalleryProvider, LandmarkSet3D, canonical_face_68, edge_table_68,
                     read_landmark_file, write_edge_file, write_landmark_file)

AUDIO_RATE = 16000


@dataclass
class Identity:
    width: float = 1.0
    jaw: float = 1.0
    eye_spacing: float = 1.0
    mouth_width: float = 1.0
    skin: tuple = (0.85, 0.7, 0.6)
    hair: tuple = (0.25, 0.15, 0.1)
    bg_top: tuple = (0.3, 0.4, 0.6)
    bg_bottom: tuple = (0.6, 0.7, 0.8)
    stripe_freq: float = 3.0
    pitch_hz: float = 150.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Identity":
        u = lambda lo, hi, n=None: tuple(rng.uniform(lo, hi, n)) if n else float(rng.uniform(lo, hi))
        return cls(width=u(0.9, 1.1), jaw=u(0.9, 1.1), eye_spacing=u(0.9, 1.1),
                   mouth_width=u(0.85, 1.15), skin=u(0.45, 0.95, 3), hair=u(0.0, 0.5, 3),
                   bg_top=u(0.1, 0.9, 3), bg_bottom=u(0.1, 0.9, 3), stripe_freq=u(2.0, 6.0),
                   pitch_hz=u(110.0, 220.0))


@dataclass
class FrameParams:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.35
    mouth_open: float = 0.0
    eye_open: float = 1.0
    brow_raise: float = 0.0


def face_points(ident: Identity, fp: FrameParams, extra: np.ndarray | None = None) -> np.ndarray:
    """Image-space 68x3 landmarks (or ``extra`` face-space points) for a frame."""
    pts = canonical_face_68(fp.mouth_open, fp.eye_open, fp.brow_raise, ident.width, ident.jaw,
                            ident.eye_spacing, ident.mouth_width) if extra is None else extra
    R = euler_to_matrix(fp.yaw, fp.pitch, fp.roll)
    return fp.scale * pts @ R.T + np.array([fp.tx, fp.ty, 0.0])


def _outline(ident: Identity, grow=1.0, n=13) -> np.ndarray:
    th = np.linspace(0, math.pi, n)
    return np.stack([0.45 * ident.width * grow * np.cos(th),
                     -0.05 - (0.5 * grow) * np.sin(th),
                     -0.35 + 0.35 * np.sin(th)], -1)


def render_face(ident: Identity, fp: FrameParams, resolution=64, ss=4) -> tuple[np.ndarray, np.ndarray]:
    """Render one frame; returns (image 3xHxW float32 in [0, 1], landmarks 68x3)."""
    H = W = resolution * ss
    lm = face_points(ident, fp)
    yy = np.linspace(0, 1, H)[:, None, None]
    xx = np.linspace(0, 1, W)[None, :, None]
    top, bot = np.array(ident.bg_top), np.array(ident.bg_bottom)
    img = top * (1 - yy) + bot * yy + 0.06 * np.sin(2 * math.pi * ident.stripe_freq * (xx + 0.3 * yy))
    img = np.clip(img, 0, 1).astype(np.float32) * np.ones((H, W, 3), np.float32)

    def pix(p):
        q = np.stack([(p[:, 0] + 1) * W / 2 - 0.5, (p[:, 1] + 1) * H / 2 - 0.5], -1)
        return np.round(q * 16).astype(np.int32)

    def poly(p, color):
        cv2.fillPoly(img, [pix(p)], color, lineType=cv2.LINE_AA, shift=4)

    def line(p, color, width, closed=False):
        cv2.polylines(img, [pix(p)], closed, color, width * ss, lineType=cv2.LINE_AA, shift=4)

    poly(face_points(ident, fp, _outline(ident, 1.18)), tuple(ident.hair))
    head = np.concatenate([lm[0:17], face_points(ident, fp, _outline(ident))[1:-1]])
    skin = np.array(ident.skin)
    poly(head, tuple(skin))
    poly(lm[27:36][[0, 4, 5, 8]], tuple(skin * 0.85))
    dark = tuple(skin * 0.3)
    line(lm[17:22], tuple(np.array(ident.hair) * 0.8), 1)
    line(lm[22:27], tuple(np.array(ident.hair) * 0.8), 1)
    for eye in (lm[36:42], lm[42:48]):
        poly(eye, (0.95, 0.95, 0.95))
        c = eye[:, :2].mean(0)
        r = max(1, int(round(0.035 * fp.scale * W / 2 * fp.eye_open)))
        cx, cy = (c + 1) * W / 2 - 0.5
        cv2.circle(img, (int(cx * 16), int(cy * 16)), r * 16, (0.1, 0.1, 0.15), -1, cv2.LINE_AA, 4)
        line(eye, dark, 1, closed=True)
    line(lm[27:31], dark, 1)
    line(lm[31:36], dark, 1)
    poly(lm[48:60], (0.75, 0.25, 0.3))
    poly(lm[60:68], (0.2, 0.05, 0.08))
    out = cv2.resize(img, (resolution, resolution), interpolation=cv2.INTER_AREA)
    out = np.clip(out, 0, 1).transpose(2, 0, 1).astype(np.float32)
    # quantize so the in-memory frame equals what a PNG round trip yields
    out = (np.round(out * 255) / 255).astype(np.float32)
    return out, lm


def _smooth_track(rng, n, fps, amp, n_waves=2):
    t = np.arange(n) / fps
    out = np.zeros(n)
    for _ in range(n_waves):
        f = rng.uniform(0.15, 0.6)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * math.pi * f * t + rng.uniform(0, 2 * math.pi))
    return amp * out / n_waves


def syllable_envelope(rng, duration, rate, silence=False) -> np.ndarray:
    """Piecewise raised-cosine syllables with gaps; zero for silence."""
    n = int(round(duration * rate))
    env = np.zeros(n)
    if silence:
        return env
    t = rng.uniform(0.0, 0.2)
    while t < duration:
        d = rng.uniform(0.15, 0.4)
        a, b = int(t * rate), min(n, int((t + d) * rate))
        if b > a:
            env[a:b] = rng.uniform(0.5, 1.0) * np.sin(np.linspace(0, math.pi, b - a)) ** 2
        t += d + rng.uniform(0.05, 0.35)
    return env


def synth_voice(envelope: np.ndarray, pitch_hz: float, rng, rate=AUDIO_RATE) -> np.ndarray:
    t = np.arange(len(envelope)) / rate
    vib = 1 + 0.02 * np.sin(2 * math.pi * 5 * t)
    phase = 2 * math.pi * np.cumsum(pitch_hz * vib) / rate
    harm = sum(w * np.sin(h * phase) for h, w in [(1, 1.0), (2, 0.6), (3, 0.4), (5, 0.25), (8, 0.15)])
    sig = 0.3 * envelope * harm / 2.4 + 0.002 * rng.standard_normal(len(t))
    return np.clip(sig, -1, 1)


def make_clip(ident: Identity, rng: np.random.Generator, n_frames=50, fps=25.0, resolution=64,
              silence=False, motion=1.0):
    """Frames, landmarks, per-frame params and the 16 kHz voice track of one clip."""
    env_audio = syllable_envelope(rng, n_frames / fps, AUDIO_RATE, silence)
    idx = np.minimum((np.arange(n_frames) / fps * AUDIO_RATE).astype(int), len(env_audio) - 1)
    # mouth follows the envelope averaged over the frame period
    win = int(AUDIO_RATE / fps)
    mouth = np.array([env_audio[i:i + win].mean() if len(env_audio[i:i + win]) else 0.0 for i in idx])
    tracks = dict(yaw=_smooth_track(rng, n_frames, fps, 0.45 * motion),
                  pitch=_smooth_track(rng, n_frames, fps, 0.25 * motion),
                  roll=_smooth_track(rng, n_frames, fps, 0.18 * motion),
                  tx=_smooth_track(rng, n_frames, fps, 0.08 * motion),
                  ty=_smooth_track(rng, n_frames, fps, 0.06 * motion),
                  scale=1.35 + _smooth_track(rng, n_frames, fps, 0.08 * motion),
                  eye_open=np.clip(1 - 0.8 * (_smooth_track(rng, n_frames, fps, 1.0) > 0.55), 0.2, 1),
                  brow_raise=np.clip(_smooth_track(rng, n_frames, fps, 1.0), 0, 1))
    frames, lms, params = [], [], []
    for i in range(n_frames):
        fp = FrameParams(mouth_open=float(mouth[i]), **{k: float(v[i]) for k, v in tracks.items()})
        img, lm = render_face(ident, fp, resolution)
        frames.append(img)
        lms.append(lm)
        params.append(asdict(fp))
    audio = synth_voice(env_audio, ident.pitch_hz, rng)
    return frames, lms, params, audio


def make_toy_dataset(root, n_identities=2, train_clips=3, test_clips=1, frames_per_clip=50,
                     resolution=64, fps=25.0, seed=0, blank_frames=0) -> dict:
    """Write the toy dataset and return its split manifest.

    ``blank_frames`` replaces that many frames at the end of the first
    training clip of each identity with black frames (no face), exercising
    the skip paths; their ids are listed under ``skipped``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_edge_file(root / "edges.txt", edge_table_68())
    ss = np.random.SeedSequence(seed)
    split = {"train": [], "test": [], "skipped": [], "resolution": resolution, "fps": fps,
             "seed": seed}
    for i, child in enumerate(ss.spawn(n_identities)):
        rng = np.random.default_rng(child)
        ident = Identity.sample(rng)
        id_dir = root / f"id{i:02d}"
        id_dir.mkdir(exist_ok=True)
        (id_dir / "identity.json").write_text(json.dumps(asdict(ident), indent=2))
        for c in range(train_clips + test_clips):
            frames, lms, params, audio = make_clip(ident, rng, frames_per_clip, fps, resolution)
            name = f"id{i:02d}/clip{c:02d}"
            records = list(enumerate(lms))
            if c == 0 and blank_frames:
                for j in range(frames_per_clip - blank_frames, frames_per_clip):
                    frames[j] = np.zeros_like(frames[j])
                    split["skipped"].append(f"{name}/{frame_name(j)}")
                records = records[:frames_per_clip - blank_frames]
            clip_dir = root / name
            write_clip(clip_dir, frames, fps, {"identity": f"id{i:02d}"})
            write_landmark_file(clip_dir / "landmarks.txt", records)
            (clip_dir / "params.json").write_text(json.dumps(params))
            write_wav(clip_dir / "audio.wav", audio)
            split["train" if c < train_clips else "test"].append(name)
    (root / "split.json").write_text(json.dumps(split, indent=2))
    return split


@dataclass
class ClipData:
    name: str
    identity: str
    frames: np.ndarray  # N x 3 x H x W float32
    landmarks: np.ndarray  # N x 68 x 3, NaN rows for frames without priors
    valid: np.ndarray  # N bool
    mouth_open: np.ndarray | None = None


class ToyDataset:
    """In-memory view of a toy dataset directory."""

    def __init__(self, root, split="train"):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "split.json").read_text())
        self.clips: list[ClipData] = [self._load(n) for n in self.manifest[split]]
        ids = sorted({c.identity for c in self.clips})
        self.identities = ids

    def _load(self, name) -> ClipData:
        d = self.root / name
        paths = list_frames(d)
        frames = np.stack([read_image(p) for p in paths])
        lm_file = read_landmark_file(d / "landmarks.txt")
        lms = np.full((len(paths), 68, 3), np.nan)
        for k, v in lm_file.items():
            lms[int(k)] = v.points
        valid = ~np.isnan(lms[:, 0, 0])
        meta = json.loads((d / "clip.json").read_text())
        mouth = None
        if (d / "params.json").exists():
            mouth = np.array([p["mouth_open"] for p in json.loads((d / "params.json").read_text())])
        return ClipData(name, meta.get("identity", name.split("/")[0]), frames, lms, valid, mouth)

    def gallery(self, provider: GalleryProvider | None = None) -> GalleryProvider:
        provider = provider or GalleryProvider()
        for c in self.clips:
            for img, lm, ok in zip(c.frames, c.landmarks, c.valid):
                if ok:
                    provider.register(img, LandmarkSet3D(lm))
        return provider

    def clips_of(self, identity: str) -> list[ClipData]:
        return [c for c in self.clips if c.identity == identity]

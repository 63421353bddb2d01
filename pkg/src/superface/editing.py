"""Mask training, local-signal conditioning and audio-driven mouth motion.

Global keypoints are predicted from inputs whose edited region is masked out,
so they cannot carry information about that region; the region is driven
instead by its own landmarks (from another clip, or from audio).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .geometry import similarity_procrustes
from .landmarker import mean_face
from .priors import REGIONS_68, LandmarkSet3D, LocalSignal, region_indices
from .teacher import NeuralKeypoints

MASK_DILATION = 0.15


class ResolutionMismatch(ValueError):
    pass


class AudioTooShort(ValueError):
    pass


@dataclass
class MaskSpec:
    region: str
    mask: np.ndarray  # 1 x H x W in {0, 1}
    dilation: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


def mask_box(points: np.ndarray, region_idx, size, dilation=MASK_DILATION):
    """Integer pixel box (x0, y0, x1, y1), inclusive, around region landmarks.

    The landmark bounding box (pixel-center coordinates) grows on every side
    by ``ceil(dilation * max(width, height))`` pixels and is clipped to the
    frame.  Returns the box and the dilation in pixels.
    """
    H, W = size
    p = np.asarray(points, dtype=np.float64)[list(region_idx), :2]
    px = (p[:, 0] + 1) * W / 2 - 0.5
    py = (p[:, 1] + 1) * H / 2 - 0.5
    bw, bh = px.max() - px.min(), py.max() - py.min()
    dil = int(math.ceil(dilation * max(bw, bh)))
    x0 = max(0, int(math.floor(px.min())) - dil)
    y0 = max(0, int(math.floor(py.min())) - dil)
    x1 = min(W - 1, int(math.ceil(px.max())) + dil)
    y1 = min(H - 1, int(math.ceil(py.max())) + dil)
    return (x0, y0, x1, y1), dil


def make_mask(landmarks, region="mouth", size=(64, 64), custom=None,
              dilation=MASK_DILATION) -> MaskSpec:
    pts = landmarks.points if isinstance(landmarks, LandmarkSet3D) else np.asarray(landmarks)
    idx = region_indices(region, custom=custom)
    (x0, y0, x1, y1), dil = mask_box(pts, idx, size, dilation)
    m = np.zeros((1, *size), dtype=np.float32)
    m[0, y0:y1 + 1, x0:x1 + 1] = 1.0
    return MaskSpec(region, m, dil)


def batch_masks(landmarks: torch.Tensor, region="mouth", size=(64, 64)) -> torch.Tensor:
    """(B, L, 3) landmarks -> (B, 1, H, W) binary masks, same geometry as :func:`make_mask`."""
    arr = landmarks.detach().cpu().numpy()
    out = np.stack([make_mask(a, region, size).mask for a in arr])
    return torch.as_tensor(out, dtype=landmarks.dtype, device=landmarks.device)


def apply_mask(image, mesh, mask):
    """Zero the masked region in both rasters; everything else is untouched.

    Works on numpy arrays or tensors with matching trailing H x W.
    """
    if isinstance(mask, MaskSpec):
        mask = mask.mask
    if tuple(mask.shape[-2:]) != tuple(image.shape[-2:]) or tuple(mask.shape[-2:]) != tuple(mesh.shape[-2:]):
        raise ResolutionMismatch("mask, image and mesh must share H x W")
    if isinstance(image, torch.Tensor):
        m = torch.as_tensor(mask, device=image.device) > 0
        return (torch.where(m, torch.zeros_like(image), image),
                torch.where(m, torch.zeros_like(mesh), mesh))
    m = np.asarray(mask) > 0
    return np.where(m, 0, image).astype(np.asarray(image).dtype), \
        np.where(m, 0, mesh).astype(np.asarray(mesh).dtype)


def mask_landmarks(landmarks, region="mouth"):
    """Drop (zero) the rows of the edited region before late infusion."""
    idx = list(REGIONS_68[region])
    if isinstance(landmarks, torch.Tensor):
        out = landmarks.clone()
        out[..., idx, :] = 0
        return out
    out = np.array(landmarks, copy=True)
    out[..., idx, :] = 0
    return out


@dataclass
class ConditioningBundle:
    """Global keypoints plus the complementary local signal."""

    keypoints: NeuralKeypoints
    local: LocalSignal

    def local_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.local.landmarks, dtype=dtype)[None]

    def to_dict(self) -> dict:
        kp = self.keypoints
        return {
            "keypoints": {n: getattr(kp, n).tolist()
                          for n in ("canonical", "rotation", "translation", "expression")},
            "local": {"region": self.local.region, "landmarks": np.asarray(self.local.landmarks).tolist(),
                      "frame_index": self.local.frame_index, "indices": list(self.local.indices)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningBundle":
        kp = NeuralKeypoints(*(torch.tensor(d["keypoints"][n], dtype=torch.float64)
                               for n in ("canonical", "rotation", "translation", "expression")))
        loc = d["local"]
        return cls(kp, LocalSignal(loc["region"], np.array(loc["landmarks"]), loc["frame_index"],
                                   tuple(loc["indices"])))


def compose_signals(p_global: NeuralKeypoints, c_loc: LocalSignal) -> ConditioningBundle:
    if c_loc.region not in ("mouth", "eyes", "custom"):
        raise ValueError(f"unknown region {c_loc.region!r}")
    return ConditioningBundle(p_global, c_loc)


# --- audio -------------------------------------------------------------------

SAMPLE_RATE = 16000
WIN, HOP, NFFT, NMELS = 400, 160, 512, 40
LOG_FLOOR = 1e-2  # above the toy noise floor, so digital silence and hiss look alike


def _mel_filterbank(n_mels=NMELS, n_fft=NFFT, rate=SAMPLE_RATE, fmin=50.0, fmax=None) -> np.ndarray:
    fmax = fmax or rate / 2
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    pts = inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1 / rate)
    fb = np.zeros((n_mels, len(bins)))
    for i in range(n_mels):
        lo, c, hi = pts[i], pts[i + 1], pts[i + 2]
        fb[i] = np.clip(np.minimum((bins - lo) / (c - lo), (hi - bins) / (hi - c)), 0, None)
    return fb


_FB = _mel_filterbank()


@dataclass
class AudioWindow:
    features: np.ndarray  # T x F log-mel
    hop_seconds: float = HOP / SAMPLE_RATE
    duration: float = 0.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or len(self.features) < 1 or not np.isfinite(self.features).all():
            raise ValueError("features must be a finite T x F array with T >= 1")


def log_mel(samples: np.ndarray, rate=SAMPLE_RATE) -> AudioWindow:
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < WIN:
        raise AudioTooShort(f"need at least {WIN} samples, got {len(x)}")
    n = 1 + (len(x) - WIN) // HOP
    idx = np.arange(WIN)[None] + HOP * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(WIN)[None]
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2
    mel = power @ _FB.T
    return AudioWindow(np.log10(mel + LOG_FLOOR), HOP / rate, len(x) / rate)


class Audio2Lip(nn.Module):
    """Temporal conv net: log-mel frames -> canonical mouth offsets (20 x 3) per frame."""

    def __init__(self, n_mels=NMELS, hidden=64, n_points=20):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(n_mels, hidden, 5, padding=2), nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, hidden, 5, padding=4, dilation=2), nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, n_points * 3, 1))
        self.n_points = n_points
        self.register_buffer("feat_mean", torch.zeros(n_mels))
        self.register_buffer("feat_std", torch.ones(n_mels))

    def forward(self, feats: torch.Tensor, n_frames: int) -> torch.Tensor:
        """(B, T, F) features -> (B, n_frames, n_points, 3)."""
        x = ((feats - self.feat_mean) / self.feat_std).transpose(1, 2)
        out = self.net(x)
        out = F.interpolate(out, size=n_frames, mode="linear", align_corners=False)
        return out.transpose(1, 2).reshape(feats.shape[0], n_frames, self.n_points, 3)


def mouth_offsets(mouth_open: np.ndarray) -> np.ndarray:
    """Canonical mouth displacement for openness values: (N,) -> (N, 20, 3)."""
    from .priors import canonical_face_68
    idx = list(REGIONS_68["mouth"])
    base = canonical_face_68()[idx]
    return np.stack([canonical_face_68(mouth_open=float(o))[idx] - base for o in mouth_open])


def train_audio2lip(pairs, steps=600, lr=2e-3, smooth_weight=1.0, seed=0) -> Audio2Lip:
    """``pairs``: list of (samples, mouth_open per video frame).

    A digitally silent copy of the first clip (closed mouth throughout) is
    appended so true zeros map to rest, not only the recorded noise floor.
    """
    torch.manual_seed(seed)
    pairs = list(pairs) + [(np.zeros_like(pairs[0][0]), np.zeros_like(pairs[0][1]))]
    feats = [torch.as_tensor(log_mel(s).features) for s, _ in pairs]
    targets = [torch.as_tensor(mouth_offsets(o), dtype=torch.float32) for _, o in pairs]
    model = Audio2Lip()
    allf = torch.cat(feats)
    model.feat_mean.copy_(allf.mean(0))
    model.feat_std.copy_(allf.std(0).clamp_min(1e-3))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(steps):
        i = step % len(pairs)
        pred = model(feats[i][None], len(targets[i]))[0]
        loss = F.mse_loss(pred, targets[i]) * 100
        if smooth_weight:
            loss = loss + smooth_weight * 100 * (pred[1:] - pred[:-1]).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model.eval()


def audio2lip(window: AudioWindow, model: Audio2Lip, reference: LandmarkSet3D,
              n_frames: int) -> list[LocalSignal]:
    """One mouth LocalSignal per video frame, placed with the reference head pose."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    ref = torch.as_tensor(reference.points, dtype=torch.float64)
    s, R, _ = similarity_procrustes(mean_face(torch.float64), ref)
    with torch.no_grad():
        delta = model(torch.as_tensor(window.features)[None], n_frames)[0].double()
    idx = list(REGIONS_68["mouth"])
    moved = ref[idx][None] + s * delta @ R.T
    moved = moved.clamp(-1.0, 1.0).numpy()
    return [LocalSignal("mouth", moved[i], i, tuple(idx)) for i in range(n_frames)]


# --- edit scripts ------------------------------------------------------------

@dataclass
class EditEntry:
    frame: int
    region: str
    source: str  # "audio" or path to a landmark file


def read_edit_script(path) -> list[EditEntry]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError("edit script must be a JSON list")
    out = []
    for r in raw:
        if set(r) != {"frame", "region", "source"}:
            raise ValueError(f"bad edit entry {r}")
        if r["region"] not in ("mouth", "eyes"):
            raise ValueError(f"unsupported region {r['region']!r}")
        out.append(EditEntry(int(r["frame"]), r["region"], str(r["source"])))
    return out

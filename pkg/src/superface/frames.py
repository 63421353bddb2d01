"""Image and clip I/O.

A clip is a directory of zero-padded PNG frames plus ``clip.json``
(``fps``, ``frame_count``); an optional ``landmarks.txt`` sidecar holds the
priors of every frame.
"""
from __future__ import annotations

import json
import wave
from pathlib import Path

import cv2
import numpy as np


def read_image(path) -> np.ndarray:
    """PNG/JPEG file -> float32 3xHxW RGB in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(path)
    return (bgr[:, :, ::-1].transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_image(path, image: np.ndarray):
    q = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    if q.shape[0] == 1:
        q = np.repeat(q, 3, axis=0)
    ok = cv2.imwrite(str(path), q.transpose(1, 2, 0)[:, :, ::-1].copy())
    if not ok:
        raise OSError(f"could not write {path}")


def frame_name(i: int) -> str:
    return f"{i:05d}.png"


def write_clip(clip_dir, frames, fps=25.0, extra: dict | None = None):
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        write_image(clip_dir / frame_name(i), fr)
    meta = {"fps": fps, "frame_count": len(frames)}
    meta.update(extra or {})
    (clip_dir / "clip.json").write_text(json.dumps(meta, indent=2))


def list_frames(clip_dir) -> list[Path]:
    return sorted(p for p in Path(clip_dir).iterdir()
                  if p.suffix.lower() == ".png" and p.stem.isdigit())


def read_clip(clip_dir) -> tuple[list[np.ndarray], dict]:
    clip_dir = Path(clip_dir)
    meta_path = clip_dir / "clip.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return [read_image(p) for p in list_frames(clip_dir)], meta


def write_wav(path, samples: np.ndarray, rate=16000):
    pcm = np.round(np.clip(samples, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit mono PCM -> float64 samples in [-1, 1] and the sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError("expected 16-bit mono PCM")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, rate

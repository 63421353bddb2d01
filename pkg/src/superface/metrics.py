"""Evaluation metrics: CSIM, AKD, APD, AED, Energy, Entropy.

Energy and Entropy are fixed package definitions for relative comparisons:

* energy  = mean over the (H-1)x(W-1) interior of gx^2 + gy^2, where gx, gy
  are forward differences of the [0, 1] luma image;
* entropy = Shannon entropy (bits) of the 256-bin luma histogram times H*W.

APD averages absolute yaw/pitch/roll differences in radians, so a 5 degree yaw
offset alone scores (5 * pi / 180) / 3.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .priors import LandmarkSet3D

LUMA = np.array([0.299, 0.587, 0.114])
METRICS = ("csim", "akd", "apd", "aed", "energy", "entropy")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[0] == 1:
        return image[0]
    return np.tensordot(LUMA, image, axes=1)


class DownsampleEmbedder:
    """Stub face embedding: the flattened size x size grayscale thumbnail."""

    provider_id = "thumb8"

    def __init__(self, size=8, center=False):
        self.size = size
        self.center = center

    def __call__(self, image: np.ndarray) -> np.ndarray:
        g = to_gray(image).astype(np.float32)
        v = cv2.resize(g, (self.size, self.size), interpolation=cv2.INTER_AREA).astype(np.float64).ravel()
        return v - v.mean() if self.center else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def csim(embedder, generated: np.ndarray, source: np.ndarray) -> float:
    return cosine(embedder(generated), embedder(source))


def _points(lm):
    return lm.points if isinstance(lm, LandmarkSet3D) else np.asarray(lm, dtype=np.float64)


def akd(lm_a, lm_b, resolution=(64, 64)) -> float:
    """Mean xy landmark distance in pixels at ``resolution`` (H, W)."""
    if isinstance(lm_a, LandmarkSet3D) and isinstance(lm_b, LandmarkSet3D) \
            and lm_a.topology_id != lm_b.topology_id:
        raise ValueError("landmark topologies differ")
    a, b = _points(lm_a), _points(lm_b)
    H, W = resolution
    dx = (a[..., 0] - b[..., 0]) * W / 2
    dy = (a[..., 1] - b[..., 1]) * H / 2
    return float(np.mean(np.hypot(dx, dy)))


def _wrap(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def apd(pose_a, pose_b) -> float:
    return float(np.mean(np.abs(_wrap(np.asarray(pose_a, np.float64) - np.asarray(pose_b, np.float64)))))


def aed(expr_a, expr_b) -> float:
    return float(np.mean(np.abs(np.asarray(expr_a, np.float64) - np.asarray(expr_b, np.float64))))


def energy(image: np.ndarray) -> float:
    g = to_gray(image)
    gx = g[:-1, 1:] - g[:-1, :-1]
    gy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(gx ** 2 + gy ** 2))


def entropy(image: np.ndarray) -> float:
    g = to_gray(image)
    q = np.clip(np.round(g * 255), 0, 255).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256).astype(np.float64)
    p = hist[hist > 0] / q.size
    return float(-(p * np.log2(p)).sum() * q.size)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: clip + metric values
    aggregate: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, clip: str, values: dict):
        self.rows.append({"clip": clip, **{k: float(v) for k, v in values.items()}})
        self._aggregate()

    def _aggregate(self):
        keys = [k for k in self.rows[0] if k != "clip"] if self.rows else []
        self.aggregate = {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / "report.json", out_dir / "report.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        keys = list(self.rows[0]) if self.rows else ["clip"]
        with open(cpath, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        return jpath, cpath

    @classmethod
    def read(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(**d)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["rows", "aggregate", "flops", "provenance"],
    "properties": {
        "rows": {"type": "array", "items": {"type": "object", "required": ["clip"]}},
        "aggregate": {"type": "object", "additionalProperties": {"type": "number"}},
        "flops": {"type": "object"},
        "provenance": {"type": "object"},
    },
}

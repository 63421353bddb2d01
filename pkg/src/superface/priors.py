"""Facial priors: 3D landmarks, rasterized mesh images and local signals.

The synthetic topology is the classic 68-point scheme.  Landmarks are
normalized to [-1, 1] with the origin at the image center and y pointing down.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import to_pixels

TOPOLOGY_68 = "toy68"
NUM_LANDMARKS_68 = 68

# Fixed index sets of the 68-point scheme.
REGIONS_68: dict[str, tuple[int, ...]] = {
    "jaw": tuple(range(0, 17)),
    "brows": tuple(range(17, 27)),
    "nose": tuple(range(27, 36)),
    "eyes": tuple(range(36, 48)),
    "mouth": tuple(range(48, 68)),
}
LOCAL_REGIONS = ("mouth", "eyes", "custom")


class NoFaceDetected(RuntimeError):
    pass


class UnknownRegion(KeyError):
    pass


def _chain(idx, closed=False):
    pairs = [(a, b) for a, b in zip(idx[:-1], idx[1:])]
    if closed:
        pairs.append((idx[-1], idx[0]))
    return pairs


def edge_table_68() -> np.ndarray:
    """Contour edges of the 68-point face sketch, as an (E, 2) int array."""
    e = []
    e += _chain(list(range(0, 17)))
    e += _chain(list(range(17, 22)))
    e += _chain(list(range(22, 27)))
    e += _chain(list(range(27, 31)))
    e += _chain(list(range(31, 36)))
    e += [(30, 31), (30, 35)]
    e += _chain(list(range(36, 42)), closed=True)
    e += _chain(list(range(42, 48)), closed=True)
    e += _chain(list(range(48, 60)), closed=True)
    e += _chain(list(range(60, 68)), closed=True)
    return np.array(e, dtype=np.int64)


def canonical_face_68(mouth_open=0.0, eye_open=1.0, brow_raise=0.0, width=1.0,
                      jaw=1.0, eye_spacing=1.0, mouth_width=1.0) -> np.ndarray:
    """Frontal 68x3 face in face space (unit ~ face width), neutral by default.

    Shape knobs (``width`` ...) describe identity; ``mouth_open``,
    ``eye_open`` and ``brow_raise`` describe expression.
    """
    p = np.zeros((68, 3))
    phi = np.linspace(0, math.pi, 17)
    p[0:17, 0] = -0.45 * width * np.cos(phi)
    p[0:17, 1] = -0.05 + 0.55 * jaw * np.sin(phi)
    p[0:17, 2] = -0.35 + 0.35 * np.sin(phi)

    bx = np.linspace(-0.38, -0.08, 5) * eye_spacing
    by = -0.28 - 0.04 * np.sin(np.linspace(0, math.pi, 5)) - 0.06 * brow_raise
    p[17:22] = np.stack([bx, by, np.full(5, 0.1)], -1)
    p[22:27] = np.stack([-bx[::-1], by[::-1], np.full(5, 0.1)], -1)

    p[27:31] = np.stack([np.zeros(4), np.linspace(-0.2, 0.05, 4), np.linspace(0.15, 0.35, 4)], -1)
    p[31:36] = np.stack([np.linspace(-0.1, 0.1, 5), np.full(5, 0.12),
                         0.2 + 0.05 * np.sin(np.linspace(0, math.pi, 5))], -1)

    # eye ring: outer corner, two upper, inner corner, two lower
    ang = np.array([math.pi, 2 * math.pi / 3, math.pi / 3, 0.0, -math.pi / 3, -2 * math.pi / 3])
    ex = 0.09 * np.cos(ang)
    ey = -0.04 * eye_open * np.sin(ang)
    cx = 0.2 * eye_spacing
    p[36:42] = np.stack([-cx + ex, -0.15 + ey, np.full(6, 0.12)], -1)
    # left eye is the mirror image, so 42 is its inner corner
    mirror = [3, 2, 1, 0, 5, 4]
    p[42:48] = np.stack([cx - ex[mirror], -0.15 + ey[mirror], np.full(6, 0.12)], -1)

    mw = 0.18 * mouth_width
    drop = 0.12 * mouth_open
    # outer lip: 48 left corner, 49-53 upper, 54 right corner, 55-59 lower
    ux = mw * np.array([-1, -0.6, -0.25, 0, 0.25, 0.6, 1])
    uy = 0.3 - np.array([0, 0.04, 0.06, 0.05, 0.06, 0.04, 0])
    lx = mw * np.array([0.6, 0.25, 0, -0.25, -0.6])
    ly = 0.3 + np.array([0.05, 0.07, 0.075, 0.07, 0.05]) + drop
    p[48:55] = np.stack([ux, uy, np.full(7, 0.18)], -1)
    p[55:60] = np.stack([lx, ly, np.full(5, 0.18)], -1)
    # inner lip: 60 left, 61-63 upper, 64 right, 65-67 lower
    ix = mw * np.array([-0.8, -0.35, 0, 0.35, 0.8])
    p[60:65] = np.stack([ix, 0.3 - np.array([0, 0.015, 0.02, 0.015, 0]), np.full(5, 0.17)], -1)
    p[65:68] = np.stack([mw * np.array([0.35, 0, -0.35]),
                         0.3 + np.array([0.015, 0.02, 0.015]) + drop, np.full(3, 0.17)], -1)
    return p


@dataclass
class LandmarkSet3D:
    points: np.ndarray
    topology_id: str = TOPOLOGY_68
    confidence: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"landmarks must be Lx3, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)) or np.abs(self.points).max(initial=0) > 1.5:
            raise ValueError("landmarks must be finite and within [-1.5, 1.5]")
        if self.topology_id == TOPOLOGY_68 and len(self.points) != NUM_LANDMARKS_68:
            raise ValueError("toy68 topology requires 68 landmarks")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass
class MeshImage:
    raster: np.ndarray  # 3xHxW in [0, 1]
    source_frame_id: str | int | None = None


@dataclass
class LocalSignal:
    region: str
    landmarks: np.ndarray  # Rx3 rows of the parent landmark set
    frame_index: int = 0
    indices: tuple[int, ...] = field(default_factory=tuple)


def project_orthographic(p3d):
    """Drop the depth column: (k, 3) -> (k, 2).  Works for arrays and tensors."""
    return p3d[..., :2]


def region_indices(region: str, topology_id: str = TOPOLOGY_68,
                   custom: Sequence[int] | None = None) -> tuple[int, ...]:
    if region == "custom":
        if custom is None:
            raise UnknownRegion("custom region needs an explicit index list")
        return tuple(int(i) for i in custom)
    if topology_id != TOPOLOGY_68 or region not in ("mouth", "eyes"):
        raise UnknownRegion(f"region {region!r} undefined for topology {topology_id!r}")
    return REGIONS_68[region]


def extract_local(landmarks: LandmarkSet3D, region: str, frame_index: int = 0,
                  custom: Sequence[int] | None = None) -> LocalSignal:
    idx = region_indices(region, landmarks.topology_id, custom)
    if any(i < 0 or i >= len(landmarks.points) for i in idx):
        raise UnknownRegion(f"index out of range for {len(landmarks.points)} landmarks")
    return LocalSignal(region, landmarks.points[list(idx)].copy(), frame_index, idx)


def _bresenham(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    return math.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def rasterize_mesh(landmarks: LandmarkSet3D | np.ndarray, edge_table, resolution,
                   frame_id=None) -> MeshImage:
    """Draw every edge as a line over black, using only the xy components.

    Covered pixels are exactly the Bresenham pixels between the rounded
    endpoints.  Intensity falls off with the distance from the pixel center
    to the unrounded segment (floored at 0.25), and overlapping edges
    combine with ``max``, so the raster ignores edge order and direction.
    """
    pts = landmarks.points if isinstance(landmarks, LandmarkSet3D) else np.asarray(landmarks)
    H, W = resolution
    canvas = np.zeros((H, W), dtype=np.float32)
    edges = np.asarray(edge_table, dtype=np.int64).reshape(-1, 2)
    if len(edges) and edges.max() >= len(pts):
        raise IndexError("edge index exceeds landmark count")
    px = to_pixels(pts[:, :2], (H, W))
    ipx = np.floor(px + 0.5).astype(np.int64)
    for i, j in edges:
        # canonical direction so (i, j) and (j, i) draw identical pixels
        if (ipx[j, 0], ipx[j, 1]) < (ipx[i, 0], ipx[i, 1]):
            i, j = j, i
        a, b = px[i], px[j]
        for x, y in _bresenham(*ipx[i], *ipx[j]):
            if 0 <= x < W and 0 <= y < H:
                v = max(0.25, min(1.0, 1.0 - 0.5 * _segment_distance(x, y, a, b)))
                if v > canvas[y, x]:
                    canvas[y, x] = v
    return MeshImage(np.repeat(canvas[None], 3, axis=0), frame_id)


def image_digest(image: np.ndarray) -> str:
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    return hashlib.sha256(q.tobytes() + str(q.shape).encode()).hexdigest()


class PriorProvider(Protocol):
    provider_id: str

    def landmarks(self, image: np.ndarray) -> LandmarkSet3D: ...


class GalleryProvider:
    """Exact lookup of landmarks for known images, keyed by a uint8 digest.

    Images not in the gallery fall back to the nearest registered image
    (16x16 grayscale L2) unless ``fallback`` is ``None``.  Near-constant
    images raise :class:`NoFaceDetected`.
    """

    provider_id = "gallery"

    def __init__(self, variance_threshold=1e-4, fallback: str | None = "nearest"):
        self.variance_threshold = variance_threshold
        self.fallback = fallback
        self._table: dict[str, LandmarkSet3D] = {}
        self._thumbs: list[np.ndarray] = []
        self._keys: list[str] = []

    def __len__(self):
        return len(self._table)

    @staticmethod
    def _thumb(image):
        import cv2
        g = np.asarray(image, dtype=np.float32).mean(0)
        return cv2.resize(g, (16, 16), interpolation=cv2.INTER_AREA).ravel()

    def register(self, image: np.ndarray, landmarks: LandmarkSet3D):
        key = image_digest(image)
        if key not in self._table:
            self._keys.append(key)
            self._thumbs.append(self._thumb(image))
        self._table[key] = landmarks

    def landmarks(self, image: np.ndarray) -> LandmarkSet3D:
        image = np.asarray(image)
        if float(image.var()) < self.variance_threshold:
            raise NoFaceDetected("pixel variance below threshold")
        hit = self._table.get(image_digest(image))
        if hit is not None:
            return hit
        if self.fallback != "nearest" or not self._keys:
            raise NoFaceDetected("image not in gallery")
        d = np.linalg.norm(np.stack(self._thumbs) - self._thumb(image), axis=1)
        return self._table[self._keys[int(np.argmin(d))]]


SyntheticProvider = GalleryProvider


def detect_priors(image: np.ndarray, provider: PriorProvider, edge_table=None,
                  frame_id=None) -> tuple[MeshImage, LandmarkSet3D]:
    """One detection pass producing both prior representations."""
    image = np.asarray(image)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    lm = provider.landmarks(image)
    edges = edge_table_68() if edge_table is None else edge_table
    return rasterize_mesh(lm, edges, image.shape[1:], frame_id), lm


# --- file formats -----------------------------------------------------------

def write_landmark_file(path, records: Sequence[tuple[str | int, np.ndarray]]):
    """``frame_id L x0 y0 z0 ...`` per line."""
    with open(path, "w") as f:
        for frame_id, pts in records:
            pts = np.asarray(pts, dtype=np.float64)
            vals = " ".join(repr(float(v)) for v in pts.ravel())
            f.write(f"{frame_id} {len(pts)} {vals}\n")


def read_landmark_file(path, topology_id=TOPOLOGY_68) -> dict[str, LandmarkSet3D]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        tok = line.split()
        n = int(tok[1])
        vals = np.array([float(v) for v in tok[2:]])
        if len(vals) != 3 * n:
            raise ValueError(f"frame {tok[0]}: expected {3 * n} values, got {len(vals)}")
        out[tok[0]] = LandmarkSet3D(vals.reshape(n, 3), topology_id)
    return out


def write_edge_file(path, edges):
    with open(path, "w") as f:
        for i, j in np.asarray(edges).reshape(-1, 2):
            f.write(f"{int(i)} {int(j)}\n")


def read_edge_file(path) -> np.ndarray:
    rows = [tuple(int(v) for v in line.split()) for line in Path(path).read_text().splitlines()
            if line.strip()]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)

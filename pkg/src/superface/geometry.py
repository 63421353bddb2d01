"""Rotations, rigid/similarity alignment and 2D affine transforms.

Coordinate convention shared by the whole package: x to the right, y down,
z towards the camera, all normalized to [-1, 1] with the origin at the image
center.  Pixel centers sit at ``(2 * i + 1) / N - 1`` (``align_corners=False``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def rotation_from_6d(x: torch.Tensor) -> torch.Tensor:
    """Map a (..., 6) continuous representation to (..., 3, 3) rotations."""
    a1, a2 = x[..., :3], x[..., 3:]
    b1 = F.normalize(a1, dim=-1)
    b2 = F.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def euler_to_matrix(yaw, pitch, roll) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch); angles in radians."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler(R: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`euler_to_matrix`; returns (..., 3) as (yaw, pitch, roll)."""
    yaw = torch.asin((-R[..., 2, 0]).clamp(-1 + 1e-7, 1 - 1e-7))
    pitch = torch.atan2(R[..., 2, 1], R[..., 2, 2])
    roll = torch.atan2(R[..., 1, 0], R[..., 0, 0])
    return torch.stack([yaw, pitch, roll], dim=-1)


def wrap_angle(a: torch.Tensor) -> torch.Tensor:
    return torch.remainder(a + math.pi, 2 * math.pi) - math.pi


def similarity_procrustes(src: torch.Tensor, dst: torch.Tensor):
    """Least-squares similarity fit ``dst ≈ s * src @ R.T + t`` (Umeyama).

    ``src`` and ``dst`` are (..., L, 3).  Returns (s, R, t) with shapes
    (...,), (..., 3, 3), (..., 3).  Differentiable through the SVD.
    """
    mu_s = src.mean(-2, keepdim=True)
    mu_d = dst.mean(-2, keepdim=True)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.transpose(-1, -2) @ xs / src.shape[-2]
    U, S, Vh = torch.linalg.svd(cov)
    d = torch.sign(torch.det(U @ Vh))
    ones = torch.ones_like(d)
    D = torch.diag_embed(torch.stack([ones, ones, d], dim=-1))
    R = U @ D @ Vh
    var_s = (xs ** 2).sum((-1, -2)) / src.shape[-2]
    s = (S * torch.diagonal(D, dim1=-2, dim2=-1)).sum(-1) / var_s
    t = (mu_d - s[..., None, None] * (mu_s @ R.transpose(-1, -2))).squeeze(-2)
    return s, R, t


def identity_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Backward-sampling identity grid for ``grid_sample``.

    ``shape`` is (H, W) or (D, H, W); the result is (H, W, 2) or
    (D, H, W, 3) with the last axis ordered (x, y[, z]).
    """
    axes = [((2 * torch.arange(n, dtype=dtype, device=device) + 1) / n - 1) for n in shape]
    mesh = torch.meshgrid(*axes, indexing="ij")
    return torch.stack(mesh[::-1], dim=-1)


@dataclass
class Affine2D:
    """Forward map on normalized xy coordinates: ``p -> A @ p + b``."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def random(cls, rng: np.random.Generator, max_angle=0.2, max_scale=0.1, max_shift=0.1,
               max_shear=0.05) -> "Affine2D":
        a = rng.uniform(-max_angle, max_angle)
        s = 1 + rng.uniform(-max_scale, max_scale)
        sh = rng.uniform(-max_shear, max_shear)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        A = s * rot @ np.array([[1, sh], [0, 1]])
        return cls(A, rng.uniform(-max_shift, max_shift, size=2))

    def apply_points(self, xy):
        """Transform (..., 2) points; accepts numpy arrays or tensors."""
        if isinstance(xy, torch.Tensor):
            A = torch.as_tensor(self.A, dtype=xy.dtype, device=xy.device)
            b = torch.as_tensor(self.b, dtype=xy.dtype, device=xy.device)
            return xy @ A.T + b
        return np.asarray(xy) @ self.A.T + self.b

    def apply_landmarks(self, pts):
        """Transform the xy part of (..., 3) points, leaving z untouched."""
        xy = self.apply_points(pts[..., :2])
        if isinstance(pts, torch.Tensor):
            return torch.cat([xy, pts[..., 2:]], dim=-1)
        return np.concatenate([xy, pts[..., 2:]], axis=-1)

    def apply_image(self, img: torch.Tensor, padding_mode="zeros") -> torch.Tensor:
        """Resample (B, C, H, W) so that content at p moves to T(p)."""
        Ainv = np.linalg.inv(self.A)
        theta = np.concatenate([Ainv, (-Ainv @ self.b)[:, None]], axis=1)
        theta = torch.as_tensor(theta, dtype=img.dtype, device=img.device)
        theta = theta.expand(img.shape[0], 2, 3)
        grid = F.affine_grid(theta, list(img.shape), align_corners=False)
        return F.grid_sample(img, grid, mode="bilinear", padding_mode=padding_mode,
                             align_corners=False)


def to_pixels(xy: np.ndarray, size) -> np.ndarray:
    """Normalized (x, y) to continuous pixel indices for an (H, W) raster."""
    H, W = size
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(xy[..., 0] + 1) * W / 2 - 0.5, (xy[..., 1] + 1) * H / 2 - 0.5], axis=-1)


def to_normalized(px: np.ndarray, size) -> np.ndarray:
    H, W = size
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(2 * px[..., 0] + 1) / W - 1, (2 * px[..., 1] + 1) / H - 1], axis=-1)

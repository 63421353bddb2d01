"""Differentiable landmark regressor and landmark-based pose/expression estimates.

The regressor stands in for an external face-mesh detector on generated
frames; it is trained on the toy set with blur/noise augmentation so it
tolerates decoder output.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .blocks import ConvNormAct2d
from .geometry import matrix_to_euler, similarity_procrustes
from .priors import LandmarkSet3D, NoFaceDetected, TOPOLOGY_68, canonical_face_68

log = logging.getLogger(__name__)


class LandmarkRegressor(nn.Module):
    def __init__(self, num_landmarks=68, channels=(16, 32, 64, 64), resolution=64):
        super().__init__()
        layers, cin = [], 3
        for c in channels:
            layers.append(ConvNormAct2d(cin, c, stride=2))
            cin = c
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.head = nn.Linear(cin * 16, num_landmarks * 3)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.copy_(torch.as_tensor(1.35 * canonical_face_68(), dtype=torch.float32).view(-1))
        self.num_landmarks = num_landmarks
        self.resolution = resolution

    def forward(self, x):
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear",
                              align_corners=False, antialias=True)
        h = self.pool(self.body(x)).flatten(1)
        return self.head(h).view(-1, self.num_landmarks, 3)


class RegressorProvider:
    """Prior provider backed by a :class:`LandmarkRegressor`."""

    provider_id = "regressor"

    def __init__(self, model: LandmarkRegressor, variance_threshold=1e-4):
        self.model = model.eval()
        self.variance_threshold = variance_threshold

    def landmarks(self, image: np.ndarray) -> LandmarkSet3D:
        image = np.asarray(image, dtype=np.float32)
        if float(image.var()) < self.variance_threshold:
            raise NoFaceDetected("pixel variance below threshold")
        with torch.no_grad():
            pts = self.model(torch.from_numpy(image)[None])[0].double().numpy()
        return LandmarkSet3D(np.clip(pts, -1.5, 1.5), TOPOLOGY_68)


def mean_face(dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(canonical_face_68(), dtype=dtype)


def pose_from_landmarks(landmarks: torch.Tensor) -> torch.Tensor:
    """(B, 68, 3) landmarks -> (B, 3) yaw/pitch/roll via similarity Procrustes."""
    ref = mean_face(landmarks.dtype).to(landmarks.device).expand_as(landmarks)
    _, R, _ = similarity_procrustes(ref, landmarks)
    return matrix_to_euler(R)


def expression_descriptor(landmarks: torch.Tensor) -> torch.Tensor:
    """Landmark residual after removing the best similarity transform; (B, 204)."""
    ref = mean_face(landmarks.dtype).to(landmarks.device).expand_as(landmarks)
    s, R, t = similarity_procrustes(ref, landmarks)
    aligned = ((landmarks - t[:, None]) @ R) / s[:, None, None]
    return (aligned - ref).flatten(1)


class PoseEstimator:
    """Callable image batch -> (B, 3) angles, from a landmark function."""

    def __init__(self, landmarker):
        self.landmarker = landmarker

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return pose_from_landmarks(self.landmarker(images))


class ProviderLandmarker:
    """Adapt a (non-differentiable) prior provider to the batched landmarker call."""

    def __init__(self, provider):
        self.provider = provider

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        arr = images.detach().cpu().numpy()
        pts = [self.provider.landmarks(a).points for a in arr]
        return torch.as_tensor(np.stack(pts), dtype=images.dtype, device=images.device)


def train_landmarker(frames: np.ndarray, landmarks: np.ndarray, steps=1500, batch_size=32,
                     seed=0, lr=2e-3, log_every=0) -> LandmarkRegressor:
    """Fit the regressor on (N, 3, H, W) frames with (N, 68, 3) targets.

    Augmentation: random Gaussian blur and additive noise so decoder output,
    which is smoother than the renders, stays in distribution.
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = LandmarkRegressor(resolution=frames.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    X = torch.as_tensor(frames, dtype=torch.float32)
    Y = torch.as_tensor(landmarks, dtype=torch.float32)
    n = len(X)
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=g)
        x = X[idx]
        sigma = torch.rand(batch_size, generator=g) * 1.5
        x = _blur_batch(x, sigma)
        x = (x + torch.randn(x.shape, generator=g) * 0.02 * torch.rand(batch_size, 1, 1, 1, generator=g)).clamp(0, 1)
        loss = F.smooth_l1_loss(model(x), Y[idx], beta=0.02)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            log.info("landmarker step %d loss %.5f", step, loss.item())
    return model.eval()


def _blur_batch(x: torch.Tensor, sigma: torch.Tensor, ksize=7) -> torch.Tensor:
    r = torch.arange(ksize, dtype=x.dtype) - ksize // 2
    s = sigma.clamp_min(1e-3)[:, None]
    k1 = torch.exp(-0.5 * (r[None] / s) ** 2)
    k1 = k1 / k1.sum(1, keepdim=True)
    k1 = torch.where(sigma[:, None] < 0.05, (r[None] == 0).to(x.dtype), k1)
    B, C, H, W = x.shape
    xr = x.reshape(1, B * C, H, W)
    kx = k1.repeat_interleave(C, 0).view(B * C, 1, 1, ksize)
    ky = k1.repeat_interleave(C, 0).view(B * C, 1, ksize, 1)
    xr = F.conv2d(F.pad(xr, (ksize // 2, ksize // 2, 0, 0), mode="replicate"), kx, groups=B * C)
    xr = F.conv2d(F.pad(xr, (0, 0, ksize // 2, ksize // 2), mode="replicate"), ky, groups=B * C)
    return xr.view(B, C, H, W)

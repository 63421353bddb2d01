"""Loss terms and the weighted teacher/student totals.

Teacher total: perceptual, gan, keypoint, expression, head_pose, equivariance,
reconstruction, local.  Student total: perceptual, gan, head_pose,
reconstruction, local.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .geometry import Affine2D, wrap_angle
from .priors import NoFaceDetected, REGIONS_68

log = logging.getLogger(__name__)

TEACHER_TERMS = ("perceptual", "gan", "keypoint", "expression", "head_pose", "equivariance",
                 "reconstruction", "local")
STUDENT_TERMS = ("perceptual", "gan", "head_pose", "reconstruction", "local")


class EstimatorFailure(RuntimeError):
    pass


@dataclass
class LossWeights:
    teacher: tuple = (10.0, 10.0, 5.0, 10.0, 1.0, 10.0, 10.0, 100.0)
    student: tuple = (10.0, 10.0, 10.0, 1.0, 100.0)

    def __post_init__(self):
        self.teacher, self.student = tuple(self.teacher), tuple(self.student)
        if len(self.teacher) != 8 or len(self.student) != 5:
            raise ValueError("expected 8 teacher and 5 student weights")
        if min(self.teacher + self.student) < 0:
            raise ValueError("loss weights must be non-negative")

    def teacher_map(self) -> dict:
        return dict(zip(TEACHER_TERMS, self.teacher))

    def student_map(self) -> dict:
        return dict(zip(STUDENT_TERMS, self.student))


@dataclass
class LossBreakdown:
    terms: dict
    total: torch.Tensor
    weights: dict
    skipped: set = field(default_factory=set)

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items()}

    def to_json(self, iteration: int) -> str:
        rec = {"iter": iteration, "terms": self.as_floats(), "total": float(self.total.detach())}
        if self.skipped:
            rec["skipped"] = sorted(self.skipped)
        return json.dumps(rec)


def _weighted_total(terms: dict, weights: dict, names: Sequence[str]) -> LossBreakdown:
    missing = set(names) - set(terms)
    extra = set(terms) - set(names)
    if missing or extra:
        raise KeyError(f"term set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    skipped = {n for n in names if terms[n] is None}
    clean = {n: (torch.zeros(()) if terms[n] is None else torch.as_tensor(terms[n])) for n in names}
    total = sum(weights[n] * clean[n] for n in names)
    return LossBreakdown(clean, torch.as_tensor(total), dict(weights), skipped)


def total_teacher(terms: dict, weights: LossWeights | None = None) -> LossBreakdown:
    return _weighted_total(terms, (weights or LossWeights()).teacher_map(), TEACHER_TERMS)


def total_student(terms: dict, weights: LossWeights | None = None) -> LossBreakdown:
    return _weighted_total(terms, (weights or LossWeights()).student_map(), STUDENT_TERMS)


# --- feature extractors -----------------------------------------------------

class RandomPyramidExtractor(nn.Module):
    """Fixed-seed random conv pyramid; frozen, no download needed."""

    def __init__(self, channels=(8, 16, 32), seed=1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            convs.append(conv)
            cin = c
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class AvgPoolPyramid(nn.Module):
    """Image pyramid by repeated 2x average pooling (test stub)."""

    def __init__(self, levels=2):
        super().__init__()
        self.levels = levels

    def forward(self, x) -> list[torch.Tensor]:
        out = [x]
        for _ in range(self.levels - 1):
            x = F.avg_pool2d(x, 2)
            out.append(x)
        return out


class PretrainedFeatureAdapter(nn.Module):
    """Wrap any backbone returning a list of feature maps, e.g. a VGG slice set.

    ``normalize`` applies ImageNet statistics to inputs in [0, 1].
    """

    def __init__(self, backbone: Callable[[torch.Tensor], list], normalize=True):
        super().__init__()
        self.backbone = backbone
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        if self.normalize:
            x = (x - self.mean.to(x)) / self.std.to(x)
        return list(self.backbone(x))


# --- terms ------------------------------------------------------------------

def perceptual(y, target, extractor) -> torch.Tensor:
    fy, ft = extractor(y), extractor(target)
    return sum((a - b).abs().mean() for a, b in zip(fy, ft))


def gan_hinge(real_logits, fake_logits, side: str) -> torch.Tensor:
    """Hinge GAN loss averaged over discriminator scales."""
    if side == "generator":
        return sum(-f.mean() for f in fake_logits) / len(fake_logits)
    if side == "discriminator":
        parts = [F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_logits, fake_logits)]
        return sum(parts) / len(parts)
    raise ValueError(f"unknown side {side!r}")


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    d2 = (x ** 2).sum(-1)
    pos = d2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def keypoint_spread(p: torch.Tensor, threshold: float = 0.1) -> torch.Tensor:
    """Sum over unordered pairs of max(0, threshold - |p_i - p_j|); batch-averaged."""
    if p.dim() == 2:
        p = p[None]
    k = p.shape[1]
    iu = torch.triu_indices(k, k, offset=1, device=p.device)
    d = _safe_norm(p[:, iu[0]] - p[:, iu[1]])
    return F.relu(threshold - d).sum(-1).mean()


def expression_reg(delta: torch.Tensor) -> torch.Tensor:
    return (delta ** 2).sum(-1).mean()


def head_pose(y, target, estimator) -> torch.Tensor:
    """Mean absolute (yaw, pitch, roll) difference, radians."""
    a, b = estimator(y), estimator(target)
    return wrap_angle(a - b).abs().mean()


def equivariance(predictor, image, mesh, landmarks, transform: Affine2D) -> torch.Tensor:
    """Mean |p_c(T(I)) - T(p_c(I))| over keypoints, xy components only.

    ``predictor(image, mesh, landmarks)`` returns NeuralKeypoints or a
    (B, k, 3) canonical tensor.  T is applied to the image, the mesh raster and
    the landmark xy coordinates alike.
    """
    def canon(out):
        return out.canonical if hasattr(out, "canonical") else out

    base = canon(predictor(image, mesh, landmarks))
    t_img = transform.apply_image(image)
    t_mesh = transform.apply_image(mesh) if mesh is not None else None
    t_lm = transform.apply_landmarks(landmarks) if landmarks is not None else None
    moved = canon(predictor(t_img, t_mesh, t_lm))
    expected = transform.apply_points(base[..., :2])
    return _safe_norm(moved[..., :2] - expected).mean()


def reconstruction(y, target) -> torch.Tensor:
    return (y - target).abs().mean()


def crop_boxes(landmarks, region: Sequence[int], size, pad=0.2) -> torch.Tensor:
    """Pixel-space boxes (x0, y0, x1, y1) around region landmarks.

    Width and height grow by ``pad`` (20% by default) around the center and
    the box is clipped to the frame, whose pixel edges span [-0.5, N - 0.5].
    """
    H, W = size
    pts = torch.as_tensor(landmarks)[..., list(region), :2]
    px = (pts[..., 0] + 1) * W / 2 - 0.5
    py = (pts[..., 1] + 1) * H / 2 - 0.5
    x0, x1 = px.min(-1).values, px.max(-1).values
    y0, y1 = py.min(-1).values, py.max(-1).values
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * (1 + pad) / 2, (y1 - y0) * (1 + pad) / 2
    box = torch.stack([cx - hw, cy - hh, cx + hw, cy + hh], -1)
    lo = torch.tensor([-0.5, -0.5, -0.5, -0.5], dtype=box.dtype)
    hi = torch.tensor([W - 0.5, H - 0.5, W - 0.5, H - 0.5], dtype=box.dtype)
    return torch.maximum(torch.minimum(box, hi), lo)


def sample_crops(images: torch.Tensor, boxes: torch.Tensor, out_size: int) -> torch.Tensor:
    """Resample each box to out_size x out_size with bilinear interpolation."""
    B, _, H, W = images.shape
    u = (torch.arange(out_size, dtype=images.dtype, device=images.device) + 0.5) / out_size
    x0, y0, x1, y1 = [boxes[:, i:i + 1].to(images) for i in range(4)]
    # pixel index -> normalized coordinate (align_corners=False)
    gx = (2 * (x0 + 0.5 + u[None] * (x1 - x0)) / W) - 1
    gy = (2 * (y0 + 0.5 + u[None] * (y1 - y0)) / H) - 1
    grid = torch.stack([gx[:, None, :].expand(B, out_size, out_size),
                        gy[:, :, None].expand(B, out_size, out_size)], -1)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)


LOCAL_LOSS_REGIONS = ("eyes", "mouth")


def local_loss(y, target, target_landmarks, extractor, landmarker=None, crop_size=None,
               flags: dict | None = None) -> torch.Tensor:
    """Perceptual loss on eye/mouth crops plus region landmark distance.

    ``landmarker(images) -> (B, L, 3)``; if it raises NoFaceDetected only the
    perceptual part is kept and ``flags['landmarks_skipped']`` is set.
    """
    H, W = y.shape[-2:]
    crop_size = crop_size or max(8, H // 4)
    total = 0.0
    for name in LOCAL_LOSS_REGIONS:
        boxes = crop_boxes(target_landmarks, REGIONS_68[name], (H, W))
        total = total + perceptual(sample_crops(y, boxes, crop_size),
                                   sample_crops(target, boxes, crop_size), extractor)
    if landmarker is not None:
        try:
            ly, lt = landmarker(y), landmarker(target)
        except NoFaceDetected:
            if flags is not None:
                flags["landmarks_skipped"] = True
            log.warning("landmarker found no face; local loss uses crops only")
        else:
            idx = list(REGIONS_68["eyes"] + REGIONS_68["mouth"])
            total = total + _safe_norm(ly[:, idx] - lt[:, idx]).mean()
    return torch.as_tensor(total)

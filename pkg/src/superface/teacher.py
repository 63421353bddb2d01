"""Teacher generator: volumetric appearance, prior-infused keypoints, 3D dense motion.

Forward path for one (source, driving) pair::

    F = encode_appearance(source)                  # C x D' x H' x W'
    kp_s = predict_keypoints(source priors)        # k x 3
    kp_d = predict_keypoints(driving priors)
    W = dense_motion(kp_s, kp_d)                   # identity + k candidate flows
    y = generate(warp(F, W))

Keypoints are composed as ``R @ canonical + t + delta``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .blocks import (ConvNormAct2d, ConvNormAct3d, ResBlock2d, ResBlock3d, UpBlock2d,
                     gaussian_heatmaps)
from .geometry import identity_grid, rotation_from_6d

CANONICAL_RANGE = 0.65
OFFSET_RANGE = 0.15


class ShapeMismatch(ValueError):
    pass


class PriorMismatch(ValueError):
    pass


@dataclass
class TeacherConfig:
    resolution: int = 64
    k: int = 15
    feat_channels: int = 16
    depth: int = 8
    downsample: int = 4
    enc_channels: tuple = (32, 64, 128)
    enc_res3d: int = 1
    mem_channels: tuple = (32, 64, 128, 128)
    mem_hidden: int = 256
    landmark_embed: int = 128
    num_landmarks: int = 68
    dmn_channels: tuple = (32, 32, 16)
    gen_channels: tuple = (128, 64, 32)
    gen_res_blocks: int = 1
    disc_scales: int = 2
    disc_channels: tuple = (16, 32)
    kp_variance: float = 0.01
    local_variance: float = 0.002
    early_infusion: bool = True
    late_infusion: bool = True
    local_region: str | None = "mouth"

    def __post_init__(self):
        for name in ("enc_channels", "mem_channels", "dmn_channels", "gen_channels", "disc_channels"):
            setattr(self, name, tuple(getattr(self, name)))
        n_down = int(round(math.log2(self.downsample)))
        if 2 ** n_down != self.downsample:
            raise ValueError("downsample must be a power of two")
        if self.resolution % self.downsample or self.resolution % 2 ** (len(self.mem_channels) - 1):
            raise ValueError("resolution not divisible by the downsample factors")
        if len(self.enc_channels) != n_down + 1 or len(self.gen_channels) != n_down + 1:
            raise ValueError("enc/gen channel lists need log2(downsample) + 1 entries")
        if min(self.k, self.feat_channels, self.depth, self.resolution) <= 0:
            raise ValueError("sizes must be positive")

    @property
    def feat_size(self) -> int:
        return self.resolution // self.downsample

    @property
    def volume_shape(self) -> tuple:
        return (self.feat_channels, self.depth, self.feat_size, self.feat_size)

    @property
    def n_local(self) -> int:
        return 1 if self.local_region else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def toy(cls, **kw) -> "TeacherConfig":
        return cls(**kw)

    @classmethod
    def large_toy(cls, **kw) -> "TeacherConfig":
        return cls(resolution=128, **kw)

    @classmethod
    def full_scale(cls, **kw) -> "TeacherConfig":
        base = dict(resolution=512, depth=16, downsample=8, enc_channels=(64, 128, 256, 512),
                    enc_res3d=2, mem_channels=(64, 128, 256, 512, 512, 512), mem_hidden=512,
                    landmark_embed=256, feat_channels=32, dmn_channels=(64, 64, 32),
                    gen_channels=(512, 256, 128, 64), gen_res_blocks=2)
        base.update(kw)
        return cls(**base)


@dataclass
class NeuralKeypoints:
    canonical: torch.Tensor  # B x k x 3
    rotation: torch.Tensor  # B x 3 x 3
    translation: torch.Tensor  # B x 3
    expression: torch.Tensor  # B x k x 3

    @property
    def composed(self) -> torch.Tensor:
        return compose_keypoints(self.canonical, self.rotation, self.translation, self.expression)

    def with_canonical(self, canonical: torch.Tensor) -> "NeuralKeypoints":
        return NeuralKeypoints(canonical, self.rotation, self.translation, self.expression)

    def detach(self) -> "NeuralKeypoints":
        return NeuralKeypoints(*(t.detach() for t in (self.canonical, self.rotation,
                                                      self.translation, self.expression)))


def compose_keypoints(canonical, rotation, translation, expression):
    return canonical @ rotation.transpose(-1, -2) + translation[:, None, :] + expression


@dataclass
class MotionField3D:
    grid: torch.Tensor  # B x D x H x W x 3, (x, y, z) sampling coordinates
    weights: torch.Tensor  # B x (k+1) x D x H x W
    candidates: torch.Tensor | None = None  # B x (k+1) x D x H x W x 3


class AppearanceEncoder(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        ch = cfg.enc_channels
        layers = [ConvNormAct2d(3, ch[0])]
        layers += [ConvNormAct2d(a, b, stride=2) for a, b in zip(ch[:-1], ch[1:])]
        self.down = nn.Sequential(*layers)
        self.lift = nn.Conv2d(ch[-1], cfg.feat_channels * cfg.depth, 1)
        self.res3d = nn.Sequential(*[ResBlock3d(cfg.feat_channels) for _ in range(cfg.enc_res3d)])
        self.cfg = cfg

    def forward(self, x):
        c = self.cfg
        if x.shape[-2:] != (c.resolution, c.resolution):
            raise ShapeMismatch(f"expected {c.resolution}x{c.resolution}, got {tuple(x.shape[-2:])}")
        h = self.lift(self.down(x))
        h = h.view(x.shape[0], c.feat_channels, c.depth, c.feat_size, c.feat_size)
        return self.res3d(h)


class KeypointPredictor(nn.Module):
    """MEM: image (+ mesh raster, early) and 3D landmarks (late) -> NeuralKeypoints."""

    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        ch = cfg.mem_channels
        cin = 6 if cfg.early_infusion else 3
        layers = [ConvNormAct2d(cin, ch[0])]
        layers += [ConvNormAct2d(a, b, stride=2) for a, b in zip(ch[:-1], ch[1:])]
        self.body = nn.Sequential(*layers)
        emb = 0
        if cfg.late_infusion:
            emb = cfg.landmark_embed
            self.lm_embed = nn.Sequential(nn.Linear(cfg.num_landmarks * 3, emb), nn.LeakyReLU(0.2),
                                          nn.Linear(emb, emb), nn.LeakyReLU(0.2))
        k = cfg.k
        self.hidden = nn.Linear(ch[-1] + emb, cfg.mem_hidden)
        self.out = nn.Linear(cfg.mem_hidden, k * 3 + 6 + 3 + k * 3)
        nn.init.normal_(self.out.weight, std=1e-3)
        with torch.no_grad():
            self.out.bias.zero_()
            # spread canonical keypoints over the face at init
            g = torch.linspace(-0.6, 0.6, k)
            init = torch.stack([torch.sin(2.4 * torch.arange(k)) * 0.8,
                                g, 0.2 * torch.cos(1.7 * torch.arange(k))], -1)
            self.out.bias[:k * 3] = torch.atanh((init / CANONICAL_RANGE).clamp(-0.95, 0.95)).view(-1)
            self.out.bias[k * 3:k * 3 + 6] = torch.tensor([1.0, 0, 0, 0, 1.0, 0])
        self.cfg = cfg

    def forward(self, image, mesh=None, landmarks=None) -> NeuralKeypoints:
        c = self.cfg
        x = image
        if c.early_infusion:
            if mesh is None or mesh.shape[-2:] != image.shape[-2:]:
                raise PriorMismatch("mesh raster must match the image resolution")
            x = torch.cat([image, mesh], 1)
        h = self.body(x).mean((2, 3))
        if c.late_infusion:
            if landmarks is None:
                raise PriorMismatch("late infusion needs 3D landmarks")
            h = torch.cat([h, self.lm_embed(landmarks.reshape(landmarks.shape[0], -1))], 1)
        o = self.out(F.leaky_relu(self.hidden(h), 0.2))
        k = c.k
        canonical = CANONICAL_RANGE * torch.tanh(o[:, :k * 3]).view(-1, k, 3)
        rot = rotation_from_6d(o[:, k * 3:k * 3 + 6])
        t = OFFSET_RANGE * torch.tanh(o[:, k * 3 + 6:k * 3 + 9])
        delta = OFFSET_RANGE * torch.tanh(o[:, k * 3 + 9:]).view(-1, k, 3)
        return NeuralKeypoints(canonical, rot, t, delta)


def candidate_flows(kp_src: torch.Tensor, kp_drv: torch.Tensor, spatial) -> torch.Tensor:
    """Identity plus one local translation per keypoint: (B, k+1, *spatial, n)."""
    n = kp_src.shape[-1]
    base = identity_grid(spatial, kp_src.dtype, kp_src.device)
    B, k = kp_src.shape[:2]
    shift = (kp_src - kp_drv).view(B, k, *([1] * len(spatial)), n)
    flows = base[None, None] + shift
    return torch.cat([base[None, None].expand(B, 1, *base.shape), flows], 1)


def combine_flows(candidates: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination over the candidate axis; weights (B, k+1, *spatial)."""
    return (candidates * weights[..., None]).sum(1)


def local_heatmap(points: torch.Tensor, spatial, variance: float) -> torch.Tensor:
    """Max over landmark Gaussians -> (B, 1, *spatial); points (B, R, 2 or 3)."""
    n = len(spatial)
    grid = identity_grid(spatial, points.dtype, points.device)
    return gaussian_heatmaps(points[..., :n], grid, variance).amax(1, keepdim=True)


class DenseMotion3D(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        ch = (cfg.k + 1 + cfg.n_local,) + cfg.dmn_channels
        self.body = nn.Sequential(*[ConvNormAct3d(a, b) for a, b in zip(ch[:-1], ch[1:])])
        self.mask = nn.Conv3d(ch[-1], cfg.k + 1, 3, padding=1)
        self.cfg = cfg

    def heatmaps(self, kp_src, kp_drv, local=None):
        c = self.cfg
        spatial = (c.depth, c.feat_size, c.feat_size)
        grid = identity_grid(spatial, kp_src.dtype, kp_src.device)
        h = gaussian_heatmaps(kp_drv, grid, c.kp_variance) - gaussian_heatmaps(kp_src, grid, c.kp_variance)
        zeros = torch.zeros_like(h[:, :1])
        parts = [zeros, h]
        if c.n_local:
            if local is None:
                parts.append(torch.zeros_like(zeros))
            else:
                parts.append(local_heatmap(local, spatial, c.local_variance))
        return torch.cat(parts, 1)

    def forward(self, kp_src: torch.Tensor, kp_drv: torch.Tensor, local=None,
                weights_override=None) -> MotionField3D:
        c = self.cfg
        spatial = (c.depth, c.feat_size, c.feat_size)
        cand = candidate_flows(kp_src, kp_drv, spatial)
        if weights_override is None:
            logits = self.mask(self.body(self.heatmaps(kp_src, kp_drv, local)))
            weights = F.softmax(logits, dim=1)
        else:
            weights = weights_override
        return MotionField3D(combine_flows(cand, weights), weights, cand)


def warp_volume(feature: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Trilinear backward sampling with border padding."""
    if feature.shape[2:] != grid.shape[1:4]:
        raise ShapeMismatch("feature and motion grid disagree on D'xH'xW'")
    return F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=False)


class Generator(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        g = cfg.gen_channels
        self.inp = ConvNormAct2d(cfg.feat_channels * cfg.depth + cfg.n_local, g[0])
        self.res = nn.Sequential(*[ResBlock2d(g[0]) for _ in range(cfg.gen_res_blocks)])
        self.up = nn.Sequential(*[UpBlock2d(a, b) for a, b in zip(g[:-1], g[1:])])
        self.out = nn.Conv2d(g[-1], 3, 3, padding=1)
        self.cfg = cfg

    def forward(self, warped, local=None):
        c = self.cfg
        x = warped.reshape(warped.shape[0], -1, c.feat_size, c.feat_size)
        if c.n_local:
            loc = (local_heatmap(local, (c.feat_size, c.feat_size), c.local_variance)
                   if local is not None else x.new_zeros(x.shape[0], 1, c.feat_size, c.feat_size))
            x = torch.cat([x, loc], 1)
        return torch.sigmoid(self.out(self.up(self.res(self.inp(x)))))


class PatchDiscriminator(nn.Module):
    def __init__(self, channels=(16, 32)):
        super().__init__()
        layers, cin = [], 3
        for c in channels:
            layers += [nn.Conv2d(cin, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin = c
        layers.append(nn.Conv2d(cin, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """Scale s sees the image average-pooled s times; map size is res / 2^(n+s)."""

    def __init__(self, scales=2, channels=(16, 32)):
        super().__init__()
        self.discs = nn.ModuleList([PatchDiscriminator(channels) for _ in range(scales)])

    def forward(self, x) -> list[torch.Tensor]:
        out = []
        for i, d in enumerate(self.discs):
            if i:
                x = F.avg_pool2d(x, 2)
            out.append(d(x))
        return out


class Teacher(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AppearanceEncoder(cfg)
        self.mem = KeypointPredictor(cfg)
        self.dmn = DenseMotion3D(cfg)
        self.generator = Generator(cfg)

    def encode_appearance(self, source):
        return self.encoder(source)

    def predict_keypoints(self, image, mesh=None, landmarks=None) -> NeuralKeypoints:
        return self.mem(image, mesh, landmarks)

    def dense_motion(self, kp_src, kp_drv, local=None, weights_override=None) -> MotionField3D:
        return self.dmn(kp_src, kp_drv, local, weights_override)

    def warp(self, feature, motion: MotionField3D):
        return warp_volume(feature, motion.grid)

    def generate(self, warped, local=None):
        return self.generator(warped, local)

    def forward(self, source, src_mesh, src_lm, drv_image, drv_mesh, drv_lm, local=None,
                share_canonical=True, feature=None):
        """Full reenactment.  Returns a dict with the output image and intermediates.

        With ``share_canonical`` the driving keypoints reuse the source's
        canonical points, so identity shape comes from the source only.
        """
        feat = self.encode_appearance(source) if feature is None else feature
        kp_s = self.predict_keypoints(source, src_mesh, src_lm)
        kp_d = self.predict_keypoints(drv_image, drv_mesh, drv_lm)
        if share_canonical:
            kp_d_used = kp_d.with_canonical(kp_s.canonical)
        else:
            kp_d_used = kp_d
        motion = self.dense_motion(kp_s.composed, kp_d_used.composed, local)
        warped = self.warp(feat, motion)
        y = self.generate(warped, local)
        return dict(y=y, feature=feat, kp_src=kp_s, kp_drv=kp_d, kp_drv_used=kp_d_used,
                    motion=motion, warped=warped)

"""Identity-specific 2D student and the pieces of knowledge it receives.

The teacher delivers three things: its appearance volume (collapsed over
depth by a learned distributor), its keypoints (orthographically projected to
2D) and its discriminator.  The student itself is a planar dense-motion
network, a 2D warp and a small decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .blocks import ConvNormAct2d, UpBlock2d, gaussian_heatmaps
from .geometry import identity_grid
from .teacher import ShapeMismatch, TeacherConfig, candidate_flows, combine_flows


@dataclass
class StudentConfig:
    resolution: int = 64
    k: int = 15
    app_channels: int = 16
    feat_size: int = 16
    teacher_depth: int = 8
    dmn_channels: tuple = (16,)
    gen_channels: tuple = (16, 8, 4)
    head_channels: tuple = (8, 16, 16, 32)
    encoder_channels: tuple = (8, 16)
    kp_variance: float = 0.01
    identities: tuple = ()
    mode: str = "delivered-motion"

    def __post_init__(self):
        for name in ("dmn_channels", "gen_channels", "head_channels", "encoder_channels", "identities"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.mode not in ("delivered-motion", "standalone-motion"):
            raise ValueError(f"unknown inference mode {self.mode!r}")
        ups = int(round(math.log2(self.resolution // self.feat_size)))
        if self.feat_size * 2 ** ups != self.resolution or len(self.gen_channels) != ups + 1:
            raise ValueError("gen_channels must have log2(resolution / feat_size) + 1 entries")
        if len(self.encoder_channels) != ups:
            raise ValueError("encoder_channels must have log2(resolution / feat_size) entries")

    @classmethod
    def for_teacher(cls, tcfg: TeacherConfig, **kw) -> "StudentConfig":
        base = dict(resolution=tcfg.resolution, k=tcfg.k, app_channels=tcfg.feat_channels,
                    feat_size=tcfg.feat_size, teacher_depth=tcfg.depth)
        ups = int(round(math.log2(tcfg.downsample)))
        if ups != 2:
            base.update(gen_channels=tuple(max(4, 16 >> i) for i in range(ups + 1)),
                        encoder_channels=tuple(min(16, 4 << i) for i in range(ups)))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class AppearanceDistributor(nn.Module):
    """Softmax-over-depth weighted sum per spatial location: (B, C, D, H, W) -> (B, C, H, W)."""

    def __init__(self, depth: int, height: int, width: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(depth, height, width))

    def weights(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=0)

    def forward(self, volume: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
        w = self.weights() if weights is None else weights
        if volume.dim() < 4 or volume.shape[-3:] != w.shape:
            raise ShapeMismatch("volume depth/spatial shape does not match the distributor")
        return (volume * w).sum(-3)


def distribute_appearance(volume: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Functional form: weights are (D, H, W) and already sum to one over depth."""
    return (volume * weights).sum(-3)


class DenseMotion2D(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        ch = (cfg.k + 1,) + cfg.dmn_channels
        self.body = nn.Sequential(*[ConvNormAct2d(a, b) for a, b in zip(ch[:-1], ch[1:])])
        self.mask = nn.Conv2d(ch[-1], cfg.k + 1, 3, padding=1)
        self.cfg = cfg

    def forward(self, p_src, p_drv, weights_override=None):
        c = self.cfg
        spatial = (c.feat_size, c.feat_size)
        cand = candidate_flows(p_src, p_drv, spatial)
        if weights_override is None:
            grid = identity_grid(spatial, p_src.dtype, p_src.device)
            h = gaussian_heatmaps(p_drv, grid, c.kp_variance) - gaussian_heatmaps(p_src, grid, c.kp_variance)
            h = torch.cat([torch.zeros_like(h[:, :1]), h], 1)
            weights = F.softmax(self.mask(self.body(h)), dim=1)
        else:
            weights = weights_override
        return combine_flows(cand, weights), weights


class StudentGenerator(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        g = cfg.gen_channels
        self.inp = ConvNormAct2d(cfg.app_channels, g[0])
        self.up = nn.Sequential(*[UpBlock2d(a, b) for a, b in zip(g[:-1], g[1:])])
        self.out = nn.Conv2d(g[-1], 3, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.out(self.up(self.inp(x))))


class KeypointHead2D(nn.Module):
    """(frame, mesh raster) -> (B, k, 2) planar keypoints."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        layers, cin = [], 6
        for c in cfg.head_channels:
            layers.append(ConvNormAct2d(cin, c, stride=2))
            cin = c
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.fc = nn.Linear(cin * 16, cfg.k * 2)
        self.k = cfg.k

    def zero_init(self):
        for p in self.parameters():
            nn.init.zeros_(p)
        return self

    def forward(self, frame, mesh):
        h = self.pool(self.body(torch.cat([frame, mesh], 1))).flatten(1)
        return 1.5 * torch.tanh(self.fc(h)).view(-1, self.k, 2)


class AppearanceEncoder2D(nn.Module):
    """Used by the no-appearance ablation: source image -> (B, C, H', W')."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        layers, cin = [], 3
        for c in cfg.encoder_channels:
            layers.append(ConvNormAct2d(cin, c, stride=2))
            cin = c
        layers.append(ConvNormAct2d(cin, cfg.app_channels))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Student(nn.Module):
    """Per-identity student.

    ``volumes`` holds, for every identity, the teacher appearance volume
    flattened to (C * D', H', W'); the distributor collapses it on the fly
    during training and :meth:`cache_appearance` freezes the result.
    """

    def __init__(self, cfg: StudentConfig, own_appearance=False):
        super().__init__()
        self.cfg = cfg
        self.distributor = AppearanceDistributor(cfg.teacher_depth, cfg.feat_size, cfg.feat_size)
        self.dmn = DenseMotion2D(cfg)
        self.generator = StudentGenerator(cfg)
        self.kp_head = KeypointHead2D(cfg)
        self.own_appearance = own_appearance
        self.encoder = AppearanceEncoder2D(cfg) if own_appearance else None
        self.identity_index = {name: i for i, name in enumerate(cfg.identities)}
        n = max(1, len(cfg.identities))
        C, D, S = cfg.app_channels, cfg.teacher_depth, cfg.feat_size
        self.register_buffer("volumes", torch.zeros(n, C * D, S, S))
        self.register_buffer("sources", torch.zeros(n, 3, cfg.resolution, cfg.resolution))
        self.register_buffer("source_p2d", torch.zeros(n, cfg.k, 2))
        self.register_buffer("cached", torch.zeros(n, C, S, S))
        self.register_buffer("has_cache", torch.zeros((), dtype=torch.bool))

    def set_identity(self, name, volume=None, source=None, p2d=None):
        i = self.identity_index[name]
        if volume is not None:
            self.volumes[i] = volume.reshape(self.volumes.shape[1:])
        if source is not None:
            self.sources[i] = source
        if p2d is not None:
            self.source_p2d[i] = p2d
        self.has_cache.fill_(False)

    def appearance(self, idx: torch.Tensor) -> torch.Tensor:
        """Planar appearance feature for identity indices (B,)."""
        if self.has_cache and not self.training:
            return self.cached[idx]
        if self.own_appearance:
            return self.encoder(self.sources[idx])
        c = self.cfg
        vol = self.volumes[idx].view(-1, c.app_channels, c.teacher_depth, c.feat_size, c.feat_size)
        return self.distributor(vol)

    @torch.no_grad()
    def cache_appearance(self):
        was = self.training
        self.train()
        idx = torch.arange(self.volumes.shape[0])
        self.cached.copy_(self.appearance(idx))
        self.has_cache.fill_(True)
        self.train(was)

    def forward(self, appearance_2d, p2d_src, p2d_drv, weights_override=None, return_aux=False):
        c = self.cfg
        if appearance_2d.shape[1:] != (c.app_channels, c.feat_size, c.feat_size):
            raise ShapeMismatch(f"appearance must be {(c.app_channels, c.feat_size, c.feat_size)}")
        if p2d_src.shape[1:] != (c.k, 2) or p2d_drv.shape[1:] != (c.k, 2):
            raise ShapeMismatch(f"keypoints must be {(c.k, 2)}")
        grid, weights = self.dmn(p2d_src, p2d_drv, weights_override)
        warped = F.grid_sample(appearance_2d, grid, mode="bilinear", padding_mode="border",
                               align_corners=False)
        y = self.generator(warped)
        if return_aux:
            return y, dict(warped=warped, weights=weights, grid=grid)
        return y

    def predict_keypoints(self, frame, mesh):
        return self.kp_head(frame, mesh)

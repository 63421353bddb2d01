"""Analytic multiply-accumulate counts, plus a hook-based cross-check.

Only convolutions and linear layers are counted; normalization,
activations, interpolation and grid sampling are treated as free.  One
teacher frame costs encoder + 2 x keypoint predictor (source and driving) +
dense motion + generator.  One student frame costs dense motion + generator +
the standalone keypoint head; the planar appearance is cached per identity.
Discriminators are training-only and excluded from both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import prod

import torch
from torch import nn

from .student import StudentConfig
from .teacher import TeacherConfig


class UnsupportedLayer(TypeError):
    pass


@dataclass
class LayerSpec:
    kind: str  # conv2d | conv3d | linear
    cin: int
    cout: int
    kernel: tuple = ()
    out_spatial: tuple = ()
    groups: int = 1

    @property
    def macs(self) -> int:
        if self.kind in ("conv2d", "conv3d"):
            return (self.cin // self.groups) * prod(self.kernel) * self.cout * prod(self.out_spatial)
        if self.kind == "linear":
            return self.cin * self.cout
        raise UnsupportedLayer(self.kind)


@dataclass
class FlopsReport:
    stages: dict = field(default_factory=dict)  # stage -> MACs per call
    calls: dict = field(default_factory=dict)  # stage -> calls per frame

    @property
    def total_macs(self) -> int:
        return sum(self.stages[s] * self.calls.get(s, 1) for s in self.stages)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> dict:
        return {"stages": dict(self.stages), "calls": dict(self.calls), "macs": self.total_macs,
                "flops": self.total_flops}


def _c2(cin, cout, k, size):
    return LayerSpec("conv2d", cin, cout, (k, k), (size, size))


def _c3(cin, cout, k, depth, size):
    return LayerSpec("conv3d", cin, cout, (k, k, k), (depth, size, size))


def teacher_layers(cfg: TeacherConfig, resolution: int | None = None) -> dict[str, list[LayerSpec]]:
    r = resolution or cfg.resolution
    f = r // cfg.downsample
    enc, size = [], r
    ch = cfg.enc_channels
    enc.append(_c2(3, ch[0], 3, size))
    for a, b in zip(ch[:-1], ch[1:]):
        size //= 2
        enc.append(_c2(a, b, 3, size))
    enc.append(_c2(ch[-1], cfg.feat_channels * cfg.depth, 1, f))
    enc += [_c3(cfg.feat_channels, cfg.feat_channels, 3, cfg.depth, f)] * (2 * cfg.enc_res3d)

    mem, size = [], r
    m = cfg.mem_channels
    mem.append(_c2(6 if cfg.early_infusion else 3, m[0], 3, size))
    for a, b in zip(m[:-1], m[1:]):
        size //= 2
        mem.append(_c2(a, b, 3, size))
    emb = 0
    if cfg.late_infusion:
        emb = cfg.landmark_embed
        mem += [LayerSpec("linear", cfg.num_landmarks * 3, emb), LayerSpec("linear", emb, emb)]
    mem += [LayerSpec("linear", m[-1] + emb, cfg.mem_hidden),
            LayerSpec("linear", cfg.mem_hidden, 6 * cfg.k + 9)]

    d = (cfg.k + 1 + cfg.n_local,) + cfg.dmn_channels
    dmn = [_c3(a, b, 3, cfg.depth, f) for a, b in zip(d[:-1], d[1:])]
    dmn.append(_c3(d[-1], cfg.k + 1, 3, cfg.depth, f))

    g = cfg.gen_channels
    gen, size = [_c2(cfg.feat_channels * cfg.depth + cfg.n_local, g[0], 3, f)], f
    gen += [_c2(g[0], g[0], 3, f)] * (2 * cfg.gen_res_blocks)
    for a, b in zip(g[:-1], g[1:]):
        size *= 2
        gen.append(_c2(a, b, 3, size))
    gen.append(_c2(g[-1], 3, 3, size))
    return {"appearance": enc, "keypoints": mem, "dense_motion": dmn, "generator": gen}


def student_layers(cfg: StudentConfig, resolution: int | None = None,
                   own_appearance=False) -> dict[str, list[LayerSpec]]:
    r = resolution or cfg.resolution
    f = cfg.feat_size * r // cfg.resolution
    d = (cfg.k + 1,) + cfg.dmn_channels
    dmn = [_c2(a, b, 3, f) for a, b in zip(d[:-1], d[1:])] + [_c2(d[-1], cfg.k + 1, 3, f)]
    g = cfg.gen_channels
    gen, size = [_c2(cfg.app_channels, g[0], 3, f)], f
    for a, b in zip(g[:-1], g[1:]):
        size *= 2
        gen.append(_c2(a, b, 3, size))
    gen.append(_c2(g[-1], 3, 3, size))
    head, size, cin = [], r, 6
    for c in cfg.head_channels:
        size //= 2
        head.append(_c2(cin, c, 3, size))
        cin = c
    head.append(LayerSpec("linear", cin * 16, cfg.k * 2))
    out = {"dense_motion": dmn, "generator": gen, "keypoint_head": head}
    if own_appearance:
        enc, size, cin = [], r, 3
        for c in cfg.encoder_channels:
            size //= 2
            enc.append(_c2(cin, c, 3, size))
            cin = c
        enc.append(_c2(cin, cfg.app_channels, 3, size))
        out["appearance"] = enc
    return out


TEACHER_CALLS = {"appearance": 1, "keypoints": 2, "dense_motion": 1, "generator": 1}
STUDENT_CALLS = {"dense_motion": 1, "generator": 1, "keypoint_head": 1, "appearance": 0}


def count_flops(cfg, resolution: int | None = None, own_appearance=False) -> FlopsReport:
    """Per-frame MACs for a teacher or student config at ``resolution``."""
    if isinstance(cfg, TeacherConfig):
        layers, calls = teacher_layers(cfg, resolution), TEACHER_CALLS
    elif isinstance(cfg, StudentConfig):
        layers, calls = student_layers(cfg, resolution, own_appearance), STUDENT_CALLS
    else:
        raise UnsupportedLayer(f"no layer enumeration for {type(cfg).__name__}")
    stages = {name: sum(l.macs for l in specs) for name, specs in layers.items()}
    return FlopsReport(stages, {s: calls[s] for s in stages})


def profile_macs(module: nn.Module, fn) -> int:
    """Run ``fn()`` and sum conv/linear MACs observed by forward hooks on ``module``."""
    total = 0

    def hook(mod, inputs, output):
        nonlocal total
        if isinstance(mod, (nn.Conv2d, nn.Conv3d)):
            k = prod(mod.kernel_size)
            total += (mod.in_channels // mod.groups) * k * mod.out_channels * prod(output.shape[2:]) \
                * output.shape[0]
        elif isinstance(mod, nn.Linear):
            total += mod.in_features * mod.out_features * prod(output.shape[:-1])

    handles = []
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            handles.append(m.register_forward_hook(hook))
        elif isinstance(m, (nn.ConvTranspose2d, nn.ConvTranspose3d, nn.MultiheadAttention)):
            raise UnsupportedLayer(type(m).__name__)
    try:
        with torch.no_grad():
            fn()
    finally:
        for h in handles:
            h.remove()
    return total


def format_macs(macs: int) -> str:
    return f"{macs / 1e9:.3f} GMAC ({2 * macs / 1e9:.3f} GFLOPs)"

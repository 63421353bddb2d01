"""Second-order synthetic degradation for (low-quality, high-quality) source pairs.

Each order applies blur, resize, noise and JPEG compression in that order;
the result is resized back to the source resolution.  All randomness comes
from an explicit ``numpy.random.Generator`` and the image operators are the
fixed-function OpenCV kernels, so a given (image, config, seed) always yields
the same bytes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np

INTERP = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}
JPEG_BYPASS = 0
MIN_SIZE = 8


class ImageTooSmall(ValueError):
    pass


@dataclass
class BlurParams:
    kernel_type: str = "gaussian"
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    angle: float = 0.0
    kernel_size: int = 3


@dataclass
class ResizeParams:
    scale: float = 1.0
    interp: str = "bilinear"


@dataclass
class NoiseParams:
    kind: str = "gaussian"
    sigma: float = 0.0  # gaussian std, or poisson strength


@dataclass
class DegradationParams:
    blur: BlurParams = field(default_factory=BlurParams)
    resize: ResizeParams = field(default_factory=ResizeParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    jpeg_quality: int = JPEG_BYPASS

    def __post_init__(self):
        k = self.blur.kernel_size
        if k < 3 or k % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")
        if self.resize.scale <= 0:
            raise ValueError("scale must be positive")
        if self.jpeg_quality != JPEG_BYPASS and not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls()


@dataclass
class StageRanges:
    """Uniform sampling ranges for one degradation order."""

    kernel_types: tuple = ("gaussian", "anisotropic-gaussian")
    sigma: tuple = (0.2, 3.0)
    kernel_size: tuple = (7, 21)
    scale: tuple = (0.25, 1.0)
    interps: tuple = ("nearest", "bilinear", "bicubic")
    noise_kinds: tuple = ("gaussian",)
    noise_sigma: tuple = (0.0, 0.1)
    poisson_scale: tuple = (0.05, 1.0)
    jpeg_quality: tuple = (30, 95)


def _default_stages():
    return [StageRanges(), StageRanges(scale=(0.5, 1.0))]


@dataclass
class DegradationConfig:
    orders: int = 2
    stages: list = field(default_factory=_default_stages)
    final_resize_to_source: bool = True
    final_interp: str = "bilinear"
    rng_seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageRanges) else
                       StageRanges(**{k: tuple(v) for k, v in s.items()}) for s in self.stages]
        if self.orders < 1:
            raise ValueError("orders must be >= 1")
        for s in self.stages:
            for name in ("sigma", "kernel_size", "scale", "noise_sigma", "jpeg_quality"):
                lo, hi = getattr(s, name)
                if lo > hi:
                    raise ValueError(f"empty range for {name}")
            if not s.kernel_types or not s.interps or not s.noise_kinds:
                raise ValueError("choice lists must be non-empty")

    def stage(self, i: int) -> StageRanges:
        return self.stages[min(i, len(self.stages) - 1)]

    @classmethod
    def identity(cls, orders=2) -> "DegradationConfig":
        st = StageRanges(kernel_types=("gaussian",), sigma=(0.0, 0.0), kernel_size=(3, 3),
                         scale=(1.0, 1.0), interps=("bilinear",), noise_kinds=("gaussian",),
                         noise_sigma=(0.0, 0.0), jpeg_quality=(JPEG_BYPASS, JPEG_BYPASS))
        return cls(orders=orders, stages=[st])

    def to_dict(self) -> dict:
        return asdict(self)


def sample_params(config: DegradationConfig, rng: np.random.Generator) -> list[DegradationParams]:
    out = []
    for i in range(config.orders):
        s = config.stage(i)
        ktype = s.kernel_types[int(rng.integers(len(s.kernel_types)))]
        sx = float(rng.uniform(*s.sigma))
        if ktype == "anisotropic-gaussian":
            sy = float(rng.uniform(*s.sigma))
            angle = float(rng.uniform(0, math.pi))
        else:
            sy, angle = sx, 0.0
        klo, khi = s.kernel_size
        ksize = 2 * int(rng.integers((klo - 1) // 2, (khi - 1) // 2 + 1)) + 1
        scale = float(rng.uniform(*s.scale))
        interp = s.interps[int(rng.integers(len(s.interps)))]
        kind = s.noise_kinds[int(rng.integers(len(s.noise_kinds)))]
        nsig = float(rng.uniform(*(s.noise_sigma if kind == "gaussian" else s.poisson_scale)))
        q = int(rng.integers(s.jpeg_quality[0], s.jpeg_quality[1] + 1))
        out.append(DegradationParams(BlurParams(ktype, sx, sy, angle, ksize),
                                     ResizeParams(scale, interp), NoiseParams(kind, nsig), q))
    return out


def gaussian_kernel(ksize: int, sigma_x: float, sigma_y: float, angle: float = 0.0) -> np.ndarray:
    """Normalized (possibly rotated anisotropic) Gaussian; delta kernel for zero sigma."""
    k = np.zeros((ksize, ksize))
    if sigma_x <= 0 and sigma_y <= 0:
        k[ksize // 2, ksize // 2] = 1.0
        return k
    sx, sy = max(sigma_x, 1e-3), max(sigma_y, 1e-3)
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    cov = R @ np.diag([sx ** 2, sy ** 2]) @ R.T
    inv = np.linalg.inv(cov)
    r = np.arange(ksize) - ksize // 2
    xx, yy = np.meshgrid(r, r)
    xy = np.stack([xx, yy], -1)
    k = np.exp(-0.5 * np.einsum("...i,ij,...j->...", xy, inv, xy))
    return k / k.sum()


def _hwc(image):
    return np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(1, 2, 0))


def _chw(image):
    return np.ascontiguousarray(image.transpose(2, 0, 1))


def _blur(img, p: BlurParams):
    if p.sigma_x <= 0 and p.sigma_y <= 0:
        return img
    k = gaussian_kernel(p.kernel_size, p.sigma_x, p.sigma_y, p.angle).astype(np.float32)
    return cv2.filter2D(img, -1, k, borderType=cv2.BORDER_REFLECT_101)


def _resize_to(img, size_hw, interp):
    h, w = size_hw
    if (h, w) == img.shape[:2]:
        return img
    out = cv2.resize(img, (w, h), interpolation=INTERP[interp])
    return out if out.ndim == 3 else out[:, :, None]


def _noise(img, p: NoiseParams, rng):
    if p.sigma <= 0:
        return img
    if p.kind == "gaussian":
        return img + rng.normal(0.0, p.sigma, size=img.shape).astype(np.float32)
    if p.kind == "poisson":
        clean = np.clip(img, 0, 1) * 255.0
        noisy = rng.poisson(clean).astype(np.float32)
        return img + (noisy - clean) / 255.0 * p.sigma
    raise ValueError(f"unknown noise kind {p.kind!r}")


def _jpeg(img, quality):
    if quality == JPEG_BYPASS:
        return img
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    ok, buf = cv2.imencode(".jpg", q[:, :, ::-1], [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("jpeg encoding failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)[:, :, ::-1]
    return dec.astype(np.float32) / 255.0


def degrade_once(image: np.ndarray, params: DegradationParams,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Blur, resize, noise, JPEG.  Image is 3xHxW in [0, 1]; output may be smaller."""
    image = np.asarray(image, dtype=np.float32)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    img = _hwc(image)
    img = _blur(img, params.blur)
    h, w = img.shape[:2]
    if params.resize.scale != 1.0:
        size = (int(round(h * params.resize.scale)), int(round(w * params.resize.scale)))
        if min(size) < MIN_SIZE:
            raise ImageTooSmall(f"resize to {size} is below {MIN_SIZE} pixels")
        img = _resize_to(img, size, params.resize.interp)
    img = _noise(img, params.noise, rng)
    img = _jpeg(img, params.jpeg_quality)
    return _chw(np.clip(img, 0.0, 1.0))


def degrade_with(image: np.ndarray, params: list[DegradationParams], rng: np.random.Generator,
                 final_interp="bilinear") -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    for p in params:
        out = degrade_once(out, p, rng)
    if out.shape != np.shape(image):
        out = _chw(np.clip(_resize_to(_hwc(out), np.shape(image)[1:], final_interp), 0.0, 1.0))
    return out


def make_pair(image: np.ndarray, config: DegradationConfig, rng: np.random.Generator,
              return_params=False):
    """Return ``(degraded, image)``; the second element is the untouched input."""
    params = sample_params(config, rng)
    low = degrade_with(image, params, rng, config.final_interp)
    if return_params:
        return (low, image), params
    return low, image


def worker_rng(global_seed: int, worker_id: int, sample_index: int) -> np.random.Generator:
    """Independent stream per (seed, worker, sample)."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, worker_id, sample_index]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)

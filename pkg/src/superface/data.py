"""In-memory frame bank, deterministic pair batches and a bounded prefetch queue."""
from __future__ import annotations

import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .degradation import DegradationConfig, degrade_with, sample_params
from .geometry import Affine2D
from .priors import edge_table_68, rasterize_mesh
from .toydata import ToyDataset


class DataError(RuntimeError):
    pass


class EmptyResult(DataError):
    pass


@dataclass
class FrameBank:
    frames: np.ndarray  # N x 3 x H x W
    meshes: np.ndarray  # N x 3 x H x W
    landmarks: np.ndarray  # N x 68 x 3
    identity: np.ndarray  # N int
    clips: list  # per clip: array of usable frame indices into the bank
    clip_names: list
    identities: list

    @property
    def resolution(self) -> int:
        return self.frames.shape[-1]


def load_bank(root, split="train", identities=None) -> FrameBank:
    """Usable frames of a toy-format dataset; frames without priors are dropped."""
    root = Path(root)
    if not (root / "split.json").exists():
        raise DataError(f"no dataset manifest at {root / 'split.json'}")
    ds = ToyDataset(root, split)
    names = [n for n in ds.identities if identities is None or n in identities]
    if not names:
        raise DataError("no identities selected")
    edges = edge_table_68()
    frames, meshes, lms, ids, clips, clip_names = [], [], [], [], [], []
    n = 0
    for c in ds.clips:
        if c.identity not in names:
            continue
        idx = np.flatnonzero(c.valid)
        if len(idx) < 2:
            continue
        for j in idx:
            frames.append(c.frames[j])
            meshes.append(rasterize_mesh(c.landmarks[j], edges, c.frames.shape[-2:]).raster)
            lms.append(c.landmarks[j])
            ids.append(names.index(c.identity))
        clips.append(np.arange(n, n + len(idx)))
        clip_names.append(c.name)
        n += len(idx)
    if not clips:
        raise DataError("dataset has no usable clips")
    return FrameBank(np.stack(frames).astype(np.float32), np.stack(meshes).astype(np.float32),
                     np.stack(lms).astype(np.float32), np.array(ids), clips, clip_names, names)


class PairSampler:
    """Batch ``i`` depends only on (seed, i): same-clip (source, driving) pairs.

    Each batch also carries its SSR-degraded sources, the MTM coin flips and
    a random affine transform for the equivariance term.
    """

    def __init__(self, bank: FrameBank, batch_size: int, seed: int,
                 degradation: DegradationConfig | None, mask_prob=0.5):
        self.bank = bank
        self.batch_size = batch_size
        self.seed = seed
        self.degradation = degradation
        self.mask_prob = mask_prob

    def __call__(self, index: int) -> dict:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        b = self.bank
        src_i, drv_i = [], []
        for _ in range(self.batch_size):
            clip = b.clips[int(rng.integers(len(b.clips)))]
            s, d = rng.choice(clip, size=2, replace=False)
            src_i.append(s)
            drv_i.append(d)
        src = b.frames[src_i]
        if self.degradation is not None:
            low = np.stack([degrade_with(im, sample_params(self.degradation, rng), rng,
                                         self.degradation.final_interp) for im in src])
        else:
            low = src.copy()
        t = torch.as_tensor
        return dict(
            index=index,
            src=t(src), src_low=t(low.astype(np.float32)),
            src_mesh=t(b.meshes[src_i]), src_lm=t(b.landmarks[src_i]),
            drv=t(b.frames[drv_i]), drv_mesh=t(b.meshes[drv_i]), drv_lm=t(b.landmarks[drv_i]),
            mask_flip=t(rng.random(self.batch_size) < self.mask_prob),
            transform=Affine2D.random(rng),
        )


class Prefetcher:
    """Produce ``fn(i)`` for i in [start, stop) in order through a bounded queue.

    With ``workers == 0`` batches are built synchronously in the caller.
    """

    def __init__(self, fn, start: int, stop: int, workers=2, queue_size=4):
        self.fn, self.start, self.stop = fn, start, stop
        self.workers, self.queue_size = workers, queue_size

    def __iter__(self):
        if self.workers == 0:
            for i in range(self.start, self.stop):
                yield self.fn(i)
            return
        pending: queue.Queue = queue.Queue(maxsize=self.queue_size)
        stop_flag = threading.Event()
        with ThreadPoolExecutor(self.workers) as pool:
            def feed():
                for i in range(self.start, self.stop):
                    if stop_flag.is_set():
                        break
                    pending.put(pool.submit(self.fn, i))
                pending.put(None)

            feeder = threading.Thread(target=feed, daemon=True)
            feeder.start()
            try:
                while (fut := pending.get()) is not None:
                    yield fut.result()
            finally:
                stop_flag.set()
                while not pending.empty():
                    f = pending.get_nowait()
                    if f is not None:
                        f.cancel()
                feeder.join(timeout=5)

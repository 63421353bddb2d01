"""Self-describing checkpoints: ``model.pt`` plus ``manifest.json``.

The manifest carries everything needed to rebuild the models (the full run
config included), so loading never needs the original config file.
"""
from __future__ import annotations

import json
import subprocess
from pathlib import Path

import torch

from .config import RunConfig, from_dict

WEIGHTS = "model.pt"
MANIFEST = "manifest.json"


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() or "unknown"


def save_checkpoint(directory, kind: str, state: dict, cfg: RunConfig, extra: dict | None = None):
    """``state`` maps names to state dicts (or plain picklable values)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / (WEIGHTS + ".tmp")
    torch.save(state, tmp)
    tmp.replace(d / WEIGHTS)
    tcfg = cfg.teacher_config()
    manifest = {
        "kind": kind,
        "config_hash": cfg.hash(),
        "k": tcfg.k,
        "resolution": cfg.resolution,
        "loss_weights": {"teacher": list(cfg.loss_weights.teacher),
                         "student": list(cfg.loss_weights.student)},
        "seeds": {"seed": cfg.seed, "degradation": cfg.degradation.rng_seed},
        "git_revision": git_revision(),
        "config": json.loads(json.dumps(cfg.to_dict(), default=list)),
    }
    manifest.update(extra or {})
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> tuple[dict, dict, RunConfig]:
    """Return (manifest, state, config)."""
    manifest = read_manifest(directory)
    state = torch.load(Path(directory) / WEIGHTS, map_location="cpu", weights_only=False)
    return manifest, state, from_dict(manifest["config"])


def checkpoint_hash(directory) -> str:
    return read_manifest(directory)["config_hash"]

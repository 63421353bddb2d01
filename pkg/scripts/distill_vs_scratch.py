"""Distilled student against an equal-FLOPs scratch student over several seeds.

The scratch student predicts its own keypoints, encodes its own appearance,
trains a fresh discriminator and regresses real frames instead of teacher
outputs.  Both share one distill set built from the given teacher.
"""
import argparse
import json
from pathlib import Path

from superface.config import from_dict
from superface.distill import distill_student
from superface.flops import count_flops
from superface.inference import evaluate, load_engine

SCRATCH = {"target": "real", "ablate": ["no-nk", "no-app", "no-disc"]}


def run(teacher, data, out, seeds, steps, disc_mode, max_frames=None):
    out = Path(out)
    rows = []
    for seed in seeds:
        for name, d in (("distilled", {"disc_mode": disc_mode}), ("scratch", SCRATCH)):
            cfg = from_dict({"seed": seed, "data": {"root": str(data)},
                             "distill": dict(d, steps=steps)})
            ck = distill_student(cfg, teacher, out / f"{name}_s{seed}", out / "distill_set")
            rep = evaluate([str(ck)], data, "test", max_frames=max_frames)
            eng = load_engine(ck)
            macs = count_flops(eng.cfg, own_appearance=eng.manifest["own_appearance"]).total_macs
            rows.append({"variant": name, "seed": seed, "macs": macs, **rep.aggregate})
            print(f"{name:9s} seed {seed}  perceptual {rep.aggregate['perceptual']:.4f}  "
                  f"akd {rep.aggregate['akd']:.3f}  macs {macs}", flush=True)
    (out / "results.json").write_text(json.dumps(rows, indent=2))
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--disc-mode", default="finetune", choices=["frozen", "finetune"])
    p.add_argument("--max-frames", type=int)
    a = p.parse_args()
    rows = run(a.teacher, a.data, a.out, a.seeds, a.steps, a.disc_mode, a.max_frames)
    mean = lambda v: sum(r["perceptual"] for r in rows if r["variant"] == v) / len(a.seeds)
    print(f"mean perceptual: distilled {mean('distilled'):.4f}  scratch {mean('scratch'):.4f}")


if __name__ == "__main__":
    main()

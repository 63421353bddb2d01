"""Sweep one student axis against a fixed teacher.

Axes: ``steps`` (training length), ``frames`` (distill samples per
identity), ``width`` (channel multiplier, i.e. the FLOPs budget) and
``variant`` (the delivered-knowledge ablations).
"""
import argparse
import json
from pathlib import Path

from superface.config import from_dict
from superface.distill import distill_student
from superface.flops import count_flops
from superface.inference import evaluate, load_engine
from superface.student import StudentConfig

VARIANTS = {"full": [], "no-nk": ["no-nk"], "no-app": ["no-app"], "no-disc": ["no-disc"]}


def point(axis, value, base_steps):
    d = {"steps": base_steps}
    student = {}
    if axis == "steps":
        d["steps"] = int(value)
    elif axis == "frames":
        d["frames_per_identity"] = int(value)
    elif axis == "width":
        m = float(value)
        base = StudentConfig()
        scale = lambda chans: [max(2, int(round(c * m))) for c in chans]
        student = {"dmn_channels": scale(base.dmn_channels), "gen_channels": scale(base.gen_channels)}
    elif axis == "variant":
        d["ablate"] = VARIANTS[value]
    return d, student


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=["steps", "frames", "width", "variant"])
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=2000, help="steps when not sweeping steps")
    p.add_argument("--disc-mode", default="finetune", choices=["frozen", "finetune"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-frames", type=int)
    a = p.parse_args()
    out = Path(a.out)
    rows = []
    for v in a.values:
        d, student = point(a.axis, v, a.steps)
        d.setdefault("disc_mode", a.disc_mode)
        cfg = from_dict({"seed": a.seed, "data": {"root": a.data}, "distill": d, "student": student})
        ck = distill_student(cfg, a.teacher, out / f"{a.axis}_{v}", out / "distill_set")
        rep = evaluate([str(ck)], a.data, "test", max_frames=a.max_frames,
                       teacher_for_delivery=a.teacher)
        eng = load_engine(ck)
        macs = count_flops(eng.cfg, own_appearance=eng.manifest["own_appearance"]).total_macs
        rows.append({a.axis: v, "macs": macs, **rep.aggregate})
        print(f"{a.axis}={v:>6s}  macs {macs:>10d}  perceptual {rep.aggregate['perceptual']:.4f}  "
              f"csim {rep.aggregate['csim']:.4f}  akd {rep.aggregate['akd']:.3f}", flush=True)
    (out / f"{a.axis}.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

"""Students covering 1..N identities from one teacher; per-identity CSIM."""
import argparse
import json
from pathlib import Path

import numpy as np

from superface.config import from_dict
from superface.distill import distill_student
from superface.inference import evaluate
from superface.toydata import make_toy_dataset
from superface.training import train_teacher


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", required=True)
    p.add_argument("--max-identities", type=int, default=4)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--teacher", help="reuse this teacher instead of training one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-frames", type=int)
    a = p.parse_args()
    out = Path(a.out)
    data = out / "data"
    if not (data / "split.json").exists():
        make_toy_dataset(data, n_identities=a.max_identities, seed=a.seed)
    base = {"seed": a.seed, "data": {"root": str(data)}}
    teacher = a.teacher or train_teacher(from_dict(dict(base, train={"iterations": a.iterations})),
                                         out / "teacher_run")
    names = [f"id{i:02d}" for i in range(a.max_identities)]
    rows = []
    for n in range(1, a.max_identities + 1):
        cfg = from_dict(dict(base, distill={"steps": a.steps, "identities": names[:n]}))
        ck = distill_student(cfg, teacher, out / f"n{n}", out / f"n{n}" / "distill_set")
        rep = evaluate([str(ck)], data, "test", max_frames=a.max_frames)
        per = {r["clip"].split("|")[1].split("/")[0]: r["csim"] for r in rep.rows}
        rows.append({"identities": n, "csim_mean": float(np.mean(list(per.values()))), "per_identity": per})
        print(f"{n} identities  csim {rows[-1]['csim_mean']:.4f}  " +
              " ".join(f"{k}:{v:.4f}" for k, v in sorted(per.items())), flush=True)
    (out / "results.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

"""Train the full teacher and each ablated variant on one dataset and compare."""
import argparse
import json
from pathlib import Path

from superface.config import ABLATIONS_TEACHER, from_dict
from superface.inference import evaluate
from superface.training import train_teacher


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", nargs="*", default=["full", *ABLATIONS_TEACHER])
    p.add_argument("--max-frames", type=int)
    a = p.parse_args()
    out = Path(a.out)
    rows = []
    for v in a.variants:
        ablate = [] if v == "full" else [v]
        cfg = from_dict({"seed": a.seed, "data": {"root": a.data},
                         "train": {"iterations": a.iterations, "ablate": ablate}})
        ck = train_teacher(cfg, out / v)
        rep = evaluate([str(ck)], a.data, "test", max_frames=a.max_frames)
        rows.append({"variant": v, **rep.aggregate})
        print(f"{v:9s} " + "  ".join(f"{k} {rep.aggregate[k]:.4f}"
                                     for k in ("perceptual", "csim", "akd", "apd", "aed")), flush=True)
    (out / "results.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

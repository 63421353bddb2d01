"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, from_dict, load_config
from .data import DataError
from .degradation import degrade_with, sample_params, worker_rng
from .editing import AudioTooShort
from .flops import count_flops, format_macs
from .frames import read_image, write_clip, write_image
from .priors import NoFaceDetected, read_landmark_file
from .student import StudentConfig
from .teacher import TeacherConfig

log = logging.getLogger("superface")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "deterministic", False):
        d["deterministic"] = True
        d["data"]["workers"] = 0
    if getattr(args, "out", None):
        d["out_dir"] = str(args.out)
    if getattr(args, "data", None):
        d["data"]["root"] = str(args.data)
    if getattr(args, "iterations", None):
        d["train"]["iterations"] = args.iterations
    if args.command == "train-teacher" and args.ablate:
        d["train"]["ablate"] = sorted(set(d["train"]["ablate"]) | set(args.ablate))
    if args.command == "distill-student":
        if args.ablate:
            d["distill"]["ablate"] = sorted(set(d["distill"]["ablate"]) | set(args.ablate))
        if args.target:
            d["distill"]["target"] = args.target
        if args.disc_mode:
            d["distill"]["disc_mode"] = args.disc_mode
        if args.steps:
            d["distill"]["steps"] = args.steps
        if args.identities:
            d["distill"]["identities"] = args.identities
        if args.frames_per_identity:
            d["distill"]["frames_per_identity"] = args.frames_per_identity
    return from_dict(d)


def _plan(cfg: RunConfig, what: str, extra: dict | None = None) -> dict:
    tcfg = cfg.teacher_config()
    t = count_flops(tcfg)
    s = count_flops(cfg.student_config())
    plan = {"command": what, "config_hash": cfg.hash(), "resolution": cfg.resolution,
            "teacher_macs": t.total_macs, "student_macs": s.total_macs,
            "flops_ratio": s.total_macs / t.total_macs}
    plan.update(extra or {})
    return plan


def _print_plan(cfg: RunConfig, plan: dict):
    print(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=False))
    for k, v in plan.items():
        print(f"{k}: {v}")


def cmd_make_toy_data(args) -> int:
    from .toydata import make_toy_dataset
    if args.dry_run:
        print(f"would write {args.identities} identities x {args.train_clips + args.test_clips} "
              f"clips x {args.frames} frames at {args.resolution}px to {args.out}")
        return EXIT_OK
    split = make_toy_dataset(args.out, args.identities, args.train_clips, args.test_clips,
                             args.frames, args.resolution, seed=args.seed or 0,
                             blank_frames=args.blank_frames)
    print(f"wrote {len(split['train'])} train / {len(split['test'])} test clips to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .training import train_teacher
    cfg = _config(args)
    if args.dry_run:
        _print_plan(cfg, _plan(cfg, "train-teacher", {"iterations": cfg.train.iterations,
                                                       "batch_size": cfg.data.batch_size}))
        return EXIT_OK

    def progress(it, bd):
        if it % args.log_every == 0:
            log.info("iter %d total %.4f %s", it, float(bd.total),
                     " ".join(f"{k}={v:.4f}" for k, v in bd.as_floats().items()))

    out = train_teacher(cfg, cfg.out_dir, resume=args.resume, progress=progress)
    print(out)
    return EXIT_OK


def cmd_distill_student(args) -> int:
    from .distill import distill_student
    cfg = _config(args)
    if args.dry_run:
        _print_plan(cfg, _plan(cfg, "distill-student", {"steps": cfg.distill.steps,
                                                         "variant": cfg.distill.ablate,
                                                         "target": cfg.distill.target}))
        return EXIT_OK
    if not (Path(args.teacher) / "manifest.json").exists():
        raise DataError(f"no teacher checkpoint at {args.teacher}")
    out = distill_student(cfg, args.teacher, cfg.out_dir, args.distill_set)
    print(out)
    return EXIT_OK


def _source(args):
    img = read_image(args.source)
    lm = None
    if args.source_landmarks:
        table = read_landmark_file(args.source_landmarks)
        lm = next(iter(table.values())).points
    return img, lm


def cmd_infer(args) -> int:
    from .inference import TeacherEngine, drive_audio, drive_edit, drive_video, load_engine
    modes = [m for m in ("video", "audio", "edit") if getattr(args, m)]
    if args.edit and not args.video:
        raise ConfigError("--edit needs --video for the driving clip")
    if not modes:
        raise ConfigError("give one of --video, --audio or --edit")
    if args.dry_run:
        print(f"infer: checkpoint {args.checkpoint}, modes {modes}, out {args.out}")
        return EXIT_OK
    eng = load_engine(args.checkpoint, args.mode)
    if eng.kind == "student" and args.teacher:
        eng.attach_teacher(TeacherEngine(args.teacher))
    img, lm = _source(args)
    if args.edit:
        frames = drive_edit(eng, img, lm, args.video, args.edit, args.audio)
    elif args.audio and not args.video:
        frames = drive_audio(eng, img, lm, args.audio, args.fps)
    else:
        if eng.kind == "student" and eng.mode == "delivered-motion" and eng.teacher is None:
            raise ConfigError("delivered-motion student inference needs --teacher")
        frames = drive_video(eng, img, lm, args.video, args.identity)
    write_clip(args.out, list(frames), args.fps, {"checkpoint": str(args.checkpoint), "modes": modes})
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .inference import evaluate
    if args.dry_run:
        print(f"evaluate: {args.checkpoint} on {args.data} [{args.split}] -> {args.out}")
        return EXIT_OK
    report = evaluate(args.checkpoint, args.data, args.split, args.out, args.max_frames,
                      args.teacher)
    for k, v in report.aggregate.items():
        print(f"{k}: {v:.6f}")
    return EXIT_OK


def cmd_degrade_preview(args) -> int:
    cfg = _config(args)
    inputs = sorted(p for p in Path(args.inp).iterdir() if p.suffix.lower() in (".png", ".jpg"))
    if not inputs:
        raise DataError(f"no images in {args.inp}")
    if args.dry_run:
        print(f"degrade-preview: {len(inputs)} images, orders={cfg.degradation.orders}")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    records = []
    for i, p in enumerate(inputs):
        img = read_image(p)
        rng = worker_rng(seed, 0, i)
        params = sample_params(cfg.degradation, rng)
        low = degrade_with(img, params, rng, cfg.degradation.final_interp)
        write_image(out / f"{p.stem}_lq.png", low)
        write_image(out / f"{p.stem}_hq.png", img)
        records.append({"input": p.name, "params": [q.to_dict() for q in params]})
    (out / "manifest.json").write_text(json.dumps({"seed": seed, "frames": records}, indent=2))
    print(f"wrote {len(records)} pairs to {out}")
    return EXIT_OK


PRESETS = {"toy": TeacherConfig.toy, "large-toy": TeacherConfig.large_toy,
           "full": TeacherConfig.full_scale}


def cmd_count_flops(args) -> int:
    if args.config:
        cfg = _config(args)
        pairs = {Path(args.config).stem: (cfg.teacher_config(), cfg.student_config())}
    else:
        names = args.preset or list(PRESETS)
        pairs = {}
        for n in names:
            t = PRESETS[n]()
            pairs[n] = (t, StudentConfig.for_teacher(t))
    rows = {}
    for name, (t, s) in pairs.items():
        ft, fs = count_flops(t), count_flops(s)
        rows[name] = {"resolution": t.resolution, "teacher": ft.to_dict(), "student": fs.to_dict(),
                      "ratio": fs.total_macs / ft.total_macs}
        if not args.json:
            print(f"{name} @ {t.resolution}px  teacher {format_macs(ft.total_macs)}  "
                  f"student {format_macs(fs.total_macs)}  ratio {100 * rows[name]['ratio']:.3f}%")
    if args.json:
        print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superface", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        sp.add_argument("--deterministic", action="store_true",
                        help="single worker, fixed order, deterministic kernels")

    sp = sub.add_parser("make-toy-data", help="write the hermetic synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--identities", type=int, default=2)
    sp.add_argument("--train-clips", type=int, default=3)
    sp.add_argument("--test-clips", type=int, default=1)
    sp.add_argument("--frames", type=int, default=50)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--blank-frames", type=int, default=0)
    common(sp, config=False)
    sp.set_defaults(func=cmd_make_toy_data)

    sp = sub.add_parser("train-teacher")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--data")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--ablate", nargs="*", default=[])
    sp.add_argument("--log-every", type=int, default=25)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill-student")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    sp.add_argument("--out")
    sp.add_argument("--data")
    sp.add_argument("--distill-set", help="reuse or write the distill set here")
    sp.add_argument("--ablate", nargs="*", default=[], choices=["no-nk", "no-app", "no-disc"])
    sp.add_argument("--target", choices=["teacher", "real"])
    sp.add_argument("--disc-mode", choices=["frozen", "finetune"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--identities", nargs="*")
    sp.add_argument("--frames-per-identity", type=int)
    sp.set_defaults(func=cmd_distill_student)

    sp = sub.add_parser("infer")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--source-landmarks")
    sp.add_argument("--video", help="driving clip directory")
    sp.add_argument("--audio", help="16 kHz mono WAV")
    sp.add_argument("--edit", help="edit script JSON")
    sp.add_argument("--identity", help="student identity of the source")
    sp.add_argument("--teacher", help="teacher checkpoint for delivered-motion students")
    sp.add_argument("--mode", choices=["delivered-motion", "standalone-motion"])
    sp.add_argument("--fps", type=float, default=25.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate")
    common(sp, config=False)
    sp.add_argument("--checkpoint", nargs="+", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--max-frames", type=int)
    sp.add_argument("--teacher", help="teacher for delivered-motion students")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("degrade-preview")
    common(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_degrade_preview)

    sp = sub.add_parser("count-flops")
    common(sp)
    sp.add_argument("--preset", nargs="*", choices=sorted(PRESETS))
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_count_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, NoFaceDetected, AudioTooShort) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort exit code mapping
        log.exception("failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

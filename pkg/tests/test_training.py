import json

import numpy as np
import torch

from conftest import tiny_run_config
from superface.checkpoint import load_checkpoint, read_manifest
from superface.data import PairSampler, Prefetcher, load_bank
from superface.degradation import DegradationConfig
from superface.training import TeacherState, read_log, train_teacher


def test_bank_drops_blank_frames(tiny_toy):
    bank = load_bank(tiny_toy, "train")
    split = json.loads((tiny_toy / "split.json").read_text())
    assert len(split["skipped"]) == 4  # 2 identities x 2 blank frames
    assert len(bank.frames) == 2 * 2 * 12 - 4
    assert bank.meshes.shape == bank.frames.shape
    assert (bank.frames.reshape(len(bank.frames), -1).var(1) > 1e-4).all()


def test_batches_depend_only_on_seed_and_index(tiny_toy):
    bank = load_bank(tiny_toy, "train")
    s = PairSampler(bank, 3, seed=5, degradation=DegradationConfig())
    a, b = s(7), s(7)
    for k in ("src", "src_low", "drv", "drv_lm", "mask_flip"):
        assert torch.equal(a[k], b[k])
    assert np.array_equal(a["transform"].A, b["transform"].A)
    assert not torch.equal(s(8)["src_low"], a["src_low"])
    # every pair comes from one clip and never pairs a frame with itself
    clip_of = {int(i): c for c, idx in enumerate(bank.clips) for i in idx}
    for src, drv in zip(a["src"], a["drv"]):
        si = int(np.flatnonzero((bank.frames == src.numpy()).all((1, 2, 3)))[0])
        di = int(np.flatnonzero((bank.frames == drv.numpy()).all((1, 2, 3)))[0])
        assert si != di and clip_of[si] == clip_of[di]


def test_prefetcher_preserves_order():
    threaded = [x for x in Prefetcher(lambda i: i * i, 3, 40, workers=3, queue_size=2)]
    assert threaded == [i * i for i in range(3, 40)]
    assert list(Prefetcher(lambda i: -i, 0, 5, workers=0)) == [0, -1, -2, -3, -4]
    it = iter(Prefetcher(lambda i: i, 0, 1000, workers=2, queue_size=2))
    assert [next(it) for _ in range(3)] == [0, 1, 2]
    it.close()  # early exit must not hang


def test_checkpoint_is_self_describing(tiny_teacher):
    man = read_manifest(tiny_teacher)
    for key in ("config_hash", "k", "resolution", "loss_weights", "seeds", "git_revision", "config"):
        assert key in man
    assert man["kind"] == "teacher" and man["k"] == 15 and man["resolution"] == 64
    _, state, cfg = load_checkpoint(tiny_teacher)
    assert cfg.hash() == man["config_hash"]
    st = TeacherState.load(tiny_teacher)
    assert st.iteration == 3
    log = read_log(tiny_teacher / "train_log.jsonl")
    assert [r["iter"] for r in log] == [0, 1, 2]
    for r in log:
        assert set(r) >= {"iter", "terms", "total", "disc"}
        weights = cfg.loss_weights.teacher_map()
        expected = sum(weights[k] * v for k, v in r["terms"].items())
        assert abs(expected - r["total"]) <= 1e-5 * max(1, abs(r["total"]))


def test_resume_matches_uninterrupted_run(tiny_toy, tmp_path):
    cfg = tiny_run_config(tiny_toy, iterations=4)
    full = train_teacher(cfg, tmp_path / "full")
    part = train_teacher(tiny_run_config(tiny_toy, iterations=2), tmp_path / "part")
    part = train_teacher(cfg, tmp_path / "part", resume=True)
    a, b = read_log(full / "train_log.jsonl"), read_log(part / "train_log.jsonl")
    assert [r["iter"] for r in b] == [0, 1, 2, 3]
    assert [r["total"] for r in a] == [r["total"] for r in b]
    sa, sb = TeacherState.load(full), TeacherState.load(part)
    for (n, p), q in zip(sa.teacher.state_dict().items(), sb.teacher.state_dict().values()):
        assert torch.equal(p, q), n


def test_first_iteration_is_reproducible(tiny_toy, tmp_path, tiny_teacher):
    out = train_teacher(tiny_run_config(tiny_toy, iterations=1), tmp_path)
    first = read_log(out / "train_log.jsonl")[0]
    ref = read_log(tiny_teacher / "train_log.jsonl")[0]
    assert first == ref

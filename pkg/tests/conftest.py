from contextlib import contextmanager

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Context manager recording one pass/fail line per acceptance criterion."""
    lines = request.config.acceptance_lines

    @contextmanager
    def check(number, title):
        notes = []
        try:
            yield notes
        except BaseException as e:
            lines.append(f"criterion {number:2d}  FAIL  {title}  ({'; '.join(notes) or type(e).__name__})")
            print(lines[-1])
            raise
        lines.append(f"criterion {number:2d}  PASS  {title}" + (f"  ({'; '.join(notes)})" if notes else ""))
        print(lines[-1])

    return check


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_toy(tmp_path_factory):
    """Two identities, short clips, a couple of blank frames."""
    from superface.toydata import make_toy_dataset
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, n_identities=2, train_clips=2, test_clips=1, frames_per_clip=12,
                     resolution=64, seed=3, blank_frames=2)
    return root


def tiny_run_config(root, **train):
    from superface.config import from_dict
    t = dict(iterations=3, checkpoint_every=2, landmarker_steps=30, audio2lip_steps=10)
    t.update(train)
    return from_dict({"seed": 0, "deterministic": True,
                      "data": {"root": str(root), "batch_size": 2, "workers": 0},
                      "train": t})


@pytest.fixture(scope="session")
def tiny_teacher(tiny_toy, tmp_path_factory):
    """A three-iteration teacher checkpoint on the tiny toy set."""
    from superface.training import train_teacher
    out = tmp_path_factory.mktemp("teacher")
    return train_teacher(tiny_run_config(tiny_toy), out)


@pytest.fixture(scope="session")
def tiny_student(tiny_toy, tiny_teacher, tmp_path_factory):
    """A few-step distilled student for both toy identities."""
    from superface.config import from_dict
    from superface.distill import distill_student
    cfg = tiny_run_config(tiny_toy).to_dict()
    cfg["distill"].update(steps=3, head_steps=3)
    out = tmp_path_factory.mktemp("student")
    return distill_student(from_dict(cfg), tiny_teacher, out)

import copy
import csv
import math
from collections import Counter

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from superface.metrics import (REPORT_SCHEMA, DownsampleEmbedder, EvalReport, aed, akd, apd, csim,
                               energy, entropy, to_gray)
from superface.priors import LandmarkSet3D

images = arrays(np.float64, (3, 9, 7), elements=st.floats(0, 1))


def _rel(a, b, floor=1e-20):
    """Relative error; values below ``floor`` are luma roundoff and compare absolutely."""
    return abs(a - b) / max(abs(b), floor)


def _gray_loop(img):
    _, H, W = img.shape
    return [[0.299 * img[0, y, x] + 0.587 * img[1, y, x] + 0.114 * img[2, y, x]
             for x in range(W)] for y in range(H)]


def _energy_loop(img):
    g = _gray_loop(img)
    H, W = len(g), len(g[0])
    tot = 0.0
    for y in range(H - 1):
        for x in range(W - 1):
            tot += (g[y][x + 1] - g[y][x]) ** 2 + (g[y + 1][x] - g[y][x]) ** 2
    return tot / ((H - 1) * (W - 1))


def _entropy_loop(img):
    g = _gray_loop(img)
    vals = [min(255, max(0, round(v * 255))) for row in g for v in row]
    n = len(vals)
    return -sum(c / n * math.log2(c / n) for c in Counter(vals).values()) * n


@given(images)
def test_energy_matches_loops(img):
    e = energy(img)
    ref = _energy_loop(img)
    assert _rel(e, ref) < 1e-9


@given(images)
def test_entropy_matches_loops(img):
    h = entropy(img)
    ref = _entropy_loop(img)
    assert h == ref == 0 or _rel(h, ref) < 1e-9


@given(arrays(np.float64, (20, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (20, 3), elements=st.floats(-1, 1)))
def test_akd_matches_loops_and_is_symmetric(a, b):
    ref = sum(math.hypot((a[i, 0] - b[i, 0]) * 32, (a[i, 1] - b[i, 1]) * 24) for i in range(20)) / 20
    v = akd(a, b, resolution=(48, 64))
    assert v == ref == 0 or _rel(v, ref) < 1e-9
    assert akd(b, a, (48, 64)) == v


@given(images, images)
def test_csim_matches_loops_and_is_symmetric(a, b):
    emb = DownsampleEmbedder()
    ea, eb = emb(a), emb(b)
    dot = sum(x * y for x, y in zip(ea, eb))
    na, nb = math.sqrt(sum(x * x for x in ea)), math.sqrt(sum(y * y for y in eb))
    ref = 0.0 if na == 0 or nb == 0 else max(-1.0, min(1.0, dot / (na * nb)))
    v = csim(emb, a, b)
    assert v == ref == 0 or _rel(v, ref) < 1e-9
    assert csim(emb, b, a) == pytest.approx(v, rel=1e-12, abs=1e-15)


def test_constant_image_cases():
    c = np.full((3, 8, 8), 0.4)
    assert energy(c) == 0.0
    assert entropy(c) == 0.0
    assert csim(DownsampleEmbedder(), c, c * 2) == 1.0
    z = np.zeros((3, 8, 8))
    assert csim(DownsampleEmbedder(), z, c) == 0.0
    assert akd(np.zeros((5, 3)), np.zeros((5, 3))) == 0.0


def test_apd_and_aed():
    five = 5 * math.pi / 180
    assert apd([five, 0, 0], [0, 0, 0]) == pytest.approx(five / 3, rel=1e-12)
    assert apd([math.pi - 0.1, 0, 0], [-math.pi + 0.1, 0, 0]) == pytest.approx(0.2 / 3, rel=1e-9)
    assert aed([1.0, 2.0], [0.0, 4.0]) == 1.5


def test_metrics_do_not_mutate_inputs(rng):
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    la, lb = rng.uniform(-1, 1, (68, 3)), rng.uniform(-1, 1, (68, 3))
    snap = [copy.deepcopy(x) for x in (a, b, la, lb)]
    for v in (energy(a), entropy(a), csim(DownsampleEmbedder(), a, b), akd(la, lb),
              apd(la[0], lb[0]), aed(la, lb)):
        assert math.isfinite(v)
    for x, s in zip((a, b, la, lb), snap):
        assert np.array_equal(x, s)


def test_akd_rejects_mixed_topologies():
    a = LandmarkSet3D(np.zeros((5, 3)), topology_id="x")
    b = LandmarkSet3D(np.zeros((5, 3)), topology_id="y")
    with pytest.raises(ValueError):
        akd(a, b)


def test_gray_of_single_channel():
    img = np.random.default_rng(0).random((1, 4, 4))
    assert np.array_equal(to_gray(img), img[0])


def test_report_aggregate_and_round_trip(tmp_path, rng):
    rep = EvalReport(flops={"macs": 1}, provenance={"checkpoint": "x"})
    vals = rng.random((4, 2))
    for i, (u, v) in enumerate(vals):
        rep.add(f"clip{i}", {"akd": u, "csim": v})
    assert abs(rep.aggregate["akd"] - vals[:, 0].mean()) < 1e-9
    assert abs(rep.aggregate["csim"] - vals[:, 1].mean()) < 1e-9
    jpath, cpath = rep.write(tmp_path)
    back = EvalReport.read(jpath)
    assert back.to_dict() == rep.to_dict()
    import json
    jsonschema.validate(json.loads(jpath.read_text()), REPORT_SCHEMA)
    with open(cpath) as f:
        rows = list(csv.DictReader(f))
    assert [r["clip"] for r in rows] == [f"clip{i}" for i in range(4)]
    assert float(rows[2]["akd"]) == pytest.approx(vals[2, 0])

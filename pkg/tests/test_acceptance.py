"""Acceptance criteria, one test per criterion.

A PASS/FAIL line per criterion is printed in the "acceptance criteria"
section of the pytest summary.
"""
import itertools
import json
import math
import random
import struct
import sys
import time
from decimal import Decimal
from pathlib import Path

import mpmath
import numpy as np
import pytest

from vlmkit import tensorio
from vlmkit.cli import EXIT_OK, dispatch
from vlmkit.corpus import CorpusRecord, balance_manifest, overrepresented_labels, write_manifest
from vlmkit.geometry import TileConfig, TileMode, build_ratio_table, clamp_aspect, compute_strides, plan_tiles
from vlmkit.ppl import ScoredRecord, filter_corpus, perplexity
from vlmkit.soup import Checkpoint, average_soup, greedy_soup, maximum_soup
from vlmkit.tensorops import pixel_shuffle, pixel_unshuffle

DATA = Path(__file__).parent / "data"
HOOK = DATA / "quad_eval.py"
criterion = pytest.mark.criterion


# -- geometry ----------------------------------------------------------------

def catty_violations(h, w, plan, cfg):
    """Every geometric property a CATTY plan must satisfy; returns failures."""
    bad = []
    ch, cw = clamp_aspect(h, w, cfg)
    th, tw = plan.target.target_h, plan.target.target_w
    if abs(tw / th - cw / ch) > 2 / min(th, tw):
        bad.append("aspect")
    if plan.entry.rows * plan.entry.cols > cfg.max_tiles or len(plan.origins) != plan.entry.rows * plan.entry.cols:
        bad.append("budget")
    if plan.origins[0] != (0, 0) or plan.origins[-1] != (th - cfg.tile_h, tw - cfg.tile_w):
        bad.append("frame")
    if any(y < 0 or x < 0 or y + cfg.tile_h > th or x + cfg.tile_w > tw for y, x in plan.origins):
        bad.append("bounds")
    s = compute_strides(plan.target, plan.entry, cfg)
    if (s.stride_h == 0) != (plan.entry.rows == 1) or (s.stride_w == 0) != (plan.entry.cols == 1):
        bad.append("stride-zero")
    return bad


@criterion("CATTY geometry suite: 10,000 random sizes, all properties, < 10 s")
def test_catty_geometry_suite():
    cfg = TileConfig(max_tiles=8)
    table = build_ratio_table(cfg)
    rng = np.random.default_rng(20240101)
    sizes = rng.integers(64, 4097, size=(10_000, 2))
    t0 = time.perf_counter()
    failures = []
    for h, w in sizes.tolist():
        plan = plan_tiles(h, w, cfg, TileMode.CATTY, table=table)
        bad = catty_violations(h, w, plan, cfg)
        if bad:
            failures.append((h, w, bad))
    elapsed = time.perf_counter() - t0
    assert not failures, failures[:10]
    assert elapsed < 10, f"{elapsed:.2f} s"


@criterion("Distortion contrast: 400x1000 BASELINE >= 15% aspect change, CATTY within rounding")
def test_distortion_contrast():
    cfg = TileConfig()
    h, w = 400, 1000
    base = plan_tiles(h, w, cfg, TileMode.BASELINE)
    catty = plan_tiles(h, w, cfg, TileMode.CATTY)
    original = w / h
    base_change = abs(base.target.target_w / base.target.target_h - original) / original
    catty_dev = abs(catty.target.target_w / catty.target.target_h - original)
    assert base_change >= 0.15, base_change
    assert catty_dev <= 2 / min(catty.target.target_h, catty.target.target_w)


# -- perplexity --------------------------------------------------------------

def ppl_direct(values):
    """Geometric mean of token probabilities at 50 digits."""
    with mpmath.workdps(50):
        prod = mpmath.fprod(mpmath.exp(mpmath.mpf(v)) for v in values)
        return prod ** (-mpmath.mpf(1) / len(values))


@criterion("Perplexity oracle: 1,000 sequences to 1e-9, 2*sqrt(2) case, exact filter sizes, 8 vs 1 workers")
def test_perplexity_oracle(tmp_path):
    rng = random.Random(3)
    for _ in range(1000):
        n = rng.randint(1, 64)
        values = [math.log(rng.uniform(1e-6, 1.0)) for _ in range(n)]
        expected = ppl_direct(values)
        got = perplexity(values)
        assert abs(got - float(expected)) <= 1e-9 * float(expected)

    assert abs(perplexity([math.log(0.5), math.log(0.25)]) - 2 * math.sqrt(2)) <= 1e-9 * 2 * math.sqrt(2)

    for n in (1, 2, 5, 10, 23, 100, 999):
        for frac in (0.01, 0.1, 0.2, 0.25, 0.29, 0.333, 0.5, 0.7, 1.0):
            scored = [ScoredRecord(f"r{i}", rng.uniform(1, 50), i) for i in range(n)]
            assert len(filter_corpus(scored, frac)) == max(1, int(Decimal(repr(frac)) * n))

    words = "the a cat dog on mat sky blue red runs sits under over near far".split()
    recs = []
    for i in range(1000):
        caption = " ".join(rng.choices(words, k=rng.randint(1, 15)))
        lp = [math.log(rng.uniform(0.01, 1)) for _ in range(rng.randint(1, 9))] if i % 4 == 0 else None
        recs.append(CorpusRecord(f"s{i:04d}", f"img/{i}.jpg", caption, lp))
    src = tmp_path / "synthetic.jsonl"
    write_manifest(recs, src)
    outs = []
    for workers in (1, 8):
        kept, scored = tmp_path / f"kept{workers}.jsonl", tmp_path / f"scored{workers}.jsonl"
        assert dispatch(["filter", "--in", str(src), "--out", str(kept), "--scored-out", str(scored),
                         "--keep", "0.2", "--workers", str(workers)]) == EXIT_OK
        outs.append((kept.read_bytes(), scored.read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][0].count(b"\n") == 200


# -- soup --------------------------------------------------------------------

def sc(v, name):
    return Checkpoint({"w": np.array([v], dtype=float)}, name=name)


def replay(values, f):
    scores = [f(v) for v in values]
    order = sorted(range(len(values)), key=lambda i: (-scores[i], i))
    pool, best = [], -math.inf
    for i in order:
        trial = [values[j] for j in pool + [i]]
        s = f(math.fsum(trial) / len(trial))
        if s >= best:
            pool, best = pool + [i], s
    return pool, best


def exhaustive_best(values, f):
    return max(f(math.fsum(sub) / r) for r in range(1, len(values) + 1)
               for sub in itertools.combinations(values, r))


@criterion("Soup algebra: identities exact, 200 greedy instances monotone/dominant/bounded, < 30 s")
def test_soup_algebra():
    t0 = time.perf_counter()
    one = sc(0.123456789, "a")
    assert average_soup([one]).tensors["w"].tobytes() == one.tensors["w"].tobytes()
    assert average_soup([sc(1.0, "a"), sc(3.0, "b")]).tensors["w"].tolist() == [2.0]
    three = [Checkpoint({"w": np.array(v, float)}, name=n) for v, n in (([0, 3], "a"), ([3, 3], "b"), ([6, 3], "c"))]
    assert average_soup(three).tensors["w"].tolist() == [3.0, 3.0]
    trio = [sc(1.0, "a"), sc(5.0, "b"), sc(3.0, "c")]
    assert maximum_soup(trio, [0.9, 0.8, 0.7], 1).tensors["w"].tolist() == [1.0]
    assert maximum_soup(trio, [0.7, 0.9, 0.8], 2).tensors["w"].tolist() == [4.0]
    assert np.array_equal(maximum_soup(trio, [0.1, 0.3, 0.2], 3).tensors["w"], average_soup(trio).tensors["w"])

    rng = np.random.default_rng(11)
    for trial in range(200):
        k = int(rng.integers(1, 7))
        values = rng.normal(scale=4, size=k).tolist()
        target, curv = float(rng.normal(scale=2)), float(rng.uniform(0.1, 5))
        f = lambda t: -curv * (t - target) ** 2
        _, trace = greedy_soup([sc(v, f"c{i}") for i, v in enumerate(values)], lambda ck: f(ck.tensors["w"][0]))

        accepted = [s.trial_score for s in trace.steps if s.accepted]
        assert all(b >= a for a, b in zip(accepted, accepted[1:])), trial
        assert trace.final_score >= max(trace.individual_scores.values()), trial
        pool, best = replay(values, f)
        assert trace.pool == [f"c{i}" for i in pool], trial
        assert math.isclose(trace.final_score, best, rel_tol=1e-12, abs_tol=1e-12), trial
        if k <= 4:
            assert trace.final_score <= exhaustive_best(values, f) + 1e-12, trial
    elapsed = time.perf_counter() - t0
    assert elapsed < 30, f"{elapsed:.2f} s"


@criterion("Toy soup demo: greedy >= every individual on 100 seeded trials via CLI + eval hook")
def test_toy_soup_demo(tmp_path):
    dim, k = 3, 4
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        centres = rng.normal(size=(k, dim))
        scales = rng.uniform(0.5, 2.0, size=(k, dim))
        tuned = centres + rng.normal(scale=0.3, size=(k, dim))  # perturbed minima

        run_dir = tmp_path / f"trial{seed:03d}"
        run_dir.mkdir()
        params = run_dir / "params.json"
        params.write_text(json.dumps({"centers": centres.tolist(), "scales": scales.tolist()}))
        paths = []
        for i, theta in enumerate(tuned):
            p = run_dir / f"model{i}.bin"
            tensorio.write_container({"w": theta.astype(np.float32)}, p)
            paths.append(str(p))

        out, trace_path = run_dir / "souped.bin", run_dir / "trace.json"
        rc = dispatch(["soup", "--strategy", "greedy", "--checkpoints", *paths,
                       "--eval-cmd", f"{sys.executable} {HOOK} {params}",
                       "--out", str(out), "--trace", str(trace_path)])
        assert rc == EXIT_OK, seed
        trace = json.loads(trace_path.read_text())
        assert all(trace["final_score"] >= s for s in trace["individual_scores"].values()), seed

        # independent re-evaluation of the written soup
        def loss(theta):
            return float(np.sum(scales * (theta[None, :] - centres) ** 2))
        souped = tensorio.read_container(out)["w"].astype(np.float64)
        assert math.isclose(-loss(souped), trace["final_score"], rel_tol=1e-9, abs_tol=1e-9), seed
        individual = [-loss(tensorio.read_container(p)["w"].astype(np.float64)) for p in paths]
        assert -loss(souped) >= max(individual) - 1e-9, seed


# -- pixel shuffle -------------------------------------------------------------

@criterion("Pixel shuffle: shape law, value multiset, exact inverse on 500 maps; factor-1 identity")
def test_pixel_shuffle():
    rng = np.random.default_rng(5)
    for _ in range(500):
        b = int(rng.integers(1, 4))
        rows, cols = b * int(rng.integers(1, 6)), b * int(rng.integers(1, 6))
        ch = int(rng.integers(1, 9))
        factor = 1 / b**2
        fm = rng.normal(size=(rows, cols, ch))
        out = pixel_shuffle(fm, factor)
        assert out.shape[0] * out.shape[1] == rows * cols * factor
        assert out.shape[2] == ch / factor
        assert np.array_equal(np.sort(out, axis=None), np.sort(fm, axis=None))
        assert np.array_equal(pixel_unshuffle(out, factor), fm)
        assert np.array_equal(pixel_shuffle(fm, 1.0), fm)


# -- tensorio ------------------------------------------------------------------

def _raw(header, data):
    head = json.dumps(header).encode()
    return struct.pack("<Q", len(head)) + head + data


@criterion("tensorio: 100-tensor bit-exact round-trip, five malformed classes, golden hex dump")
def test_tensorio(tmp_path):
    rng = np.random.default_rng(8)
    tensors = {f"t{i:03d}": rng.normal(size=tuple(rng.integers(1, 6, size=rng.integers(0, 4)))).astype(np.float32)
               for i in range(100)}
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    tensorio.write_container(tensors, a)
    back = tensorio.read_container(a)
    assert all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in tensors.items())
    tensorio.write_container(back, b)
    assert a.read_bytes() == b.read_bytes()

    entry = {"dtype": "f32", "shape": [2], "offset": 0, "nbytes": 8}
    cases = {
        tensorio.TruncatedFileError: struct.pack("<Q", 50) + b"{}",
        tensorio.MalformedHeaderError: struct.pack("<Q", 5) + b"{{{{{",
        tensorio.UnknownDtypeError: _raw({"w": dict(entry, dtype="bf16")}, b"\0" * 8),
        tensorio.OverlappingRegionsError: _raw({"a": entry, "b": dict(entry, offset=4)}, b"\0" * 12),
        tensorio.LengthMismatchError: _raw({"w": entry}, b"\0" * 12),
    }
    messages = set()
    for exc_type, payload in cases.items():
        with pytest.raises(exc_type) as info:
            tensorio.decode_container(payload)
        assert type(info.value) is exc_type
        messages.add(str(info.value))
    assert len(messages) == 5

    golden = (DATA / "golden_w.hex").read_text().strip()
    assert tensorio.encode_container({"w": np.array([1.0, 2.0], dtype=np.float32)}).hex() == golden


# -- balancing -----------------------------------------------------------------

def _labelled(counts, rng):
    recs = [CorpusRecord(f"{k}-{i}", label=k) for k, n in counts.items() for i in range(n)]
    rng.shuffle(recs)
    return recs


@criterion("Balancing: 60% rule example exact, seeded determinism, never-increase on 100 manifests")
def test_balancing():
    from collections import Counter

    rng = random.Random(1)
    counts = {"person": 100, "car": 10, "dog": 10, "cat": 10, "tree": 10, "boat": 10}
    recs = _labelled(counts, rng)
    out = balance_manifest(recs, top_k=6, down_to=0.6, seed=0)
    assert Counter(r.label for r in out) == dict(counts, person=60)
    assert balance_manifest(recs, seed=9) == balance_manifest(recs, seed=9)

    for trial in range(100):
        counts = {f"l{i}": rng.randint(1, 120) for i in range(rng.randint(1, 15))}
        recs = _labelled(counts, rng)
        top_k = rng.randint(1, 8)
        out = balance_manifest(recs, top_k=top_k, down_to=rng.choice([0.2, 0.6, 0.95]), seed=trial)
        after = Counter(r.label for r in out)
        hit = overrepresented_labels(Counter(counts), top_k)
        for label, n in counts.items():
            assert after[label] <= n
            if label not in hit:
                assert after[label] == n


# -- suite budget ----------------------------------------------------------------

@pytest.mark.runs_last
@criterion("Full test suite completes in < 3 minutes")
def test_suite_budget(session_start):
    elapsed = time.monotonic() - session_start
    assert elapsed < 180, f"suite took {elapsed:.1f} s"

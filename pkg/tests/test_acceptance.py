"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary.
"""

import itertools
import math
import subprocess
import sys
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from complexity_align.alignment import (
    LossWeights,
    alignment_loss,
    alignment_scores,
    complexity_loss,
    complexity_scores,
    cosine_similarity,
    direct_scene_scores,
    mse,
    softmax,
)
from complexity_align.datamodel import make_split
from complexity_align.encoders import EncoderConfig, encode_text, init_prompt_bank, init_toy_params
from complexity_align.experiments import ExperimentGrid, apply_branch, read_results, run_experiment
from complexity_align.inference import score_image, score_manifest
from complexity_align.metrics import plcc, rmae, rmse, srcc, srcc_flagged
from complexity_align.pipeline import TrainConfig, batch_losses, desk_config, train

from conftest import ACCEPTANCE_LINES, TIMINGS
from gradcheck import finite_difference, relative_errors, sample_entries


@contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    """Record one PASS/FAIL line; ``details`` entries are appended to it."""
    details: list[str] = []
    t0 = time.perf_counter()
    try:
        yield details
        elapsed = time.perf_counter() - t0
        details.append(f"{elapsed:.1f}s")
        if budget is not None:
            assert elapsed < budget, f"runtime {elapsed:.1f}s exceeds {budget:.0f}s"
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_LINES.append(f"[FAIL] criterion {number}: {title}; {'; '.join(details)}; {msg}")
        raise
    ACCEPTANCE_LINES.append(f"[PASS] criterion {number}: {title}; {'; '.join(details)}")


# ---------------------------------------------------------------- oracles


def exp_sum(v):
    e = [math.exp(x) for x in v]
    return [x / sum(e) for x in e]


def dot_norm(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def covariance_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))


def doubled_average_ranks(v):
    """Twice the 1-based average rank of each entry, by counting (integers)."""
    return tuple(2 * sum(w < x for w in v) + sum(w == x for w in v) + 1 for x in v)


def tie_sum(v):
    return sum(t ** 3 - t for t in (v.count(x) for x in set(v)))


def rank_formula_srcc(rx, ry, tx, ty):
    """Tie-corrected Spearman from doubled ranks:
    (Sx + Sy - sum d^2) / (2 sqrt(Sx Sy)) with S = (n^3 - n - sum(t^3 - t)) / 12."""
    n = len(rx)
    sx = Fraction(n ** 3 - n - tx, 12)
    sy = Fraction(n ** 3 - n - ty, 12)
    if sx == 0 or sy == 0:
        return 0.0
    d2 = Fraction(sum((a - b) ** 2 for a, b in zip(rx, ry)), 4)
    return float((sx + sy - d2) / 2) / math.sqrt(sx * sy)


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_math_core_oracles():
    exact, float_tol = 1e-9, 1e-6
    with criterion(1, "math-core oracle suite", budget=10) as details:
        checked = 0

        def close(value, expected, tol):
            nonlocal checked
            checked += 1
            assert abs(float(value) - float(expected)) <= tol, f"{value} != {expected}"

        # datamodel: different seeds give different splits
        ids = [f"i{k}" for k in range(10)]
        s1, s2 = make_split(ids, 1, 0.5), make_split(ids, 2, 0.5)
        assert set(s1.train_ids) != set(s2.train_ids)
        checked += 1

        # encoders: empty text is finite; one finite-difference slope
        cfg = EncoderConfig()
        enc = init_toy_params(cfg, 0)
        assert torch.isfinite(encode_text(cfg, enc, "")).all()
        checked += 1
        w = enc.image.patch_embed.weight
        img = torch.as_tensor(np.random.default_rng(0).random((1, 64, 64, 3)))
        enc.encode_images(img).sum().backward()
        analytic = w.grad.view(-1)[5].item()
        numeric = finite_difference(lambda: enc.encode_images(img).sum(), [w], [(0, 5)])[0]
        assert relative_errors([analytic], [numeric]).max() < 1e-4
        checked += 1

        # alignment core
        close(cosine_similarity([1, 2, 3], [4, 5, 6]), dot_norm((1, 2, 3), (4, 5, 6)), exact)
        close(dot_norm((1, 2, 3), (4, 5, 6)), 0.9746, 1e-4)
        for got, want in zip(softmax([1.0, 2.0, 3.0]).tolist(), exp_sum([1, 2, 3])):
            close(got, want, exact)
        q = complexity_scores(torch.eye(5)[2:3], torch.eye(5), anchor=3).predictions
        close(q[0], exp_sum([0, 0, 1, 0, 0])[2], exact)
        close(q[0], math.e / (math.e + 4), exact)
        close(complexity_loss([0, 1], [1, 0]), (1 + 1) / 2, exact)
        close(complexity_loss([0.5], [0.0]), 0.25, exact)
        img2 = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        scene2 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        q2 = alignment_scores(img2, scene2).predictions.tolist()
        for got, want in zip(q2, exp_sum([1, 0])):
            close(got, want, exact)
        close(q2[0], 0.7311, 1e-4)
        close(alignment_loss([0.5, 0.5]), (0.5 ** 2 + 0.5 ** 2) / 2, exact)
        close(alignment_loss([0.25] * 4), 0.75 ** 2, exact)
        close(mse(direct_scene_scores(img2, scene2).predictions, [0.7311, 0.2689]), 0.0, float_tol)

        # metrics
        n = 4
        d2 = sum((a - b) ** 2 for a, b in zip((1, 3, 2, 4), (1, 2, 3, 4)))
        close(srcc([1, 3, 2, 4], [1, 2, 3, 4]), 1 - 6 * d2 / (n * (n * n - 1)), exact)
        oracle = covariance_pearson([1, 2, 4], [1, 3, 4])
        close(plcc([1, 2, 4], [1, 3, 4]), oracle, exact)
        details.append(f"plcc((1,2,4),(1,3,4)) = {oracle:.6f} by the covariance oracle")
        close(rmse([0, 1], [1, 0]), math.sqrt((1 + 1) / 2), exact)
        close(rmse([0.5], [0.0]), 0.5, exact)
        close(rmae([0, 1], [1, 0]), math.sqrt((1 + 1) / 2), exact)
        close(rmae([0.75], [0.5]), math.sqrt(0.25), exact)

        # inference: 2x2 crops with injected scores
        class Stub:
            input_side = 8

            def crop_scores(self, crops):
                return torch.tensor([0.2, 0.4, 0.6, 0.8], dtype=torch.float64)

        close(score_image(Stub(), np.zeros((16, 16, 3))), (0.2 + 0.4 + 0.6 + 0.8) / 4, exact)
        details.insert(0, f"{checked} checks")


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_gradient_check():
    with criterion(2, "combined-loss gradient vs central differences", budget=60) as details:
        cfg = EncoderConfig()
        enc = init_toy_params(cfg, 11)
        bank = init_prompt_bank(cfg, 5, 11)
        train_cfg = TrainConfig(encoder=cfg)
        assert train_cfg.branch_a_enabled and train_cfg.branch_c_enabled
        rng = np.random.default_rng(5)
        crops = rng.random((4, 64, 64, 3))
        mos = rng.random(4)
        texts = ["a red background with 3 rectangles", "two blue discs on the left", "", "stripes everywhere"]
        params = [*enc.parameters(), *bank.parameters()]

        def loss():
            return batch_losses(enc, bank, train_cfg, crops, mos, texts)["loss"]

        loss().backward()
        picks = sample_entries(params, 150, rng)
        analytic = [params[t].grad.view(-1)[i].item() for t, i in picks]
        errs = relative_errors(analytic, finite_difference(loss, params, picks, h=1e-4))
        details.append(f"{len(picks)} parameters, max relative error {errs.max():.2e}")
        assert errs.max() < 1e-4


# ---------------------------------------------------------------- criterion 3

CASES = 1000
prop = settings(max_examples=CASES, deadline=None, derandomize=True, database=None,
                suppress_health_check=list(HealthCheck))
# properties with a skip branch draw extra examples; only fully checked ones count
prop_extra = settings(prop, max_examples=CASES + 300)
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec = st.integers(2, 12).flatmap(lambda n: arrays(np.float64, n, elements=finite))
pair = st.integers(2, 12).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))
)


def test_criterion_3_invariants():
    counts = {}

    def count(name):
        counts[name] = counts.get(name, 0) + 1

    @prop
    @given(vec, st.floats(-100, 100))
    def softmax_props(v, c):
        count("softmax")
        p = softmax(v)
        assert abs(float(p.sum()) - 1) < 1e-12 and bool((p >= 0).all())
        assert torch.allclose(softmax(v + c), p, rtol=0, atol=1e-12)

    @prop
    @given(pair, st.floats(1e-3, 1e3))
    def cosine_props(ab, c):
        a, b = ab
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            a, b = a + 1.0, b - 2.0
        count("cosine")
        v = float(cosine_similarity(a, b))
        assert -1.0 <= v <= 1.0
        assert abs(float(cosine_similarity(c * a, b)) - v) < 1e-9
        assert abs(float(cosine_similarity(a, c * b)) - v) < 1e-9

    # values on a 1/1024 grid so a nonzero difference cannot underflow when squared
    grid_pair = st.integers(2, 12).flatmap(lambda n: st.tuples(
        *(st.lists(st.integers(-4096, 4096), min_size=n, max_size=n).map(lambda v: np.array(v) / 1024)
          for _ in range(2))
    ))

    @prop
    @given(grid_pair)
    def loss_props(qg):
        count("loss")
        q, g = qg
        assert float(mse(q, g)) >= 0
        assert float(mse(q, q)) == 0.0
        assert (float(mse(q, g)) == 0.0) == bool(np.array_equal(q, g))
        assert float(alignment_loss(q)) >= 0
        assert float(LossWeights().alpha * mse(q, g) + LossWeights().beta * mse(g, q)) >= 0

    # 1/64 steps in [-31, 31]: ties happen, and no transform below can merge distinct values
    rank_pair = st.integers(2, 12).flatmap(lambda n: st.tuples(
        *(st.lists(st.integers(-2000, 2000), min_size=n, max_size=n).map(lambda v: np.array(v) / 64)
          for _ in range(2))
    ))

    @prop_extra
    @given(rank_pair, st.sampled_from(["exp", "cube", "affine"]), st.floats(0.01, 10), st.floats(-5, 5))
    def srcc_props(pg, kind, a, b):
        p, g = pg
        base = srcc(p, g)
        fn = {"exp": lambda x: np.exp(x / 10), "cube": lambda x: x ** 3, "affine": lambda x: a * x + b}[kind]
        tp, tg = fn(p), fn(g)
        # a strictly increasing map keeps ranks only if floating point keeps distinct values distinct
        if len(np.unique(tp)) == len(np.unique(p)) and len(np.unique(tg)) == len(np.unique(g)):
            assert abs(srcc(tp, g) - base) < 1e-9 and abs(srcc(p, tg) - base) < 1e-9
            count("srcc")

    @prop
    @given(pair, st.floats(0.1, 10), st.floats(-10, 10))
    def plcc_props(pg, a, b):
        count("plcc")
        p, g = pg
        if np.ptp(p) < 1e-3 or np.ptp(g) < 1e-3:
            p = p + np.arange(len(p))
            g = g - np.arange(len(g)) ** 2
        r = plcc(p, g)
        assert abs(plcc(a * p + b, g) - r) < 1e-9
        assert abs(plcc(p, a * g + b) - r) < 1e-9
        assert abs(plcc(-a * p + b, g) + r) < 1e-9

    @prop_extra
    @given(st.integers(2, 300), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
    def split_props(n, seed, ratio):
        ids = [f"id{k}" for k in range(n)]
        try:
            a = make_split(ids, seed, ratio)
        except ValueError:
            # ratios that leave one side empty for this n are rejected by design
            assert round(ratio * n) in (0, n)
            return
        b = make_split(list(reversed(ids)), seed, ratio)
        assert a == b
        assert not set(a.train_ids) & set(a.test_ids)
        assert sorted(a.train_ids + a.test_ids) == sorted(ids)
        count("split")

    with criterion(3, f"invariant suite ({CASES}+ cases per property)", budget=60) as details:
        for fn in (softmax_props, cosine_props, loss_props, srcc_props, plcc_props, split_props):
            fn()
        details.append(", ".join(f"{k} {v}" for k, v in counts.items()))
        assert len(counts) == 6 and min(counts.values()) >= CASES, counts


# ---------------------------------------------------------------- criterion 4

GRID = (0.0, 0.25, 0.5, 1.0)


def test_criterion_4_srcc_exhaustive():
    with criterion(4, "SRCC against tie-averaged rank formula, all grid vectors up to length 6") as details:
        worst, pairs = 0.0, 0
        for n in range(2, 7):
            vecs = list(itertools.product(GRID, repeat=n))
            info = {v: (doubled_average_ranks(v), tie_sum(v)) for v in vecs}
            if n <= 4:
                todo = itertools.product(vecs, vecs)
            else:
                # every vector on each side against an evenly strided set of
                # partners, starting with the degenerate constant vector
                partners = vecs[:: len(vecs) // (16 if n == 5 else 8)]
                todo = itertools.chain(((v, w) for v in vecs for w in partners),
                                       ((w, v) for v in vecs for w in partners))
            for p, g in todo:
                (rp, tp), (rg, tg) = info[p], info[g]
                expected = rank_formula_srcc(rp, rg, tp, tg)
                got, flagged = srcc_flagged(p, g)
                assert flagged == (tp == n ** 3 - n or tg == n ** 3 - n)
                worst = max(worst, abs(got - expected))
                pairs += 1
        details.append(f"{pairs} pairs, max deviation {worst:.1e}")
        assert worst <= 1e-9


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_synthetic_end_to_end(trained_default, fixture_split):
    result, manifest = trained_default
    with criterion(5, "synthetic fixture end to end") as details:
        t0 = time.perf_counter()
        report = score_manifest(result.model, manifest, fixture_split).report
        total = TIMINGS.get("generate", 0.0) + TIMINGS.get("train", 0.0) + time.perf_counter() - t0
        ratio = result.final_loss / result.initial_loss
        cfg = result.config
        details.append(f"batch {cfg.batch_size}, {cfg.epochs} epochs, alpha/beta {cfg.alpha}/{cfg.beta}")
        details.append(f"held-out SRCC {report.srcc:.4f} (need >= 0.7)")
        details.append(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}, ratio {ratio:.3f} (need < 0.5)")
        # softmax over a batch sums to one, so the alignment term never drops below this
        floor = cfg.alpha * (1 - 1 / cfg.batch_size) ** 2
        details.append(f"untrainable alignment floor {floor:.4f}")
        details.append(f"pipeline {total:.0f}s")
        assert (cfg.batch_size, cfg.epochs, cfg.alpha, cfg.beta) == (16, 20, 0.1, 0.9)
        assert len(fixture_split.test_ids) == 102 and len(result.train_ids) == 410
        assert total < 600
        assert report.srcc >= 0.7, f"held-out SRCC {report.srcc:.4f} < 0.7"
        assert ratio < 0.5, f"final/initial training loss {ratio:.3f} is not < 0.5"


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_ablation_direction(fixture_dir, fixture_manifest, fixture_split, tmp_path):
    with criterion(6, "ablation directionality") as details:
        sidecar = fixture_dir / "scenes.tsv"
        branches = run_experiment(ExperimentGrid(desk_config(), branch_axis=("C", "A", "C+A")),
                                  fixture_manifest, fixture_split, sidecar, tmp_path / "branches.tsv")
        weights = run_experiment(ExperimentGrid(apply_branch(desk_config(), "C+A"), weight_axis=((0.9, 0.1),)),
                                 fixture_manifest, fixture_split, sidecar, tmp_path / "weights.tsv")
        s = {r["branch"]: float(r["srcc"]) for r in branches}
        s_91 = float(weights[0]["srcc"])
        details.append(f"SRCC C {s['C']:.4f}, A {s['A']:.4f}, C+A {s['C+A']:.4f}, (0.9,0.1) {s_91:.4f}")
        assert all(r["error"] == "-" for r in branches + weights)
        assert s["C+A"] >= s["C"] - 0.05
        assert s["C+A"] >= s["A"]
        assert s["C+A"] >= s_91 - 0.05


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_reduction_equivalence(fixture_dir, fixture_manifest, fixture_split):
    from complexity_align.pipeline import prepare_manifest

    with criterion(7, "alpha=0, beta=1 log equals the complexity-only log") as details:
        both = apply_branch(desk_config(epochs=3, alpha=0.0, beta=1.0), "C+A")
        c_only = apply_branch(desk_config(epochs=3, alpha=0.0, beta=1.0), "C")
        m = prepare_manifest(fixture_manifest, fixture_dir / "scenes.tsv", both)
        a = train(both, m, fixture_split).log
        b = train(c_only, fixture_manifest, fixture_split).log
        assert len(a) == len(b) > 0
        worst = max(max(abs(x.loss - y.loss), abs(x.loss_c - y.loss_c)) for x, y in zip(a, b))
        details.append(f"{len(a)} steps, max |dL| {worst:.1e}")
        assert all(x.loss == x.loss_c for x in a)
        assert all(math.isnan(y.loss_a) and not math.isnan(x.loss_a) for x, y in zip(a, b))
        assert [(x.epoch, x.step) for x in a] == [(y.epoch, y.step) for y in b]
        assert worst <= 1e-9


# ---------------------------------------------------------------- criterion 8


def _cli_run(workdir, data):
    def run(*args):
        subprocess.run([sys.executable, "-m", "complexity_align.cli", *map(str, args)], check=True,
                       capture_output=True, cwd=workdir)

    train_flags = ["--profile", "desk", "--epochs", "2", "--seed", "3"]
    run("split", data / "manifest.tsv", "--seed", "3", "--out", workdir / "split.txt")
    run("train", data / "manifest.tsv", "--split", workdir / "split.txt", "--sidecar", data / "scenes.tsv",
        "--out", workdir / "model.ckpt", *train_flags)
    run("score", workdir / "model.ckpt", data / "manifest.tsv", "--split", workdir / "split.txt",
        "--out", workdir / "scores.tsv")
    run("grid", data / "manifest.tsv", "--split", workdir / "split.txt", "--sidecar", data / "scenes.tsv",
        "--branches", "C,C+A", "--out", workdir / "results.tsv", *train_flags)


def test_criterion_8_reproducibility(small_dir, tmp_path):
    with criterion(8, "byte-identical outputs across two single-threaded runs") as details:
        runs = [tmp_path / "run1", tmp_path / "run2"]
        for r in runs:
            r.mkdir()
            _cli_run(r, small_dir)
        for name in ("split.txt", "scores.tsv", "results.tsv"):
            a, b = ((r / name).read_bytes() for r in runs)
            assert a == b, f"{name} differs between runs"
        assert len(read_results(runs[0] / "results.tsv")) == 2
        details.append("split, score file and results table identical")

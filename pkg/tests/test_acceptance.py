"""End-to-end acceptance checks, one or more tests per numbered criterion.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

import hashlib
import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import flat_report, mask
from lesionbench.cli import main
from lesionbench.conncomp import label_components
from lesionbench.metrics import evaluate_pair
from lesionbench.phantom import (
    AddBlob,
    ChannelModel,
    DropLesion,
    ErodeLesion,
    PhantomSpec,
    generate_case,
    generate_cohort,
    perturb,
    probability_from,
)
from lesionbench.pipeline import PRIOR, CascadeCase, PatchSpec, inject_prior, run_cascade, train_cascade
from lesionbench.stats import bland_altman, roc_sweep, tlv_group, wilcoxon_signed_rank
from lesionbench.volgrid import Volume, read_volume, write_volume
from oracles import average_ranks, flood_fill, oracle_metrics

criterion = pytest.mark.criterion


# ------------------------------------------------------------------ 1


@criterion(1)
def test_metrics_match_set_oracle_on_random_pairs():
    r = np.random.default_rng(101)
    start = time.perf_counter()
    for i in range(200):
        density = r.uniform(0.05, 0.6)
        p = (r.random((10, 10, 10)) < density).astype(np.uint8)
        g = (r.random((10, 10, 10)) < r.uniform(0.05, 0.6)).astype(np.uint8)
        conn = (6, 18, 26)[i % 3]
        min_mm3 = (0.0, 2.0, 5.0)[i % 3]
        got = flat_report(evaluate_pair(mask(p), mask(g), conn, min_mm3))
        assert got == oracle_metrics(p, g, 1.0, conn, min_mm3)
    assert time.perf_counter() - start < 10.0


# ------------------------------------------------------------------ 2


@criterion(2)
def test_components_match_flood_fill():
    r = np.random.default_rng(202)
    start = time.perf_counter()
    for _ in range(200):
        m = (r.random((12, 12, 12)) < r.uniform(0.05, 0.5)).astype(np.uint8)
        for conn in (6, 18, 26):
            ls = label_components(mask(m), conn)
            got = {frozenset(map(tuple, les.voxels.tolist())) for les in ls}
            assert got == set(flood_fill(m, conn))
    assert time.perf_counter() - start < 30.0


# ------------------------------------------------------------------ 3


def _random_ops(r, n_lesions):
    ops = []
    for _ in range(r.integers(0, 5)):
        kind = r.integers(3)
        if kind == 0:
            ops.append(DropLesion(int(r.integers(1, n_lesions + 1))))
        elif kind == 1:
            ops.append(AddBlob(float(r.choice([0.5, 1.0, 1.5, 2.0]))))
        else:
            ops.append(ErodeLesion(int(r.integers(1, n_lesions + 1)), int(r.integers(1, 3))))
    return ops


@criterion(3)
def test_perturbed_cases_match_manifest():
    r = np.random.default_rng(303)
    spec = PhantomSpec(dims=(32, 32, 32), n_lesions=5, seed=303)
    start = time.perf_counter()
    for i in range(50):
        case = generate_case(spec, i)
        min_mm3 = float(r.choice([0.0, 5.0]))
        conn = int(r.choice([6, 26]))
        p = perturb(case.gt, _random_ops(r, 5), seed=i, min_mm3=min_mm3, connectivity=conn)
        got = evaluate_pair(p.mask, case.gt, conn, min_mm3)
        for field in ("ltpr", "lfpr", "dice", "vd", "tp_rate"):
            assert got.metric(field) == p.expected.metric(field), (i, field)
        assert got == p.expected
    assert time.perf_counter() - start < 60.0


# ------------------------------------------------------------------ 4


@criterion(4)
def test_min_size_removes_planted_small_false_positives():
    # sub-millimetre noise radii rasterize to single 1 mm^3 voxels
    spec = PhantomSpec(dims=(32, 32, 32), n_lesions=5, n_noise_blobs=4, noise_radius_mm=(0.5, 0.9), seed=44)
    cases = generate_cohort(spec, 6)
    for c in cases:
        assert all(les.volume_mm3 < 5 for les in label_components(c.noise))
        assert all(les.volume_mm3 >= 5 for les in label_components(c.gt))
    pairs = [(probability_from(c, 0.9, 0.9), c.gt) for c in cases]
    planted = statistics.mean(
        len(label_components(c.noise)) / (len(label_components(c.noise)) + len(label_components(c.gt))) for c in cases
    )
    assert planted > 0
    grid = [round(0.05 * i, 2) for i in range(21)]
    at0 = roc_sweep(pairs, grid, min_mm3=0)
    at5 = roc_sweep(pairs, grid, min_mm3=5)
    compared = 0
    for p0, p5 in zip(at0.points, at5.points):
        if p0.lfpr is None or p5.lfpr is None:
            continue
        compared += 1
        assert p5.lfpr < p0.lfpr
        assert p5.lfpr <= p0.lfpr - planted + 1e-9
    assert compared >= 15


# ------------------------------------------------------------------ 5


@criterion(5)
def test_exact_p_matches_enumeration_for_every_sign_pattern():
    r = np.random.default_rng(505)
    for n in range(1, 11):
        mags = r.permutation(np.arange(1, n + 1)) + r.random(n) * 0.5  # distinct magnitudes
        ranks = average_ranks(list(mags))
        total = sum(ranks)
        patterns = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
        null_wplus = patterns @ np.array(ranks)
        null_min = np.minimum(null_wplus, total - null_wplus)
        for signs in patterns:
            d = np.where(signs == 1, mags, -mags)
            w_plus = float(np.dot(signs, ranks))
            w_obs = min(w_plus, total - w_plus)
            expected = float(np.mean(null_min <= w_obs + 1e-9))
            got = wilcoxon_signed_rank(d, np.zeros(n), method="exact")
            assert got.statistic == w_obs
            assert abs(got.p_value - expected) <= 1e-12


@criterion(5)
def test_normal_approximation_close_to_exact_at_n20():
    r = np.random.default_rng(506)
    worst = 0.0
    for _ in range(100):
        a = r.normal(r.uniform(-0.8, 0.8), 1, size=20)
        b = r.normal(0, 1, size=20)
        exact = wilcoxon_signed_rank(a, b, method="exact")
        approx = wilcoxon_signed_rank(a, b, method="normal")
        assert exact.n_effective == 20
        worst = max(worst, abs(exact.p_value - approx.p_value))
    assert worst <= 0.02


# ------------------------------------------------------------------ 6


@criterion(6)
def test_bland_altman_matches_direct_formulas():
    r = np.random.default_rng(606)
    for _ in range(100):
        n = int(r.integers(2, 40))
        pred = r.uniform(0, 50, n)
        gt = r.uniform(0, 50, n)
        ba = bland_altman(list(zip(pred, gt)))
        diffs = [float(p) - float(g) for p, g in zip(pred, gt)]
        mean = math.fsum(diffs) / n
        sd = math.sqrt(math.fsum((d - mean) ** 2 for d in diffs) / (n - 1))
        assert abs(ba.mean_diff - mean) <= 1e-12
        assert abs(ba.sd_diff - sd) <= 1e-12
        assert abs(ba.loa_low - (mean - 1.96 * sd)) <= 1e-12
        assert abs(ba.loa_high - (mean + 1.96 * sd)) <= 1e-12
        for (m, d), p, g in zip(ba.points(), pred, gt):
            assert abs(m - (p + g) / 2) <= 1e-12 and abs(d - (p - g)) <= 1e-12
    over = bland_altman([(12.0, 10.0), (7.0, 5.0)])
    assert over.mean_diff == 2.0 and over.diffs.tolist() == [2.0, 2.0]
    assert bland_altman([(8.0, 10.0), (3.0, 5.0)]).mean_diff == -2.0


# ------------------------------------------------------------------ 7


@criterion(7)
def test_tlv_boundaries():
    assert tlv_group(4.99) == "low"
    assert tlv_group(5.0) == "moderate"
    assert tlv_group(15.0) == "moderate"
    assert tlv_group(15.01) == "high"


# ------------------------------------------------------------------ 8

# Noise blobs mimic lesions on FLAIR but are brighter than lesions on MPRAGE,
# so stage 1 (candidates from FLAIR) lets them through and stage 2 must learn
# the second channel to reject them.
HARD_CHANNELS = (
    ChannelModel("FLAIR", 100, 10, 200, 15, blob_mean=200, blob_sd=15),
    ChannelModel("MPRAGE", 150, 10, 110, 10, blob_mean=128, blob_sd=10),
)
SEPARABLE = PhantomSpec(dims=(32, 32, 32), n_lesions=6, radius_range_mm=(1.5, 3.0), seed=21)


def _cases(phantoms, prior=False):
    out = []
    for c in phantoms:
        chans = dict(c.channels)
        if prior:
            chans = inject_prior(chans, Volume(c.gt.data.astype(np.float32), c.gt.spacing, "prob"))
        out.append(CascadeCase(chans, c.gt))
    return out


@criterion(8)
def test_cascade_second_stage_reduces_false_positives():
    start = time.perf_counter()
    stage1, stage2 = [], []
    for seed in range(10):
        spec = PhantomSpec(seed=seed, channels=HARD_CHANNELS, n_noise_blobs=10, noise_radius_mm=(1.5, 2.5))
        phantoms = generate_cohort(spec, 4)
        cases = _cases(phantoms)
        model = train_cascade(cases[:2], cases[2:3], seed=seed, min_mm3=5)
        out = run_cascade(model, cases[3].channels)
        s1 = evaluate_pair(out.stage1_mask, cases[3].gt, min_mm3=5).lfpr
        s2 = evaluate_pair(out.mask, cases[3].gt, min_mm3=5).lfpr
        stage1.append(s1 if s1 is not None else 0.0)
        stage2.append(s2 if s2 is not None else 0.0)
    assert statistics.mean(stage2) <= statistics.mean(stage1)
    assert max(stage1) > 0  # the noise really does fool stage 1

    phantoms = generate_cohort(SEPARABLE, 5)
    cases = _cases(phantoms)
    model = train_cascade(cases[:2], cases[2:3], spec=PatchSpec(5), seed=3, min_mm3=3)
    for case in cases[3:]:
        assert evaluate_pair(run_cascade(model, case.channels).mask, case.gt).dice >= 0.9
    assert time.perf_counter() - start < 300.0


# ------------------------------------------------------------------ 9


@criterion(9)
def test_oracle_prior_does_not_hurt_dice():
    plain_dice, prior_dice = [], []
    spec_prior = PatchSpec(3, ("FLAIR", "MPRAGE", PRIOR))
    for seed in range(10):
        spec = PhantomSpec(dims=(32, 32, 32), seed=seed, channels=HARD_CHANNELS, n_noise_blobs=6, noise_radius_mm=(1.5, 2.5))
        phantoms = generate_cohort(spec, 3)
        plain, prior = _cases(phantoms), _cases(phantoms, prior=True)
        m_plain = train_cascade(plain[:1], plain[1:2], spec=PatchSpec(3), seed=seed, min_mm3=5)
        m_prior = train_cascade(prior[:1], prior[1:2], spec=spec_prior, seed=seed, min_mm3=5)
        plain_dice.append(evaluate_pair(run_cascade(m_plain, plain[2].channels).mask, plain[2].gt).dice)
        prior_dice.append(evaluate_pair(run_cascade(m_prior, prior[2].channels).mask, prior[2].gt).dice)
    assert statistics.mean(prior_dice) >= statistics.mean(plain_dice)


# ------------------------------------------------------------------ 10


def _run_pipeline(workdir: Path, jobs: int, monkeypatch) -> dict[str, str]:
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    j = ["--jobs", str(jobs)]
    synth = ["synth", "--out-dir", "syn", "--n-cases", "3", "--seed", "5", "--dims", "28", "28", "28", "--noise-blobs", "2"]
    assert main(synth + j) == 0
    assert main(["train", "syn/cohort.json", "--seed", "2", "--val-cases", "1", "--edge", "5", "--out", "model.zip"] + j) == 0
    assert main(["apply", "--model", "model.zip", "syn/cohort.json", "--out-dir", "pred"] + j) == 0
    assert main(["eval", "pred/case002_cascade_mask.nii", "syn/case002/gt.nii", "--out", "eval"]) == 0
    assert main(["cohort", "pred/cohort.json", "--out-dir", "res"] + j) == 0
    return {
        str(p.relative_to(workdir)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(workdir.rglob("*"))
        if p.is_file()
    }


@criterion(10)
def test_pipeline_outputs_byte_identical(tmp_path, monkeypatch):
    first = _run_pipeline(tmp_path / "a", 1, monkeypatch)
    second = _run_pipeline(tmp_path / "b", 1, monkeypatch)
    threaded = _run_pipeline(tmp_path / "c", 3, monkeypatch)
    assert len(first) > 20
    assert first == second
    assert first == threaded


# ------------------------------------------------------------------ 11


def _random_volume(r):
    dims = tuple(int(n) for n in r.integers(1, 9, 3))
    spacing = tuple(float(str(np.float32(s))) for s in r.uniform(0.2, 4.0, 3))
    dtype = r.choice(["uint8", "int16", "float32"])
    kind = r.choice({"uint8": ["mask", "image"], "int16": ["image"], "float32": ["image", "prob"]}[dtype])
    if kind == "mask":
        data = r.integers(0, 2, dims).astype(np.uint8)
    elif dtype == "uint8":
        data = r.integers(0, 256, dims).astype(np.uint8)
    elif dtype == "int16":
        data = r.integers(-32768, 32768, dims).astype(np.int16)
    elif kind == "prob":
        data = r.random(dims).astype(np.float32)
    else:
        data = (r.normal(0, 1e3, dims)).astype(np.float32)
    return Volume(data, spacing, str(kind))


@criterion(11)
def test_random_volumes_round_trip(tmp_path):
    r = np.random.default_rng(1111)
    seen = set()
    for i in range(100):
        v = _random_volume(r)
        fmt = ("nifti", "raw")[i % 2]
        path = tmp_path / f"v{i}.{'nii' if fmt == 'nifti' else 'lbv'}"
        write_volume(v, path, fmt)
        back = read_volume(path)
        assert back.dims == v.dims and back.spacing == v.spacing and back.dtype == v.dtype
        assert back.data.tobytes() == v.data.tobytes()
        seen.add((fmt, v.dtype))
    assert len(seen) == 6

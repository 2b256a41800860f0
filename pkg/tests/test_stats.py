import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspharm import models as M
from mspharm.patches import extract_patches, prepare_cohort, split
from mspharm.stats import (
    EvalReport,
    PatchError,
    bonferroni,
    compare_errors,
    errors_to_csv,
    evaluate_model,
    format_cell,
    patch_mse,
    read_errors_csv,
    report_row,
    summarize,
    wilcoxon_signed_rank,
)
from mspharm.tensor import ShapeError, Tensor

from conftest import build_cohort


def brute_force_p(a, b):
    """Two-sided p from every sign pattern; ranks via scipy-free midrank averaging."""
    d = [x - y for x, y in zip(a, b) if x != y]
    if not d:
        return 1.0
    mags = sorted(abs(v) for v in d)
    rank = {}
    for v in set(mags):
        pos = [i + 1 for i, m in enumerate(mags) if m == v]
        rank[v] = sum(pos) / len(pos)
    r = [rank[abs(v)] for v in d]
    total = sum(r)
    wp = sum(ri for ri, v in zip(r, d) if v > 0)
    observed = min(wp, total - wp)
    hits = 0
    for signs in itertools.product((False, True), repeat=len(d)):
        s = sum(ri for ri, on in zip(r, signs) if on)
        hits += min(s, total - s) <= observed + 1e-9
    return hits / 2 ** len(d)


def test_patch_mse_values():
    a = np.random.default_rng(0).normal(size=(6, 11, 11, 11)).astype(np.float32)
    assert patch_mse(a, a) == 0.0
    assert patch_mse(a + 1, a) == pytest.approx(1.0, abs=1e-6)
    b = np.random.default_rng(1).normal(size=a.shape).astype(np.float32)
    oracle = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    assert abs(patch_mse(a, b) - oracle) < 1e-6
    assert patch_mse(Tensor(a), Tensor(b)) == patch_mse(a, b)
    with pytest.raises(ShapeError):
        patch_mse(a, a[:3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_patch_mse_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3))
    assert patch_mse(a, b) == patch_mse(b, a) > 0


def test_report_row_hand_values():
    row = report_row("m", "t", [1.0, 2.0, 3.0])
    assert row.n == 3 and row.mean == 2.0
    assert row.std == pytest.approx(math.sqrt(2 / 3), abs=1e-12)
    assert format_cell(0.074, 0.0121) == "74 (±12)"
    assert format_cell(0.5, 0.25, scale=1, decimals=2) == "0.50 (±0.25)"
    with pytest.raises(ValueError):
        summarize([])


def test_wilcoxon_hand_case():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.w == 0 and r.n == 5 and r.exact
    assert r.p == pytest.approx(0.0625, abs=1e-15)


def test_wilcoxon_degenerate():
    r = wilcoxon_signed_rank([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], m=3)
    assert r.degenerate and r.p == 1.0 and r.p_corrected == 1.0


def test_zero_differences_are_dropped():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5, 7], [0, 0, 0, 0, 0, 7])
    assert r.n == 5 and r.p == pytest.approx(0.0625)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 31), st.booleans())
def test_exact_mode_matches_enumeration(n, seed, with_ties):
    rng = np.random.default_rng(seed)
    if with_ties:
        a = rng.integers(0, 4, n).astype(float)
        b = rng.integers(0, 4, n).astype(float)
    else:
        a, b = rng.normal(size=n), rng.normal(size=n)
    r = wilcoxon_signed_rank(a, b, method="exact")
    assert r.p == pytest.approx(brute_force_p(a.tolist(), b.tolist()), abs=1e-12)
    assert 0.0 <= r.p <= 1.0


def test_exact_and_normal_agree_at_twelve():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(50):
        a, b = rng.normal(size=12), rng.normal(size=12) + 0.3
        e = wilcoxon_signed_rank(a, b, method="exact").p
        n = wilcoxon_signed_rank(a, b, method="approx").p
        worst = max(worst, abs(e - n))
    assert worst < 0.02


def test_large_n_uses_approximation():
    rng = np.random.default_rng(3)
    r = wilcoxon_signed_rank(rng.normal(size=40), rng.normal(size=40))
    assert not r.exact and 0 <= r.p <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2 ** 31), st.sampled_from([0.5, 2.0, 8.0]))
def test_positive_scaling_leaves_result_unchanged(n, seed, factor):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=n)
    r1 = wilcoxon_signed_rank(d, np.zeros(n))
    r2 = wilcoxon_signed_rank(d * factor, np.zeros(n))
    assert (r1.w, r1.p) == (r2.w, r2.p)


def test_bonferroni():
    assert bonferroni(0.01, 3) == pytest.approx(0.03)
    assert bonferroni(0.5, 3) == 1.0
    assert bonferroni(1e-6, 3) == pytest.approx(3e-6) and bonferroni(1e-6, 3) < 1e-5
    with pytest.raises(ValueError):
        bonferroni(1.5, 3)
    with pytest.raises(ValueError):
        bonferroni(0.1, 0)


def test_unequal_lengths_rejected():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])


@pytest.fixture(scope="module")
def small_eval(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 1:4, 2] = True
    m = build_cohort(root, dims=(5, 5, 5), channels=2, scales=(1, 1, 2), masks=[mask])
    ds = extract_patches(prepare_cohort(m))
    return ds, split(ds, 0.6, seed=1)


class CopyTarget:
    """Predicts the stored target patch exactly."""

    def __init__(self, ds, target):
        self.ds, self.target = ds, target
        self.lookup = {ds[i].x.tobytes(): ds[i].targets[target] for i in range(len(ds))}

    def predict(self, x):
        return Tensor(np.stack([self.lookup[p.tobytes()] for p in x.data]))


class Zero:
    def __init__(self, target, size):
        self.target, self.size = target, size

    def predict(self, x):
        return Tensor(np.zeros((x.shape[0], x.shape[1]) + (self.size,) * 3, np.float32))


def test_perfect_model_scores_zero(small_eval):
    ds, sp = small_eval
    errors, row = evaluate_model(CopyTarget(ds, 2), ds, sp.test)
    assert row.mean == 0.0 and row.std == 0.0 and row.n == len(sp.test)
    assert [e.patch_index for e in errors] == sp.test.tolist()


def test_zero_predictor_gives_second_moment(small_eval):
    ds, sp = small_eval
    errors, row = evaluate_model(Zero(1, 11), ds, sp.test)
    moments = [float(np.mean(ds[i].targets[1].astype(np.float64) ** 2)) for i in sp.test]
    np.testing.assert_allclose([e.mse for e in errors], moments, rtol=1e-12)
    assert row.mean == pytest.approx(np.mean(moments), rel=1e-12)


def test_evaluate_errors(small_eval):
    ds, sp = small_eval
    with pytest.raises(ValueError):
        evaluate_model(Zero(1, 11), ds, [])
    with pytest.raises(ValueError):
        evaluate_model(Zero(1, 11), ds, sp.test, target=2)
    with pytest.raises(ShapeError):
        evaluate_model(Zero(2, 11), ds, sp.test)


def test_csv_recomputation_and_json(small_eval, tmp_path):
    ds, sp = small_eval
    net = M.build_single("cnnrish5", 2, 2, width=2, target=1)
    errors, row = evaluate_model(net, ds, sp.test, model_name="cnn")
    (tmp_path / "e.csv").write_text(errors_to_csv(errors))
    back = read_errors_csv(tmp_path / "e.csv")
    assert back == errors
    vals = [e.mse for e in back]
    assert abs(np.mean(vals) - row.mean) < 1e-9 and abs(np.std(vals) - row.std) < 1e-9
    report = EvalReport([row], metadata={"dataset": "x"})
    again = EvalReport.from_json(report.to_json())
    assert again.rows == report.rows and again.to_json() == report.to_json()


def test_table_layout_and_self_comparison():
    errs = {}
    rng = np.random.default_rng(0)
    for model in ("a", "b", "c"):
        for t in ("t1", "t2", "t3"):
            errs[(model, t)] = [PatchError(i, "s", t, float(v)) for i, v in enumerate(rng.random(8))]
    errs[("a-copy", "t1")] = list(errs[("a", "t1")])
    tests = compare_errors(errs)
    self_test = [r for r in tests if {r.model_a, r.model_b} == {"a", "a-copy"}][0]
    assert self_test.degenerate and self_test.p == 1.0
    assert all(r.m == 3 for r in tests)
    rows = [report_row(m, t, e) for (m, t), e in errs.items() if m != "a-copy"]
    table = EvalReport(rows, tests).table().splitlines()
    assert table[1].split() == ["model", "t1", "t2", "t3"]
    assert [line.split()[0] for line in table[3:6]] == ["a", "b", "c"]
    assert "±" in table[3]

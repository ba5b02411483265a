"""Acceptance gate: one test per numbered release criterion.

Every test wraps its checks in the `criterion` context manager so the run
ends with one PASS/FAIL line per criterion in the terminal summary, plus the
stated tolerances and wall-clock bounds asserted inside the test body.
"""

import io
import json
import math
import time
from contextlib import contextmanager, redirect_stdout
from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from daval.accuracy import CIMethod, proportion_ci
from daval.accuracy import test_vs_goal as goal_test
from daval.agreement import bland_altman, deming, variance_components_from_cells
from daval.cli import main as cli_main
from daval.qc import TriageConfusion, row_metrics, worst_case
from daval.resample import SeededGenerator, simulate_risk_scores
from daval.riskscore import (
    CalibrationMode,
    decision_curve,
    fit_recalibration,
    prevalence_scale,
    roc_curve,
)
from daval.survival import added_value_lrt, cox_fit, km_estimate


@pytest.fixture
def criterion(acceptance_log):
    @contextmanager
    def run(number, description):
        try:
            yield
        except Exception:
            line = f"criterion {number:02d} FAIL: {description}"
            acceptance_log[number] = line
            print(line)
            raise
        line = f"criterion {number:02d} PASS: {description}"
        acceptance_log[number] = line
        print(line)

    return run


def four_digits(value):
    return f"{value:.4f}"


def write_triage_csv(path):
    """150 subjects realizing the worked triage table (40,5,5,10,85,5)."""
    blocks = [
        (40, "positive", "positive"),
        (5, "positive", "negative"),
        (5, "positive", "ungradable"),
        (10, "negative", "positive"),
        (85, "negative", "negative"),
        (5, "negative", "ungradable"),
    ]
    lines = ["subject_id,truth,output"]
    i = 0
    for count, truth, output in blocks:
        for _ in range(count):
            lines.append(f"s{i:03d},{truth},{output}")
            i += 1
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_c01_triage_worked_example(criterion, tmp_path):
    with criterion(1, "triage worked example: exact four-digit rationals under 1 s"):
        start = time.perf_counter()
        data = write_triage_csv(tmp_path / "triage.csv")
        buf = io.StringIO()
        with redirect_stdout(buf):
            assert cli_main(["qc", str(data)]) == 0
        qc = json.loads(buf.getvalue())["results"]["qc"]
        elapsed = time.perf_counter() - start

        rows = {r["name"]: r for r in qc["rows"]}
        assert four_digits(rows["positive"]["posttest_risk"]["estimate"]) == "0.8000"
        assert four_digits(rows["positive"]["likelihood_ratio"]["estimate"]) == "8.0000"
        assert four_digits(rows["ungradable"]["likelihood_ratio"]["estimate"]) == "2.0000"
        assert four_digits(qc["worst_case"]["sensitivity"]["estimate"]) == "0.8000"
        assert four_digits(qc["worst_case"]["specificity"]["estimate"]) == "0.8500"
        assert four_digits(qc["worst_case"]["pretest_risk"]["estimate"]) == "0.3333"

        # The same numbers as exact rationals, straight from the table.
        tri = TriageConfusion(40, 5, 5, 10, 85, 5)
        pos, _, ung = row_metrics(tri)
        assert pos.posttest_risk_exact == Fraction(4, 5)
        assert pos.likelihood_ratio_exact == Fraction(8)
        assert ung.likelihood_ratio_exact == Fraction(2)
        worst = worst_case(tri)
        assert worst.sensitivity_exact == Fraction(4, 5)
        assert worst.specificity_exact == Fraction(17, 20)
        assert worst.pretest_risk_exact == Fraction(1, 3)

        assert elapsed < 1.0, f"took {elapsed:.2f} s"


def test_c02_bayes_coherence_sweep(criterion):
    with criterion(2, "post-test odds equal pre-test odds times LR on all small tables"):
        start = time.perf_counter()
        # Row metrics depend on the table only through the row's own cells
        # and the two margins, so distinct (diseased, healthy, n+, n-)
        # contexts are computed once and reused across the 6^6 sweep.
        cache = {}

        def positive_row(diseased, healthy, n_pos, n_neg):
            key = (diseased, healthy, n_pos, n_neg)
            hit = cache.get(key)
            if hit is None:
                b = min(5, n_pos - diseased)
                c = n_pos - diseased - b
                e = min(5, n_neg - healthy)
                f = n_neg - healthy - e
                hit = cache[key] = row_metrics(TriageConfusion(diseased, b, c, healthy, e, f))[0]
            return hit

        checked = 0
        for a, b, c, d, e, f in product(range(6), repeat=6):
            n_pos, n_neg = a + b + c, d + e + f
            if n_pos == 0 or n_neg == 0:
                continue
            pre_odds = Fraction(n_pos, n_neg)
            for diseased, healthy in ((a, d), (b, e), (c, f)):
                if healthy == 0:
                    continue
                row = positive_row(diseased, healthy, n_pos, n_neg)
                post = row.posttest_risk_exact
                assert post / (1 - post) == pre_odds * row.likelihood_ratio_exact
                checked += 1
        elapsed = time.perf_counter() - start

        assert checked == 116100
        assert elapsed < 10.0, f"took {elapsed:.2f} s"


def test_c03_interval_coverage(criterion):
    with criterion(3, "exact interval coverage >= 0.95 on the grid; score interval mean floor"):
        start = time.perf_counter()
        grid = [k / 20 for k in range(1, 20)]
        for n in (10, 20, 30):
            exact = [proportion_ci(x, n, 0.95, CIMethod.CLOPPER_PEARSON) for x in range(n + 1)]
            score = [proportion_ci(x, n, 0.95, CIMethod.WILSON) for x in range(n + 1)]
            score_cov = []
            for p in grid:
                pmf = [math.comb(n, x) * p**x * (1 - p) ** (n - x) for x in range(n + 1)]
                cp = sum(w for w, ci in zip(pmf, exact) if ci.lower <= p <= ci.upper)
                assert cp >= 0.95, f"exact interval covers {cp:.5f} at n={n}, p={p}"
                score_cov.append(
                    sum(w for w, ci in zip(pmf, score) if ci.lower <= p <= ci.upper)
                )
            # The score interval dips below 0.93 pointwise near the edges by
            # construction; the documented floor is its grid average per n.
            assert sum(score_cov) / len(score_cov) >= 0.93
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0, f"took {elapsed:.2f} s"


def test_c04_goal_test_ci_duality(criterion):
    with criterion(4, "goal-test rejection set equals lower-bound duality at n = 25"):
        rejected = set()
        for x in range(26):
            by_test = goal_test(x, 25, goal=0.8, alpha=0.05).reject
            by_bound = proportion_ci(x, 25, level=0.90).lower > 0.8
            assert by_test == by_bound, f"x={x}: test {by_test}, bound {by_bound}"
            if by_test:
                rejected.add(x)
        assert rejected == {24, 25}


def test_c05_auc_oracle_equivalence(criterion):
    with criterion(5, "rank AUC equals pair counting and trapezoid on 1000 tied datasets"):
        start = time.perf_counter()
        for i in range(1000):
            rng = SeededGenerator(505).substream(i).generator()
            n = int(rng.integers(4, 31))
            while True:
                outcomes = rng.random(n) < 0.5
                if outcomes.any() and not outcomes.all():
                    break
            scores = np.clip(rng.integers(0, 11, size=n) / 10.0, 0.01, 0.99)
            roc = roc_curve(scores, outcomes)

            pos, neg = scores[outcomes], scores[~outcomes]
            wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
            brute = wins / (len(pos) * len(neg))

            assert abs(roc.auc - brute) <= 1e-12
            assert abs(roc.auc - roc.trapezoid_auc()) <= 1e-12
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"took {elapsed:.2f} s"


def test_c06_recalibration_recovery_and_grid_oracle(criterion):
    with criterion(6, "recalibration recovery and grid-search likelihood oracle"):
        gen = SeededGenerator(606)
        scores, _ = simulate_risk_scores(5000, 0.4, 0.85, gen)
        rng = gen.substream(1).generator()
        outcomes = rng.random(5000) < scores
        fit = fit_recalibration(scores, outcomes, CalibrationMode.INTERCEPT_AND_SLOPE)
        assert -0.1 <= fit.intercept <= 0.1, fit.intercept
        assert 0.9 <= fit.slope <= 1.1, fit.slope

        # Small-sample oracle: brute-force maximization of the exact
        # Bernoulli log-likelihood over two nested coefficient grids.
        rng = SeededGenerator(607).generator()
        small_scores = np.round(rng.uniform(0.1, 0.9, 20), 3)
        small_outcomes = rng.random(20) < small_scores
        newton = fit_recalibration(small_scores, small_outcomes, CalibrationMode.INTERCEPT_AND_SLOPE)

        z = np.log(small_scores / (1 - small_scores))
        y = small_outcomes.astype(float)

        def grid_max(a_vals, b_vals):
            grid_a, grid_b = np.meshgrid(a_vals, b_vals, indexing="ij")
            eta = grid_a[..., None] + grid_b[..., None] * z[None, None, :]
            ll = np.sum(y * eta - np.logaddexp(0.0, eta), axis=-1)
            i, j = np.unravel_index(np.argmax(ll), ll.shape)
            return a_vals[i], b_vals[j]

        a0, b0 = grid_max(np.arange(-4.0, 4.0001, 0.02), np.arange(-2.0, 6.0001, 0.02))
        for step, half in ((2e-4, 0.03), (2e-6, 4e-4)):
            a0, b0 = grid_max(
                np.arange(a0 - half, a0 + half + step / 2, step),
                np.arange(b0 - half, b0 + half + step / 2, step),
            )
        assert abs(a0 - newton.intercept) <= 1e-4
        assert abs(b0 - newton.slope) <= 1e-4


def test_c07_prevalence_scaling(criterion):
    with criterion(7, "prevalence scaling: identity, round trip, finite-population check"):
        rng = SeededGenerator(707).generator()
        risks = rng.uniform(0.01, 0.99, 500)

        same = prevalence_scale(risks, 0.37, 0.37)
        assert np.max(np.abs(same - risks)) <= 1e-12

        there = prevalence_scale(risks, 0.45, 0.12)
        back = prevalence_scale(there, 0.12, 0.45)
        assert np.max(np.abs(back - risks)) <= 1e-12

        # Explicit finite-population Bayes at (p, train, target) = (.5, .5, .1):
        # take a cohort at this risk level and reweight each class by the
        # target/train class ratios, then recompute the diseased share.
        n = 1000.0
        diseased, healthy = n * 0.5, n * 0.5
        w_diseased, w_healthy = 0.1 / 0.5, 0.9 / 0.5
        explicit = diseased * w_diseased / (diseased * w_diseased + healthy * w_healthy)
        scaled = prevalence_scale(0.5, 0.5, 0.1)
        assert abs(scaled - explicit) <= 1e-10
        assert abs(scaled - 0.1) <= 1e-10


def test_c08_decision_curve_identities(criterion):
    with criterion(8, "net benefit anchors: none, treat-all at prevalence, perfect model"):
        for n_pos, n in ((5, 50), (15, 50)):
            prevalence = n_pos / n
            outcomes = np.zeros(n, dtype=bool)
            outcomes[:n_pos] = True
            scores = np.linspace(0.02, 0.98, n)

            dca = decision_curve(scores, outcomes, thresholds=[0.05, prevalence, 0.5, 0.9])
            assert np.all(dca.nb_none == 0.0)
            at_prev = dca.nb_all[dca.thresholds.tolist().index(prevalence)]
            assert abs(at_prev) <= 1e-12

            perfect = decision_curve(outcomes.astype(float), outcomes)
            assert np.max(np.abs(perfect.nb_model - prevalence)) <= 1e-12
            assert np.all(perfect.nb_none == 0.0)


def test_c09_km_hand_example_and_empirical(criterion):
    with criterion(9, "product-limit curve matches hand values and empirical survival"):
        curve = km_estimate([1.0, 2.0, 3.0], [True, False, True])
        assert four_digits(curve.survival_at(1.0)) == "0.6667"
        assert four_digits(curve.survival_at(3.0)) == "0.0000"

        for i in range(100):
            rng = SeededGenerator(909).substream(i).generator()
            n = int(rng.integers(3, 40))
            times = np.round(rng.exponential(5.0, size=n), 1)  # rounding forces ties
            km = km_estimate(times, np.ones(n, dtype=bool))
            for t in km.times:
                empirical = float(np.mean(times > t))
                assert abs(km.survival_at(t) - empirical) <= 1e-12


def test_c10_cox_grid_oracle_and_lrt_calibration(criterion):
    with criterion(10, "proportional hazards grid oracle and LRT null calibration"):
        times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        events = [True, True, False, True, True, True]
        x = np.array([0.5, -0.2, 0.7, 0.1, -0.6, 0.3])
        fit = cox_fit(x, times, events, names=("marker",))
        assert fit.converged

        def grid_ll(betas):
            order = np.argsort(times, kind="mergesort")
            t = np.asarray(times)[order]
            e = np.asarray(events, bool)[order]
            xv = x[order]
            out = []
            for b in betas:
                ll = 0.0
                for i in range(len(t)):
                    if e[i]:
                        ll += b * xv[i] - math.log(np.sum(np.exp(b * xv[t >= t[i]])))
                out.append(ll)
            return np.asarray(out)

        coarse = np.linspace(-5.0, 5.0, 2001)
        best = coarse[int(np.argmax(grid_ll(coarse)))]
        fine = np.linspace(best - 0.01, best + 0.01, 2001)
        best = fine[int(np.argmax(grid_ll(fine)))]
        assert abs(fit.coefficients["marker"] - best) <= 1e-4

        start = time.perf_counter()
        base = SeededGenerator(910, stream_id=7)
        rejections = 0
        for i in range(1000):
            rng = base.substream(i).generator()
            noise = rng.normal(size=200)
            sim_times = rng.exponential(1.0, size=200)
            sim_events = np.ones(200, dtype=bool)
            null_fit = cox_fit(np.empty((200, 0)), sim_times, sim_events)
            full_fit = cox_fit(noise, sim_times, sim_events, names=("noise",))
            if added_value_lrt(null_fit, full_fit, added_df=1).p_value <= 0.05:
                rejections += 1
        elapsed = time.perf_counter() - start

        rate = rejections / 1000
        assert 0.03 <= rate <= 0.07, f"null rejection rate {rate}"
        assert elapsed < 60.0, f"took {elapsed:.2f} s"


def test_c11_deming_and_bland_altman(criterion):
    with criterion(11, "errors-in-both-variables fit: exactness, swap symmetry, shift"):
        x = np.linspace(1.0, 9.0, 25)
        for lam in (0.5, 1.0, 2.0):
            fit = deming(x, 2.0 * x + 1.0, lam=lam)
            assert abs(fit.slope - 2.0) <= 1e-12
            assert abs(fit.intercept - 1.0) <= 1e-12

        rng = np.random.default_rng(1111)
        xs = rng.normal(5.0, 2.0, 40)
        ys = 1.4 * xs - 0.8 + rng.normal(0.0, 0.4, 40)
        fwd = deming(xs, ys, lam=2.0)
        rev = deming(ys, xs, lam=0.5)
        assert abs(fwd.slope * rev.slope - 1.0) <= 1e-9
        assert abs(rev.intercept - (-fwd.intercept / fwd.slope)) <= 1e-9

        # Shift both methods by the same constant: dyadic values keep every
        # intermediate float identical, so the result must match bitwise.
        gen = SeededGenerator(1112).generator()
        a = gen.integers(0, 64, size=25) / 8.0
        b = a + gen.integers(-8, 9, size=25) / 8.0
        assert bland_altman(a + 16.0, b + 16.0) == bland_altman(a, b)


def test_c12_variance_component_oracle(criterion):
    with criterion(12, "variance components match the mean-square oracle; repro >= repeat"):
        rng = np.random.default_rng(77)
        subject_means = {"s1": 10.0, "s2": 8.0, "s3": 12.0, "s4": 9.0}
        shifts = {"opA": -0.4, "opB": 0.4}
        cells = {}
        for subject, mu in subject_means.items():
            for op, shift in shifts.items():
                cells[(subject, (op,))] = list(np.round(mu + shift + rng.normal(0, 0.3, 3), 3))
        comp = variance_components_from_cells(cells)

        # Balanced two-condition, three-replicate ANOVA by explicit mean
        # squares: pooled within-cell variance, and the between-condition
        # component (MS_between - MS_within) / r averaged over subjects.
        ss_within, within_df, cond_vars = 0.0, 0, []
        for subject in subject_means:
            groups = [np.asarray(cells[(subject, (op,))]) for op in shifts]
            for g in groups:
                ss_within += float(np.sum((g - g.mean()) ** 2))
                within_df += len(g) - 1
            pooled = np.concatenate(groups)
            ms_between = sum(3.0 * (g.mean() - pooled.mean()) ** 2 for g in groups)
            ms_within = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups) / 4.0
            cond_vars.append(max((ms_between - ms_within) / 3.0, 0.0))
        var_repeat = ss_within / within_df
        var_cond = float(np.mean(cond_vars))

        assert abs(comp.repeatability_sd - math.sqrt(var_repeat)) <= 1e-10
        assert abs(comp.reproducibility_sd - math.sqrt(var_repeat + var_cond)) <= 1e-10

        scan = np.random.default_rng(12)
        for _ in range(1000):
            random_cells = {}
            for s in range(scan.integers(1, 4)):
                for c in range(scan.integers(1, 4)):
                    n_rep = int(scan.integers(2, 5))
                    random_cells[(f"s{s}", (f"c{c}",))] = scan.normal(10, 1, size=n_rep).tolist()
            rand = variance_components_from_cells(random_cells)
            assert rand.reproducibility_sd >= rand.repeatability_sd


def test_c13_plan_rerun_is_byte_identical(criterion, tmp_path):
    with criterion(13, "demo plan rerun with a fixed seed is byte-identical"):
        demo_dir = Path(__file__).resolve().parent.parent / "demo"
        for name in ("plan.json", "plan_scores.json"):
            plan = str(demo_dir / name)
            outputs = []
            for run in ("first", "second"):
                out = tmp_path / f"{name}_{run}"
                buf = io.StringIO()
                with redirect_stdout(buf):
                    rc = cli_main(["run", "--plan", plan, "--seed", "42", "--out", str(out)])
                assert rc == 0
                outputs.append((out / "report.json").read_bytes())
            assert outputs[0] == outputs[1], f"rerun of {name} differs"
            assert json.loads(outputs[0])["seed"] == 42

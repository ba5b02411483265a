"""Validation of continuous risk-score outputs.

Calibration: logistic recalibration fit on logit(score) by Newton iteration
(intercept-only for calibration-in-the-large, intercept+slope for the shrinkage
check), quantile-binned calibration plot data, and Bayes prevalence scaling.
Discrimination: empirical ROC curve, Mann-Whitney AUC with the midrank tie
convention, and the DeLong structural-component variance. Clinical utility:
decision curves (net benefit and standardized net benefit) and risk-stratum
post-test risks with diagnostic likelihood ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import stats

from .accuracy import (
    CIMethod,
    Confusion2x2,
    ProportionCI,
    RatioCI,
    accuracy_metrics,
    proportion_ci,
    ratio_ci_log_method,
)

__all__ = [
    "PerfectSeparationError",
    "CalibrationMode",
    "CalibrationBin",
    "CalibrationResult",
    "RocCurve",
    "ThresholdMetrics",
    "DecisionCurve",
    "RiskStratum",
    "RiskStrata",
    "logit",
    "inv_logit",
    "fit_recalibration",
    "calibration_plot",
    "prevalence_scale",
    "predictiveness_curve",
    "roc_curve",
    "auc_ci",
    "threshold_grid",
    "decision_curve",
    "risk_strata_analysis",
]

SCORE_CLIP_EPS = 1e-6
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
SEPARATION_BOUND = 15.0
SEPARATION_RESIDUAL_EPS = 1e-6


class PerfectSeparationError(RuntimeError):
    """The recalibration likelihood is monotone (perfectly separated data)."""


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit requires p in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


def inv_logit(x: float) -> float:
    # Branch on sign to avoid overflow in exp for large |x|.
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class CalibrationMode(Enum):
    INTERCEPT_ONLY = "large"
    INTERCEPT_AND_SLOPE = "slope"


@dataclass(frozen=True)
class CalibrationBin:
    mean_predicted: float
    observed_rate: float
    n: int


@dataclass(frozen=True)
class CalibrationResult:
    intercept: float
    slope: float
    constrained: CalibrationMode
    converged: bool
    iterations: int
    log_likelihood: float
    bins: tuple[CalibrationBin, ...]
    n_clipped: int


def _logistic_ll(eta: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^eta) computed stably via logaddexp.
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _newton_logistic(
    design: np.ndarray, y: np.ndarray, offset: np.ndarray, theta0: np.ndarray
) -> tuple[np.ndarray, int, bool, float]:
    """Maximize the Bernoulli log-likelihood of y on ``design @ theta + offset``.

    Newton iteration with step-halving on likelihood decrease; declares perfect
    separation when a coefficient escapes past SEPARATION_BOUND while the
    likelihood is still climbing.
    """
    theta = theta0.astype(float).copy()
    eta = design @ theta + offset
    ll = _logistic_ll(eta, y)
    for iteration in range(1, NEWTON_MAX_ITER + 1):
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = design.T @ (y - mu)
        if np.max(np.abs(grad)) < NEWTON_TOL:
            return theta, iteration - 1, True, ll
        w = mu * (1.0 - mu)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise PerfectSeparationError(
                "singular information matrix during recalibration fit"
            ) from None
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            eta_cand = design @ cand + offset
            ll_cand = _logistic_ll(eta_cand, y)
            if ll_cand >= ll - 1e-14:
                break
            scale *= 0.5
        theta, eta, ll = cand, eta_cand, ll_cand
        if np.max(np.abs(theta)) > SEPARATION_BOUND:
            raise PerfectSeparationError(
                f"coefficient escaped past {SEPARATION_BOUND} with likelihood still "
                "increasing; the outcomes are separated on the score"
            )
    return theta, NEWTON_MAX_ITER, False, ll


def fit_recalibration(
    scores: Sequence[float],
    outcomes: Sequence[bool],
    mode: CalibrationMode = CalibrationMode.INTERCEPT_AND_SLOPE,
    n_bins: int = 10,
) -> CalibrationResult:
    """Logistic recalibration of outcomes on logit(score).

    INTERCEPT_ONLY constrains the slope to 1 and the fitted intercept is the
    calibration-in-the-large; INTERCEPT_AND_SLOPE frees both. Scores are
    clipped to [eps, 1-eps] before the logit (clipped count reported).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if s.shape != y.shape or s.ndim != 1 or len(s) == 0:
        raise ValueError("scores and outcomes must be equal-length 1-d sequences")
    if np.any((s < 0.0) | (s > 1.0)):
        raise ValueError("scores must lie in [0, 1]")
    if np.all(y == y[0]):
        raise ValueError("all outcomes identical; recalibration is undefined")

    clipped = np.clip(s, SCORE_CLIP_EPS, 1.0 - SCORE_CLIP_EPS)
    n_clipped = int(np.sum(clipped != s))
    z = np.log(clipped / (1.0 - clipped))

    if mode is CalibrationMode.INTERCEPT_ONLY:
        design = np.ones((len(z), 1))
        theta, iters, converged, ll = _newton_logistic(design, y, offset=z, theta0=np.zeros(1))
        intercept, slope = float(theta[0]), 1.0
    else:
        design = np.column_stack([np.ones_like(z), z])
        theta, iters, converged, ll = _newton_logistic(
            design, y, offset=np.zeros_like(z), theta0=np.array([0.0, 1.0])
        )
        intercept, slope = float(theta[0]), float(theta[1])
        # The in-loop coefficient bound only catches runaways; a gradient that
        # dies just under the bound with every outcome fitted exactly is the
        # same monotone likelihood and must not return silent huge slopes.
        mu = 1.0 / (1.0 + np.exp(-(intercept + slope * z)))
        if np.max(np.abs(y - mu)) < SEPARATION_RESIDUAL_EPS:
            raise PerfectSeparationError(
                "every outcome is fitted exactly; the outcomes are separated on the score"
            )

    bins = calibration_plot(scores, outcomes, n_bins=min(n_bins, len(s)))
    return CalibrationResult(
        intercept=intercept,
        slope=slope,
        constrained=mode,
        converged=converged,
        iterations=iters,
        log_likelihood=ll,
        bins=bins,
        n_clipped=n_clipped,
    )


def calibration_plot(
    scores: Sequence[float], outcomes: Sequence[bool], n_bins: int = 10
) -> tuple[CalibrationBin, ...]:
    """Equal-count (quantile) bins of mean predicted risk vs observed event rate.

    Records tied on score keep their input order, so bin membership is
    deterministic.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if len(s) == 0:
        raise ValueError("empty dataset")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if n_bins > len(s):
        raise ValueError(f"n_bins={n_bins} exceeds dataset size {len(s)}")
    order = np.argsort(s, kind="stable")
    bins = []
    for chunk in np.array_split(order, n_bins):
        bins.append(
            CalibrationBin(
                mean_predicted=float(np.mean(s[chunk])),
                observed_rate=float(np.mean(y[chunk])),
                n=len(chunk),
            )
        )
    return tuple(bins)


def _check_open_unit(value, name: str) -> None:
    if not (np.all(np.greater(value, 0)) and np.all(np.less(value, 1))):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")


def prevalence_scale(p, train_prev, target_prev):
    """Bayes adjustment of a predicted probability to a new prevalence.

    p' = p*r / (p*r + (1-p)) with r the target/train odds ratio. Strictly
    increasing in p, the identity map when prevalences agree, and exactly
    invertible by swapping the prevalences. Pure arithmetic, so exact
    rational inputs stay exact; numpy arrays broadcast elementwise.
    """
    _check_open_unit(p, "p")
    _check_open_unit(train_prev, "train_prev")
    _check_open_unit(target_prev, "target_prev")
    r = (target_prev / (1 - target_prev)) / (train_prev / (1 - train_prev))
    return p * r / (p * r + (1 - p))


def predictiveness_curve(scores: Sequence[float]) -> list[tuple[float, float]]:
    """Sorted predicted risks against their empirical quantiles (i/n for i=1..n)."""
    s = np.sort(np.asarray(scores, dtype=float))
    if len(s) == 0:
        raise ValueError("empty scores")
    n = len(s)
    return [((i + 1) / n, float(s[i])) for i in range(n)]


def _midrank(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=float)
    ranks[order] = np.arange(1, len(x) + 1)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    # Average the ranks within each tie group.
    sums = np.zeros(len(counts))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending, starts at +inf for the (0, 0) anchor
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    auc_se: float
    n_pos: int
    n_neg: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))

    def trapezoid_auc(self) -> float:
        widths = np.diff(self.fpr)
        heights = (self.tpr[1:] + self.tpr[:-1]) / 2.0
        return float(np.sum(widths * heights))


def roc_curve(scores: Sequence[float], outcomes: Sequence[bool]) -> RocCurve:
    """Empirical ROC over all distinct thresholds (rule: score >= t is positive).

    AUC is the Mann-Whitney statistic with half credit for ties, which equals
    the trapezoidal area under the empirical curve; its standard error comes
    from the DeLong structural components.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and outcomes must be equal-length 1-d sequences")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative case")

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.r_[np.diff(s_sorted) != 0, True]  # last index of each tie block
    cum_tp = np.cumsum(y_sorted)[distinct]
    cum_fp = np.cumsum(~y_sorted)[distinct]
    thresholds = np.r_[np.inf, s_sorted[distinct]]
    tpr = np.r_[0.0, cum_tp / n_pos]
    fpr = np.r_[0.0, cum_fp / n_neg]

    # Mann-Whitney AUC and DeLong components via the midrank identity:
    # sum_j psi(x_i, y_j) = (combined midrank of x_i) - (within-class midrank).
    r_all = _midrank(s)
    r_pos = _midrank(s[y])
    r_neg = _midrank(s[~y])
    auc = (float(np.sum(r_all[y])) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    v10 = (r_all[y] - r_pos) / n_neg
    v01 = 1.0 - (r_all[~y] - r_neg) / n_pos
    if n_pos >= 2 and n_neg >= 2:
        var = float(np.var(v10, ddof=1)) / n_pos + float(np.var(v01, ddof=1)) / n_neg
        auc_se = math.sqrt(max(var, 0.0))
    else:
        auc_se = math.nan
    return RocCurve(
        thresholds=thresholds,
        tpr=tpr,
        fpr=fpr,
        auc=float(auc),
        auc_se=auc_se,
        n_pos=n_pos,
        n_neg=n_neg,
    )


def auc_ci(roc: RocCurve, level: float = 0.95) -> tuple[float, float]:
    """Normal interval on AUC with the DeLong standard error, truncated to [0, 1]."""
    if roc.n_pos < 2 or roc.n_neg < 2:
        raise ValueError("DeLong interval needs >= 2 cases in each class")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    z = float(stats.norm.ppf(1 - (1 - level) / 2))
    return (max(0.0, roc.auc - z * roc.auc_se), min(1.0, roc.auc + z * roc.auc_se))


@dataclass(frozen=True)
class ThresholdMetrics:
    threshold: float
    sensitivity: ProportionCI | None
    specificity: ProportionCI | None


def threshold_grid(
    scores: Sequence[float],
    outcomes: Sequence[bool],
    thresholds: Sequence[float],
    level: float = 0.95,
    method: CIMethod = CIMethod.CLOPPER_PEARSON,
) -> list[ThresholdMetrics]:
    """Sensitivity/specificity with CIs at each clinically relevant threshold."""
    if len(thresholds) == 0:
        raise ValueError("empty threshold list")
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=bool)
    out = []
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold {t} outside (0, 1)")
        called = s >= t
        conf = Confusion2x2(
            tp=int(np.sum(called & y)),
            fp=int(np.sum(called & ~y)),
            fn=int(np.sum(~called & y)),
            tn=int(np.sum(~called & ~y)),
        )
        m = accuracy_metrics(conf, level=level, method=method)
        out.append(
            ThresholdMetrics(threshold=float(t), sensitivity=m.sensitivity, specificity=m.specificity)
        )
    return out


DEFAULT_DCA_GRID = tuple(round(0.01 * k, 2) for k in range(1, 100))


@dataclass(frozen=True)
class DecisionCurve:
    thresholds: np.ndarray
    nb_model: np.ndarray
    nb_all: np.ndarray
    nb_none: np.ndarray
    snb_model: np.ndarray
    prevalence: float
    n: int


def decision_curve(
    scores: Sequence[float],
    outcomes: Sequence[bool],
    thresholds: Sequence[float] = DEFAULT_DCA_GRID,
) -> DecisionCurve:
    """Net benefit across risk-tolerance thresholds.

    nb_model(t) = TP(t)/n - FP(t)/n * t/(1-t) with the score >= t rule;
    nb_all applies the same formula treating everyone as positive; nb_none is
    identically zero; snb divides by prevalence.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=bool)
    t = np.asarray(thresholds, dtype=float)
    if len(t) == 0:
        raise ValueError("empty threshold list")
    if np.any((t <= 0.0) | (t >= 1.0)):
        raise ValueError("decision-curve thresholds must lie strictly inside (0, 1)")
    n = len(s)
    if n == 0:
        raise ValueError("empty dataset")
    prevalence = float(np.mean(y))
    called = s[None, :] >= t[:, None]
    tp = np.sum(called & y[None, :], axis=1) / n
    fp = np.sum(called & ~y[None, :], axis=1) / n
    weight = t / (1.0 - t)
    nb_model = tp - fp * weight
    nb_all = prevalence - (1.0 - prevalence) * weight
    nb_none = np.zeros_like(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        snb = nb_model / prevalence if prevalence > 0 else np.full_like(t, np.nan)
    return DecisionCurve(
        thresholds=t,
        nb_model=nb_model,
        nb_all=nb_all,
        nb_none=nb_none,
        snb_model=snb,
        prevalence=prevalence,
        n=n,
    )


@dataclass(frozen=True)
class RiskStratum:
    lower: float
    upper: float
    n: int
    n_diseased: int
    posttest_risk: ProportionCI | None
    dlr: RatioCI | None
    posttest_risk_exact: Fraction | None
    dlr_exact: Fraction | None


@dataclass(frozen=True)
class RiskStrata:
    cutoffs: tuple[float, ...]
    strata: tuple[RiskStratum, ...]
    n_pos: int
    n_neg: int


def risk_strata_analysis(
    scores: Sequence[float],
    outcomes: Sequence[bool],
    cutoffs: Sequence[float],
    level: float = 0.95,
    method: CIMethod = CIMethod.CLOPPER_PEARSON,
) -> RiskStrata:
    """Post-test risk and stratum-specific DLR across score strata.

    Cutoffs partition [0, 1] into [0, c1), [c1, c2), ..., [ck, 1]; a score
    equal to a cutoff belongs to the upper stratum. The stratum DLR is
    P(stratum | diseased) / P(stratum | healthy). Empty strata are reported
    with undefined metrics rather than dropped.
    """
    cuts = [float(c) for c in cutoffs]
    if not cuts:
        raise ValueError("at least one cutoff required")
    if any(not 0.0 < c < 1.0 for c in cuts) or sorted(set(cuts)) != cuts:
        raise ValueError("cutoffs must be strictly ascending inside (0, 1)")
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("strata analysis needs both diseased and healthy cases")

    edges = [0.0] + cuts + [1.0]
    strata = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_stratum = (s >= lo) & (s < hi) if hi < 1.0 else (s >= lo) & (s <= 1.0)
        n_s = int(np.sum(in_stratum))
        pos_s = int(np.sum(in_stratum & y))
        neg_s = n_s - pos_s
        risk = risk_exact = dlr = dlr_exact = None
        if n_s > 0:
            risk = proportion_ci(pos_s, n_s, level=level, method=method)
            risk_exact = Fraction(pos_s, n_s)
            dlr = ratio_ci_log_method(pos_s, n_pos, neg_s, n_neg, level)
            if neg_s > 0:
                dlr_exact = Fraction(pos_s, n_pos) / Fraction(neg_s, n_neg)
        strata.append(
            RiskStratum(
                lower=lo,
                upper=hi,
                n=n_s,
                n_diseased=pos_s,
                posttest_risk=risk,
                dlr=dlr,
                posttest_risk_exact=risk_exact,
                dlr_exact=dlr_exact,
            )
        )
    return RiskStrata(cutoffs=tuple(cuts), strata=tuple(strata), n_pos=n_pos, n_neg=n_neg)

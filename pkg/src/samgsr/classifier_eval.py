"""Linear max-margin classifier on signature features and per-time-point metrics.

The classifier minimises ``0.5 * |w|^2 + C * sum(max(0, 1 - y * (w.x + b)))``
on standardised features by dual coordinate descent (cyclic order, so fits are
deterministic) until the relative duality gap drops below ``tol``. Margins are
mapped to posteriors by a logistic fit of the training labels on the training
margins. The bias is handled as an extra constant feature and is regularised.

Metric definitions (posterior ``p`` is the probability of "case", truth ``y``
is 1 for case):

* error: fraction misclassified with case predicted when ``p >= 0.5``
* GBS: ``mean((p - y)^2)``
* BCM: mean posterior assigned to the true class
* AUPR: step-wise area under the precision-recall curve, case as positive,
  thresholds swept over distinct scores in descending order
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .dataset import LongitudinalMatrix, PhenotypeLabels
from .errors import DegenerateDataError, InputError
from .reduction import Signature

logger = logging.getLogger(__name__)

#: ridge on the calibration slope; keeps the fit finite when training margins separate
CALIBRATION_RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class LinearModel:
    features: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: float
    slope: float
    intercept: float
    duality_gap: float = 0.0

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.features:
            return np.zeros(X.shape[0])
        Z = (X - self.mean) / self.scale
        return Z @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Posterior probability of the case class."""
        return expit(self.slope * self.margin(X) + self.intercept)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X) >= 0.5


def _primal(w, Z, y, C):
    return 0.5 * (w @ w) + C * np.maximum(0.0, 1.0 - y * (Z @ w)).sum()


def _fit_hinge(Z, y, C, tol, max_epochs):
    """Dual coordinate descent for the L2-regularised hinge loss (no shuffling)."""
    n = Z.shape[0]
    alpha = np.zeros(n)
    w = np.zeros(Z.shape[1])
    qii = np.einsum("ij,ij->i", Z, Z)
    gap = math.inf
    for _ in range(max_epochs):
        for i in range(n):
            if qii[i] == 0:
                continue
            g = y[i] * (Z[i] @ w) - 1.0
            new = min(max(alpha[i] - g / qii[i], 0.0), C)
            if new != alpha[i]:
                w += (new - alpha[i]) * y[i] * Z[i]
                alpha[i] = new
        primal = _primal(w, Z, y, C)
        dual = alpha.sum() - 0.5 * (w @ w)
        gap = primal - dual
        if gap <= tol * max(1.0, abs(primal)):
            break
    else:
        warnings.warn(f"hinge-loss fit stopped at duality gap {gap:.3g}", RuntimeWarning, stacklevel=3)
    return w, gap


def _fit_calibration(f, y01):
    """Logistic regression of 0/1 labels on margins: returns (slope, intercept)."""

    def objective(theta):
        a, b = theta
        z = a * f + b
        # -log-likelihood: log(1 + e^z) - y z
        nll = np.sum(np.logaddexp(0.0, z) - y01 * z) + 0.5 * CALIBRATION_RIDGE * a * a
        r = expit(z) - y01
        return nll, np.array([r @ f + CALIBRATION_RIDGE * a, r.sum()])

    prior = y01.mean()
    theta0 = np.array([1.0, math.log(prior / (1.0 - prior))])
    res = minimize(objective, theta0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    return float(res.x[0]), float(res.x[1])


def train(
    features: np.ndarray,
    labels,
    feature_names=None,
    *,
    C: float = 1.0,
    tol: float = 1e-6,
    max_epochs: int = 10000,
) -> LinearModel:
    """Fit the calibrated linear classifier.

    ``labels`` is a boolean/0-1 array with 1 (True) for case. Zero-variance
    columns are dropped with a warning; if none remain, the model predicts the
    training prevalence for everyone.
    """
    X = np.asarray(features, dtype=float)
    y01 = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] != y01.size:
        raise InputError("features must be samples x features matching the labels")
    if np.isnan(X).any():
        raise InputError("features contain missing values; impute first")
    if (y01 == 1).sum() < 2 or (y01 == 0).sum() < 2:
        raise DegenerateDataError("training needs at least 2 samples per class")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(X.shape[1])]

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    keep = scale > 0
    if not keep.all():
        dropped = [n for n, k in zip(names, keep) if not k]
        warnings.warn(f"dropping zero-variance features: {dropped}", RuntimeWarning, stacklevel=2)
    names = [n for n, k in zip(names, keep) if k]
    X, mean, scale = X[:, keep], mean[keep], scale[keep]
    prior = y01.mean()
    if not names:
        return LinearModel((), mean, scale, np.zeros(0), 0.0, 0.0, math.log(prior / (1 - prior)))

    Z = (X - mean) / scale
    Za = np.hstack([Z, np.ones((Z.shape[0], 1))])
    y = 2.0 * y01 - 1.0
    w, gap = _fit_hinge(Za, y, C, tol, max_epochs)
    weights, bias = w[:-1].copy(), float(w[-1])
    f = Z @ weights + bias
    slope, intercept = _fit_calibration(f, y01)
    return LinearModel(tuple(names), mean, scale, weights, bias, slope, intercept, float(gap))


def _check(posteriors, truths):
    p = np.asarray(posteriors, dtype=float)
    y = np.asarray(truths)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise InputError("posteriors and truths must be equal-length 1-D arrays")
    if np.any((p < 0) | (p > 1)) or np.isnan(p).any():
        raise InputError("posteriors must lie in [0, 1]")
    if not np.isin(y, (0, 1)).all():
        raise InputError("truths must be binary")
    return p, y.astype(float)


def metric_error(posteriors, truths) -> float:
    p, y = _check(posteriors, truths)
    return float(np.mean((p >= 0.5) != (y == 1)))


def metric_gbs(posteriors, truths) -> float:
    p, y = _check(posteriors, truths)
    return float(np.mean((p - y) ** 2))


def metric_bcm(posteriors, truths) -> float:
    p, y = _check(posteriors, truths)
    return float(np.mean(np.where(y == 1, p, 1.0 - p)))


def metric_aupr(posteriors, truths) -> float:
    p, y = _check(posteriors, truths)
    n_pos = y.sum()
    if n_pos == 0:
        raise InputError("AUPR needs at least one positive")
    order = np.argsort(-p, kind="stable")
    p, y = p[order], y[order]
    # last index of each group of tied scores
    ends = np.flatnonzero(np.r_[p[1:] != p[:-1], True])
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


METRICS = ("error", "gbs", "bcm", "aupr")


def all_metrics(posteriors, truths) -> dict[str, float]:
    out = {
        "error": metric_error(posteriors, truths),
        "gbs": metric_gbs(posteriors, truths),
        "bcm": metric_bcm(posteriors, truths),
    }
    out["aupr"] = metric_aupr(posteriors, truths) if np.any(np.asarray(truths) == 1) else float("nan")
    return out


@dataclass(frozen=True)
class MetricsRow:
    time_label: str
    cohort: str  # "train" or "test"
    n_features: int
    error: float = float("nan")
    gbs: float = float("nan")
    bcm: float = float("nan")
    aupr: float = float("nan")
    empty: bool = False
    n_samples: int = 0


def time_features(matrix: LongitudinalMatrix, genes, time_label: str):
    """Samples x genes expression at one time point (NaN where missing)."""
    t = matrix.time_index(time_label)
    missing = [g for g in genes if g not in matrix.gene_index]
    if missing:
        raise InputError(f"signature genes absent from matrix: {missing[:10]}")
    idx = [matrix.gene_index[g] for g in genes]
    X = matrix.values[idx][:, :, t].T.copy()
    observed = matrix.present[:, :, t].any(axis=0)  # subjects measured at this time
    return X, observed


def _impute(X, fill):
    return np.where(np.isnan(X), fill[None, :], X)


def evaluate_at_time(
    signature: Signature,
    train_matrix: LongitudinalMatrix,
    train_labels: PhenotypeLabels,
    time_label: str,
    test_matrix: LongitudinalMatrix | None = None,
    test_labels: PhenotypeLabels | None = None,
    *,
    C: float = 1.0,
) -> list[MetricsRow]:
    """Train on the signature genes selected at ``time_label`` and score both cohorts.

    Subjects with no measurement at all at that time point are left out;
    remaining missing feature values are filled with training-set feature means.
    """
    genes = signature.genes_at(time_label)
    cohorts = [("train", train_matrix, train_labels)]
    if test_matrix is not None and time_label in test_matrix.time_labels:
        cohorts.append(("test", test_matrix, test_labels))
    if not genes:
        return [MetricsRow(time_label, c, 0, empty=True) for c, _, _ in cohorts]

    X, observed = time_features(train_matrix, genes, time_label)
    y = train_labels.case_mask(train_matrix.subjects)
    X, y = X[observed], y[observed]
    counts = (~np.isnan(X)).sum(axis=0)
    fill = np.where(counts > 0, np.nansum(X, axis=0) / np.maximum(counts, 1), 0.0)
    model = train(_impute(X, fill), y, genes, C=C)

    rows = []
    for cohort, matrix, labels in cohorts:
        Xc, obs = time_features(matrix, genes, time_label)
        yc = labels.case_mask(matrix.subjects)[obs]
        p = model.predict_proba(_impute(Xc[obs], fill)[:, [genes.index(f) for f in model.features]])
        m = all_metrics(p, yc.astype(int))
        rows.append(MetricsRow(time_label, cohort, len(genes), n_samples=int(obs.sum()), **m))
    return rows


def evaluate(
    signature: Signature,
    train_matrix: LongitudinalMatrix,
    train_labels: PhenotypeLabels,
    test_matrix: LongitudinalMatrix | None = None,
    test_labels: PhenotypeLabels | None = None,
    *,
    C: float = 1.0,
) -> list[MetricsRow]:
    """Metrics for every time point of the training matrix (and test matrix, where present)."""
    rows = []
    for t in train_matrix.time_labels:
        rows.extend(evaluate_at_time(signature, train_matrix, train_labels, t, test_matrix, test_labels, C=C))
    return rows


def metrics_table(rows: list[MetricsRow]) -> str:
    """TSV with metrics as rows and ``<cohort>:<time>`` columns, train columns first."""
    ordered = [r for r in rows if r.cohort == "train"] + [r for r in rows if r.cohort == "test"]
    header = ["metric"] + [f"{r.cohort}:{r.time_label}" for r in ordered]

    def cell(r, value, pct=False):
        if r.empty or math.isnan(value):
            return "NA"
        return f"{100 * value:.2f}" if pct else f"{value:.3f}"

    lines = ["\t".join(header)]
    lines.append("\t".join(["# of genes"] + [str(r.n_features) for r in ordered]))
    lines.append("\t".join(["Error (%)"] + [cell(r, r.error, pct=True) for r in ordered]))
    lines.append("\t".join(["GBS"] + [cell(r, r.gbs) for r in ordered]))
    lines.append("\t".join(["BCM"] + [cell(r, r.bcm) for r in ordered]))
    lines.append("\t".join(["AUPR"] + [cell(r, r.aupr) for r in ordered]))
    return "\n".join(lines) + "\n"

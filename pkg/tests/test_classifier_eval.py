import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samgsr.classifier_eval import (
    all_metrics,
    evaluate,
    metric_aupr,
    metric_bcm,
    metric_error,
    metric_gbs,
    metrics_table,
    train,
)
from samgsr.dataset import load_expression, load_labels
from samgsr.errors import DegenerateDataError, InputError
from samgsr.reduction import Signature, SignatureEntry, read_signature


def aupr_oracle(scores, truths):
    """Average precision: mean precision at the rank of each positive (ties as one block)."""
    scores, truths = np.asarray(scores), np.asarray(truths)
    total = 0.0
    for s in np.unique(scores)[::-1]:
        at = scores >= s
        block = scores == s
        precision = truths[at].sum() / at.sum()
        total += precision * truths[block].sum()
    return total / truths.sum()


def test_metric_examples():
    p, y = [1, 1, 0, 0], [1, 1, 0, 0]
    assert (metric_error(p, y), metric_gbs(p, y), metric_bcm(p, y), metric_aupr(p, y)) == (0, 0, 1, 1)
    p = [0, 0, 1, 1]
    assert (metric_error(p, y), metric_gbs(p, y), metric_bcm(p, y)) == (1, 1, 0)
    half = np.full(4, 0.5)
    assert metric_gbs(half, y) == 0.25 and metric_bcm(half, y) == 0.5


def test_metric_input_validation():
    with pytest.raises(InputError):
        metric_gbs([0.2, 1.5], [0, 1])
    with pytest.raises(InputError):
        metric_gbs([0.2], [0, 1])
    with pytest.raises(InputError):
        metric_gbs([0.2, 0.3], [0, 2])
    with pytest.raises(InputError):
        metric_aupr([0.2, 0.3], [0, 0])


def test_aupr_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        y = rng.integers(0, 2, n)
        y[0] = 1
        p = np.round(rng.random(n), 1)  # plenty of ties
        assert metric_aupr(p, y) == pytest.approx(aupr_oracle(p, y), abs=1e-12)


def test_aupr_matches_sklearn():
    sk = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(2)
    for _ in range(50):
        y = rng.integers(0, 2, 40)
        y[0] = 1
        p = rng.random(40)
        assert metric_aupr(p, y) == pytest.approx(sk.average_precision_score(y, p), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40))
def test_metric_ranges(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([int(b) for _, b in pairs])
    for name, value in all_metrics(p, y).items():
        if not np.isnan(value):
            assert 0.0 <= value <= 1.0, name


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_rank_metrics_invariant_to_monotone_transform(seed, power):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 25)
    y[0] = 1
    p = rng.random(25)
    # p -> p^a / (p^a + (1-p)^a) is strictly increasing and fixes 0.5
    q = p**power / (p**power + (1 - p) ** power)
    assert metric_aupr(q, y) == pytest.approx(metric_aupr(p, y), abs=1e-12)
    assert metric_error(q, y) == metric_error(p, y)


def test_random_score_aupr_tends_to_prevalence():
    rng = np.random.default_rng(3)
    values = []
    for _ in range(1000):
        y = (rng.random(400) < 0.3).astype(int)
        if y.sum() == 0:
            continue
        values.append(metric_aupr(rng.random(400), y))
    assert abs(np.mean(values) - 0.3) <= 0.05


def _separable(rng, n=60):
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    return X, y


def test_separable_training_error_zero():
    X, y = _separable(np.random.default_rng(4))
    model = train(X, y, ["a", "b"])
    p = model.predict_proba(X)
    assert metric_error(p, y) == 0
    assert metric_gbs(p, y) < 1e-6 and metric_bcm(p, y) > 1 - 1e-6
    # stopping rule: duality gap relative to the primal objective
    Z = (X - model.mean) / model.scale
    w = np.r_[model.weights, model.bias]
    primal = 0.5 * w @ w + np.maximum(0, 1 - (2 * y - 1) * (Z @ model.weights + model.bias)).sum()
    assert 0 <= model.duality_gap <= 1e-6 * max(1.0, primal)


def test_shuffled_labels_error_near_balance():
    rng = np.random.default_rng(5)
    X, y = _separable(rng)
    errors = []
    for _ in range(50):
        ys = rng.permutation(y)
        errors.append(metric_error(train(X, ys).predict_proba(X), ys))
    balance = min(y.mean(), 1 - y.mean())
    assert balance - 0.15 <= np.mean(errors) <= balance + 0.05


def test_calibration_mean_tracks_prevalence():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] + rng.normal(scale=2, size=80) > 0.5).astype(int)
    p = train(X, y).predict_proba(X)
    assert abs(p.mean() - y.mean()) <= 0.1


def test_constant_feature_dropped():
    X = np.ones((10, 1))
    y = np.array([1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        model = train(X, y, ["flat"])
    assert model.features == ()
    np.testing.assert_allclose(model.predict_proba(X), 0.6)
    assert model.predict(X).all()


def test_training_needs_both_classes():
    with pytest.raises(DegenerateDataError):
        train(np.zeros((4, 1)), [1, 1, 1, 0])
    with pytest.raises(InputError):
        train(np.array([[np.nan], [1.0], [2.0], [3.0]]), [1, 1, 0, 0])


def test_standardization_invariance():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(50, 3))
    y = (X @ [1.0, -0.5, 0.2] + rng.normal(scale=0.5, size=50) > 0).astype(int)
    base = train(X, y).predict(X)
    scaled = X * [1000.0, 0.001, 7.0]
    np.testing.assert_array_equal(train(scaled, y).predict(scaled), base)


def _separable_inputs(fixtures_dir):
    m = load_expression(fixtures_dir / "separable_train_expr.tsv")
    labels = load_labels(fixtures_dir / "separable_train_labels.tsv", subjects=m.subjects)
    tm = load_expression(fixtures_dir / "separable_test_expr.tsv")
    tl = load_labels(fixtures_dir / "separable_test_labels.tsv", subjects=tm.subjects)
    return m, labels, tm, tl


def test_evaluate_separable_fixture(fixtures_dir):
    m, labels, tm, tl = _separable_inputs(fixtures_dir)
    sig = read_signature(fixtures_dir / "separable_signature.tsv", time_labels=m.time_labels)
    rows = evaluate(sig, m, labels, tm, tl)
    assert len(rows) == 6
    for r in rows:
        assert r.error == 0 and r.aupr == 1
        assert r.gbs == pytest.approx(0, abs=1e-6) and r.bcm == pytest.approx(1, abs=1e-6)


def test_evaluate_empty_day_flagged(fixtures_dir):
    m, labels, tm, tl = _separable_inputs(fixtures_dir)
    sig = Signature((SignatureEntry("SEP1", 0, "day0", 1.0, ""), SignatureEntry("SEP1", 2, "day3", 1.0, "")), tuple(m.time_labels))
    rows = evaluate(sig, m, labels, tm, tl)
    day1 = [r for r in rows if r.time_label == "day1"]
    assert all(r.empty and r.n_features == 0 for r in day1)
    assert all(not r.empty and r.error == 0 for r in rows if r.time_label != "day1")
    table = metrics_table(rows).splitlines()
    assert table[0].split("\t") == ["metric", "train:day0", "train:day1", "train:day3", "test:day0", "test:day1", "test:day3"]
    assert table[1].split("\t") == ["# of genes", "1", "0", "1", "1", "0", "1"]
    assert table[2].split("\t")[2] == "NA"


def test_evaluate_gene_mismatch(fixtures_dir):
    m, labels, _, _ = _separable_inputs(fixtures_dir)
    sig = Signature((SignatureEntry("NOPE", 0, "day0", 1.0, ""),), tuple(m.time_labels))
    with pytest.raises(InputError):
        evaluate(sig, m, labels)


def test_evaluate_imputes_missing_with_training_means(fixtures_dir):
    m, labels, _, _ = _separable_inputs(fixtures_dir)
    values = m.values.copy()
    values[0, 3, 0] = np.nan
    from samgsr.dataset import LongitudinalMatrix

    holey = LongitudinalMatrix.from_arrays(m.genes, m.subjects, m.time_labels, values)
    sig = Signature((SignatureEntry("SEP1", 0, "day0", 1.0, ""), SignatureEntry("SEP2", 0, "day0", 1.0, "")), tuple(m.time_labels))
    rows = evaluate(sig, holey, labels)
    assert rows[0].n_samples == 20 and rows[0].error == 0

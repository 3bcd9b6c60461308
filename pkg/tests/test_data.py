from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from pilearn.data import (
    AnnotatorModel,
    LabeledDataset,
    agreement_rate,
    categorical_rows,
    flip_labels,
    make_synthetic,
    relabel,
    sample_temperature,
    sample_temperatures,
    select_policy,
    temper_distribution,
    temper_rows,
    train_annotator_ensemble,
)
from pilearn.training import rng_stream


def test_make_synthetic_separable_limit_has_perfect_nearest_centroid():
    ds = make_synthetic(4, 200, 8, cluster_spread=1e-9, seed=0)
    centroids = np.stack([ds.X[ds.y_clean == k].mean(axis=0) for k in range(4)])
    nearest = np.linalg.norm(ds.X[:, None, :] - centroids[None], axis=2).argmin(axis=1)
    assert np.array_equal(nearest, ds.y_clean)


def test_make_synthetic_classes_balanced_within_sampling_error():
    ds = make_synthetic(4, 4000, 8, cluster_spread=0.3, seed=1)
    counts = np.bincount(ds.y_clean, minlength=4)
    result = stats.chisquare(counts)
    assert result.pvalue > 0.01


def test_make_synthetic_is_deterministic():
    a = make_synthetic(3, 50, 5, 0.2, seed=7)
    b = make_synthetic(3, 50, 5, 0.2, seed=7)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.y_clean, b.y_clean)
    c = make_synthetic(3, 50, 5, 0.2, seed=8)
    assert not np.array_equal(a.X, c.X)


def test_make_synthetic_validates_arguments():
    with pytest.raises(ValueError):
        make_synthetic(1, 10, 4, 0.2, seed=0)
    with pytest.raises(ValueError):
        make_synthetic(3, 10, 1, 0.2, seed=0)


def test_dataset_subset_and_mislabeled_mask():
    ds = make_synthetic(3, 30, 4, 0.2, seed=2)
    noisy = ds.y_clean.copy()
    noisy[:10] = (noisy[:10] + 1) % 3
    ds = ds.with_noise(noisy)
    assert ds.mislabeled_mask.sum() == 10
    sub = ds.subset(np.arange(5))
    assert len(sub) == 5
    assert np.array_equal(sub.ids, ds.ids[:5])


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError, match="labels"):
        LabeledDataset(X=np.zeros((2, 2)), y_clean=np.array([0, 3]),
                       y_noisy=np.array([0, 1]), n_classes=2, ids=np.arange(2))


def test_flip_labels_flips_exactly_the_requested_fraction_to_wrong_classes():
    ds = make_synthetic(4, 1000, 6, 0.2, seed=3)
    noisy = flip_labels(ds, 0.1, seed=4)
    mask = noisy.mislabeled_mask
    assert mask.sum() == 100
    assert np.all(noisy.y_noisy[mask] != noisy.y_clean[mask])
    again = flip_labels(ds, 0.1, seed=4)
    assert np.array_equal(noisy.y_noisy, again.y_noisy)


def test_temperature_mean_matches_gamma_mean_at_beta_half():
    rng = rng_stream(0, "temperature")
    draws = sample_temperatures(0.5, 100_000, rng)
    assert draws.mean() == pytest.approx(2.0, rel=0.02)


def test_smaller_beta_gives_stochastically_larger_temperatures():
    low = sample_temperatures(0.1, 10_000, rng_stream(1, "t"))
    high = sample_temperatures(0.5, 10_000, rng_stream(1, "t"))
    assert np.median(low) > np.median(high)


def test_temperatures_are_strictly_positive():
    draws = sample_temperatures(2.0, 10_000, rng_stream(2, "t"))
    assert np.all(draws > 0.0)
    assert sample_temperature(2.0, rng_stream(3, "t")) > 0.0


def test_temperature_rejects_nonpositive_beta():
    with pytest.raises(ValueError, match="beta"):
        sample_temperatures(0.0, 5, rng_stream(0, "t"))


def test_temper_identity_at_temperature_one():
    p = np.array([0.5, 0.3, 0.2])
    assert np.allclose(temper_distribution(p, 1.0), p, atol=1e-12)


def test_temper_uniform_stays_uniform():
    p = np.full(4, 0.25)
    for t in (0.01, 1.0, 50.0):
        assert np.allclose(temper_distribution(p, t), 0.25, atol=1e-12)


def test_temper_high_temperature_approaches_uniform():
    out = temper_distribution(np.array([0.7, 0.2, 0.1]), 100.0)
    assert np.all(np.abs(out - 1.0 / 3.0) < 0.01)
    assert out.sum() == pytest.approx(1.0)


def test_temper_preserves_argmax_for_finite_temperature():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5), size=20)
    for t in (0.2, 1.0, 30.0):
        tempered = temper_rows(p, np.full(20, t))
        assert np.array_equal(tempered.argmax(axis=1), p.argmax(axis=1))


def test_temper_handles_exact_zeros_via_floor():
    out = temper_distribution(np.array([1.0, 0.0]), 2.0)
    assert np.all(np.isfinite(out))
    assert out.sum() == pytest.approx(1.0)
    assert out[0] > out[1]


def test_temper_rejects_nonpositive_temperature():
    with pytest.raises(ValueError, match="temperature"):
        temper_distribution(np.array([0.5, 0.5]), 0.0)


def test_categorical_rows_match_distribution_chi_square():
    p = np.array([0.5, 0.3, 0.15, 0.05])
    draws = categorical_rows(np.tile(p, (100_000, 1)), rng_stream(4, "cat"))
    counts = np.bincount(draws, minlength=4)
    result = stats.chisquare(counts, f_exp=p * 100_000)
    assert result.pvalue > 0.01


def _fixed_annotators(proba_rows, n_params=(1_000, 2_000)):
    """Annotators with constant predictive rows regardless of x."""
    out = []
    for i, row in enumerate(proba_rows):
        row = np.asarray(row)

        def proba(X, _row=row):
            return np.tile(_row, (len(X), 1))

        out.append(AnnotatorModel(identifier=f"fixed{i}", predict_proba=proba,
                                  clean_accuracy=0.8, n_parameters=n_params[i % len(n_params)]))
    return out


def _toy_clean(n=300, k=3, seed=0):
    return make_synthetic(k, n, 4, 0.1, seed=seed)


def test_relabel_sharp_temperature_limit_recovers_argmax_labels():
    clean = _toy_clean()
    annotators = _fixed_annotators([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]])
    record = relabel(clean, annotators, beta=1e7, rng=rng_stream(5, "relabel"))
    assert np.mean(record.labels[:, 0] == 0) > 0.99
    assert np.mean(record.labels[:, 1] == 1) > 0.99


def test_relabel_confidences_are_tempered_probability_of_drawn_label():
    clean = _toy_clean(n=50)
    annotators = _fixed_annotators([[0.6, 0.3, 0.1]])
    record = relabel(clean, annotators, beta=0.5, rng=rng_stream(6, "relabel"))
    assert np.all(record.confidences > 0.0)
    assert np.all(record.confidences <= 1.0)
    # reproduce the tempered rows with the same stream and check the gather
    rng = rng_stream(6, "relabel")
    pred = annotators[0].predict_proba(clean.X)
    temperatures = sample_temperatures(0.5, len(clean), rng)
    tempered = temper_rows(pred, temperatures)
    drawn = categorical_rows(tempered, rng)
    assert np.array_equal(record.labels[:, 0], drawn)
    expected = tempered[np.arange(len(clean)), drawn]
    assert np.allclose(record.confidences[:, 0], expected, atol=1e-15)


def test_relabel_requires_annotators():
    with pytest.raises(ValueError, match="annotator"):
        relabel(_toy_clean(n=10), [], beta=0.5, rng=rng_stream(0, "r"))


def test_uniform_agreement_decreases_as_beta_decreases():
    clean = _toy_clean(n=500, seed=9)
    annotators = _fixed_annotators([[0.96, 0.02, 0.02]] * 3)
    rates = {}
    for beta in (0.5, 0.1):
        record = relabel(clean, annotators, beta=beta, rng=rng_stream(10, "relabel"))
        y_noisy, _ = select_policy(record, clean.y_clean, "uniform",
                                   rng_stream(10, "policy"))
        # constant annotator rows predict class 0; agreement only on class 0
        rates[beta] = np.mean(y_noisy[clean.y_clean == 0] == 0)
    assert rates[0.1] < rates[0.5]


def test_worst_policy_always_picks_an_incorrect_label_when_available():
    clean = _toy_clean(n=400, seed=11)
    annotators = _fixed_annotators([[0.7, 0.2, 0.1], [0.3, 0.5, 0.2]])
    record = relabel(clean, annotators, beta=0.5, rng=rng_stream(12, "relabel"))
    y_noisy, chosen = select_policy(record, clean.y_clean, "worst",
                                    rng_stream(13, "policy"))
    any_wrong = (record.labels != clean.y_clean[:, None]).any(axis=1)
    assert np.all(y_noisy[any_wrong] != clean.y_clean[any_wrong])
    assert np.all(y_noisy[~any_wrong] == clean.y_clean[~any_wrong])
    # chosen indices actually index the emitted labels
    assert np.array_equal(record.labels[np.arange(len(clean)), chosen], y_noisy)


def test_worst_agreement_equals_fraction_with_all_annotators_correct():
    clean = _toy_clean(n=400, seed=14)
    annotators = _fixed_annotators([[0.5, 0.3, 0.2]] * 4)
    record = relabel(clean, annotators, beta=0.8, rng=rng_stream(15, "relabel"))
    y_noisy, _ = select_policy(record, clean.y_clean, "worst",
                               rng_stream(16, "policy"))
    all_correct = (record.labels == clean.y_clean[:, None]).all(axis=1)
    assert agreement_rate(clean.y_clean, y_noisy) == pytest.approx(all_correct.mean())


def test_worst_agreement_never_exceeds_uniform_agreement():
    clean = _toy_clean(n=300, seed=17)
    annotators = _fixed_annotators([[0.6, 0.25, 0.15], [0.4, 0.4, 0.2], [0.2, 0.6, 0.2]])
    for seed in range(5):
        record = relabel(clean, annotators, beta=0.3, rng=rng_stream(seed, "relabel"))
        worst, _ = select_policy(record, clean.y_clean, "worst", rng_stream(seed, "p1"))
        uniform, _ = select_policy(record, clean.y_clean, "uniform", rng_stream(seed, "p2"))
        assert (agreement_rate(clean.y_clean, worst)
                <= agreement_rate(clean.y_clean, uniform))


def test_select_policy_rejects_unknown_policy():
    clean = _toy_clean(n=10)
    annotators = _fixed_annotators([[0.9, 0.05, 0.05]])
    record = relabel(clean, annotators, beta=0.5, rng=rng_stream(0, "r"))
    with pytest.raises(ValueError, match="policy"):
        select_policy(record, clean.y_clean, "best", rng_stream(0, "p"))


def test_trained_annotator_ensemble_has_metadata_and_valid_rows():
    pool = make_synthetic(3, 480, 4, 0.15, seed=20)
    train = pool.subset(np.arange(240))
    holdout = pool.subset(np.arange(240, 480))
    annotators = train_annotator_ensemble(train, holdout, widths=(8, 12),
                                          epochs=6, seed=22)
    assert len(annotators) == 2
    for annotator in annotators:
        probs = annotator.predict_proba(holdout.X[:50])
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert annotator.n_parameters > 0
        assert 0.0 <= annotator.clean_accuracy <= 1.0
    # separable-ish clusters: trained annotators beat chance comfortably
    assert all(a.clean_accuracy > 0.6 for a in annotators)

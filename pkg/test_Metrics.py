import numpy as np
import pytest
from scipy import linalg

from Discriminator import Discriminator
from Metrics import (PSNR_CAP, ConditioningError, FamilyClassifier,
                     _psd_sqrt, embed_features, evaluate_pairs,
                     feature_matrix, fid, inception_score_from_posteriors,
                     motion_profile, psnr, quality, quality_report,
                     r_squared, relative_improvement, rmse, srcc)


def test_perfect_prediction():
    """Tests RMSE 0, R^2 1, SRCC 1 and capped PSNR for pred = ref.

    Returns
    -------
    None
    """
    ref = np.sin(np.linspace(0, 3, 50))
    entries = quality(ref, ref)
    assert entries["rmse"] == 0.0
    assert entries["r2"] == 1.0
    assert entries["psnr"] == PSNR_CAP
    assert entries["srcc"] == pytest.approx(1.0, abs=1e-12)


def test_reversed_ranks():
    """Tests that a reversed increasing series has SRCC -1.

    Returns
    -------
    None
    """
    ref = np.arange(10.0) ** 2
    assert srcc(ref[::-1], ref) == pytest.approx(-1.0, abs=1e-12)


def test_psnr_twenty_db():
    """Tests PSNR 20 dB for peak 1 and RMSE 0.1.

    Returns
    -------
    None
    """
    ref = np.array([1.0, -1.0, 1.0, -1.0])
    assert rmse(ref + 0.1, ref) == pytest.approx(0.1)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)


def test_constant_reference():
    """Tests that R^2 and SRCC are undefined for a constant reference.

    Returns
    -------
    None
    """
    ref = np.full(5, 2.0)
    pred = np.arange(5.0)
    assert r_squared(pred, ref) is None
    assert srcc(pred, ref) is None
    assert psnr(pred, ref) is not None


@pytest.mark.parametrize("pred, ref", [
    (np.zeros(3), np.zeros(4)),  # length mismatch
    (np.zeros(1), np.zeros(1)),  # too short
    (np.array([0.0, np.nan]), np.zeros(2)),  # NaN
])
def test_metrics_reject(pred, ref):
    """Tests that malformed inputs raise ValueError.

    Returns
    -------
    None
    """
    with pytest.raises(ValueError):
        rmse(pred, ref)


def test_srcc_is_rank_invariant(rng):
    """Tests that SRCC is unchanged by a strictly increasing map of the
    prediction.

    Returns
    -------
    None
    """
    ref = rng.normal(size=40)
    pred = ref + rng.normal(scale=0.5, size=40)
    assert srcc(np.exp(pred), ref) == pytest.approx(srcc(pred, ref),
                                                    abs=1e-12)


def test_r_squared_falls_with_noise(rng):
    """Tests that R^2 decreases as prediction noise grows.

    Returns
    -------
    None
    """
    ref = np.sin(np.linspace(0, 6, 200))
    noise = rng.normal(size=200)
    scores = [r_squared(ref + level * noise, ref)
              for level in (0.0, 0.1, 0.5, 1.0)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_quality_report_channels(rng):
    """Tests per-channel entries and the aggregate mean.

    Returns
    -------
    None
    """
    refs = [(rng.uniform(0, 10, size=(2, 8)), rng.normal(size=8))
            for _ in range(3)]
    preds = [(f + 0.1, th) for f, th in refs]
    report = quality_report(preds, refs, names=["BFS", "RF", "theta"])
    assert set(report.channels) == {"BFS", "RF", "theta"}
    assert report.channels["theta"]["rmse"] == 0.0
    assert report.channels["BFS"]["rmse"] == pytest.approx(0.1)
    assert report.aggregate["rmse"] == pytest.approx(0.2 / 3)
    with pytest.raises(ValueError):
        quality_report(preds, refs, names=["theta"])


def test_inception_score_identities():
    """Tests IS = 1 for identical posteriors and IS = K for evenly split
    one-hot posteriors.

    Returns
    -------
    None
    """
    same = np.tile([0.1, 0.2, 0.3, 0.4], (6, 1))
    assert inception_score_from_posteriors(same) == pytest.approx(1.0,
                                                                  abs=1e-12)
    one_hot = np.tile(np.eye(4), (2, 1))
    assert inception_score_from_posteriors(one_hot) == pytest.approx(
        4.0, abs=1e-12)


def test_inception_score_matches_kl_sum(rng):
    """Tests a random posterior set against a direct KL summation.

    Returns
    -------
    None
    """
    p = rng.dirichlet(np.ones(5), size=20)
    marginal = p.mean(axis=0)
    kl = [sum(row[k] * np.log(row[k] / marginal[k]) for k in range(5))
          for row in p]
    assert inception_score_from_posteriors(p) == pytest.approx(
        np.exp(np.mean(kl)), abs=1e-10)


def test_inception_score_bounds(rng):
    """Tests 1 <= IS <= K on 1000 random posterior sets.

    Returns
    -------
    None
    """
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        p = rng.dirichlet(np.full(k, 0.3), size=int(rng.integers(2, 10)))
        score = inception_score_from_posteriors(p)
        assert 1.0 <= score <= k


def test_inception_score_rejects():
    """Tests that one posterior or non-normalized rows raise ValueError.

    Returns
    -------
    None
    """
    with pytest.raises(ValueError):
        inception_score_from_posteriors(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        inception_score_from_posteriors(np.array([[0.5, 0.6], [1.0, 0.0]]))


def test_fid_identical_sets(rng):
    """Tests that identical feature sets are at distance 0.

    Returns
    -------
    None
    """
    x = rng.normal(size=(50, 4))
    assert fid(x, x) < 1e-9


def test_fid_mean_shift(rng):
    """Tests that a pure mean shift d gives |d|^2.

    Returns
    -------
    None
    """
    x = rng.normal(size=(50, 3))
    d = np.array([1.0, -2.0, 0.5])
    assert fid(x, x + d) == pytest.approx(np.sum(d ** 2), abs=1e-9)


def test_fid_matches_sqrtm_oracle(rng):
    """Tests random 3-dimensional Gaussian sets against a direct evaluation
    with scipy's matrix square root.

    Returns
    -------
    None
    """
    a = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 3))
    b = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 3)) + 0.5
    sa, sb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root = linalg.sqrtm(sa @ sb).real
    expected = (np.sum((a.mean(axis=0) - b.mean(axis=0)) ** 2) +
                np.trace(sa) + np.trace(sb) - 2.0 * np.trace(root))
    assert fid(a, b) == pytest.approx(expected, abs=1e-6)
    assert fid(b, a) == pytest.approx(fid(a, b), abs=1e-9)


def test_fid_rejects():
    """Tests that a single vector or unequal widths raise ValueError.

    Returns
    -------
    None
    """
    with pytest.raises(ValueError):
        fid(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        fid(np.ones((4, 3)) * np.arange(4)[:, None],
            np.ones((4, 2)) * np.arange(4)[:, None])


def test_indefinite_covariance():
    """Tests that a clearly indefinite matrix raises ConditioningError
    naming the set.

    Returns
    -------
    None
    """
    with pytest.raises(ConditioningError, match="real"):
        _psd_sqrt(np.diag([1.0, -1.0]), "real")


def test_family_classifier_learns_labels(rng):
    """Tests that the family classifier fits well-separated features and
    returns normalized posteriors.

    Returns
    -------
    None
    """
    centres = np.array([[3, 0], [-3, 0], [0, 3], [0, -3]], dtype=float)
    labels = np.repeat(np.arange(4), 10)
    features = centres[labels] + rng.normal(scale=0.3, size=(40, 2))
    classifier = FamilyClassifier(2, n_classes=4, seed=0)
    losses = classifier.fit(features, labels, epochs=300, lr=0.05)
    assert losses[-1] < losses[0]
    posteriors = classifier.predict_proba(features)
    assert np.allclose(posteriors.sum(axis=1), 1.0)
    assert np.mean(np.argmax(posteriors, axis=1) == labels) >= 0.95
    with pytest.raises(ValueError):
        classifier.fit(features, labels + 1, epochs=1)


def test_motion_profile():
    """Tests the per-frame mean and standard deviation across cycles.

    Returns
    -------
    None
    """
    mean, std = motion_profile([np.zeros(4), np.full(4, 2.0)])
    assert np.array_equal(mean, np.ones(4))
    assert np.array_equal(std, np.ones(4))


def test_relative_improvement():
    """Tests the signed percentage change and the undefined cases.

    Returns
    -------
    None
    """
    assert relative_improvement(12.0, 10.0) == pytest.approx(20.0)
    assert relative_improvement(8.0, 10.0, higher_is_better=False) == \
        pytest.approx(20.0)
    assert relative_improvement(1.0, 0.0) is None
    assert relative_improvement(None, 1.0) is None


def test_feature_matrix_hand_traced():
    """Tests feature_matrix of a one-bank, one-kernel discriminator with
    hand-set weights against the features worked out by hand, one row per
    pair and rows of different cycle lengths allowed.

    Returns
    -------
    None
    """
    disc = Discriminator(1, bank_widths=(2,), bank_kernels=(1,))
    p = disc.params.tensors
    p["bank2_W"][...] = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    p["bank2_b"][...] = 0.0
    p["hw_WH"][...] = 1.0
    p["hw_bH"][...] = 0.0
    p["hw_WT"][...] = 0.0
    p["hw_bT"][...] = 0.0
    pairs = [(np.array([[1.0, 2.0, 0.5]]), np.array([0.0, 1.0, -3.0])),
             (np.array([[0.0, 0.0, 0.0, 4.0]]),
              np.array([0.25, 0.0, 0.5, 0.0]))]
    # taps f[m] + theta[m + 1]: max(2, -1) = 2 and max(0, 0.5, 0) = 0.5;
    # an open gate of 1/2 gives 0.5 * relu(x) + 0.5 * x = x
    features = feature_matrix(pairs, disc)
    assert features.shape == (2, 1)
    assert np.allclose(features[:, 0], [2.0, 0.5], rtol=0, atol=1e-12)
    assert np.array_equal(features[1], embed_features(pairs[1], disc))


def test_self_comparison(rng):
    """Tests that references evaluated against themselves give R^2 1,
    RMSE 0 and FID below 1e-9.

    Returns
    -------
    None
    """
    refs = [(rng.uniform(0, 5, size=(2, 12)), rng.normal(size=12))
            for _ in range(6)]
    disc = Discriminator(2, bank_widths=(2, 4), bank_kernels=(3, 3))
    report = evaluate_pairs(refs, refs, feature_net=disc)
    assert report["channels"]["theta"]["r2"] == 1.0
    assert report["aggregate"]["rmse"] == 0.0
    assert report["fid"] < 1e-9
    assert "inception_score" not in report

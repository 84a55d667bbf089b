import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special, stats

from NNCore import Adam, LayerParams, glorot_uniform, softmax_cross_entropy

PSNR_CAP = 200.0
EIG_TOL = 1e-10


class ConditioningError(ArithmeticError):
    """Raised when a covariance is too indefinite to take a square root."""


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.size != ref.size:
        raise ValueError("pred and ref differ in length (%d vs %d)"
                         % (pred.size, ref.size))
    if ref.size < 2:
        raise ValueError("at least 2 points are needed")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(ref))):
        raise ValueError("pred or ref contains NaN or Inf")
    return pred, ref


def rmse(pred, ref):
    pred, ref = _pair(pred, ref)
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


def r_squared(pred, ref):
    """1 - SSE / SST; None when ref is constant."""
    pred, ref = _pair(pred, ref)
    sst = np.sum((ref - ref.mean()) ** 2)
    if sst == 0:
        return None
    return float(1.0 - np.sum((pred - ref) ** 2) / sst)


def psnr(pred, ref):
    """20 log10(max|ref| / RMSE) in dB, capped for near-exact predictions."""
    pred, ref = _pair(pred, ref)
    peak = float(np.max(np.abs(ref)))
    error = rmse(pred, ref)
    if error <= peak * 1e-10:
        return PSNR_CAP
    if peak == 0:
        return None
    return float(min(20.0 * np.log10(peak / error), PSNR_CAP))


def srcc(pred, ref):
    """Spearman rank correlation with averaged ties; None when either
    series is constant."""
    pred, ref = _pair(pred, ref)
    rp = stats.rankdata(pred)
    rr = stats.rankdata(ref)
    if np.ptp(rp) == 0 or np.ptp(rr) == 0:
        return None
    return float(np.clip(np.corrcoef(rp, rr)[0, 1], -1.0, 1.0))


def quality(pred, ref):
    """RMSE, R^2, PSNR and SRCC of one predicted series.

    Undefined entries (constant references) are None rather than NaN.

    Returns
    -------
    entries:    dict
                Keys rmse, r2, psnr, srcc.
    """
    return {"rmse": rmse(pred, ref), "r2": r_squared(pred, ref),
            "psnr": psnr(pred, ref), "srcc": srcc(pred, ref)}


@dataclass
class QualityReport:
    """Per-channel and aggregate quality entries.

    Attributes
    ----------
    channels:   dict
                channel name -> quality() entries over the concatenated
                cycles of that channel.
    aggregate:  dict
                Mean of each metric over the channels where it is defined.
    """
    channels: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self):
        return {"channels": self.channels, "aggregate": self.aggregate}


def quality_report(pred_pairs, ref_pairs, names=None):
    """Quality entries for every force channel and the angle.

    Parameters
    ----------
    pred_pairs: list of (numpy array (N, L), numpy array (L,))
    ref_pairs:  list of (numpy array (N, L), numpy array (L,))
    names:      list of str, optional
                N + 1 channel names; force_<n> and theta by default.

    Returns
    -------
    report: QualityReport
    """
    if len(pred_pairs) != len(ref_pairs) or not ref_pairs:
        raise ValueError("need one prediction per reference")
    n_muscles = np.asarray(ref_pairs[0][0]).shape[0]
    if names is None:
        names = ["force_%d" % n for n in range(n_muscles)] + ["theta"]
    if len(names) != n_muscles + 1:
        raise ValueError("expected %d channel names" % (n_muscles + 1))

    def channel(pairs, index):
        if index < n_muscles:
            return np.concatenate([np.asarray(f)[index] for f, _ in pairs])
        return np.concatenate([np.asarray(th) for _, th in pairs])

    report = QualityReport()
    for index, name in enumerate(names):
        report.channels[name] = quality(channel(pred_pairs, index),
                                        channel(ref_pairs, index))
    for key in ("rmse", "r2", "psnr", "srcc"):
        values = [entry[key] for entry in report.channels.values()
                  if entry[key] is not None]
        report.aggregate[key] = float(np.mean(values)) if values else None
    return report


def inception_score_from_posteriors(posteriors):
    """exp(mean_x KL(p(c|x) || p(c))) of an n x K posterior matrix.

    Returns
    -------
    score:  float
            In [1, K].
    """
    posteriors = np.asarray(posteriors, dtype=float)
    if posteriors.ndim != 2 or posteriors.shape[0] < 2:
        raise ValueError("inception score needs at least 2 posteriors")
    if np.any(posteriors < 0) or not np.allclose(posteriors.sum(axis=1), 1):
        raise ValueError("posterior rows must be probability vectors")
    marginal = posteriors.mean(axis=0)
    kl = special.rel_entr(posteriors, marginal[None, :]).sum(axis=1)
    mean_kl = np.clip(np.mean(kl), 0.0, np.log(posteriors.shape[1]))
    return float(np.exp(mean_kl))


class FamilyClassifier:
    """Softmax head over excitation families on frozen discriminator
    features; supplies the class posteriors of the inception score."""
    def __init__(self, feature_width, n_classes=4, seed=0):
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.params = LayerParams()
        self.params.add("W", glorot_uniform(rng, (n_classes, feature_width),
                                            feature_width, n_classes))
        self.params.add("b", np.zeros(n_classes))

    def state_dict(self, prefix="classifier."):
        return self.params.state_dict(prefix)

    def load_state_dict(self, tensors, prefix="classifier."):
        self.params.load_state_dict(tensors, prefix)

    def logits(self, features):
        return features @ self.params["W"].T + self.params["b"]

    def predict_proba(self, features):
        return special.softmax(self.logits(features), axis=-1)

    def fit(self, features, labels, epochs=200, lr=0.01):
        """Full-batch Adam on the cross-entropy of family labels.

        Returns
        -------
        losses: list of float
        """
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 0 or
                            labels.max() >= self.n_classes):
            raise ValueError("family labels must lie in 0..%d"
                             % (self.n_classes - 1))
        optimizer = Adam(lr)
        losses = []
        for _ in range(epochs):
            self.params.zero_grad()
            loss, dlogits = softmax_cross_entropy(self.logits(features),
                                                  labels)
            self.params.accumulate("W", dlogits.T @ features)
            self.params.accumulate("b", dlogits.sum(axis=0))
            optimizer.step(self.params)
            losses.append(loss)
        return losses


def embed_features(pair, discriminator):
    """Feature vector of one (forces, theta) pair."""
    forces, theta = pair
    return discriminator.features(discriminator.embed(forces, theta))


def feature_matrix(pairs, discriminator):
    """One embed_features row per (forces, theta) pair."""
    return np.stack([embed_features(pair, discriminator) for pair in pairs])


def inception_score(samples, discriminator, classifier):
    """Inception score of (forces, theta) samples under the family
    classifier on the discriminator's features."""
    if len(samples) < 2:
        raise ValueError("inception score needs at least 2 samples")
    posteriors = classifier.predict_proba(feature_matrix(samples,
                                                         discriminator))
    return inception_score_from_posteriors(posteriors)


def _psd_sqrt(sigma, name):
    sigma = 0.5 * (sigma + sigma.T)
    values, vectors = linalg.eigh(sigma)
    tol = EIG_TOL * max(1.0, float(np.max(np.abs(values))))
    if np.any(values < -tol):
        raise ConditioningError("covariance of the %s set has eigenvalue "
                                "%.3g below -%.3g" % (name, values.min(),
                                                      tol))
    values = np.maximum(values, 0.0)
    return (vectors * np.sqrt(values)) @ vectors.T


def _covariance(features, name):
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("the %s set needs at least 2 feature vectors"
                         % name)
    if features.shape[0] < features.shape[1] + 1:
        logging.warning("%s set has %d vectors in %d dimensions; its "
                        "covariance is rank deficient"
                        % (name, features.shape[0], features.shape[1]))
    return features.mean(axis=0), np.atleast_2d(np.cov(features,
                                                       rowvar=False))


def fid(real_features, gen_features):
    """Frechet distance between Gaussian fits of two feature sets.

    |mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2)). The trace of the
    square root equals the sum of singular values of S_r^(1/2) S_g^(1/2),
    whose squares are the eigenvalues of the symmetric
    S_r^(1/2) S_g S_r^(1/2).

    Parameters
    ----------
    real_features:  numpy array (n_r, d)
    gen_features:   numpy array (n_g, d)

    Returns
    -------
    distance:   float
                >= 0.
    """
    mu_r, sigma_r = _covariance(real_features, "real")
    mu_g, sigma_g = _covariance(gen_features, "generated")
    if mu_r.shape != mu_g.shape:
        raise ValueError("feature widths differ (%d vs %d)"
                         % (mu_r.size, mu_g.size))
    sqrt_r = _psd_sqrt(sigma_r, "real")
    sqrt_g = _psd_sqrt(sigma_g, "generated")
    cross = np.sum(linalg.svdvals(sqrt_r @ sqrt_g))
    distance = (np.sum((mu_r - mu_g) ** 2) + np.trace(sigma_r) +
                np.trace(sigma_g) - 2.0 * cross)
    return float(max(distance, 0.0))


def motion_profile(series_list):
    """Per-frame mean and standard deviation across cycles.

    Parameters
    ----------
    series_list:    list of numpy array
                    Equal-shaped series, frames on the last axis.

    Returns
    -------
    mean:   numpy array
    std:    numpy array
    """
    stacked = np.stack([np.asarray(s, dtype=float) for s in series_list])
    return stacked.mean(axis=0), stacked.std(axis=0)


def relative_improvement(value, baseline, higher_is_better=True):
    """Percentage by which value beats baseline; None for a zero
    baseline."""
    if value is None or baseline is None or baseline == 0:
        return None
    change = (value - baseline) / abs(baseline) * 100.0
    return float(change if higher_is_better else -change)


def evaluate_pairs(pred_pairs, ref_pairs, feature_net=None, classifier=None,
                   names=None):
    """Quality and diversity of generated (force, angle) sequences.

    RMSE, R^2, PSNR and SRCC against the references, plus, given a feature
    network, the Frechet distance to the references in its feature space
    and (with a classifier) the inception score.

    Returns
    -------
    report: dict
    """
    report = quality_report(pred_pairs, ref_pairs, names).to_dict()
    if feature_net is not None and len(ref_pairs) >= 2:
        report["fid"] = fid(feature_matrix(ref_pairs, feature_net),
                            feature_matrix(pred_pairs, feature_net))
        if classifier is not None:
            report["inception_score"] = inception_score(
                pred_pairs, feature_net, classifier)
    return report

import logging

import numpy as np
from scipy import special

from NNCore import (Adam, LayerParams, TrainingAbortedError, affine,
                    affine_backward, as_tensor, conv1d, conv1d_backward,
                    glorot_uniform, highway, highway_backward, max_over_time,
                    max_over_time_backward, relu, softmax_cross_entropy)

REAL = 1
GENERATED = 0


class Discriminator:
    """Scores an embedded (force, angle) sequence as physics-real.

    Convolution banks of several widths run over the (N + 1)-channel
    sequence, each followed by ReLU and max-over-time; the pooled vectors
    are concatenated, passed through a highway layer and an affine softmax
    head over {generated, real}.

    Attributes
    ----------
    params:         LayerParams
                    The discriminator weights (phi), including the frozen
                    standardization statistics std_mean and std_scale.
    bank_widths:    tuple of int
    bank_kernels:   tuple of int
    """
    def __init__(self, n_muscles, bank_widths=(2, 4, 8),
                 bank_kernels=(8, 8, 8), seed=0):
        if len(bank_widths) != len(bank_kernels) or not bank_widths:
            raise ValueError("one kernel count per bank width is required")
        rng = np.random.default_rng(seed)
        self.n_muscles = n_muscles
        self.bank_widths = tuple(int(w) for w in bank_widths)
        self.bank_kernels = tuple(int(k) for k in bank_kernels)
        c = n_muscles + 1
        width = self.feature_width

        params = LayerParams()
        params.add("std_mean", np.zeros(c), trainable=False)
        params.add("std_scale", np.ones(c), trainable=False)
        for w, k in zip(self.bank_widths, self.bank_kernels):
            params.add("bank%d_W" % w, glorot_uniform(rng, (k, c, w), c * w,
                                                       k))
            params.add("bank%d_b" % w, np.zeros(k))
        params.add("hw_WH", glorot_uniform(rng, (width, width), width, width))
        params.add("hw_bH", np.zeros(width))
        params.add("hw_WT", glorot_uniform(rng, (width, width), width, width))
        params.add("hw_bT", np.full(width, -1.0))
        params.add("head_W", glorot_uniform(rng, (2, width), width, 2))
        params.add("head_b", np.zeros(2))
        self.params = params

    @property
    def feature_width(self):
        return sum(self.bank_kernels)

    @property
    def min_frames(self):
        return max(self.bank_widths)

    def copy(self):
        twin = Discriminator.__new__(Discriminator)
        twin.__dict__.update(self.__dict__)
        twin.params = self.params.copy()
        return twin

    def state_dict(self, prefix="discriminator."):
        return self.params.state_dict(prefix)

    def load_state_dict(self, tensors, prefix="discriminator."):
        self.params.load_state_dict(tensors, prefix)

    def embed(self, forces, theta, standardize=True):
        """Stacks forces and angle into an (N + 1) x L matrix.

        Parameters
        ----------
        forces:         numpy array (N, L) or (M, N, L)
        theta:          numpy array (L,) or (M, L)
        standardize:    bool
                        Apply the stored per-channel mean and scale.

        Returns
        -------
        E:  numpy array (..., N + 1, L)
        """
        forces = as_tensor(forces, "forces")
        theta = as_tensor(theta, "theta")
        if (forces.ndim != theta.ndim + 1 or
                forces.shape[-2] != self.n_muscles or
                forces.shape[:-2] != theta.shape[:-1] or
                forces.shape[-1] != theta.shape[-1]):
            raise ValueError("forces %s and theta %s do not form an "
                             "embedding with N = %d"
                             % (forces.shape, theta.shape, self.n_muscles))
        E = np.concatenate([forces, theta[..., None, :]], axis=-2)
        if standardize:
            E = ((E - self.params["std_mean"][:, None]) /
                 self.params["std_scale"][:, None])
        return E

    def embed_pairs(self, pairs, standardize=True):
        """Embeds a list of (forces, theta) into an (M, N + 1, L) stack."""
        forces = np.stack([np.asarray(f, dtype=float) for f, _ in pairs])
        theta = np.stack([np.asarray(th, dtype=float) for _, th in pairs])
        return self.embed(forces, theta, standardize)

    def destandardize(self, E):
        return (E * self.params["std_scale"][:, None] +
                self.params["std_mean"][:, None])

    def fit_standardization(self, positives):
        """Stores per-channel mean and scale of the positive samples."""
        if not positives:
            raise ValueError("no positive samples to standardize on")
        E = self.embed_pairs(positives, standardize=False)
        mean = E.mean(axis=(0, 2))
        scale = E.std(axis=(0, 2))
        scale[scale < 1e-8] = 1.0
        self.params.tensors["std_mean"] = mean
        self.params.tensors["std_scale"] = scale

    def _forward(self, E):
        if E.shape[-1] < self.min_frames:
            raise ValueError("sequence of %d frames is shorter than the "
                             "widest bank (%d)" % (E.shape[-1],
                                                   self.min_frames))
        p = self.params
        pools, banks = [], []
        for w in self.bank_widths:
            pre = conv1d(E, p["bank%d_W" % w], p["bank%d_b" % w])
            pooled, index = max_over_time(relu(pre))
            pools.append(pooled)
            banks.append((pre, index))
        pooled = np.concatenate(pools, axis=-1)
        feat, hw_cache = highway(pooled, p["hw_WH"], p["hw_bH"], p["hw_WT"],
                                 p["hw_bT"])
        logits = affine(feat, p["head_W"], p["head_b"])
        return logits, (E, banks, hw_cache, feat)

    def _backward(self, dlogits, cache):
        E, banks, hw_cache, feat = cache
        p = self.params
        dfeat, dW, db = affine_backward(dlogits, feat, p["head_W"])
        p.accumulate("head_W", dW)
        p.accumulate("head_b", db)
        dpooled, dWH, dbH, dWT, dbT = highway_backward(dfeat, hw_cache,
                                                       p["hw_WH"], p["hw_WT"])
        p.accumulate("hw_WH", dWH)
        p.accumulate("hw_bH", dbH)
        p.accumulate("hw_WT", dWT)
        p.accumulate("hw_bT", dbT)
        offset = 0
        for w, k, (pre, index) in zip(self.bank_widths, self.bank_kernels,
                                      banks):
            dact = max_over_time_backward(dpooled[..., offset:offset + k],
                                          index, pre.shape[-1])
            _, dW, db = conv1d_backward(dact * (pre > 0), E,
                                        p["bank%d_W" % w])
            p.accumulate("bank%d_W" % w, dW)
            p.accumulate("bank%d_b" % w, db)
            offset += k

    def logits(self, E):
        return self._forward(as_tensor(E, "E"))[0]

    def features(self, E):
        """Highway output feeding the head; one vector per sequence."""
        return self._forward(as_tensor(E, "E"))[1][3]

    def real_probability(self, logits):
        """Real-class probability from head logits, strictly inside (0, 1)
        however far apart the two logits are."""
        margin = logits[..., REAL] - logits[..., GENERATED]
        return np.clip(special.expit(margin), np.nextafter(0.0, 1.0),
                       np.nextafter(1.0, 0.0))

    def discriminate(self, E):
        """Real-class probability of one embedded sequence."""
        E = as_tensor(E, "E")
        if E.ndim != 2:
            raise ValueError("discriminate expects one (N + 1) x L matrix")
        return float(self.real_probability(self.logits(E)))

    def discriminate_batch(self, E):
        """Real-class probabilities of an (M, N + 1, L) stack."""
        return self.real_probability(self.logits(E))

    def cross_entropy(self, E, labels, accumulate=True):
        """Mean cross-entropy of labelled sequences; optionally accumulates
        its gradient."""
        logits, cache = self._forward(E)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        if accumulate:
            self._backward(dlogits, cache)
        return loss

    def accuracy(self, positives, negatives):
        """Fraction of sequences put on the right side of 0.5."""
        real = self.discriminate_batch(self.embed_pairs(positives))
        fake = self.discriminate_batch(self.embed_pairs(negatives))
        return float((np.sum(real > 0.5) + np.sum(fake <= 0.5)) /
                     (real.size + fake.size))

    def train(self, positives, negatives, k_epochs, lr, clip_norm=5.0):
        """Full-batch cross-entropy training on real vs generated pairs.

        Parameters
        ----------
        positives:  list of (numpy array (N, L), numpy array (L,))
        negatives:  list of (numpy array (N, L), numpy array (L,))
                    Same count as positives.
        k_epochs:   int
        lr:         float
        clip_norm:  float or None

        Returns
        -------
        losses: list of float
        """
        if not positives or not negatives:
            raise ValueError("positive and negative sets must be nonempty")
        if len(positives) != len(negatives):
            raise ValueError("class imbalance: %d positives vs %d negatives"
                             % (len(positives), len(negatives)))
        E = np.concatenate([self.embed_pairs(positives),
                            self.embed_pairs(negatives)])
        labels = np.concatenate([np.full(len(positives), REAL),
                                 np.full(len(negatives), GENERATED)])
        optimizer = Adam(lr, clip_norm=clip_norm)
        losses = []
        for epoch in range(k_epochs):
            self.params.zero_grad()
            loss = self.cross_entropy(E, labels)
            if not np.isfinite(loss):
                diagnostics = {"epoch": epoch, "batch": "full",
                               "grad_norms": self.params.grad_norms()}
                logging.error("discriminator loss is not finite: %s"
                              % diagnostics)
                raise TrainingAbortedError("discriminator loss is not "
                                           "finite", diagnostics)
            optimizer.step(self.params)
            losses.append(loss)
        return losses

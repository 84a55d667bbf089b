import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from NNCore import (LOG_2PI, Adam, LayerParams, TrainingAbortedError,
                    affine, affine_backward, as_tensor, conv1d,
                    conv1d_backward, glorot_uniform, lstm_step,
                    lstm_step_backward, max_over_time,
                    max_over_time_backward, relu, softplus, softplus_inverse)
from PhysicsModel import PhysicsParams, reference_pairs

FORCE_FLOOR = 1e-3


@dataclass
class GenOutput:
    """One generated (force, angle) sequence.

    Attributes
    ----------
    forces:         numpy array (N, L)
                    Muscle forces in N, non-negative.
    theta:          numpy array (L,)
                    Joint angle in rad.
    z:              numpy array (N + 1, L)
                    Gaussian latent the outputs were decoded from.
    mean:           numpy array (N + 1, L)
                    Head means of the latent.
    log_density:    numpy array (L,)
                    Per-frame log-density of z under the output model.
    """
    forces: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    mean: np.ndarray
    log_density: np.ndarray

    @property
    def frames(self):
        return self.theta.size


class Generator:
    """The sEMG -> (force, angle) generator.

    Per frame: a 1 x B channel-mixing convolution, a width-2 temporal
    convolution and a width-2 max-pool produce sEMG features; an LSTM step
    consumes them; the LSTM output concatenated with the pooled features
    feeds an affine head giving the mean of a per-channel Gaussian latent
    with learned log-scale. Forces are force_scale * softplus(latent), the
    angle is the latent itself.

    Attributes
    ----------
    params:     LayerParams
                The generator weights (sigma).
    n_emg:      int
    n_muscles:  int
    """
    def __init__(self, n_emg, n_muscles, conv_filters=16, hidden_size=32,
                 log_scale_init=-2.0, seed=0):
        rng = np.random.default_rng(seed)
        self.n_emg = n_emg
        self.n_muscles = n_muscles
        self.conv_filters = conv_filters
        self.hidden_size = hidden_size
        k, h, b = conv_filters, hidden_size, n_emg
        c = n_muscles + 1

        params = LayerParams()
        params.add("mix_W", glorot_uniform(rng, (k, b, 1), b, k))
        params.add("mix_b", np.zeros(k))
        params.add("time_W", glorot_uniform(rng, (k, k, 2), 2 * k, 2 * k))
        params.add("time_b", np.zeros(k))
        params.add("lstm_W", glorot_uniform(rng, (4 * h, k + h), k + h,
                                            4 * h))
        lstm_b = np.zeros(4 * h)
        lstm_b[h:2 * h] = 1.0
        params.add("lstm_b", lstm_b)
        params.add("head_W", glorot_uniform(rng, (c, h + k), h + k, c))
        params.add("head_b", np.zeros(c))
        params.add("log_scale", np.full(c, float(log_scale_init)))
        params.add("force_scale", np.ones(n_muscles), trainable=False)
        self.params = params

    @property
    def n_channels(self):
        return self.n_muscles + 1

    def copy(self):
        twin = Generator.__new__(Generator)
        twin.__dict__.update(self.__dict__)
        twin.params = self.params.copy()
        return twin

    def state_dict(self, prefix="generator."):
        return self.params.state_dict(prefix)

    def load_state_dict(self, tensors, prefix="generator."):
        self.params.load_state_dict(tensors, prefix)

    def zero_grad(self):
        self.params.zero_grad()

    def _check_emg(self, emg, batched):
        emg = as_tensor(emg, "emg")
        expected = 3 if batched else 2
        if emg.ndim != expected or emg.shape[-2] != self.n_emg:
            raise ValueError("emg must have %d channels on axis -2 and %d "
                             "axes, got shape %s"
                             % (self.n_emg, expected, emg.shape))
        return emg

    def _forward(self, emg):
        p = self.params
        m_pre = conv1d(emg, p["mix_W"], p["mix_b"])
        m = relu(m_pre)
        m_pad = np.concatenate([m[..., :1], m], axis=-1)
        c_pre = conv1d(m_pad, p["time_W"], p["time_b"])
        c = relu(c_pre)
        c_pad = np.concatenate([c[..., :1], c], axis=-1)
        windows = np.moveaxis(sliding_window_view(c_pad, 2, axis=-1), 2, 1)
        pooled, pool_index = max_over_time(windows)

        n_batch, n_frames = emg.shape[0], emg.shape[-1]
        h = np.zeros((n_batch, self.hidden_size))
        cell = np.zeros((n_batch, self.hidden_size))
        hs = np.empty((n_batch, n_frames, self.hidden_size))
        lstm_caches = []
        for t in range(n_frames):
            h, cell, step_cache = lstm_step(pooled[:, t], h, cell,
                                            p["lstm_W"], p["lstm_b"])
            hs[:, t] = h
            lstm_caches.append(step_cache)

        # skip connection: LSTM output concatenated with pooled features
        skip = np.concatenate([hs, pooled], axis=-1)
        mean = np.moveaxis(affine(skip, p["head_W"], p["head_b"]), -1, 1)
        cache = dict(emg=emg, m_pre=m_pre, m_pad=m_pad, c_pre=c_pre,
                     pool_index=pool_index, lstm_caches=lstm_caches,
                     skip=skip)
        return mean, cache

    def _backward(self, dmean, cache):
        p = self.params
        hidden = self.hidden_size
        dmu = np.moveaxis(dmean, 1, -1)
        dskip, dW, db = affine_backward(dmu, cache["skip"], p["head_W"])
        p.accumulate("head_W", dW)
        p.accumulate("head_b", db)

        dhs = dskip[..., :hidden]
        dpooled = dskip[..., hidden:].copy()
        n_batch, n_frames = dhs.shape[0], dhs.shape[1]
        dh_next = np.zeros((n_batch, hidden))
        dc_next = np.zeros((n_batch, hidden))
        for t in reversed(range(n_frames)):
            dx, dh_next, dc_next, dW, db = lstm_step_backward(
                dhs[:, t] + dh_next, dc_next, cache["lstm_caches"][t],
                p["lstm_W"])
            p.accumulate("lstm_W", dW)
            p.accumulate("lstm_b", db)
            dpooled[:, t] += dx

        dwindows = np.moveaxis(
            max_over_time_backward(dpooled, cache["pool_index"], 2), 1, 2)
        dc_pad = np.zeros(dwindows.shape[:-2] + (n_frames + 1,))
        dc_pad[..., :n_frames] += dwindows[..., 0]
        dc_pad[..., 1:] += dwindows[..., 1]
        dc = dc_pad[..., 1:].copy()
        dc[..., 0] += dc_pad[..., 0]

        dc_pre = dc * (cache["c_pre"] > 0)
        dm_pad, dW, db = conv1d_backward(dc_pre, cache["m_pad"],
                                         p["time_W"])
        p.accumulate("time_W", dW)
        p.accumulate("time_b", db)
        dm = dm_pad[..., 1:].copy()
        dm[..., 0] += dm_pad[..., 0]

        dm_pre = dm * (cache["m_pre"] > 0)
        _, dW, db = conv1d_backward(dm_pre, cache["emg"], p["mix_W"])
        p.accumulate("mix_W", dW)
        p.accumulate("mix_b", db)

    def scale(self):
        return np.exp(self.params["log_scale"])

    def decode(self, z):
        """Maps latents (..., N + 1, L) to (forces, theta)."""
        n = self.n_muscles
        forces = self.params["force_scale"][:, None] * softplus(
            z[..., :n, :])
        return forces, z[..., n, :]

    def log_density(self, z, mean):
        """Per-frame Gaussian log-density, summed over channels."""
        log_scale = self.params["log_scale"][:, None]
        u = (z - mean) / np.exp(log_scale)
        return np.sum(-0.5 * u ** 2 - log_scale - 0.5 * LOG_2PI, axis=-2)

    def _output(self, z, mean):
        forces, theta = self.decode(z)
        return GenOutput(forces, theta, z, mean, self.log_density(z, mean))

    def latent_mean(self, emg):
        """Head means (N + 1, L) for one sEMG cycle."""
        emg = self._check_emg(emg, batched=False)
        return self._forward(emg[None])[0][0]

    def mean_output(self, emg):
        """Noise-free (forces, theta) prediction for one sEMG cycle."""
        return self.decode(self.latent_mean(emg))

    def generate(self, emg, noise_seed=None):
        """Samples one output sequence.

        Parameters
        ----------
        emg:        numpy array (B, L)
        noise_seed: int, numpy Generator or None

        Returns
        -------
        output: GenOutput
        """
        rng = np.random.default_rng(noise_seed)
        mean = self.latent_mean(emg)
        eps = rng.standard_normal(mean.shape)
        return self._output(mean + eps * self.scale()[:, None], mean)

    def generate_batch(self, emg_batch, rng):
        """Samples one output per cycle of an (S, B, L) batch.

        Returns
        -------
        outputs:    list of GenOutput
        z:          numpy array (S, N + 1, L)
        """
        emg_batch = self._check_emg(emg_batch, batched=True)
        mean, _ = self._forward(emg_batch)
        eps = rng.standard_normal(mean.shape)
        z = mean + eps * self.scale()[:, None]
        return [self._output(z[i], mean[i]) for i in range(len(z))], z

    def rollout_latents(self, emg, prefix_z, starts, n_rollouts, rng):
        """Completes a latent sequence after each start frame.

        Frames <= start keep prefix_z; later frames are drawn from this
        generator's output model with fresh noise.

        Returns
        -------
        latents:    numpy array (len(starts), n_rollouts, N + 1, L)
        """
        mean = self.latent_mean(emg)
        starts = np.asarray(starts)
        eps = rng.standard_normal((starts.size, n_rollouts) + mean.shape)
        completions = mean + eps * self.scale()[:, None]
        keep = np.arange(mean.shape[-1])[None, :] <= starts[:, None]
        return np.where(keep[:, None, None, :], prefix_z, completions)

    def mc_rollout(self, emg, prefix, t, n_rollouts, seed=None):
        """Monte Carlo completions of a generated prefix.

        Parameters
        ----------
        emg:        numpy array (B, L)
        prefix:     GenOutput
                    Sequence whose frames 0..t are kept.
        t:          int
                    Last kept frame, 0 <= t < L.
        n_rollouts: int
        seed:       int, numpy Generator or None

        Returns
        -------
        completions:    list of GenOutput
        """
        n_frames = prefix.frames
        if not 0 <= t < n_frames:
            raise ValueError("rollout start %d outside 0..%d"
                             % (t, n_frames - 1))
        if n_rollouts < 1:
            raise ValueError("at least one rollout is required")
        rng = np.random.default_rng(seed)
        latents = self.rollout_latents(emg, prefix.z, [t], n_rollouts,
                                       rng)[0]
        mean = self.latent_mean(emg)
        completions = []
        for z in latents:
            output = self._output(z, mean)
            output.mean[:, :t + 1] = prefix.mean[:, :t + 1]
            output.log_density[:t + 1] = prefix.log_density[:t + 1]
            completions.append(output)
        return completions

    def latent_targets(self, forces, theta):
        """Latent values that decode to the given references."""
        scale = self.params["force_scale"][:, None]
        ratio = np.maximum(forces / scale, FORCE_FLOOR)
        return np.concatenate([softplus_inverse(ratio), theta[None, :]],
                              axis=0)

    def fit_output_scale(self, reference_forces):
        """Sets force_scale to the per-channel maximum reference force."""
        peak = np.max(np.stack([np.max(f, axis=1) for f in
                                reference_forces]), axis=0)
        self.params.tensors["force_scale"] = np.maximum(peak, 1e-6)

    def nll(self, emg_batch, target_z, accumulate=True):
        """Gaussian negative log-likelihood per frame of target latents,
        averaged over the batch; optionally accumulates its gradient."""
        mean, cache = self._forward(emg_batch)
        log_scale = self.params["log_scale"]
        scale = np.exp(log_scale)[:, None]
        r = (target_z - mean) / scale
        norm = mean.shape[0] * mean.shape[-1]
        loss = np.sum(0.5 * r ** 2 + log_scale[:, None] +
                      0.5 * LOG_2PI) / norm
        if accumulate:
            self.params.accumulate("log_scale",
                                   np.sum(1.0 - r ** 2, axis=(0, 2)) / norm)
            self._backward(-r / scale / norm, cache)
        return float(loss)

    def score_function(self, emg_batch, z, weights):
        """Accumulates the gradient of (1 / (S L)) sum w_it log G(z_it).

        Parameters
        ----------
        emg_batch:  numpy array (S, B, L)
        z:          numpy array (S, N + 1, L)
                    Emitted latents.
        weights:    numpy array (S, L)

        Returns
        -------
        surrogate:  float
        """
        mean, cache = self._forward(emg_batch)
        scale = self.scale()[:, None]
        u = (z - mean) / scale
        norm = mean.shape[0] * mean.shape[-1]
        w = weights[:, None, :]
        self.params.accumulate("log_scale",
                               np.sum(w * (u ** 2 - 1.0), axis=(0, 2)) /
                               norm)
        self._backward(w * u / scale / norm, cache)
        return float(np.sum(weights * self.log_density(z, mean)) / norm)

    def fit_mle(self, emg_batch, pairs, epochs, lr, clip_norm=5.0):
        """Full-batch Adam on the reference negative log-likelihood.

        Returns
        -------
        losses: list of float
                One entry per epoch.
        """
        emg_batch = self._check_emg(emg_batch, batched=True)
        target = np.stack([self.latent_targets(f, th) for f, th in pairs])
        optimizer = Adam(lr, clip_norm=clip_norm)
        losses = []
        for epoch in range(epochs):
            self.zero_grad()
            loss = self.nll(emg_batch, target)
            if not np.isfinite(loss):
                diagnostics = {"epoch": epoch, "batch": "full",
                               "grad_norms": self.params.grad_norms()}
                logging.error("MLE loss is not finite: %s" % diagnostics)
                raise TrainingAbortedError("MLE loss is not finite",
                                           diagnostics)
            optimizer.step(self.params)
            losses.append(loss)
        if losses:
            logging.info("MLE pretraining: %d epochs, NLL %.4f -> %.4f"
                         % (epochs, losses[0], losses[-1]))
        return losses

    def mle_pretrain(self, dataset, epochs, lr, params=None,
                     force_reference="inverse_dynamics"):
        """Pretrains on the train split of a dataset by maximum likelihood.

        Parameters
        ----------
        dataset:            Dataset
        epochs:             int
        lr:                 float
        params:             PhysicsParams, optional
        force_reference:    str

        Returns
        -------
        losses: list of float
        """
        samples = dataset.split("train")
        if not samples:
            raise ValueError("the dataset has no train split")
        params = params or PhysicsParams.from_config(dataset.config)
        pairs = reference_pairs(samples, params, force_reference)
        emg_batch = np.stack([s.emg for s in samples])
        return self.fit_mle(emg_batch, pairs, epochs, lr)

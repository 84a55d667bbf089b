import json
import logging
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

import Checkpoint
from DataWriter import DataWriter
from Discriminator import Discriminator
from Generator import Generator
from Metrics import (FamilyClassifier, feature_matrix, fid, inception_score,
                     quality_report, relative_improvement)
from MotionSimulator import FAMILIES
from NNCore import GradientDescent, TrainingAbortedError
from PhysicsModel import (MAX_EXPONENT, PhysicsParams, lagrangian_residual,
                          reference_pairs, reward_from_residual)

REWARD_MODES = ("physics", "none", "paper_literal", "positive_square")
STREAMS = {"generator": 1, "discriminator": 2, "temperature": 3,
           "negatives": 4, "epoch": 5, "classifier": 6, "collapse": 7}
CHECKPOINT_FILE = "checkpoint.ckpt"
STATE_FILE = "train_state.json"
LOG_FILE = "train_log.jsonl"
REPORT_FILE = "train_report.json"


@dataclass
class TrainConfig:
    """Every knob of one adversarial training run.

    Attributes
    ----------
    learning_rate:      float
                        Policy-gradient ascent rate.
    epochs:             int
                        Adversarial epochs after pretraining; 0 pretrains
                        only.
    g_steps:            int
    d_steps:            int
    rollouts:           int
                        Monte Carlo completions per frame.
    k_epochs:           int
                        Discriminator epochs per d-step.
    reward_mode:        str
                        physics, none (vanilla GAN) or paper_literal
                        (alias positive_square).
    reward_temperature: str or float
                        "auto" or a positive residual scale.
    force_reference:    str
                        inverse_dynamics or simulated positives.
    snapshot_interval:  int
                        Epochs between rollout-policy snapshots.
    collapse_every:     int
                        Epochs between IS/FID measurements, 0 disables.
    """
    learning_rate: float = 0.01
    epochs: int = 100
    g_steps: int = 1
    d_steps: int = 1
    rollouts: int = 8
    k_epochs: int = 3
    reward_mode: str = "physics"
    reward_temperature: object = "auto"
    force_reference: str = "inverse_dynamics"
    seed: int = 0
    batch_size: int = 16
    mle_epochs: int = 100
    mle_lr: float = 0.01
    d_pretrain_epochs: int = 50
    d_lr: float = 0.005
    conv_filters: int = 16
    hidden_size: int = 32
    log_scale_init: float = -2.0
    bank_widths: tuple = (2, 4, 8)
    bank_kernels: tuple = (8, 8, 8)
    baseline_window: int = 32
    clip_norm: float = 5.0
    snapshot_interval: int = 1
    checkpoint_every: int = 10
    metric_every: int = 1
    collapse_every: int = 0
    plateau_patience: int = 50
    plateau_tol: float = 1e-3
    classifier_epochs: int = 200

    def validate(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.mle_epochs < 0 or \
                self.d_pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        for name in ("g_steps", "d_steps", "rollouts", "k_epochs",
                     "batch_size", "conv_filters", "hidden_size",
                     "baseline_window", "snapshot_interval", "metric_every",
                     "plateau_patience"):
            if int(getattr(self, name)) != getattr(self, name) or \
                    getattr(self, name) < 1:
                raise ValueError("%s must be an integer >= 1" % name)
        if self.checkpoint_every < 0 or self.collapse_every < 0:
            raise ValueError("cadences must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError("reward_mode must be one of %s"
                             % (REWARD_MODES,))
        if self.reward_temperature != "auto" and not (
                isinstance(self.reward_temperature, (int, float)) and
                self.reward_temperature > 0):
            raise ValueError("reward_temperature must be 'auto' or > 0")
        if self.force_reference not in ("inverse_dynamics", "simulated"):
            raise ValueError("force_reference must be inverse_dynamics or "
                             "simulated")
        if len(self.bank_widths) != len(self.bank_kernels):
            raise ValueError("one kernel count per bank width is required")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_dict(self):
        values = asdict(self)
        values["bank_widths"] = list(self.bank_widths)
        values["bank_kernels"] = list(self.bank_kernels)
        return values

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        for key in ("bank_widths", "bank_kernels"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


class RewardBaseline:
    """Moving average of the last `window` mean rewards."""
    def __init__(self, window=32, history=()):
        self.history = deque(history, maxlen=window)

    def value(self):
        if not self.history:
            return 0.0
        return float(np.mean(self.history))

    def update(self, reward):
        self.history.append(float(reward))


def stream(seed, name, epoch=0):
    """Independent generator for a named random stream of a run."""
    return np.random.default_rng([seed, STREAMS[name], epoch])


def structural_rewards(pairs, params, dt, reward_mode="physics",
                       temperature=1.0):
    """Structural reward of each (forces, theta) pair; 1 when the physics
    reward is disabled.

    In the literal exp(+PL^2) mode a reward at the exp(MAX_EXPONENT) cap
    no longer ranks sequences, so saturated batches are logged.
    """
    if reward_mode == "none":
        return np.ones(len(pairs))
    rewards = np.array([reward_from_residual(
        lagrangian_residual(theta, forces, params, dt), temperature,
        reward_mode) for forces, theta in pairs])
    if reward_mode != "physics":
        saturated = int(np.sum(rewards >= np.exp(MAX_EXPONENT)))
        if saturated:
            logging.warning("%s reward saturated at exp(%g) for %d of %d "
                            "sequences" % (reward_mode, MAX_EXPONENT,
                                           saturated, len(pairs)))
    return rewards


def action_value(emg, prefix, t, rollout_generator, discriminator,
                 n_rollouts, seed=None):
    """Discriminator's real probability of a sequence generated up to
    frame t, averaged over Monte Carlo completions.

    Parameters
    ----------
    emg:                numpy array (B, L)
    prefix:             GenOutput
    t:                  int
    rollout_generator:  Generator
                        Policy the completions are sampled from.
    discriminator:      Discriminator
    n_rollouts:         int
    seed:               int, numpy Generator or None

    Returns
    -------
    q:  float
    """
    if not 0 <= t < prefix.frames:
        raise ValueError("frame %d outside 0..%d" % (t, prefix.frames - 1))
    if t == prefix.frames - 1:
        return discriminator.discriminate(
            discriminator.embed(prefix.forces, prefix.theta))
    completions = rollout_generator.mc_rollout(emg, prefix, t, n_rollouts,
                                               seed)
    E = discriminator.embed(np.stack([c.forces for c in completions]),
                            np.stack([c.theta for c in completions]))
    return float(np.mean(discriminator.discriminate_batch(E)))


def action_values(emg, prefix, rollout_generator, discriminator, n_rollouts,
                  rng):
    """action_value for every frame of one sequence at once.

    Returns
    -------
    q:  numpy array (L,)
    """
    n_frames = prefix.frames
    latents = rollout_generator.rollout_latents(
        emg, prefix.z, np.arange(n_frames - 1), n_rollouts, rng)
    forces, theta = rollout_generator.decode(latents)
    E = discriminator.embed(forces.reshape((-1,) + forces.shape[-2:]),
                            theta.reshape(-1, n_frames))
    q = np.empty(n_frames)
    q[:-1] = discriminator.discriminate_batch(E).reshape(
        n_frames - 1, n_rollouts).mean(axis=1)
    q[-1] = discriminator.discriminate(
        discriminator.embed(prefix.forces, prefix.theta))
    return q


def expected_reward(batch, discriminator, params, dt, reward_mode="physics",
                    temperature=1.0):
    """Batch mean of structural reward times the full-sequence action
    value.

    Parameters
    ----------
    batch:          list of (numpy array (B, L), GenOutput)
    discriminator:  Discriminator
    params:         PhysicsParams
    dt:             float

    Returns
    -------
    j:  float
    """
    if not batch:
        raise ValueError("expected_reward needs a nonempty batch")
    outputs = [output for _, output in batch]
    rewards = structural_rewards([(o.forces, o.theta) for o in outputs],
                                 params, dt, reward_mode, temperature)
    q = discriminator.discriminate_batch(discriminator.embed(
        np.stack([o.forces for o in outputs]),
        np.stack([o.theta for o in outputs])))
    return float(np.mean(rewards * q))


def policy_gradient_step(generator, emg_batch, discriminator, cfg, params,
                         dt, rollout_generator=None, baseline=None, rng=None,
                         temperature=1.0):
    """One REINFORCE ascent step of the generator.

    Each emitted frame's log-density gradient is weighted by the
    structural reward of its sequence times the frame's action value,
    minus the moving-average baseline, and averaged over frames and batch.

    Parameters
    ----------
    generator:          Generator
                        Updated in place.
    emg_batch:          numpy array (S, B, L)
    discriminator:      Discriminator
    cfg:                TrainConfig
    params:             PhysicsParams
    dt:                 float
    rollout_generator:  Generator, optional
                        Snapshot policy for rollouts; generator if absent.
    baseline:           RewardBaseline, optional
    rng:                numpy Generator, optional
    temperature:        float

    Returns
    -------
    generator:      Generator
    diagnostics:    dict
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    rollout_generator = rollout_generator or generator
    outputs, z = generator.generate_batch(emg_batch, rng)
    rewards = structural_rewards([(o.forces, o.theta) for o in outputs],
                                 params, dt, cfg.reward_mode, temperature)
    q = np.stack([action_values(emg_batch[i], output, rollout_generator,
                                discriminator, cfg.rollouts, rng)
                  for i, output in enumerate(outputs)])
    frame_rewards = rewards[:, None] * q
    offset = baseline.value() if baseline is not None else 0.0

    generator.zero_grad()
    surrogate = generator.score_function(emg_batch, z,
                                         frame_rewards - offset)
    optimizer = GradientDescent(cfg.learning_rate, clip_norm=cfg.clip_norm,
                                maximize=True)
    norm = optimizer.step(generator.params)
    if baseline is not None:
        baseline.update(np.mean(frame_rewards))

    diagnostics = {"expected_reward": float(np.mean(rewards * q[:, -1])),
                   "mean_structural_reward": float(np.mean(rewards)),
                   "mean_action_value": float(np.mean(q[:, -1])),
                   "baseline": offset,
                   "surrogate": surrogate,
                   "grad_norm": norm}
    return generator, diagnostics


@dataclass
class TrainReport:
    """Everything one run logged.

    Attributes
    ----------
    config:         dict
                    The full TrainConfig.
    seeds:          dict
    tags:           dict
                    reward mode, ablation tag, dataset hash.
    pretrain:       dict
                    MLE and discriminator pretraining curves.
    records:        list of dict
                    One entry per adversarial epoch.
    checkpoints:    list of str
    stopped:        str
                    budget or plateau.
    """
    config: dict
    seeds: dict
    tags: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    stopped: str = "budget"

    def add(self, record):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch %d logged after epoch %d"
                             % (record["epoch"], self.records[-1]["epoch"]))
        for key, value in record.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise TrainingAbortedError("%s is not finite at epoch %d"
                                           % (key, record["epoch"]),
                                           {"record": record})
        self.records.append(record)

    def series(self, key):
        """(epochs, values) of every record carrying key."""
        rows = [(r["epoch"], r[key]) for r in self.records
                if r.get(key) is not None]
        return [e for e, _ in rows], [v for _, v in rows]

    def final(self, key):
        values = self.series(key)[1]
        return values[-1] if values else None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def _pairs_of(outputs):
    return [(o.forces, o.theta) for o in outputs]


def _finite_or_none(value):
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def evaluate_generator(generator, samples, params, force_reference):
    """Quality of the generator's noise-free predictions on samples."""
    refs = reference_pairs(samples, params, force_reference)
    preds = [generator.mean_output(s.emg) for s in samples]
    return quality_report(preds, refs)


class Trainer:
    """Runs pretraining and the adversarial loop for one dataset and
    configuration, optionally persisting logs, checkpoints and resume
    state into out_dir.

    The generator is pretrained by maximum likelihood, the discriminator on
    inverse-dynamics references against generated negatives. Policy-gradient
    updates of the generator (reward = structural reward times the
    discriminator's action value, estimated by Monte Carlo rollouts of a
    snapshot policy) then alternate with discriminator retraining.

    Attributes
    ----------
    generator:      Generator
    rollout:        Generator
                    Snapshot of the generator used for rollouts.
    discriminator:  Discriminator
    feature_net:    Discriminator
                    Frozen copy of the pretrained discriminator whose
                    features define the IS/FID space.
    classifier:     FamilyClassifier or None
    report:         TrainReport
    epoch:          int
                    Last completed adversarial epoch.
    """
    def __init__(self, dataset, cfg, out_dir=None):
        logging.basicConfig(filename="PIGAN_logs.txt",
                            format='%(asctime)s %(levelname)s:%(message)s',
                            datefmt='%m/%d/%Y %I:%M:%S %p')
        cfg.validate()
        self.dataset = dataset
        self.cfg = cfg
        self.writer = DataWriter(out_dir) if out_dir else None
        self.params = PhysicsParams.from_config(dataset.config)
        self.dt = dataset.dt

        self.train_samples = dataset.split("train")
        if not self.train_samples:
            raise ValueError("the dataset has no train split")
        self.val_samples = dataset.split("test") or self.train_samples
        self.emg_train = np.stack([s.emg for s in self.train_samples])
        self.positives = reference_pairs(self.train_samples, self.params,
                                         cfg.force_reference)

        self.generator = Generator(dataset.n_emg, dataset.n_muscles,
                                   cfg.conv_filters, cfg.hidden_size,
                                   cfg.log_scale_init,
                                   seed=[cfg.seed, STREAMS["generator"]])
        self.discriminator = Discriminator(
            dataset.n_muscles, cfg.bank_widths, cfg.bank_kernels,
            seed=[cfg.seed, STREAMS["discriminator"]])
        self.rollout = self.generator.copy()
        self.feature_net = None
        self.classifier = None
        self.baseline = RewardBaseline(cfg.baseline_window)
        self.temperature = None
        self.epoch = 0
        self.val_history = []

        ablation = "vanilla_gan" if cfg.reward_mode == "none" else None
        self.report = TrainReport(
            config=cfg.to_dict(),
            seeds={"train": cfg.seed, "dataset": dataset.seed},
            tags={"reward_mode": cfg.reward_mode, "ablation": ablation,
                  "dataset_hash": dataset.content_hash(),
                  "n_train": len(self.train_samples),
                  "beta": "rollout snapshot every %d epochs"
                          % cfg.snapshot_interval,
                  "positives": cfg.force_reference})

    def _negatives(self, rng):
        outputs, _ = self.generator.generate_batch(self.emg_train, rng)
        return _pairs_of(outputs)

    def _fit_temperature(self):
        if self.cfg.reward_temperature != "auto":
            return float(self.cfg.reward_temperature)
        negatives = self._negatives(stream(self.cfg.seed, "temperature"))
        residuals = [lagrangian_residual(th, f, self.params, self.dt)
                     for f, th in negatives]
        mean = float(np.mean(residuals))
        return mean if mean > 0 and np.isfinite(mean) else 1.0

    def _fit_feature_space(self):
        self.feature_net = self.discriminator.copy()
        labels = [s.family for s in self.train_samples]
        if any(label not in FAMILIES for label in labels):
            logging.warning("cycles without family labels; inception score "
                            "disabled")
            self.classifier = None
            return
        self.classifier = FamilyClassifier(
            self.feature_net.feature_width, len(FAMILIES),
            seed=[self.cfg.seed, STREAMS["classifier"]])
        features = feature_matrix(self.positives, self.feature_net)
        self.classifier.fit(features,
                            [FAMILIES.index(label) for label in labels],
                            self.cfg.classifier_epochs, self.cfg.d_lr)

    def pretrain(self):
        """MLE pretraining of the generator, then discriminator pretraining
        on references against equal-count generated negatives.

        Returns
        -------
        None
        """
        cfg = self.cfg
        self.generator.fit_output_scale([f for f, _ in self.positives])
        mle_losses = self.generator.fit_mle(self.emg_train, self.positives,
                                            cfg.mle_epochs, cfg.mle_lr,
                                            cfg.clip_norm)
        self.rollout = self.generator.copy()
        self.temperature = self._fit_temperature()

        self.discriminator.fit_standardization(self.positives)
        negatives = self._negatives(stream(cfg.seed, "negatives"))
        d_losses = self.discriminator.train(self.positives, negatives,
                                            cfg.d_pretrain_epochs, cfg.d_lr,
                                            cfg.clip_norm)
        self._fit_feature_space()
        self.report.pretrain = {"mle_losses": mle_losses,
                                "d_losses": d_losses,
                                "reward_temperature": self.temperature}
        logging.info("Pretraining done: reward temperature %.4g"
                     % self.temperature)

    def validation_metrics(self):
        """Theta quality of noise-free predictions on the test split."""
        report = evaluate_generator(self.generator, self.val_samples,
                                    self.params, self.cfg.force_reference)
        theta = report.channels["theta"]
        return {"val_rmse_theta": theta["rmse"], "val_r2_theta": theta["r2"],
                "val_srcc_theta": theta["srcc"],
                "val_psnr_theta": theta["psnr"]}

    def collapse_metrics(self, rng):
        """IS and FID of generated test-split sequences in the frozen
        feature space."""
        samples = self.val_samples
        if len(samples) < 2 or self.feature_net is None:
            return {}
        refs = reference_pairs(samples, self.params,
                               self.cfg.force_reference)
        outputs, _ = self.generator.generate_batch(
            np.stack([s.emg for s in samples]), rng)
        generated = _pairs_of(outputs)
        values = {"fid": fid(feature_matrix(refs, self.feature_net),
                             feature_matrix(generated, self.feature_net))}
        if self.classifier is not None:
            values["inception_score"] = inception_score(
                generated, self.feature_net, self.classifier)
        return values

    def train_epoch(self):
        """One adversarial epoch: g_steps policy-gradient steps, a rollout
        snapshot on schedule, then d_steps discriminator retrainings.

        Returns
        -------
        record: dict
        """
        cfg = self.cfg
        epoch = self.epoch + 1
        started = time.perf_counter()
        rng = stream(cfg.seed, "epoch", epoch)
        n_train = len(self.train_samples)

        steps = []
        for _ in range(cfg.g_steps):
            chosen = np.sort(rng.choice(n_train, min(cfg.batch_size, n_train),
                                        replace=False))
            _, diagnostics = policy_gradient_step(
                self.generator, self.emg_train[chosen], self.discriminator,
                cfg, self.params, self.dt, self.rollout, self.baseline, rng,
                self.temperature)
            steps.append(diagnostics)
        if epoch % cfg.snapshot_interval == 0:
            self.rollout = self.generator.copy()

        d_losses = []
        for _ in range(cfg.d_steps):
            negatives = self._negatives(rng)
            if len(negatives) != len(self.positives):
                raise RuntimeError("negative count drifted from positives")
            d_losses.extend(self.discriminator.train(
                self.positives, negatives, cfg.k_epochs, cfg.d_lr,
                cfg.clip_norm))

        record = {"epoch": epoch}
        for key in steps[0]:
            record[key] = float(np.mean([s[key] for s in steps]))
        record["d_loss"] = float(d_losses[-1])
        if epoch % cfg.metric_every == 0:
            record.update(self.validation_metrics())
            self.val_history.append(record["val_rmse_theta"])
        if cfg.collapse_every and epoch % cfg.collapse_every == 0:
            record.update(self.collapse_metrics(
                stream(cfg.seed, "collapse", epoch)))
        record["wall_clock"] = time.perf_counter() - started

        self.report.add(record)
        self.epoch = epoch
        if self.writer:
            self.writer.append_jsonl(LOG_FILE, record)
        logging.info("epoch %d: J %.4f, R %.4f, Q %.4f, D loss %.4f, "
                     "val RMSE %s" % (epoch, record["expected_reward"],
                                      record["mean_structural_reward"],
                                      record["mean_action_value"],
                                      record["d_loss"],
                                      record.get("val_rmse_theta")))
        return record

    def plateaued(self):
        """True once validation RMSE moved less than plateau_tol
        (relative) over the last plateau_patience measurements."""
        patience = self.cfg.plateau_patience
        if len(self.val_history) <= patience:
            return False
        old, new = self.val_history[-1 - patience], self.val_history[-1]
        return abs(new - old) / max(abs(old), 1e-12) < self.cfg.plateau_tol

    def save_checkpoint(self):
        """Writes all weights and the resume state into out_dir.

        Returns
        -------
        path:   str or None
        """
        if not self.writer:
            return None
        tensors = {}
        tensors.update(self.generator.state_dict("generator."))
        tensors.update(self.rollout.state_dict("rollout."))
        tensors.update(self.discriminator.state_dict("discriminator."))
        if self.feature_net is not None:
            tensors.update(self.feature_net.state_dict("feature."))
        if self.classifier is not None:
            tensors.update(self.classifier.state_dict("classifier."))
        path = self.writer.path(CHECKPOINT_FILE)
        Checkpoint.save_checkpoint(path, tensors)
        if path not in self.report.checkpoints:
            self.report.checkpoints.append(path)
        state = {"epoch": self.epoch,
                 "baseline": list(self.baseline.history),
                 "temperature": self.temperature,
                 "val_history": self.val_history,
                 "has_classifier": self.classifier is not None,
                 "report": self.report.to_dict()}
        tmp_path = self.writer.path(STATE_FILE + ".tmp")
        with open(tmp_path, "w") as outfile:
            json.dump(self.writer.convert_np_arrays(state), outfile)
        os.replace(tmp_path, self.writer.path(STATE_FILE))
        return path

    def restore(self):
        """Loads weights and state written by save_checkpoint.

        Returns
        -------
        None
        """
        if not self.writer:
            raise ValueError("restore needs an output directory")
        tensors = Checkpoint.load_checkpoint(self.writer.path(
            CHECKPOINT_FILE))
        state_path = self.writer.path(STATE_FILE)
        if not os.path.isfile(state_path):
            raise FileNotFoundError(state_path)
        with open(state_path) as infile:
            state = json.load(infile)

        self.generator.load_state_dict(tensors, "generator.")
        self.rollout = self.generator.copy()
        self.rollout.load_state_dict(tensors, "rollout.")
        self.discriminator.load_state_dict(tensors, "discriminator.")
        self.feature_net = self.discriminator.copy()
        self.feature_net.load_state_dict(tensors, "feature.")
        if state["has_classifier"]:
            self.classifier = FamilyClassifier(self.feature_net.feature_width,
                                               len(FAMILIES))
            self.classifier.load_state_dict(tensors, "classifier.")
        self.epoch = state["epoch"]
        self.baseline = RewardBaseline(self.cfg.baseline_window,
                                       state["baseline"])
        self.temperature = state["temperature"]
        self.val_history = state["val_history"]
        self.report = TrainReport.from_dict(state["report"])
        logging.info("Resumed at epoch %d" % self.epoch)

    def relocate(self, out_dir):
        """Points the trainer at a new output directory holding the files
        written so far, rewriting the checkpoint paths of the report."""
        old = self.writer
        self.writer = DataWriter(out_dir)
        if old is not None:
            self.report.checkpoints = [
                self.writer.path(os.path.relpath(path, old.out_dir))
                for path in self.report.checkpoints]
            self.save_checkpoint()

    def run(self, resume=False, on_first_checkpoint=None):
        """Pretrains (unless resuming), then trains until the epoch budget
        is spent or validation RMSE plateaus.

        Parameters
        ----------
        resume:                 bool
        on_first_checkpoint:    callable, optional
                                Called with the trainer once the first
                                checkpoint is on disk.

        Returns
        -------
        generator:      Generator
        discriminator:  Discriminator
        report:         TrainReport
        """
        if resume:
            self.restore()
        else:
            self.pretrain()
            self.save_checkpoint()
        if on_first_checkpoint is not None:
            on_first_checkpoint(self)
        while self.epoch < self.cfg.epochs:
            self.train_epoch()
            if self.cfg.checkpoint_every and \
                    self.epoch % self.cfg.checkpoint_every == 0:
                self.save_checkpoint()
            if self.plateaued():
                logging.warning("validation RMSE plateaued at epoch %d"
                                % self.epoch)
                self.report.stopped = "plateau"
                break
        self.save_checkpoint()
        if self.writer:
            self.writer.write_json(REPORT_FILE, self.report.to_dict())
        return self.generator, self.discriminator, self.report


def adversarial_train(dataset, cfg, out_dir=None, resume=False):
    """Runs one full training and returns (generator, discriminator,
    report)."""
    return Trainer(dataset, cfg, out_dir).run(resume)


def _spearman(x, y):
    if len(x) < 2:
        return None
    return _finite_or_none(stats.spearmanr(x, y)[0])


def _ratio(metric, achieved, baseline):
    if achieved is None or baseline is None:
        return None
    if metric == "rmse":
        return None if achieved == 0 else 100.0 * baseline / achieved
    return None if baseline == 0 else 100.0 * achieved / baseline


def lowshot_sweep(dataset, cfg, shot_counts=(1, 10, 20, 40, 60, 80, 100),
                  channel="theta"):
    """Trains from scratch on the first k train cycles for every shot
    count and reports each metric as a percentage of the full-data run.

    RMSE ratios are baseline / achieved so that higher is better for
    every metric.

    Parameters
    ----------
    dataset:        Dataset
    cfg:            TrainConfig
    shot_counts:    iterable of int
    channel:        str
                    Channel whose metrics are compared.

    Returns
    -------
    table:  dict
            baseline metrics, one row per shot count and the Spearman
            correlation of shot count with the R^2 ratio.
    """
    n_train = len(dataset.indices("train"))
    shots = sorted(set(int(k) for k in shot_counts))
    if not shots or shots[0] < 1 or shots[-1] > n_train:
        raise ValueError("shot counts must lie in 1..%d" % n_train)
    params = PhysicsParams.from_config(dataset.config)
    eval_samples = dataset.split("test") or dataset.split("train")

    def run(data):
        generator, _, report = adversarial_train(data, cfg)
        quality = evaluate_generator(generator, eval_samples, params,
                                     cfg.force_reference)
        return quality.channels[channel], len(report.records)

    baseline, baseline_epochs = run(dataset)
    rows = []
    for k in shots:
        if k == n_train:
            achieved, epochs = baseline, baseline_epochs
        else:
            achieved, epochs = run(dataset.subset(k))
        row = {"shots": k, "epochs": epochs, "metrics": achieved}
        for metric in ("psnr", "r2", "rmse", "srcc"):
            row["ratio_" + metric] = _ratio(metric, achieved[metric],
                                            baseline[metric])
        rows.append(row)
        logging.info("low-shot %d: R2 ratio %s" % (k, row["ratio_r2"]))

    defined = [(r["shots"], r["ratio_r2"]) for r in rows
               if r["ratio_r2"] is not None]
    trend = _spearman([s for s, _ in defined], [v for _, v in defined])
    return {"channel": channel, "n_train": n_train, "baseline": baseline,
            "rows": rows, "r2_trend_spearman": trend,
            "dataset_hash": dataset.content_hash()}


def collapse_comparison(dataset, cfg, seeds=(0, 1, 2, 3, 4)):
    """Paired physics-reward vs vanilla runs on the same dataset and seeds,
    comparing FID trajectories in each pair's frozen feature space.

    Returns
    -------
    comparison: dict
                rows (per seed: final FIDs, delta = vanilla - physics,
                percentage by which the physics FID beats the vanilla one,
                FID-vs-epoch Spearman per mode, dataset hashes) and the
                flat trajectory of every measurement.
    """
    every = cfg.collapse_every or 1
    rows, trajectory = [], []
    for seed in seeds:
        row = {"seed": seed}
        for mode, label in (("physics", "physics"), ("none", "vanilla")):
            run_cfg = replace(cfg, seed=seed, reward_mode=mode,
                              collapse_every=every)
            _, _, report = adversarial_train(dataset, run_cfg)
            epochs, fids = report.series("fid")
            is_epochs, scores = report.series("inception_score")
            scores_by_epoch = dict(zip(is_epochs, scores))
            for epoch, value in zip(epochs, fids):
                trajectory.append({"seed": seed, "mode": label,
                                   "epoch": epoch, "fid": value,
                                   "inception_score":
                                       scores_by_epoch.get(epoch)})
            row[label + "_final_fid"] = fids[-1] if fids else None
            row[label + "_fid_trend"] = _spearman(epochs, fids)
            row[label + "_dataset_hash"] = report.tags["dataset_hash"]
        if row["physics_final_fid"] is not None and \
                row["vanilla_final_fid"] is not None:
            row["fid_delta"] = (row["vanilla_final_fid"] -
                                row["physics_final_fid"])
        else:
            row["fid_delta"] = None
        row["fid_improvement"] = relative_improvement(
            row["physics_final_fid"], row["vanilla_final_fid"],
            higher_is_better=False)
        rows.append(row)
        logging.info("collapse seed %d: FID delta %s"
                     % (seed, row["fid_delta"]))
    wins = sum(1 for r in rows if r["fid_delta"] is not None and
               r["fid_delta"] > 0)
    return {"rows": rows, "trajectory": trajectory, "physics_wins": wins,
            "dataset_hash": dataset.content_hash()}

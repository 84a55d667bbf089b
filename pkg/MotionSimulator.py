import hashlib
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import interpolate

FAMILIES = ("sine", "ramp", "mixed_a", "mixed_b")
SPLIT_TAGS = ("train", "test", "eval")


class InstabilityError(ArithmeticError):
    """Raised when the joint integration leaves the physical range."""


@dataclass
class SimConfig:
    """Physical and sampling parameters of the single-joint simulator.

    Attributes
    ----------
    inertia:        float
                    Joint inertia I in kg m^2.
    damping:        float
                    Viscous damping b in N m s / rad.
    gravity_torque: float
                    Gravity torque coefficient G0 = m g l_c in N m.
    max_force:      tuple of float
                    Maximum isometric force per muscle in N.
    moment_sign:    tuple of int
                    +1 for flexors, -1 for extensors.
    moment_arm:     tuple of float
                    Moment arm magnitude per muscle in m.
    activation_tau: float
                    First-order activation time constant in s.
    emg_noise:      float
                    Standard deviation of the multiplicative envelope noise.
    frames:         int
                    Frames per motion cycle.
    dt:             float
                    Seconds per frame.
    seed:           int
                    Seed used when no explicit rng is given.
    muscle_names:   tuple of str
                    Optional channel names used in reports.
    """
    inertia: float = 1.0
    damping: float = 0.5
    gravity_torque: float = 2.0
    max_force: tuple = (50.0, 50.0)
    moment_sign: tuple = (1, -1)
    moment_arm: tuple = (0.02, 0.02)
    activation_tau: float = 0.05
    emg_noise: float = 0.0
    frames: int = 100
    dt: float = 0.01
    seed: int = 0
    muscle_names: tuple = ()

    @classmethod
    def knee(cls, **overrides):
        """Two-muscle flexor/extensor preset with 100-frame cycles."""
        params = dict(muscle_names=("BFS", "RF"))
        params.update(overrides)
        return cls(**params)

    @classmethod
    def wrist(cls, **overrides):
        """Five-muscle wrist preset (two flexors, three extensors) with
        156-frame cycles."""
        params = dict(inertia=0.02,
                      damping=0.2,
                      gravity_torque=1.0,
                      max_force=(50.0, 50.0, 40.0, 40.0, 40.0),
                      moment_sign=(1, 1, -1, -1, -1),
                      moment_arm=(0.01, 0.01, 0.01, 0.01, 0.01),
                      frames=156,
                      muscle_names=("FCR", "FCU", "ECRL", "ECRB", "ECU"))
        params.update(overrides)
        return cls(**params)

    @property
    def n_muscles(self):
        return len(self.max_force)

    @property
    def coupling(self):
        """Torque per unit activation, s_n * rho_n * Fmax_n, in N m."""
        return (np.asarray(self.moment_sign, dtype=float) *
                np.asarray(self.moment_arm, dtype=float) *
                np.asarray(self.max_force, dtype=float))

    def channel_names(self):
        if self.muscle_names:
            return list(self.muscle_names)
        return ["muscle_%d" % n for n in range(self.n_muscles)]

    def validate(self):
        """Checks the physical constraints, raising ValueError on the first
        violated one.

        Returns
        -------
        None
        """
        n = self.n_muscles
        if len(self.moment_sign) != n or len(self.moment_arm) != n:
            raise ValueError("max_force, moment_sign and moment_arm must "
                             "have one entry per muscle")
        if self.muscle_names and len(self.muscle_names) != n:
            raise ValueError("muscle_names must have one entry per muscle")
        if not np.isfinite(self.inertia) or self.inertia <= 0:
            raise ValueError("inertia must be positive")
        if not np.isfinite(self.damping) or self.damping < 0:
            raise ValueError("damping must be non-negative")
        if not np.isfinite(self.gravity_torque):
            raise ValueError("gravity_torque must be finite")
        if any(not np.isfinite(f) or f <= 0 for f in self.max_force):
            raise ValueError("every max_force must be positive")
        if any(not np.isfinite(r) or r <= 0 for r in self.moment_arm):
            raise ValueError("every moment_arm must be positive")
        if any(s not in (1, -1) for s in self.moment_sign):
            raise ValueError("moment_sign entries must be +1 or -1")
        if 1 not in self.moment_sign or -1 not in self.moment_sign:
            raise ValueError("at least one flexor (+1) and one extensor (-1) "
                             "are required")
        if not np.isfinite(self.activation_tau) or self.activation_tau <= 0:
            raise ValueError("activation_tau must be positive")
        if not np.isfinite(self.emg_noise) or self.emg_noise < 0:
            raise ValueError("emg_noise must be non-negative")
        if int(self.frames) != self.frames or self.frames < 3:
            raise ValueError("frames must be an integer >= 3")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ValueError("dt must be positive and finite")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        for key in ("max_force", "moment_sign", "moment_arm", "muscle_names"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


@dataclass
class MotionSample:
    """One normalized motion cycle.

    Attributes
    ----------
    dt:         float
                Seconds per frame.
    emg:        numpy array (B, L)
                Enveloped sEMG, dimensionless.
    force:      numpy array (N, L)
                Muscle forces in N.
    theta:      numpy array (L,)
                Joint angle in rad.
    thetadot:   numpy array (L,) or None
                Angular velocity captured from the integrator.
    thetaddot:  numpy array (L,) or None
                Angular acceleration captured from the integrator.
    family:     str or None
                Excitation family label the cycle was generated from.
    """
    dt: float
    emg: np.ndarray
    force: np.ndarray
    theta: np.ndarray
    thetadot: np.ndarray = None
    thetaddot: np.ndarray = None
    family: str = None

    @property
    def frames(self):
        return self.theta.size

    @property
    def duration(self):
        return (self.frames - 1) * self.dt

    def time(self):
        return np.arange(self.frames) * self.dt

    def validate(self):
        """Raises ValueError if the arrays break the sample invariants."""
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ValueError("dt must be positive and finite")
        if self.emg.ndim != 2 or self.force.ndim != 2 or self.theta.ndim != 1:
            raise ValueError("emg and force must be 2-D, theta 1-D")
        length = self.theta.size
        if length < 3:
            raise ValueError("a motion sample needs at least 3 frames")
        if self.emg.shape[1] != length or self.force.shape[1] != length:
            raise ValueError("emg, force and theta must share the frame "
                             "count (got %d, %d, %d)"
                             % (self.emg.shape[1], self.force.shape[1],
                                length))
        for name in ("emg", "force", "theta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError("%s contains NaN or Inf" % name)
        if np.any(self.emg < 0) or np.any(self.force < 0):
            raise ValueError("emg and force must be non-negative")


@dataclass
class Dataset:
    """An ordered, immutable collection of motion cycles with split tags."""
    samples: list
    config: SimConfig
    splits: list
    family: str = "sine"
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.samples)

    def validate(self):
        if not self.samples:
            raise ValueError("a dataset needs at least one sample")
        if len(self.splits) != len(self.samples):
            raise ValueError("one split tag per sample is required")
        if any(tag not in SPLIT_TAGS for tag in self.splits):
            raise ValueError("split tags must be one of %s" % (SPLIT_TAGS,))
        first = self.samples[0]
        for sample in self.samples:
            if (sample.emg.shape != first.emg.shape or
                    sample.force.shape != first.force.shape or
                    not np.isclose(sample.dt, first.dt, rtol=1e-12)):
                raise ValueError("all samples must share B, N, L and dt")

    @property
    def n_emg(self):
        return self.samples[0].emg.shape[0]

    @property
    def n_muscles(self):
        return self.samples[0].force.shape[0]

    @property
    def frames(self):
        return self.samples[0].frames

    @property
    def dt(self):
        return self.samples[0].dt

    def indices(self, tag):
        return [i for i, split in enumerate(self.splits) if split == tag]

    def split(self, tag):
        return [self.samples[i] for i in self.indices(tag)]

    def subset(self, k):
        """Returns a dataset whose train split is the first k train cycles;
        test and eval cycles are kept.

        Parameters
        ----------
        k:  int
            Number of training cycles to keep.

        Returns
        -------
        subset: Dataset
        """
        train = self.indices("train")
        if k < 1 or k > len(train):
            raise ValueError("shot count %d outside 1..%d" % (k, len(train)))
        keep = set(train[:k])
        chosen = [i for i in range(len(self.samples))
                  if i in keep or self.splits[i] != "train"]
        return Dataset([self.samples[i] for i in chosen], self.config,
                       [self.splits[i] for i in chosen], self.family,
                       self.seed, dict(self.metadata, shots=k))

    def content_hash(self):
        """sha256 over every array and split tag, used to pair runs."""
        digest = hashlib.sha256()
        for sample, tag in zip(self.samples, self.splits):
            digest.update(tag.encode())
            digest.update(np.float64(sample.dt).tobytes())
            for arr in (sample.emg, sample.force, sample.theta):
                digest.update(np.ascontiguousarray(arr,
                                                   dtype="<f8").tobytes())
        return digest.hexdigest()


def simulate_cycle(excitations, cfg, rng=None):
    """Integrates one motion cycle driven by muscle excitations.

    Activation follows da/dt = (u - a) / tau with u held constant over each
    frame, which is solved in closed form; the joint state obeys
    I theta'' + b theta' + G0 sin(theta) = sum_n s_n rho_n Fmax_n a_n and is
    advanced with fixed-step RK4 at the frame spacing.

    Parameters
    ----------
    excitations:    numpy array (N, L)
                    Neural excitations in [0, 1].
    cfg:            SimConfig
                    Simulator configuration.
    rng:            int, numpy Generator, SeedSequence or None
                    Source of the envelope noise (cfg.seed when None).

    Returns
    -------
    sample: MotionSample
    """
    cfg.validate()
    u_all = np.asarray(excitations, dtype=float)
    if u_all.ndim != 2 or u_all.shape[0] != cfg.n_muscles:
        raise ValueError("excitations must be an N x L matrix with N = %d"
                         % cfg.n_muscles)
    if not np.all(np.isfinite(u_all)):
        raise ValueError("excitations contain NaN or Inf")
    if np.any(u_all < 0) or np.any(u_all > 1):
        raise ValueError("excitations must lie in [0, 1]")
    n_frames = u_all.shape[1]
    if n_frames < 3:
        raise ValueError("a cycle needs at least 3 frames")

    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    dt = cfg.dt
    tau = cfg.activation_tau
    coupling = cfg.coupling
    inertia, damping, g0 = cfg.inertia, cfg.damping, cfg.gravity_torque

    activation = np.zeros((cfg.n_muscles, n_frames))
    theta = np.zeros(n_frames)
    omega = np.zeros(n_frames)

    def accel(act, th, om):
        return (coupling @ act - damping * om - g0 * np.sin(th)) / inertia

    a = np.zeros(cfg.n_muscles)
    th, om = 0.0, 0.0
    for k in range(n_frames - 1):
        u = u_all[:, k]
        a_half = u + (a - u) * np.exp(-0.5 * dt / tau)
        a_next = u + (a - u) * np.exp(-dt / tau)

        k1_th, k1_om = om, accel(a, th, om)
        k2_th = om + 0.5 * dt * k1_om
        k2_om = accel(a_half, th + 0.5 * dt * k1_th, k2_th)
        k3_th = om + 0.5 * dt * k2_om
        k3_om = accel(a_half, th + 0.5 * dt * k2_th, k3_th)
        k4_th = om + dt * k3_om
        k4_om = accel(a_next, th + dt * k3_th, k4_th)

        th = th + dt / 6.0 * (k1_th + 2 * k2_th + 2 * k3_th + k4_th)
        om = om + dt / 6.0 * (k1_om + 2 * k2_om + 2 * k3_om + k4_om)
        a = a_next

        if not np.isfinite(th) or abs(th) > 10 * np.pi:
            message = ("joint integration diverged at frame %d "
                       "(theta=%g): inertia=%g, damping=%g, "
                       "gravity_torque=%g, max_force=%s, moment_arm=%s, "
                       "dt=%g" % (k + 1, th, inertia, damping, g0,
                                  cfg.max_force, cfg.moment_arm, dt))
            logging.error(message)
            raise InstabilityError(message)

        activation[:, k + 1] = a
        theta[k + 1] = th
        omega[k + 1] = om

    thetaddot = (coupling @ activation - damping * omega -
                 g0 * np.sin(theta)) / inertia
    force = np.asarray(cfg.max_force, dtype=float)[:, None] * activation

    if cfg.emg_noise > 0:
        eta = rng.normal(0.0, cfg.emg_noise, size=activation.shape)
        emg = np.maximum(0.0, activation * (1.0 + eta))
    else:
        emg = activation.copy()

    sample = MotionSample(dt=dt, emg=emg, force=force, theta=theta,
                          thetadot=omega, thetaddot=thetaddot)
    sample.validate()
    return sample


def _sine_profile(rng, s, n_muscles, signs):
    amp = rng.uniform(0.2, 0.8, size=n_muscles)
    phase = rng.uniform(0.0, 2 * np.pi)
    freq = rng.integers(1, 3)
    # extensors run in antiphase with the flexors
    offsets = np.where(np.asarray(signs) > 0, 0.0, np.pi)
    offsets = offsets + rng.uniform(-0.3, 0.3, size=n_muscles)
    arg = 2 * np.pi * freq * s[None, :] + phase + offsets[:, None]
    return amp[:, None] * (0.5 + 0.5 * np.sin(arg))


def _ramp_profile(rng, s, n_muscles):
    amp = rng.uniform(0.2, 0.8, size=n_muscles)
    peak = rng.uniform(0.3, 0.7, size=n_muscles)
    up = s[None, :] / peak[:, None]
    down = (1.0 - s[None, :]) / (1.0 - peak[:, None])
    return amp[:, None] * np.minimum(up, down)


def _burst_profile(rng, s, n_muscles, signs):
    amp = rng.uniform(0.2, 0.8, size=n_muscles)
    phase = rng.uniform(0.0, 2 * np.pi)
    offsets = np.where(np.asarray(signs) > 0, 0.0, np.pi)
    arg = 2 * np.pi * 2 * s[None, :] + phase + offsets[:, None]
    return amp[:, None] * 0.5 * (1.0 + np.tanh(4.0 * np.sin(arg)))


def make_excitations(label, cfg, rng):
    """Draws one N x L excitation pattern of the given family label."""
    s = np.linspace(0.0, 1.0, cfg.frames)
    n = cfg.n_muscles
    if label == "sine":
        u = _sine_profile(rng, s, n, cfg.moment_sign)
    elif label == "ramp":
        u = _ramp_profile(rng, s, n)
    elif label == "mixed_a":
        u = 0.5 * (_sine_profile(rng, s, n, cfg.moment_sign) +
                   _ramp_profile(rng, s, n))
    elif label == "mixed_b":
        u = _burst_profile(rng, s, n, cfg.moment_sign)
    else:
        raise ValueError("unknown excitation family %r" % label)
    return np.clip(u, 0.0, 1.0)


def split_counts(n_cycles, fractions=(0.8, 0.1, 0.1)):
    """Number of train/test/eval cycles for a split by index."""
    n_train = max(1, int(np.floor(fractions[0] * n_cycles + 0.5)))
    n_train = min(n_train, n_cycles)
    n_test = min(int(np.floor(fractions[1] * n_cycles + 0.5)),
                 n_cycles - n_train)
    return n_train, n_test, n_cycles - n_train - n_test


def make_dataset(n_cycles, cfg, excitation_family="sine", seed=0):
    """Simulates n_cycles cycles with randomized excitations.

    The result is a pure function of (n_cycles, cfg, excitation_family,
    seed). Family "mixed" draws each cycle's label uniformly from
    sine, ramp, mixed_a and mixed_b.

    Parameters
    ----------
    n_cycles:           int
                        Number of cycles, >= 1.
    cfg:                SimConfig
    excitation_family:  str
                        One of sine, ramp, mixed.
    seed:               int

    Returns
    -------
    dataset:    Dataset
                Cycles split 80/10/10 train/test/eval by index.
    """
    if int(n_cycles) != n_cycles or n_cycles < 1:
        raise ValueError("n_cycles must be a positive integer")
    if excitation_family not in ("sine", "ramp", "mixed"):
        raise ValueError("excitation_family must be sine, ramp or mixed")
    cfg.validate()

    children = np.random.SeedSequence(seed).spawn(int(n_cycles))
    samples = []
    for child in children:
        rng = np.random.default_rng(child)
        if excitation_family == "mixed":
            label = FAMILIES[rng.integers(len(FAMILIES))]
        else:
            label = excitation_family
        u = make_excitations(label, cfg, rng)
        sample = simulate_cycle(u, cfg, rng)
        sample.family = label
        samples.append(sample)

    n_train, n_test, n_eval = split_counts(int(n_cycles))
    splits = ["train"] * n_train + ["test"] * n_test + ["eval"] * n_eval
    logging.info("Simulated %d cycles (%s, seed %d): %d/%d/%d split"
                 % (n_cycles, excitation_family, seed, n_train, n_test,
                    n_eval))
    return Dataset(samples, cfg, splits, excitation_family, seed)


def resample_cycle(sample, frames):
    """Linearly interpolates every channel onto `frames` uniform points
    spanning the same duration.

    Parameters
    ----------
    sample: MotionSample
    frames: int
            Target frame count, >= 3.

    Returns
    -------
    resampled:  MotionSample
                Integrator derivatives are not carried over.
    """
    if int(frames) != frames or frames < 3:
        raise ValueError("frames must be an integer >= 3")
    sample.validate()
    t_old = sample.time()
    t_new = np.linspace(0.0, t_old[-1], int(frames))

    def resample(arr):
        interp_funct = interpolate.interp1d(t_old, arr, axis=-1,
                                            kind="linear",
                                            assume_sorted=True)
        return interp_funct(t_new)

    resampled = MotionSample(dt=t_old[-1] / (frames - 1),
                             emg=np.maximum(resample(sample.emg), 0.0),
                             force=np.maximum(resample(sample.force), 0.0),
                             theta=resample(sample.theta),
                             family=sample.family)
    resampled.validate()
    return resampled


def resample_dataset(dataset, frames):
    """Resamples every cycle of a dataset to the same frame count."""
    samples = [resample_cycle(s, frames) for s in dataset.samples]
    return Dataset(samples, dataset.config, list(dataset.splits),
                   dataset.family, dataset.seed,
                   dict(dataset.metadata, resampled_frames=int(frames)))

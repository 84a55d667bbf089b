import logging
from dataclasses import dataclass

import numpy as np

REWARD_SIGNS = ("physics", "paper_literal", "positive_square")
LITERAL_SIGNS = ("paper_literal", "positive_square")
MAX_EXPONENT = 700.0


@dataclass
class PhysicsParams:
    """Coefficients of the joint's Lagrange equation of motion.

    m(theta) is the constant inertia, c(theta, thetadot) the viscous term
    b * thetadot and g(theta) = G0 sin(theta); each muscle contributes
    s_n * rho_n * F_n of torque.

    Attributes
    ----------
    inertia:        float
    damping:        float
    gravity_torque: float
    moment_sign:    tuple of int
    moment_arm:     tuple of float
    """
    inertia: float
    damping: float
    gravity_torque: float
    moment_sign: tuple
    moment_arm: tuple

    @classmethod
    def from_config(cls, cfg):
        """Builds the parameters shared with a SimConfig."""
        cfg.validate()
        return cls(cfg.inertia, cfg.damping, cfg.gravity_torque,
                   tuple(cfg.moment_sign), tuple(cfg.moment_arm))

    @property
    def n_muscles(self):
        return len(self.moment_sign)

    @property
    def lever(self):
        """Signed moment arms s_n * rho_n."""
        return (np.asarray(self.moment_sign, dtype=float) *
                np.asarray(self.moment_arm, dtype=float))

    def validate(self):
        if not np.isfinite(self.inertia) or self.inertia <= 0:
            raise ValueError("inertia must be positive")
        if not np.isfinite(self.damping) or not np.isfinite(
                self.gravity_torque):
            raise ValueError("damping and gravity_torque must be finite")
        if len(self.moment_arm) != len(self.moment_sign):
            raise ValueError("one moment arm per moment sign is required")
        if any(r <= 0 for r in self.moment_arm):
            raise ValueError("moment arms must be positive")
        if 1 not in self.moment_sign or -1 not in self.moment_sign:
            raise ValueError("at least one flexor and one extensor needed")


def _series(theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("theta must be a 1-D series")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains NaN or Inf")
    if theta.size < 3:
        raise ValueError("at least 3 frames are needed for derivatives")
    return theta


def kinematic_derivatives(theta, dt):
    """Angular velocity and acceleration of a sampled angle series.

    Central differences at interior frames; second-order one-sided
    differences at the two endpoints.

    Parameters
    ----------
    theta:  numpy array (L,)
            Joint angle in rad, L >= 3.
    dt:     float
            Seconds per frame.

    Returns
    -------
    thetadot:   numpy array (L,)
    thetaddot:  numpy array (L,)
    """
    theta = _series(theta)
    if not np.isfinite(dt) or dt <= 0:
        raise ValueError("dt must be positive and finite")

    thetadot = np.gradient(theta, dt, edge_order=2)

    thetaddot = np.empty_like(theta)
    thetaddot[1:-1] = (theta[2:] - 2 * theta[1:-1] + theta[:-2]) / dt ** 2
    if theta.size >= 4:
        thetaddot[0] = (2 * theta[0] - 5 * theta[1] + 4 * theta[2] -
                        theta[3]) / dt ** 2
        thetaddot[-1] = (2 * theta[-1] - 5 * theta[-2] + 4 * theta[-3] -
                         theta[-4]) / dt ** 2
    else:
        thetaddot[0] = thetaddot[1]
        thetaddot[-1] = thetaddot[1]
    return thetadot, thetaddot


def muscle_torque(forces, params):
    """Net muscle torque sum_n s_n rho_n F_n per frame."""
    forces = np.asarray(forces, dtype=float)
    if forces.ndim != 2 or forces.shape[0] != params.n_muscles:
        raise ValueError("forces must be N x L with N = %d"
                         % params.n_muscles)
    return params.lever @ forces


def inverse_dynamics_torque(theta, params, dt):
    """Generalized torque needed to realize a motion,
    I theta'' + b theta' + G0 sin(theta).

    Parameters
    ----------
    theta:  numpy array (L,)
    params: PhysicsParams
    dt:     float

    Returns
    -------
    torque: numpy array (L,)
            In N m.
    """
    theta = _series(theta)
    thetadot, thetaddot = kinematic_derivatives(theta, dt)
    return (params.inertia * thetaddot + params.damping * thetadot +
            params.gravity_torque * np.sin(theta))


def distribute_torque(torque, params):
    """Assigns each frame's torque to the first agonist channel.

    Positive torque goes to the first flexor, non-positive torque to the
    first extensor, as |torque| / rho_n; every other channel stays at 0.

    Returns
    -------
    forces: numpy array (N, L)
    """
    torque = np.asarray(torque, dtype=float)
    signs = list(params.moment_sign)
    flexor = signs.index(1)
    extensor = signs.index(-1)
    forces = np.zeros((params.n_muscles, torque.size))
    positive = torque > 0
    forces[flexor, positive] = (torque[positive] /
                                params.moment_arm[flexor])
    forces[extensor, ~positive] = (-torque[~positive] /
                                   params.moment_arm[extensor])
    return forces


def reference_pairs(samples, params, force_reference="inverse_dynamics"):
    """Positive (force, theta) pairs for a list of motion samples.

    Parameters
    ----------
    samples:            list of MotionSample
    params:             PhysicsParams
    force_reference:    str
                        "inverse_dynamics" distributes the inverse-dynamics
                        torque onto agonists; "simulated" keeps the
                        simulator's own forces.

    Returns
    -------
    pairs:  list of (numpy array (N, L), numpy array (L,))
    """
    pairs = []
    for sample in samples:
        if force_reference == "inverse_dynamics":
            torque = inverse_dynamics_torque(sample.theta, params, sample.dt)
            forces = distribute_torque(torque, params)
        elif force_reference == "simulated":
            forces = sample.force.copy()
        else:
            raise ValueError("force_reference must be inverse_dynamics or "
                             "simulated")
        pairs.append((forces, sample.theta.copy()))
    return pairs


def lagrangian_residual(theta, forces, params, dt, thetadot=None,
                        thetaddot=None):
    """Mean squared torque-balance violation over the cycle, in (N m)^2.

    PL = mean_t (I theta''_t + b theta'_t + G0 sin(theta_t)
                 - sum_n s_n rho_n F_t^n)^2

    Parameters
    ----------
    theta:      numpy array (L,)
    forces:     numpy array (N, L)
    params:     PhysicsParams
    dt:         float
    thetadot:   numpy array (L,), optional
                Exact velocities; finite differences are used when absent.
    thetaddot:  numpy array (L,), optional
                Exact accelerations, paired with thetadot.

    Returns
    -------
    residual:   float
    """
    theta = _series(theta)
    forces = np.asarray(forces, dtype=float)
    if not np.all(np.isfinite(forces)):
        raise ValueError("forces contain NaN or Inf")
    if forces.ndim != 2 or forces.shape[1] != theta.size:
        raise ValueError("forces must be N x L with L = %d" % theta.size)
    if thetadot is None or thetaddot is None:
        thetadot, thetaddot = kinematic_derivatives(theta, dt)
    balance = (params.inertia * thetaddot + params.damping * thetadot +
               params.gravity_torque * np.sin(theta) -
               muscle_torque(forces, params))
    return float(np.mean(balance ** 2))


def reward_from_residual(residual, temperature=1.0, reward_sign="physics"):
    """Maps a residual to the structural reward.

    "physics" gives exp(-PL / temperature), in (0, 1]; "paper_literal"
    (alias "positive_square") gives the unbounded exp(+PL^2), with the
    exponent capped at MAX_EXPONENT.
    """
    if reward_sign == "physics":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return float(np.exp(-residual / temperature))
    if reward_sign in LITERAL_SIGNS:
        exponent = residual ** 2
        if exponent > MAX_EXPONENT:
            logging.warning("reward exponent %g capped at %g"
                            % (exponent, MAX_EXPONENT))
            exponent = MAX_EXPONENT
        return float(np.exp(exponent))
    raise ValueError("reward_sign must be one of %s" % (REWARD_SIGNS,))


def structural_reward(theta, forces, params, dt, temperature=1.0,
                      reward_sign="physics"):
    """Physics-consistency reward of a (force, angle) sequence,
    exp(-lagrangian_residual) by default."""
    residual = lagrangian_residual(theta, forces, params, dt)
    return reward_from_residual(residual, temperature, reward_sign)

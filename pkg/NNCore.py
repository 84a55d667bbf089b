import copy
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

LOG_2PI = np.log(2 * np.pi)


class TrainingAbortedError(FloatingPointError):
    """Raised when a loss or gradient stops being finite.

    Attributes
    ----------
    diagnostics:    dict
                    Whatever the caller knew at the time (epoch, batch,
                    per-parameter gradient norms).
    """
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ShapeMismatchError(ValueError):
    """Raised when stored parameters do not fit the data they meet."""


def as_tensor(x, name="x", max_ndim=3):
    """Converts to a float64 array with at most max_ndim axes and finite
    entries."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim > max_ndim:
        raise ValueError("%s has %d axes, at most %d allowed"
                         % (name, x.ndim, max_ndim))
    if not np.all(np.isfinite(x)):
        raise ValueError("%s contains NaN or Inf" % name)
    return x


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return special.expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class LayerParams:
    """Named parameter tensors with one gradient accumulator each.

    Layers are pairs of functions: a forward pass returning its output and
    a cache, and a backward pass mapping the output gradient to input and
    parameter gradients. Inputs may carry leading batch axes; parameter
    gradients are summed over them. All arithmetic is float64.

    Attributes
    ----------
    tensors:    dict
                name -> numpy array
    grads:      dict
                name -> numpy array of the same shape
    frozen:     set
                Names the optimizers must not update (e.g. stored
                statistics).
    """
    def __init__(self):
        self.tensors = {}
        self.grads = {}
        self.frozen = set()

    def add(self, name, value, trainable=True):
        value = np.array(value, dtype=np.float64)
        self.tensors[name] = value
        self.grads[name] = np.zeros_like(value)
        if not trainable:
            self.frozen.add(name)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def trainable_names(self):
        return [n for n in self.tensors if n not in self.frozen]

    def zero_grad(self):
        for name in self.grads:
            self.grads[name].fill(0.0)

    def accumulate(self, name, grad):
        if grad.shape != self.tensors[name].shape:
            raise ValueError("gradient for %s has shape %s, expected %s"
                             % (name, grad.shape, self.tensors[name].shape))
        self.grads[name] += grad

    def grad_norms(self):
        return {name: float(np.linalg.norm(self.grads[name]))
                for name in self.trainable_names()}

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.grads.values())

    def copy(self):
        return copy.deepcopy(self)

    def state_dict(self, prefix=""):
        return {prefix + name: value.copy()
                for name, value in self.tensors.items()}

    def load_state_dict(self, tensors, prefix=""):
        """Copies prefix-named tensors in, checking every shape."""
        for name, value in self.tensors.items():
            key = prefix + name
            if key not in tensors:
                raise ShapeMismatchError("checkpoint is missing %s" % key)
            stored = np.asarray(tensors[key], dtype=np.float64)
            if stored.shape != value.shape:
                raise ShapeMismatchError(
                    "%s: expected shape %s, found %s"
                    % (key, value.shape, stored.shape))
            self.tensors[name] = stored.copy()
        self.zero_grad()


def affine(x, W, b):
    """y = W x + b over the last axis of x."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError("affine shape mismatch: x %s, W %s, b %s"
                         % (x.shape, W.shape, b.shape))
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Returns dx, dW, db."""
    dy2 = dy.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    return dy @ W, dy2.T @ x2, dy2.sum(axis=0)


def conv1d(x, kernels, bias):
    """Valid cross-correlation with stride 1.

    Parameters
    ----------
    x:          numpy array (..., C, L)
    kernels:    numpy array (K, C, w)
    bias:       numpy array (K,)

    Returns
    -------
    y:  numpy array (..., K, L - w + 1)
    """
    if kernels.ndim != 3 or x.shape[-2] != kernels.shape[1]:
        raise ValueError("conv1d expects %d input channels, got %s"
                         % (kernels.shape[1], x.shape))
    if bias.shape != (kernels.shape[0],):
        raise ValueError("conv1d bias must have one entry per kernel")
    width = kernels.shape[2]
    if x.shape[-1] < width:
        raise ValueError("series of length %d is shorter than kernel "
                         "width %d" % (x.shape[-1], width))
    windows = sliding_window_view(x, width, axis=-1)
    return np.einsum("...cmw,kcw->...km", windows, kernels) + bias[:, None]


def conv1d_backward(dy, x, kernels):
    """Returns dx, dkernels, dbias."""
    n_kernels, n_channels, width = kernels.shape
    n_out = dy.shape[-1]
    windows = sliding_window_view(x.reshape(-1, n_channels, x.shape[-1]),
                                  width, axis=-1)
    dy3 = dy.reshape(-1, n_kernels, n_out)
    dkernels = np.einsum("bkm,bcmw->kcw", dy3, windows)
    dbias = dy3.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    for j in range(width):
        dx[..., j:j + n_out] += np.einsum("...km,kc->...cm", dy,
                                          kernels[:, :, j])
    return dx, dkernels, dbias


def max_over_time(x):
    """Per-channel maximum over the last axis.

    Returns
    -------
    y:      numpy array (..., K)
    index:  numpy array (..., K)
            Position of the maximum; ties go to the earliest frame.
    """
    if x.shape[-1] < 1:
        raise ValueError("max_over_time needs at least one frame")
    index = np.argmax(x, axis=-1)
    y = np.take_along_axis(x, index[..., None], axis=-1)[..., 0]
    return y, index


def max_over_time_backward(dy, index, n_frames):
    dx = np.zeros(dy.shape + (n_frames,))
    np.put_along_axis(dx, index[..., None], dy[..., None], axis=-1)
    return dx


def lstm_step(x, h, c, W, b):
    """One LSTM step with input, forget and output gates.

    Gate rows of W and b are ordered input, forget, output, candidate.

    Parameters
    ----------
    x:  numpy array (..., D)
    h:  numpy array (..., H)
    c:  numpy array (..., H)
    W:  numpy array (4H, D + H)
    b:  numpy array (4H,)

    Returns
    -------
    h_next: numpy array (..., H)
    c_next: numpy array (..., H)
    cache:  tuple
    """
    hidden = h.shape[-1]
    if (c.shape != h.shape or W.shape != (4 * hidden, x.shape[-1] + hidden)
            or b.shape != (4 * hidden,)):
        raise ValueError("lstm_step shape mismatch: x %s, h %s, c %s, W %s"
                         % (x.shape, h.shape, c.shape, W.shape))
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ W.T + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    o = sigmoid(z[..., 2 * hidden:3 * hidden])
    g = np.tanh(z[..., 3 * hidden:])
    c_next = f * c + i * g
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c
    return h_next, c_next, (xh, c, i, f, o, g, tanh_c)


def lstm_step_backward(dh_next, dc_next, cache, W):
    """Returns dx, dh, dc, dW, db."""
    xh, c, i, f, o, g, tanh_c = cache
    hidden = c.shape[-1]
    do = dh_next * tanh_c
    dc_total = dc_next + dh_next * o * (1.0 - tanh_c ** 2)
    dz = np.concatenate([dc_total * g * i * (1.0 - i),
                         dc_total * c * f * (1.0 - f),
                         do * o * (1.0 - o),
                         dc_total * i * (1.0 - g ** 2)], axis=-1)
    dz2 = dz.reshape(-1, 4 * hidden)
    dW = dz2.T @ xh.reshape(-1, xh.shape[-1])
    db = dz2.sum(axis=0)
    dxh = dz @ W
    n_in = xh.shape[-1] - hidden
    return dxh[..., :n_in], dxh[..., n_in:], dc_total * f, dW, db


def highway(x, W_H, b_H, W_T, b_T):
    """y = g * relu(W_H x + b_H) + (1 - g) * x, g = sigmoid(W_T x + b_T).

    Returns
    -------
    y:      numpy array, shape of x
    cache:  tuple
    """
    n = x.shape[-1]
    if W_H.shape != (n, n) or W_T.shape != (n, n) or \
            b_H.shape != (n,) or b_T.shape != (n,):
        raise ValueError("highway expects square %d x %d weights" % (n, n))
    h_pre = x @ W_H.T + b_H
    transformed = relu(h_pre)
    gate = sigmoid(x @ W_T.T + b_T)
    y = gate * transformed + (1.0 - gate) * x
    return y, (x, h_pre, transformed, gate)


def highway_backward(dy, cache, W_H, W_T):
    """Returns dx, dW_H, db_H, dW_T, db_T."""
    x, h_pre, transformed, gate = cache
    n = x.shape[-1]
    dh_pre = dy * gate * (h_pre > 0)
    dt_pre = dy * (transformed - x) * gate * (1.0 - gate)
    x2 = x.reshape(-1, n)
    dh2 = dh_pre.reshape(-1, n)
    dt2 = dt_pre.reshape(-1, n)
    dx = dy * (1.0 - gate) + dh_pre @ W_H + dt_pre @ W_T
    return dx, dh2.T @ x2, dh2.sum(axis=0), dt2.T @ x2, dt2.sum(axis=0)


def softmax(z):
    """Max-subtracted softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise ValueError("softmax input contains NaN")
    return special.softmax(z, axis=-1)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels and its logit gradient."""
    logp = special.log_softmax(logits, axis=-1)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -np.mean(logp[rows, labels])
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def grad_check(f, params, step=1e-5, atol=1e-6):
    """Compares reverse-mode gradients with central finite differences.

    Parameters
    ----------
    f:      callable
            f(params) -> (scalar value, dict name -> gradient array).
    params: dict or LayerParams
            Arrays perturbed in place (and restored).
    step:   float
            Finite-difference step.
    atol:   float
            Floor of the relative-error denominator.

    Returns
    -------
    worst:  float
            Largest |analytic - numeric| / max(|analytic|, |numeric|, atol).
    """
    tensors = params.tensors if isinstance(params, LayerParams) else params
    value, analytic = f(params)
    if not np.isfinite(value):
        raise ValueError("grad_check: f is not finite at params")
    analytic = {name: np.array(g, dtype=np.float64)
                for name, g in analytic.items()}
    worst = 0.0
    for name, arr in tensors.items():
        if name not in analytic:
            continue
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + step
            f_plus = f(params)[0]
            arr[idx] = original - step
            f_minus = f(params)[0]
            arr[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("grad_check: f is not finite near %s%s"
                                 % (name, idx))
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = analytic[name][idx]
            error = abs(numeric - exact) / max(abs(numeric), abs(exact),
                                               atol)
            worst = max(worst, error)
    return worst


def clip_gradients(params, max_norm):
    """Scales all trainable gradients so their global norm is <= max_norm.

    The norm is accumulated on gradients divided by their largest
    magnitude, so gradients near the float64 limit are still rescaled
    instead of being zeroed by an infinite norm.

    Returns
    -------
    norm:   float
            Global norm before clipping, capped at the largest float64.
    """
    names = params.trainable_names()
    peak = max((float(np.max(np.abs(params.grads[n])))
                for n in names if params.grads[n].size), default=0.0)
    if peak == 0.0:
        return 0.0
    unit = float(np.sqrt(sum(np.sum((params.grads[n] / peak) ** 2)
                             for n in names)))
    norm = peak * unit
    if not np.isfinite(norm):
        logging.warning("gradient norm overflows float64 (peak %.4g)" % peak)
        norm = float(np.finfo(np.float64).max)
    if max_norm is not None and norm > max_norm:
        logging.info("gradient norm %.4g clipped to %.4g" % (norm, max_norm))
        for name in names:
            params.grads[name] /= peak
            params.grads[name] *= max_norm / unit
    return norm


def _check_finite(params, what):
    if not params.all_finite():
        norms = params.grad_norms()
        logging.error("non-finite gradient in %s: %s" % (what, norms))
        raise TrainingAbortedError("non-finite gradient in %s" % what,
                                   {"grad_norms": norms})


class GradientDescent:
    """Plain first-order update, params -/+ lr * grad.

    Attributes
    ----------
    lr:         float
    clip_norm:  float or None
    maximize:   bool
                Ascend instead of descend.
    """
    def __init__(self, lr, clip_norm=None, maximize=False):
        self.lr = lr
        self.clip_norm = clip_norm
        self.maximize = maximize

    def step(self, params):
        _check_finite(params, "gradient step")
        norm = clip_gradients(params, self.clip_norm)
        sign = 1.0 if self.maximize else -1.0
        for name in params.trainable_names():
            params.tensors[name] += sign * self.lr * params.grads[name]
        return norm


class Adam:
    """Adam with bias correction and optional global-norm clipping."""
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        _check_finite(params, "adam step")
        norm = clip_gradients(params, self.clip_norm)
        self.t += 1
        for name in params.trainable_names():
            grad = params.grads[name]
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad ** 2
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params.tensors[name] -= self.lr * m_hat / (np.sqrt(v_hat) +
                                                       self.eps)
        return norm

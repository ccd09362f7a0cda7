"""Fixed-topology ReLU MLP with manual backpropagation and Adam.

The network maps encoded coordinates to SH coefficient vectors. The loss
couples it to the SH basis: each sample carries a precomputed basis row, and
the prediction is the dot product of the coefficient vector with that row.
All arithmetic is float64.
"""

from dataclasses import dataclass, field

import numpy as np

from nesh.errors import InvalidArgumentError, TrainingDivergedError

__all__ = [
    "MlpParams",
    "AdamState",
    "LossTerms",
    "init_params",
    "forward",
    "smooth_l1",
    "smooth_l1_grad",
    "loss_and_grad",
    "adam_step",
]


@dataclass
class MlpParams:
    """Per-layer weights ``(out, in)`` and biases ``(out,)``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i} input width does not chain")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self):
        """Interleaved ``[W0, b0, W1, b1, ...]``; views, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step,
                         self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class LossTerms:
    data_term: float
    reg_term: float
    lam: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.data_term + self.lam * self.reg_term


def init_params(layer_sizes, seed, head_gain=1.0):
    """He-uniform weights, zero biases, deterministic in ``seed``.

    ``head_gain`` scales the output layer's weights. Values below 1 start the
    network near a zero output, which keeps coefficients that the training
    directions cannot see (the null space of the basis) small.
    """
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise InvalidArgumentError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights[-1] *= head_gain
    return MlpParams(weights, biases)


def _forward_cache(params, x):
    acts = [x]
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T
        z += b
        if i < n_layers - 1:
            np.maximum(z, 0.0, out=z)
            acts.append(z)
        h = z
    return acts, h


def forward(params, x):
    """Coefficients for one encoded input ``(in,)`` or a batch ``(n, in)``.

    Hidden layers are affine + ReLU; the output layer is affine only.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise InvalidArgumentError(
            f"input width {x.shape[-1]} != network input width {params.weights[0].shape[1]}"
        )
    return _forward_cache(params, x)[1]


def smooth_l1(residual, beta=1.0):
    r = np.abs(residual)
    return np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)


def smooth_l1_grad(residual, beta=1.0):
    return np.where(np.abs(residual) < beta, residual / beta, np.sign(residual))


def loss_and_grad(params, x, basis_rows, targets, lam, beta=1.0):
    """Batch loss and its gradient with respect to every parameter.

    Parameters
    ----------
    params : MlpParams
    x : ndarray, shape (n, in)
        Encoded coordinates.
    basis_rows : ndarray, shape (n, R)
        SH basis evaluated at each sample's direction.
    targets : ndarray, shape (n,)
    lam : float
        Weight of the L1 penalty on predicted coefficients.
    beta : float
        Smooth-L1 transition point.

    Returns
    -------
    (LossTerms, MlpParams)
        Loss terms averaged over the batch and the matching gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgumentError("batch must be a non-empty (n, in) array")
    n = x.shape[0]
    acts, coeffs = _forward_cache(params, x)
    pred = np.einsum("ij,ij->i", coeffs, basis_rows)
    resid = targets - pred
    data = float(np.mean(smooth_l1(resid, beta)))
    reg = float(np.mean(np.sum(np.abs(coeffs), axis=1)))
    if not (np.isfinite(data) and np.isfinite(reg)):
        raise TrainingDivergedError("non-finite loss")

    d_pred = -smooth_l1_grad(resid, beta) / n
    delta = d_pred[:, None] * basis_rows
    if lam:
        delta += (lam / n) * np.sign(coeffs)

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        a_prev = acts[i]
        grad_w[i] = delta.T @ a_prev
        grad_b[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i]
            delta *= a_prev > 0.0
    return LossTerms(data, reg, lam), MlpParams(grad_w, grad_b)


def adam_step(params, grads, state, inplace=False):
    """One bias-corrected Adam update.

    Returns ``(params, state)``. With ``inplace=False`` the inputs are left
    untouched and fresh objects are returned.
    """
    if not inplace:
        params, state = params.copy(), state.copy()
    state.step += 1
    t = state.step
    step_size = state.lr / (1.0 - state.beta1 ** t)
    bias2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bias2) + state.eps)
    return params, state

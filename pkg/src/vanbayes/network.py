"""Shallow dense networks trained on the importance-weighted negative log-likelihood.

A :class:`Network` stores ``K`` independent networks of identical
architecture side by side: weights have shape ``(K, fan_in, fan_out)`` and
biases ``(K, fan_out)``.  The stacked networks share no parameters, and
Adam updates each parameter on its own, so training ``K`` of them together
on a shared minibatch sequence gives the same result as training each one
alone with that sequence.  ``K = 1`` is the ordinary single network.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .families import Family, get_family

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, learning_rate):
        super().__init__(
            f"non-finite loss at epoch {epoch} (learning_rate={learning_rate}); "
            "try a smaller learning rate or rescaled inputs"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(a):
    return (a > 0.0).astype(a.dtype)


def _tanh_grad(a):
    return 1.0 - a * a


# derivatives are written in terms of the activation output
ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass(frozen=True)
class NetworkArch:
    input_dim: int
    hidden: tuple = (50, 10)
    output_dim: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")

    @property
    def widths(self):
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-7
    patience: int = 5
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta_1 < 1 and 0 < self.beta_2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0 <= self.validation_fraction < 1):
            raise ValueError("validation_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


class Network:
    """``K`` stacked dense feed-forward networks mapping summaries to raw head outputs."""

    def __init__(self, weights, biases, activation="relu"):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        k = self.weights[0].shape[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 3 or b.shape != (k, w.shape[2]) or w.shape[0] != k:
                raise ValueError(f"layer {i}: inconsistent shapes {w.shape} / {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[2]:
                raise ValueError(f"layer {i}: fan_in {w.shape[1]} != previous fan_out")
        self._act, self._act_grad = ACTIVATIONS[activation]

    @classmethod
    def initialize(cls, arch: NetworkArch, rng, n_stack=1):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(arch.widths[:-1], arch.widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(n_stack, fan_in, fan_out)))
            biases.append(np.zeros((n_stack, fan_out)))
        return cls(weights, biases, arch.activation)

    @property
    def n_stack(self):
        return self.weights[0].shape[0]

    @property
    def arch(self):
        return NetworkArch(
            input_dim=self.weights[0].shape[1],
            hidden=tuple(w.shape[2] for w in self.weights[:-1]),
            output_dim=self.weights[-1].shape[2],
            activation=self.activation,
        )

    def params(self):
        return self.weights + self.biases

    def copy(self):
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def select(self, k):
        """The ``k``-th stacked network as its own single network."""
        return Network([w[k : k + 1].copy() for w in self.weights], [b[k : k + 1].copy() for b in self.biases], self.activation)

    @classmethod
    def stack(cls, nets):
        nets = list(nets)
        weights = [np.concatenate([n.weights[i] for n in nets]) for i in range(len(nets[0].weights))]
        biases = [np.concatenate([n.biases[i] for n in nets]) for i in range(len(nets[0].biases))]
        return cls(weights, biases, nets[0].activation)

    def _check_input(self, Z):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[None, :]
        if Z.shape[-1] != self.weights[0].shape[1]:
            raise ValueError(f"expected {self.weights[0].shape[1]} input features, got {Z.shape[-1]}")
        return Z

    def _forward_cache(self, Z):
        acts = [Z]
        h = Z
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = np.matmul(h, w) + b[:, None, :]
            if i < last:
                h = self._act(h)
            acts.append(h)
        return acts

    def forward(self, Z):
        """Raw head outputs, shape ``(K, B, output_dim)`` for ``Z`` of shape ``(B, d)``."""
        return self._forward_cache(self._check_input(Z))[-1]

    def backward(self, acts, d_out):
        """Backpropagate ``d_out = dL/d(raw)`` of shape ``(K, B, out)`` through cached activations."""
        n = len(self.weights)
        grad_w = [None] * n
        grad_b = [None] * n
        delta = d_out
        for i in range(n - 1, -1, -1):
            a_prev = acts[i]
            if a_prev.ndim == 2:
                grad_w[i] = np.matmul(a_prev.T, delta)
            else:
                grad_w[i] = np.matmul(a_prev.transpose(0, 2, 1), delta)
            grad_b[i] = delta.sum(axis=1)
            if i:
                delta = np.matmul(delta, self.weights[i].transpose(0, 2, 1)) * self._act_grad(a_prev)
        return grad_w, grad_b

    # -- persistence ---------------------------------------------------
    def to_dict(self):
        return {
            "arch": {"input_dim": self.arch.input_dim, "hidden": list(self.arch.hidden),
                     "output_dim": self.arch.output_dim, "activation": self.activation},
            "n_stack": self.n_stack,
            "weights": [encode_array(w) for w in self.weights],
            "biases": [encode_array(b) for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([decode_array(w) for w in d["weights"]], [decode_array(b) for b in d["biases"]], d["arch"]["activation"])


def encode_array(a):
    """Row-major decimal text with 17 significant digits (exact float64 round trip)."""
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": " ".join(format(x, ".17g") for x in a.ravel())}


def decode_array(d):
    data = d["data"].split()
    return np.array([float(x) for x in data], dtype=float).reshape(d["shape"])


# -- objective ---------------------------------------------------------------

def _as_stack_targets(gamma, k):
    """Accept ``(B,)`` (shared by all stacked nets) or ``(B, K)``; return ``(K, B)``."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 1:
        return np.broadcast_to(gamma, (k, gamma.shape[0]))
    if gamma.shape[1] != k:
        raise ValueError(f"targets have {gamma.shape[1]} columns but the network stacks {k}")
    return gamma.T


def _as_stack_weights(weights, k, b):
    if weights is None:
        return np.ones((k, b))
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("importance weights must be nonnegative")
    if weights.ndim == 1:
        return np.broadcast_to(weights, (k, b))
    return weights.T


def weighted_nll(net: Network, family, Z, gamma, weights=None):
    """``-sum_i w_i log p(gamma_i | a(z_i; W))`` for each stacked network, shape ``(K,)``."""
    family = get_family(family)
    Z = net._check_input(Z)
    if Z.shape[0] == 0:
        raise ValueError("empty batch")
    g = _as_stack_targets(gamma, net.n_stack)
    w = _as_stack_weights(weights, net.n_stack, Z.shape[0])
    raw = net.forward(Z)
    # zero-weight records contribute nothing, even if the density underflows
    logp = family.log_density(raw, g)
    with np.errstate(invalid="ignore"):
        return -np.sum(np.where(w > 0, w * logp, 0.0), axis=1)


def gradient(net: Network, family, Z, gamma, weights=None):
    """Gradient of :func:`weighted_nll` with respect to every weight and bias.

    Returns ``(grad_weights, grad_biases)`` with the network's own shapes.
    """
    family = get_family(family)
    Z = net._check_input(Z)
    g = _as_stack_targets(gamma, net.n_stack)
    w = _as_stack_weights(weights, net.n_stack, Z.shape[0])
    acts = net._forward_cache(Z)
    d_raw = -w[..., None] * family.grad_raw(acts[-1], g)
    return net.backward(acts, d_raw)


# -- training ----------------------------------------------------------------

class Adam:
    """Adam with the bias correction folded into the step size."""

    def __init__(self, params, learning_rate=1e-3, beta_1=0.9, beta_2=0.999, epsilon=1e-7):
        self.lr = learning_rate
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta_1, self.beta_2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr_t * m / (np.sqrt(v) + self.epsilon)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: list = field(default_factory=list)
    stopped_epoch: int = 0

    def to_dict(self):
        return {
            "loss": np.asarray(self.loss).tolist(),
            "val_loss": np.asarray(self.val_loss).tolist(),
            "best_epoch": [int(e) for e in self.best_epoch],
            "stopped_epoch": int(self.stopped_epoch),
        }


def _mean_loss(net, family, Z, g, w, chunk=8192):
    total = np.zeros(net.n_stack)
    for s in range(0, Z.shape[0], chunk):
        raw = net.forward(Z[s : s + chunk])
        logp = family.log_density(raw, g[:, s : s + chunk])
        ws = w[:, s : s + chunk]
        with np.errstate(invalid="ignore"):
            total -= np.sum(np.where(ws > 0, ws * logp, 0.0), axis=1)
    return total / Z.shape[0]


def train(Z, gamma, family, hidden=(50, 10), cfg: TrainConfig | None = None, weights=None,
          validation=None, activation="relu"):
    """Fit ``K`` networks (one per target column) by minibatch Adam with early stopping.

    Parameters
    ----------
    Z : (N, d) summaries.
    gamma : (N,) or (N, K) targets; each column gets its own network.
    family : head family (name or instance) shared by every column.
    weights : optional (N,) or (N, K) importance weights.
    validation : optional ``(Z_val, gamma_val, w_val)``; if absent the last
        ``cfg.validation_fraction`` of a seeded shuffle is held out.

    Returns the network restored to each target's best validation epoch, and
    the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    family = get_family(family)
    rng = np.random.default_rng(cfg.seed)
    Z = np.asarray(Z, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    k = 1 if gamma.ndim == 1 else gamma.shape[1]
    g_all = np.ascontiguousarray(_as_stack_targets(gamma, k))
    w_all = np.ascontiguousarray(_as_stack_weights(weights, k, Z.shape[0]))
    if Z.shape[0] == 0:
        raise ValueError("no training records")
    family.check_support(g_all)

    if validation is None and cfg.validation_fraction > 0:
        order = rng.permutation(Z.shape[0])
        n_val = int(round(cfg.validation_fraction * Z.shape[0]))
        n_val = min(max(n_val, 1), Z.shape[0] - 1)
        tr, va = order[: Z.shape[0] - n_val], order[Z.shape[0] - n_val :]
        Z_tr, g_tr, w_tr = Z[tr], g_all[:, tr], w_all[:, tr]
        Z_va, g_va, w_va = Z[va], g_all[:, va], w_all[:, va]
    elif validation is not None:
        Z_tr, g_tr, w_tr = Z, g_all, w_all
        Z_va, g_raw, w_raw = validation
        Z_va = np.asarray(Z_va, dtype=float)
        g_va = np.ascontiguousarray(_as_stack_targets(g_raw, k))
        w_va = np.ascontiguousarray(_as_stack_weights(w_raw, k, Z_va.shape[0]))
        family.check_support(g_va)
    else:
        Z_tr, g_tr, w_tr = Z, g_all, w_all
        Z_va = None

    n = Z_tr.shape[0]
    batch = min(cfg.batch_size, n)
    arch = NetworkArch(Z.shape[1], tuple(hidden), family.n_raw, activation)
    net = Network.initialize(arch, rng, n_stack=k)
    for j in range(k):
        net.biases[-1][j] = family.init_raw(g_tr[j], w_tr[j])
    params = net.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta_1, cfg.beta_2, cfg.epsilon)

    best = net.copy()
    best_loss = np.full(k, np.inf)
    best_epoch = np.zeros(k, dtype=int)
    waited = np.zeros(k, dtype=int)
    history = TrainHistory()
    n_layers = len(net.weights)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            zb = Z_tr[idx]
            gb = g_tr[:, idx]
            wb = w_tr[:, idx]
            acts = net._forward_cache(zb)
            d_raw = -(wb / idx.size)[..., None] * family.grad_raw(acts[-1], gb)
            gw, gbias = net.backward(acts, d_raw)
            opt.step(params, gw + gbias)

        train_loss = _mean_loss(net, family, Z_tr, g_tr, w_tr)
        val_loss = _mean_loss(net, family, Z_va, g_va, w_va) if Z_va is not None else train_loss
        if not (np.all(np.isfinite(train_loss)) and np.all(np.isfinite(val_loss))):
            raise TrainingDiverged(epoch, cfg.learning_rate)
        history.loss.append(train_loss)
        history.val_loss.append(val_loss)
        logger.debug("epoch %d loss %s val_loss %s", epoch, train_loss, val_loss)

        improved = val_loss < best_loss
        for j in np.flatnonzero(improved):
            for i in range(n_layers):
                best.weights[i][j] = net.weights[i][j]
                best.biases[i][j] = net.biases[i][j]
        best_loss = np.where(improved, val_loss, best_loss)
        best_epoch = np.where(improved, epoch, best_epoch)
        waited = np.where(improved, 0, waited + 1)
        history.stopped_epoch = epoch
        if np.all(waited >= cfg.patience):
            break

    history.best_epoch = best_epoch.tolist()
    return best, history

"""Feed-forward ReLU regression network trained by per-sample SGD.

All parameters live in one flat float64 vector.  For each layer ``l`` mapping
``sizes[l]`` inputs to ``sizes[l + 1]`` outputs the vector holds the weight
matrix (row-major, shape ``(fan_in, fan_out)``) followed by the bias vector.
Dropout acts on hidden activations only, with inverted scaling so that a
dropout rate of zero reduces to the plain network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .mathstat import RngStream


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple = (40, 30, 20)
    dropout_rate: float = 0.0
    epochs: int = 40
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a nonempty list of positive counts")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")

    def replace(self, **changes) -> "MlpConfig":
        return MlpConfig(**{**asdict(self), **changes})


# Three hidden layers of 40, 30 and 20 units, used by both UQ methods.
DEFAULT_NET = MlpConfig(hidden_sizes=(40, 30, 20))
# One hidden layer of 50 units, the classic benchmark-protocol network.
BENCHMARK_NET = MlpConfig(hidden_sizes=(50,))


def layer_sizes(n_inputs: int, config: MlpConfig) -> np.ndarray:
    return np.array((n_inputs, *config.hidden_sizes, 1), dtype=np.int64)


def n_params(sizes) -> int:
    return int(sum(sizes[l] * sizes[l + 1] + sizes[l + 1] for l in range(len(sizes) - 1)))


@dataclass
class Mlp:
    config: MlpConfig
    sizes: np.ndarray
    params: np.ndarray
    history: list = field(default_factory=list)

    @property
    def n_inputs(self) -> int:
        return int(self.sizes[0])

    def layers(self):
        """List of ``(W, b)`` views into the flat parameter vector."""
        out = []
        pos = 0
        for l in range(len(self.sizes) - 1):
            nin, nout = int(self.sizes[l]), int(self.sizes[l + 1])
            W = self.params[pos:pos + nin * nout].reshape(nin, nout)
            pos += nin * nout
            b = self.params[pos:pos + nout]
            pos += nout
            out.append((W, b))
        return out


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _backprop(params, sizes, x, y, mask, acts, delta, delta_next, grad):
    """Forward and backward pass for one sample; writes dLoss/dparams into grad.

    Loss is the squared error ``(out - y)**2``.  ``mask`` holds one multiplier
    per hidden unit (0 or 1/(1-p)).  Returns the squared error.
    """
    n_layers = sizes.shape[0] - 1
    for i in range(sizes[0]):
        acts[i] = x[i]
    a_off = 0
    p_off = 0
    m_off = 0
    for l in range(n_layers):
        nin = sizes[l]
        nout = sizes[l + 1]
        b_off = p_off + nin * nout
        out_off = a_off + nin
        for j in range(nout):
            s = params[b_off + j]
            for i in range(nin):
                s += acts[a_off + i] * params[p_off + i * nout + j]
            if l < n_layers - 1:
                if s > 0.0:
                    s = s * mask[m_off + j]
                else:
                    s = 0.0
            acts[out_off + j] = s
        if l < n_layers - 1:
            m_off += nout
        a_off = out_off
        p_off = b_off + nout

    err = acts[a_off] - y
    delta[0] = 2.0 * err

    # walk back through the layers
    for l in range(n_layers - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        a_off -= nin
        p_off -= nin * nout + nout
        b_off = p_off + nin * nout
        if l < n_layers - 1:
            m_off -= nout
        for j in range(nout):
            grad[b_off + j] = delta[j]
        for i in range(nin):
            a = acts[a_off + i]
            back = 0.0
            for j in range(nout):
                grad[p_off + i * nout + j] = a * delta[j]
                back += params[p_off + i * nout + j] * delta[j]
            if l > 0:
                # hidden input: d(mask * relu(s))/ds is the mask where active
                if a > 0.0:
                    back *= mask[m_off - nin + i]
                else:
                    back = 0.0
            delta_next[i] = back
        for i in range(nin):
            delta[i] = delta_next[i]
    return err * err


@njit(cache=True)
def _sgd_epoch(params, sizes, X, y, order, masks, lr, clip):
    total = 0
    width = 0
    for l in range(sizes.shape[0]):
        total += sizes[l]
        if sizes[l] > width:
            width = sizes[l]
    acts = np.empty(total)
    delta = np.empty(width)
    delta_next = np.empty(width)
    grad = np.empty(params.shape[0])
    sse = 0.0
    for t in range(order.shape[0]):
        k = order[t]
        sse += _backprop(params, sizes, X[k], y[k], masks[t], acts, delta, delta_next, grad)
        step = lr
        if clip > 0.0:
            norm2 = 0.0
            for q in range(params.shape[0]):
                norm2 += grad[q] * grad[q]
            if norm2 > clip * clip:
                step = lr * clip / np.sqrt(norm2)
        for q in range(params.shape[0]):
            params[q] -= step * grad[q]
    return sse / order.shape[0]


@njit(cache=True)
def _batch_gradient(params, sizes, X, y):
    total = 0
    width = 0
    n_hidden = 0
    for l in range(sizes.shape[0]):
        total += sizes[l]
        if sizes[l] > width:
            width = sizes[l]
        if 0 < l < sizes.shape[0] - 1:
            n_hidden += sizes[l]
    acts = np.empty(total)
    delta = np.empty(width)
    delta_next = np.empty(width)
    grad = np.empty(params.shape[0])
    out = np.zeros(params.shape[0])
    mask = np.ones(n_hidden)
    loss = 0.0
    for k in range(X.shape[0]):
        loss += _backprop(params, sizes, X[k], y[k], mask, acts, delta, delta_next, grad)
        for q in range(params.shape[0]):
            out[q] += grad[q]
    n = X.shape[0]
    return loss / n, out / n


# ---------------------------------------------------------------------------


def _check_inputs(X, n_inputs=None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be a 2-D matrix, got shape {X.shape}")
    if n_inputs is not None and X.shape[1] != n_inputs:
        raise ValueError(f"X has {X.shape[1]} columns, network expects {n_inputs}")
    return X


def init_params(sizes, rng: RngStream) -> np.ndarray:
    """He-scaled Gaussian weights, zero biases."""
    chunks = []
    for l in range(len(sizes) - 1):
        nin, nout = int(sizes[l]), int(sizes[l + 1])
        chunks.append(rng.standard_normal(nin * nout) * math.sqrt(2.0 / nin))
        chunks.append(np.zeros(nout))
    return np.concatenate(chunks)


def dropout_masks(rng: RngStream, shape, p: float) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability p, else 1/(1-p)."""
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def loss_and_gradient(model: Mlp, X, y):
    """Mean squared error on ``(X, y)`` and its gradient, dropout disabled."""
    X = _check_inputs(X, model.n_inputs)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return _batch_gradient(model.params, model.sizes, X, y)


def fit(X, y, config: MlpConfig, rng: RngStream) -> Mlp:
    """Train a network by shuffled per-sample SGD on squared error.

    The step size in epoch ``e`` is ``learning_rate / (1 + lr_decay * (e - 1))``
    and each per-sample gradient is rescaled to norm at most ``grad_clip``
    (0 disables).  ``history`` on the returned model holds the mean training
    loss of each epoch as seen by SGD (dropout masks active).
    """
    X = _check_inputs(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ValueError(f"{y.shape[0]} targets for {X.shape[0]} rows")
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    sizes = layer_sizes(X.shape[1], config)
    model = Mlp(config, sizes, init_params(sizes, rng))
    n_hidden = int(sum(config.hidden_sizes))
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        masks = dropout_masks(rng, (n, n_hidden), config.dropout_rate)
        lr = config.learning_rate / (1.0 + config.lr_decay * (epoch - 1))
        sgd_loss = _sgd_epoch(model.params, sizes, X, y, order, masks, lr, config.grad_clip)
        if not math.isfinite(sgd_loss) or not np.all(np.isfinite(model.params)):
            raise TrainingDivergedError(epoch, sgd_loss)
        model.history.append(float(sgd_loss))
    return model


def predict(model: Mlp, X, dropout_active: bool = False, rng: RngStream | None = None) -> np.ndarray:
    """Forward pass over the rows of ``X``.

    With ``dropout_active`` a fresh set of unit masks is drawn from ``rng`` for
    the call and shared by every row, so the output is one thinned network
    evaluated at all inputs.
    """
    if dropout_active:
        return predict_passes(model, X, 1, rng)[0]
    H = _check_inputs(X, model.n_inputs)
    layers = model.layers()
    for W, b in layers[:-1]:
        H = np.maximum(H @ W + b, 0.0)
    W, b = layers[-1]
    return (H @ W + b)[:, 0]


def predict_passes(model: Mlp, X, n_passes: int, rng: RngStream) -> np.ndarray:
    """``n_passes`` stochastic forward passes, shape ``(n_passes, rows)``."""
    if rng is None:
        raise ValueError("dropout prediction needs a random stream")
    X = _check_inputs(X, model.n_inputs)
    p = model.config.dropout_rate
    layers = model.layers()
    H = np.broadcast_to(X, (n_passes, *X.shape))
    for W, b in layers[:-1]:
        mask = dropout_masks(rng, (n_passes, 1, W.shape[1]), p)
        H = np.maximum(H @ W + b, 0.0) * mask
    W, b = layers[-1]
    return (H @ W + b)[..., 0]


def save_snapshot(model: Mlp, path) -> None:
    """Write the network as JSON: layer sizes, config and the flat parameters."""
    doc = {
        "format": "uqsim-mlp/1",
        "sizes": [int(s) for s in model.sizes],
        "config": {**asdict(model.config), "hidden_sizes": list(model.config.hidden_sizes)},
        "params": [float(v) for v in model.params],
        "history": list(model.history),
    }
    Path(path).write_text(json.dumps(doc))


def load_snapshot(path) -> Mlp:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "uqsim-mlp/1":
        raise ValueError(f"{path}: not a uqsim network snapshot")
    sizes = np.array(doc["sizes"], dtype=np.int64)
    params = np.array(doc["params"], dtype=np.float64)
    if params.shape[0] != n_params(sizes):
        raise ValueError(f"{path}: {params.shape[0]} parameters do not fit sizes {doc['sizes']}")
    return Mlp(MlpConfig(**doc["config"]), sizes, params, doc.get("history", []))

"""Binary classifiers with a real-valued score, trained from scratch in numpy.

A model predicts class 1 when its score ``h(x) >= 0``. Two families are
provided: :class:`LinearModel` (logistic regression, possibly on expanded
features) and :class:`MlpModel` (fully connected network with inverted
dropout between hidden layers). Both expose the input gradient of the score,
which the margin estimates rely on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import Dataset

INIT_SCHEME = "uniform(-c/sqrt(fan_in), c/sqrt(fan_in)); c=1 (tanh, linear), c=sqrt(6) (relu weights)"


class DivergenceError(ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"

    def __call__(self, z):
        if self is Activation.TANH:
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def derivative(self, z, a):
        """Derivative given pre-activation ``z`` and activation ``a``."""
        if self is Activation.TANH:
            return 1.0 - a * a
        return (z > 0.0).astype(float)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"expected inputs of dimension {dim}, got shape {x.shape}")
    return X, single


def _uniform_fan_in(rng, fan_in, shape, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearModel:
    """Score ``w.x + b``.

    With ``fit_bias=False`` the bias stays at its initial value (0 from
    :meth:`initialize`); used when a constant feature already plays that role.
    """

    weights: np.ndarray
    bias: float = 0.0
    fit_bias: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.bias = float(self.bias)
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise ValueError("linear model parameters must be finite")

    @classmethod
    def initialize(cls, input_dim: int, rng, fit_bias: bool = True) -> "LinearModel":
        rng = np.random.default_rng(rng)
        w = _uniform_fan_in(rng, input_dim, input_dim)
        b = float(_uniform_fan_in(rng, input_dim, ())) if fit_bias else 0.0
        return cls(w, b, fit_bias)

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    def score(self, x, *, rng=None, train=False):
        X, single = _as_batch(x, self.input_dim)
        h = X @ self.weights + self.bias
        return float(h[0]) if single else h

    def input_gradient(self, x):
        X, single = _as_batch(x, self.input_dim)
        g = np.broadcast_to(self.weights, X.shape).copy()
        return g[0] if single else g

    def parameters(self) -> list:
        return [self.weights, np.array([self.bias])]

    def with_parameters(self, params) -> "LinearModel":
        return LinearModel(params[0].copy(), float(params[1][0]), self.fit_bias)

    def loss_and_grads(self, X, y, rng=None):
        h = X @ self.weights + self.bias
        loss = _bce_with_logits(h, y)
        dh = (_sigmoid(h) - y) / X.shape[0]
        grad_b = dh.sum() if self.fit_bias else 0.0
        return loss, [X.T @ dh, np.array([grad_b])]


@dataclass
class MlpModel:
    """Fully connected network ``input -> hidden layers -> 1 score``.

    ``weights[k]`` has shape ``(fan_in, fan_out)``. Dropout applies to hidden
    activations during training only.
    """

    weights: list
    biases: list
    activation: Activation = Activation.TANH
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        self.activation = Activation(self.activation)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[0]} != previous output {self.weights[k - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must output a single score")

    @classmethod
    def initialize(cls, input_dim, layer_widths, rng, activation=Activation.TANH, dropout_rate=0.0) -> "MlpModel":
        rng = np.random.default_rng(rng)
        sizes = [input_dim, *layer_widths, 1]
        # He scaling keeps rectifier units alive through narrow layers
        gain = np.sqrt(6.0) if Activation(activation) is Activation.RELU else 1.0
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(_uniform_fan_in(rng, fan_in, (fan_in, fan_out), gain))
            biases.append(_uniform_fan_in(rng, fan_in, fan_out))
        return cls(weights, biases, Activation(activation), dropout_rate)

    @classmethod
    def zeros(cls, input_dim, layer_widths, activation=Activation.TANH) -> "MlpModel":
        sizes = [input_dim, *layer_widths, 1]
        return cls(
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
            activation,
        )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_widths(self) -> list:
        return [w.shape[1] for w in self.weights[:-1]]

    def _forward(self, X, rng=None, train=False):
        """Forward pass keeping what backprop needs: (pre-activations, activations, masks)."""
        acts, pres, masks = [X], [], []
        a = X
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pres.append(z)
            if k == last:
                a = z
            else:
                a = self.activation(z)
                if train and self.dropout_rate > 0.0:
                    keep = 1.0 - self.dropout_rate
                    mask = (rng.random(a.shape) < keep) / keep
                    masks.append(mask)
                    acts.append(a)
                    a = a * mask
                    continue
                masks.append(None)
            acts.append(a)
        return pres, acts, masks

    def score(self, x, *, rng=None, train=False):
        X, single = _as_batch(x, self.input_dim)
        if train and self.dropout_rate > 0.0 and rng is None:
            raise ValueError("training-mode score with dropout needs an rng")
        pres, _, _ = self._forward(X, rng, train)
        h = pres[-1][:, 0]
        return float(h[0]) if single else h

    def _backward(self, delta, pres, acts, masks):
        """Propagate d(loss)/d(score) of shape (m, 1); return parameter grads and input grad."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            inp = acts[k]
            if k > 0 and masks[k - 1] is not None:
                inp = inp * masks[k - 1]
            grads_w[k] = inp.T @ delta
            grads_b[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                if masks[k - 1] is not None:
                    delta = delta * masks[k - 1]
                delta = delta * self.activation.derivative(pres[k - 1], acts[k])
        return grads_w, grads_b, delta

    def input_gradient(self, x):
        X, single = _as_batch(x, self.input_dim)
        pres, acts, masks = self._forward(X)
        _, _, g = self._backward(np.ones((X.shape[0], 1)), pres, acts, masks)
        return g[0] if single else g

    def parameters(self) -> list:
        return [*self.weights, *self.biases]

    def with_parameters(self, params) -> "MlpModel":
        k = len(self.weights)
        return replace(self, weights=[p.copy() for p in params[:k]], biases=[p.copy() for p in params[k:]])

    def loss_and_grads(self, X, y, rng=None):
        pres, acts, masks = self._forward(X, rng, train=True)
        h = pres[-1][:, 0]
        loss = _bce_with_logits(h, y)
        dh = ((_sigmoid(h) - y) / X.shape[0])[:, None]
        gw, gb, _ = self._backward(dh, pres, acts, masks)
        return loss, [*gw, *gb]


def _sigmoid(h):
    return 0.5 * (1.0 + np.tanh(0.5 * h))


def _bce_with_logits(h, y):
    return float(np.mean(np.logaddexp(0.0, h) - y * h))


def score(model, x):
    """Score ``h(x)`` in inference mode; a float for one vector, an array for rows."""
    return model.score(x)


def classify(model, x):
    """1 where ``score >= 0`` else 0."""
    h = model.score(x)
    if np.ndim(h) == 0:
        return int(h >= 0.0)
    return (h >= 0.0).astype(np.int64)


def input_gradient(model, x):
    return model.input_gradient(x)


def accuracy(model, data: Dataset) -> float:
    return float(np.mean(classify(model, data.features) == data.labels))


@dataclass
class TrainingConfig:
    optimizer: str = "sgd"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    adam_betas: tuple = (0.9, 0.999)
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)


class Sgd:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grads):
        return [p - self.learning_rate * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, learning_rate, betas=(0.9, 0.999), eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            out.append(p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(config: TrainingConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.adam_betas, config.adam_epsilon)
    return Sgd(config.learning_rate)


def train_epoch(model, train: Dataset, config: TrainingConfig, rng, optimizer=None, epoch=None):
    """One shuffled pass of mini-batch updates on the mean binary cross-entropy.

    ``optimizer`` carries state across epochs (Adam moments); a fresh one is
    built from ``config`` if omitted. Returns the updated model (a new object)
    and the mean batch loss.
    """
    if model.input_dim != train.n:
        raise ValueError(f"model expects {model.input_dim} features, data has {train.n}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    optimizer = optimizer or make_optimizer(config)
    X, y = train.features, train.labels.astype(float)
    order = rng.permutation(train.m)
    params = [p.copy() for p in model.parameters()]
    current = model.with_parameters(params)
    losses = []
    for b, start in enumerate(range(0, train.m, config.batch_size)):
        idx = order[start:start + config.batch_size]
        loss, grads = current.loss_and_grads(X[idx], y[idx], rng)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
        losses.append(loss)
        params = optimizer.step(params, grads)
        if not all(np.isfinite(p).all() for p in params):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}, batch {b}", epoch, b)
        current = current.with_parameters(params)
    return current, float(np.mean(losses))


def fit(model, train: Dataset, config: TrainingConfig, rng, callback=None):
    """Run ``config.epochs`` epochs; ``callback(epoch, model, loss)`` after each."""
    rng = np.random.default_rng(rng)
    optimizer = make_optimizer(config)
    for epoch in range(1, config.epochs + 1):
        model, loss = train_epoch(model, train, config, rng, optimizer, epoch=epoch)
        if callback is not None:
            callback(epoch, model, loss)
    return model


def save_checkpoint(model, path, **meta) -> Path:
    """Write parameters plus a JSON header into an ``.npz`` archive."""
    path = Path(path)
    if isinstance(model, LinearModel):
        header = {"kind": "linear", "input_dim": model.input_dim, "fit_bias": model.fit_bias}
        arrays = {"weights": model.weights, "bias": np.array([model.bias])}
    else:
        header = {
            "kind": "mlp",
            "input_dim": model.input_dim,
            "layer_widths": model.layer_widths,
            "activation": model.activation.value,
            "dropout_rate": model.dropout_rate,
        }
        arrays = {}
        for k, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
    header["init"] = INIT_SCHEME
    header.update(meta)
    with path.open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, header_dict)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header["kind"] == "linear":
            model = LinearModel(z["weights"], float(z["bias"][0]), header.get("fit_bias", True))
        elif header["kind"] == "mlp":
            k = len(header["layer_widths"]) + 1
            model = MlpModel(
                [z[f"W{i}"] for i in range(k)],
                [z[f"b{i}"] for i in range(k)],
                Activation(header["activation"]),
                header["dropout_rate"],
            )
        else:
            raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
    return model, header

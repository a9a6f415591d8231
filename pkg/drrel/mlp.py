"""
Small numpy multilayer perceptrons with exact reverse-mode gradients.

Used by the imputation model, the approximated affine model and the
trade-off model. Checkpoints are JSON; floats go through ``tolist`` and
``repr`` so they round-trip exactly.
"""
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from drrel.exceptions import (AlignmentError, ConfigError, DimensionError, DivergenceError,
                              EmptyDataError, FrozenParameterError, SchemaError, StaleCacheError)
from drrel.log import logger
from drrel.mixins import ToDictMixin

MLP_SCHEMA = 'drrel.mlp/1'
ACTIVATIONS = ('tanh', 'relu', 'sigmoid', 'identity')
PROB_EPS = 1e-12


def activate(name, z):
    if name == 'tanh':
        return np.tanh(z)
    if name == 'relu':
        return np.maximum(z, 0.0)
    if name == 'sigmoid':
        return expit(z)
    return z


def activation_grad(name, z, a):
    """Derivative of the activation at pre-activation ``z`` (``a`` = activated z)."""
    if name == 'tanh':
        return 1.0 - a ** 2
    if name == 'relu':
        return (z > 0.0).astype(float)
    if name == 'sigmoid':
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(frozen=True)
class ForwardCache:
    version: int
    inputs: Tuple[np.ndarray, ...]
    pre_activations: Tuple[np.ndarray, ...]
    activations: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class MlpGradients:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    inputs: np.ndarray

    def flat(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class MlpModel(ToDictMixin):
    """
    Fully connected network; layer ``i`` maps ``dims[i]`` to ``dims[i+1]``
    and applies ``activations[i]``.
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str],
                 weights: Optional[Sequence[np.ndarray]] = None,
                 biases: Optional[Sequence[np.ndarray]] = None,
                 init='glorot', seed=0):
        self.dims = [int(d) for d in dims]
        self.activations = list(activations)
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise DimensionError('an MLP needs at least an input and an output dimension')
        if len(self.activations) != len(self.dims) - 1:
            raise DimensionError('one activation per layer is required')
        unknown = [a for a in self.activations if a not in ACTIVATIONS]
        if unknown:
            raise ConfigError('unknown activation(s) {}'.format(unknown))
        if weights is None:
            weights, biases = self._initial_parameters(init, seed)
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise DimensionError('layer {} parameters do not match dims {}'.format(i, self.dims))
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DimensionError('layer {} has non-finite parameters'.format(i))
        self.version = 0
        self.frozen = False

    def _initial_parameters(self, init, seed):
        if init not in ('glorot', 'zeros'):
            raise ConfigError('unknown initialisation {!r}'.format(init))
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            if init == 'zeros':
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return weights, biases

    @classmethod
    def build(cls, input_dim, hidden=(), output_dim=1, hidden_activation='tanh', head='sigmoid',
              init='glorot', seed=0) -> "MlpModel":
        dims = [int(input_dim)] + [int(h) for h in hidden] + [int(output_dim)]
        return cls(dims, [hidden_activation] * len(hidden) + [head], init=init, seed=seed)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x):
        return mlp_forward(self, x)

    def predict(self, x) -> np.ndarray:
        return mlp_forward(self, x)[0]

    def apply_gradients(self, grads: MlpGradients, learning_rate: float):
        if self.frozen:
            raise FrozenParameterError('model {} is frozen'.format(self.parameter_digest()[:12]))
        for i in range(len(self.weights)):
            self.weights[i] = self.weights[i] - learning_rate * grads.weights[i]
            self.biases[i] = self.biases[i] - learning_rate * grads.biases[i]
        self.version += 1

    def freeze(self) -> "MlpModel":
        self.frozen = True
        return self

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, self.activations, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def parameter_digest(self) -> str:
        sha = hashlib.sha256()
        sha.update(json.dumps([self.dims, self.activations]).encode('utf-8'))
        for arr in self.parameters():
            sha.update(np.ascontiguousarray(arr, dtype='<f8').tobytes())
        return sha.hexdigest()

    def to_dict(self):
        return {
            'schema_version': MLP_SCHEMA,
            'dims': self.dims,
            'activations': self.activations,
            'weights': [w.tolist() for w in self.weights],
            'biases': [b.tolist() for b in self.biases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload) -> "MlpModel":
        if payload.get('schema_version') != MLP_SCHEMA:
            raise SchemaError('MLP schema {!r}, expected {!r}'.format(payload.get('schema_version'), MLP_SCHEMA))
        return cls(payload['dims'], payload['activations'], payload['weights'], payload['biases'])

    @classmethod
    def from_json(cls, text) -> "MlpModel":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return '<MlpModel dims={} activations={}>'.format(self.dims, self.activations)


def mlp_forward(model: MlpModel, x) -> Tuple[np.ndarray, ForwardCache]:
    """
    Run ``x`` (one vector or a batch of rows) through the network.

    Returns the output, shaped like the input (vector in, vector out), and
    the activation cache needed by :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DimensionError('input of width {} fed to a layer of width {}'.format(
            batch.shape[-1] if batch.ndim else 0, model.input_dim))
    inputs, pre, post = [], [], []
    a = batch
    for w, b, act in zip(model.weights, model.biases, model.activations):
        inputs.append(a)
        z = a @ w + b
        a = activate(act, z)
        pre.append(z)
        post.append(a)
    cache = ForwardCache(model.version, tuple(inputs), tuple(pre), tuple(post))
    return (a[0] if single else a), cache


def mlp_backward(model: MlpModel, cache: ForwardCache, grad, wrt='output') -> MlpGradients:
    """
    Reverse-mode gradients of a scalar loss given its gradient ``grad`` with
    respect to the network output (``wrt='output'``) or the head
    pre-activation (``wrt='preactivation'``).
    """
    if cache.version != model.version:
        raise StaleCacheError('forward cache from version {}, model is at {}'.format(cache.version, model.version))
    grad = np.asarray(grad, dtype=float)
    if grad.ndim == 1:
        grad = grad[None, :] if model.output_dim > 1 or grad.size == 1 else grad[:, None]
    if grad.shape != cache.activations[-1].shape:
        raise DimensionError('output gradient of shape {} for outputs of shape {}'.format(
            grad.shape, cache.activations[-1].shape))
    n_layers = len(model.weights)
    dw, db = [None] * n_layers, [None] * n_layers
    delta = grad
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 or wrt == 'output':
            delta = delta * activation_grad(model.activations[i], cache.pre_activations[i], cache.activations[i])
        dw[i] = cache.inputs[i].T @ delta
        db[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
    return MlpGradients(tuple(dw), tuple(db), delta)


def gradient_check(model: MlpModel, x, loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                   h=1e-5) -> float:
    """
    Largest relative error between analytic and central-difference
    gradients over every parameter.

    ``loss_fn(outputs)`` returns the scalar loss and its gradient with
    respect to the outputs.
    """
    model = model.copy()
    out, cache = mlp_forward(model, x)
    _, grad_out = loss_fn(out)
    analytic = mlp_backward(model, cache, grad_out).flat()
    worst = 0.0
    for param, grad in zip(model.parameters(), analytic):
        it = np.nditer(param, flags=['multi_index'])
        for _ in it:
            idx = it.multi_index
            saved = param[idx]
            param[idx] = saved + h
            plus = loss_fn(mlp_forward(model, x)[0])[0]
            param[idx] = saved - h
            minus = loss_fn(mlp_forward(model, x)[0])[0]
            param[idx] = saved
            numeric = (plus - minus) / (2.0 * h)
            err = abs(grad[idx] - numeric) / max(abs(grad[idx]) + abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def binary_cross_entropy(p, y) -> float:
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass(frozen=True)
class TrainConfig(ToDictMixin):
    base_lr: float = 0.05
    warmup_steps: int = 200
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0 or self.warmup_steps < 0 or self.epochs < 0:
            raise ConfigError('learning rate, warm-up steps and epochs must be nonnegative')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be positive')

    @classmethod
    def from_config(cls, conf, seed) -> "TrainConfig":
        return cls(float(conf.get('learning_rate', 0.05)), int(conf.get('warmup_steps', 200)),
                   int(conf.get('batch_size', 128)), int(conf.get('epochs', 20)), int(seed))

    def learning_rate(self, step) -> float:
        if self.warmup_steps == 0:
            return self.base_lr
        return self.base_lr * min(1.0, (step + 1) / self.warmup_steps)


def smoothed(losses: Sequence[float], window=10) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    losses = np.asarray(losses, dtype=float)
    usable = (losses.size // window) * window
    return losses[:usable].reshape(-1, window).mean(axis=1)


def train_binary_mlp(model: MlpModel, features, labels, config: TrainConfig,
                     name='mlp') -> Tuple[MlpModel, List[float]]:
    """
    Minibatch gradient descent on binary cross-entropy for a sigmoid-headed
    model, with linear learning-rate warm-up. Trains ``model`` in place and
    returns it with the per-step loss trace.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise AlignmentError('{} feature rows for {} labels'.format(x.shape[0] if x.ndim else 0, y.size))
    if y.size == 0:
        raise EmptyDataError('no training examples')
    if model.activations[-1] != 'sigmoid' or model.output_dim != 1:
        raise ConfigError('binary training needs a single sigmoid output')
    rng = np.random.default_rng(config.seed)
    losses, step = [], 0
    for epoch in range(config.epochs):
        order = rng.permutation(y.size)
        for start in range(0, y.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            out, cache = mlp_forward(model, x[batch])
            p = out[:, 0]
            loss = binary_cross_entropy(p, y[batch])
            if not math.isfinite(loss) or not np.all(np.isfinite(p)):
                raise DivergenceError(step, loss)
            grads = mlp_backward(model, cache, ((p - y[batch]) / batch.size)[:, None], wrt='preactivation')
            model.apply_gradients(grads, config.learning_rate(step))
            losses.append(loss)
            step += 1
        logger.debug('epoch finished', model=name, epoch=epoch,
                     loss=float(np.mean(losses[-max(1, math.ceil(y.size / config.batch_size)):])))
    return model, losses

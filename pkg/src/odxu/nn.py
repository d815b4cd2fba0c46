"""Dense feed-forward networks with manual backpropagation.

Houses the reconstruction autoencoder (payload bytes -> 12-d latent space)
and the fully connected baseline classifier.  Gradients are computed by
hand and verified against central finite differences via :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .exceptions import TrainingDivergedError
from .stopping import EarlyStop, early_stop_check
from .validation import check_fitted, check_matrix

_ACTIVATIONS = ("relu", "linear")


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "linear":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _activate_grad(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {tag!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class DenseNet:
    """A stack of dense layers, each (weight matrix, bias vector, activation tag).

    Layers chain dimensionally: layer k's output width equals layer k+1's
    input width.  Parameters are plain float64 arrays mutated in place by
    the trainer, so two DenseNets built over the same arrays share weights.
    """

    def __init__(self, layers):
        layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64), tag)
                  for W, b, tag in layers]
        if not layers:
            raise ValueError("need at least one layer")
        for k, (W, b, tag) in enumerate(layers):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: weight/bias shapes {W.shape}/{b.shape} inconsistent")
            if tag not in _ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {tag!r}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k}: parameters must be finite")
            if k and layers[k - 1][0].shape[1] != W.shape[0]:
                raise ValueError(
                    f"layer {k} input dim {W.shape[0]} != layer {k-1} output dim "
                    f"{layers[k - 1][0].shape[1]}"
                )
        self.layers = layers

    @classmethod
    def build(cls, dims, activations, seed: int) -> "DenseNet":
        """Initialize weights and biases uniform in +-1/sqrt(fan_in)."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for d_in, d_out, tag in zip(dims[:-1], dims[1:], activations):
            bound = 1.0 / np.sqrt(d_in)
            W = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
            layers.append((W, b, tag))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b, _ in self.layers)

    def architecture(self) -> tuple[list[int], list[str]]:
        dims = [self.input_dim] + [W.shape[1] for W, _, _ in self.layers]
        return dims, [tag for _, _, tag in self.layers]

    def forward(self, X: np.ndarray) -> np.ndarray:
        a = np.asarray(X, dtype=np.float64)
        for W, b, tag in self.layers:
            a = _activate(a @ W + b, tag)
        return a

    def _forward_cached(self, X):
        pre, acts = [], [np.asarray(X, dtype=np.float64)]
        for W, b, tag in self.layers:
            z = acts[-1] @ W + b
            pre.append(z)
            acts.append(_activate(z, tag))
        return pre, acts

    def loss(self, X, target, loss_tag: str) -> float:
        out = self.forward(X)
        return float(_loss_and_output_grad(out, target, loss_tag)[0])

    def _backward(self, pre, acts, d_out):
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        dA = d_out
        for k in range(len(self.layers) - 1, -1, -1):
            W, _, tag = self.layers[k]
            dZ = dA * _activate_grad(pre[k], tag)
            grads.append((acts[k].T @ dZ, dZ.sum(axis=0)))
            dA = dZ @ W.T
        grads.reverse()
        return grads, dA

    def loss_and_grads(self, X, target, loss_tag: str):
        """Loss plus analytic parameter gradients, one (dW, db) per layer."""
        pre, acts = self._forward_cached(X)
        loss, d_out = _loss_and_output_grad(acts[-1], target, loss_tag)
        grads, _ = self._backward(pre, acts, d_out)
        return loss, grads

    def grads_from_output_grad(self, X, d_out):
        """Backpropagate an externally supplied output gradient.

        Returns (parameter grads, input grad); lets another objective (the
        clustering loss) drive this net's parameters.
        """
        pre, acts = self._forward_cached(X)
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.shape != acts[-1].shape:
            raise ValueError(f"output grad shape {d_out.shape} != {acts[-1].shape}")
        return self._backward(pre, acts, d_out)

    def param_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b, _ in self.layers])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        pos = 0
        for W, b, _ in self.layers:
            W[...] = vec[pos: pos + W.size].reshape(W.shape)
            pos += W.size
            b[...] = vec[pos: pos + b.size]
            pos += b.size


def _loss_and_output_grad(out: np.ndarray, target, loss_tag: str):
    if loss_tag == "mse":
        target = np.asarray(target, dtype=np.float64)
        diff = out - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if loss_tag == "xent":
        y = np.asarray(target, dtype=np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        n = out.shape[0]
        loss = -float(log_p[np.arange(n), y].mean())
        d_out = np.exp(log_p)
        d_out[np.arange(n), y] -= 1.0
        return loss, d_out / n
    raise ValueError(f"unknown loss {loss_tag!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings.

    learning_rate 0 is accepted (a no-op pass, useful for dry runs) even
    though any real training run wants it strictly positive.
    """

    learning_rate: float
    batch_size: int
    max_epochs: int
    seed: int = 0
    momentum: float = 0.0
    stop: EarlyStop | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")


def sgd_train(net: DenseNet, X, target, loss_tag: str, cfg: TrainConfig,
              *, phase: str | None = None) -> list[float]:
    """Train a net in place; returns per-epoch mean training loss.

    The epoch loss is the batch-size-weighted mean of minibatch losses,
    each measured before its update.  Raises TrainingDivergedError the
    moment a non-finite loss appears.  When both ``cfg.stop`` and ``phase``
    are given, halts once the plateau rule fires.
    """
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target)
    n = len(X)
    if n == 0:
        raise ValueError("training data must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    velocity = None
    if cfg.momentum > 0.0:
        velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b, _ in net.layers]
    history: list[float] = []
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start: start + cfg.batch_size]
            # a diverging run overflows before the loss turns non-finite;
            # the explicit check below is the error path, not the warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = net.loss_and_grads(X[idx], target[idx], loss_tag)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss!r}", epoch=epoch, batch=batch_index
                )
            loss_sum += loss * len(idx)
            with np.errstate(over="ignore", invalid="ignore"):
                for k, (W, b, _) in enumerate(net.layers):
                    dW, db = grads[k]
                    if velocity is not None:
                        vW, vb = velocity[k]
                        vW *= cfg.momentum
                        vW -= cfg.learning_rate * dW
                        vb *= cfg.momentum
                        vb -= cfg.learning_rate * db
                        W += vW
                        b += vb
                    else:
                        W -= cfg.learning_rate * dW
                        b -= cfg.learning_rate * db
        history.append(loss_sum / n)
        if cfg.stop is not None and phase is not None and early_stop_check(history, cfg.stop, phase):
            break
    return history


def grad_check(net: DenseNet, loss_tag: str, probe, *, n_checks: int = 50,
               step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``n_checks`` randomly chosen parameters (all of them when the net
    is smaller).  The relative error uses an absolute floor of 1e-2 in the
    denominator so finite-difference truncation noise on near-zero gradients
    does not register as disagreement.
    """
    x, target = probe
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.input_dim:
        raise ValueError(f"probe width {x.shape[1]} != net input dim {net.input_dim}")
    target = np.asarray(target)
    if loss_tag == "mse":
        target = np.atleast_2d(target)
    else:
        target = np.atleast_1d(target)

    _, grads = net.loss_and_grads(x, target, loss_tag)
    analytic = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])

    vec = net.param_vector()
    rng = np.random.default_rng(seed)
    k = min(n_checks, len(vec))
    picks = rng.choice(len(vec), size=k, replace=False)

    worst = 0.0
    try:
        for i in picks:
            orig = vec[i]
            vec[i] = orig + step
            net.set_param_vector(vec)
            loss_plus = net.loss(x, target, loss_tag)
            vec[i] = orig - step
            net.set_param_vector(vec)
            loss_minus = net.loss(x, target, loss_tag)
            vec[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-2)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    finally:
        net.set_param_vector(vec)
    return worst


class Autoencoder(TransformerMixin, BaseEstimator):
    """Reconstruction autoencoder mapping payload vectors to a small latent space.

    The encoder funnels ``n_features -> hidden... -> latent_dim`` with ReLU
    hidden layers and a linear latent layer; the decoder mirrors it back.
    Trained with mean squared reconstruction error under plain mini-batch
    SGD.  On the constant-payload fixture the per-epoch loss is
    non-increasing for learning rates up to about 1.0; larger steps
    oscillate and diverge near 20.

    Parameters
    ----------
    hidden : tuple of int
        Encoder hidden layer widths (mirrored in the decoder).
    latent_dim : int
        Width of the latent representation consumed downstream.
    warm_start : bool
        When True, a second fit continues training the existing parameters
        instead of reinitializing (used to fine-tune on new traffic).
    """

    def __init__(self, hidden=(512, 128), latent_dim=12, learning_rate=0.01,
                 batch_size=32, max_epochs=50, momentum=0.0, seed=0, stop=None,
                 warm_start=False):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.momentum = momentum
        self.seed = seed
        self.stop = stop
        self.warm_start = warm_start

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, seed=self.seed, momentum=self.momentum,
            stop=self.stop,
        )

    def fit(self, X, y=None):
        X = check_matrix(X, name="X")
        if not (self.warm_start and hasattr(self, "net_")):
            hidden = list(self.hidden)
            dims = [X.shape[1], *hidden, self.latent_dim, *reversed(hidden), X.shape[1]]
            acts = ["relu"] * len(hidden) + ["linear"] + ["relu"] * len(hidden) + ["linear"]
            self.net_ = DenseNet.build(dims, acts, self.seed)
            self._n_encoder_layers = len(hidden) + 1
            self.n_features_in_ = X.shape[1]
            self.loss_history_ = []
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"warm start expects {self.n_features_in_} features, got {X.shape[1]}"
            )
        history = sgd_train(self.net_, X, X, "mse", self._config(), phase="ae")
        self.loss_history_ = list(self.loss_history_) + history
        return self

    @property
    def encoder_(self) -> DenseNet:
        check_fitted(self, "net_")
        return DenseNet(self.net_.layers[: self._n_encoder_layers])

    @property
    def decoder_(self) -> DenseNet:
        check_fitted(self, "net_")
        return DenseNet(self.net_.layers[self._n_encoder_layers:])

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "net_")
        X = check_matrix(X, n_features=self.n_features_in_, name="X")
        return self.encoder_.forward(X)

    def reconstruct(self, X) -> np.ndarray:
        check_fitted(self, "net_")
        X = check_matrix(X, n_features=self.n_features_in_, name="X")
        return self.net_.forward(X)


class FcnnClassifier(ClassifierMixin, BaseEstimator):
    """Fully connected softmax classifier over raw payload vectors.

    Default hidden widths (1024, 512, 100).  ``n_params_`` reports the
    trainable parameter count sum(d_in * d_out + d_out) over all layers for
    the fitted class count.
    """

    def __init__(self, hidden=(1024, 512, 100), learning_rate=0.01, batch_size=64,
                 max_epochs=30, momentum=0.0, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X = check_matrix(X, name="X")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y must align")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        idx = np.searchsorted(self.classes_, y)
        dims = [X.shape[1], *self.hidden, len(self.classes_)]
        acts = ["relu"] * len(self.hidden) + ["linear"]
        self.net_ = DenseNet.build(dims, acts, self.seed)
        self.n_features_in_ = X.shape[1]
        self.n_params_ = self.net_.n_params
        cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, seed=self.seed, momentum=self.momentum,
        )
        self.loss_history_ = sgd_train(self.net_, X, idx, "xent", cfg)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_fitted(self, "net_")
        X = check_matrix(X, n_features=self.n_features_in_, name="X")
        return _softmax(self.net_.forward(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def param_count(dims) -> int:
    """sum(d_in * d_out + d_out) over consecutive layer widths."""
    return int(sum(d_in * d_out + d_out for d_in, d_out in zip(dims[:-1], dims[1:])))

"""Bias-free (optionally biased) MLP with exact forward and backward passes.

Parameters are kept in one flat list, ``[W1, ..., WL, b1, ..., bL]`` (biases
only when ``spec.bias``). Gradients, optimizer buffers and hyperparameters all
use the same ordering.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import InvalidParameterError, ShapeMismatchError

ACTIVATIONS = ("relu", "identity", "tanh")
READOUTS = ("sum", "mean")


def _relu(h):
    return np.maximum(h, 0.0)


def _relu_prime(h):
    # subgradient at 0 is 0, identical for base and widened runs
    return (h > 0).astype(np.float64)


def _tanh_prime(h):
    return 1.0 - np.tanh(h) ** 2


_PHI = {
    "relu": (_relu, _relu_prime),
    "identity": (lambda h: h, np.ones_like),
    "tanh": (np.tanh, _tanh_prime),
}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activation: str = "relu"
    readout: str = "mean"
    trainable: tuple = None
    bias: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise InvalidParameterError("an MLP needs depth L >= 2 (at least three widths)")
        if min(widths) < 1:
            raise InvalidParameterError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.readout not in READOUTS:
            raise InvalidParameterError(f"unknown readout {self.readout!r}")
        mask = (True,) * self.depth if self.trainable is None else tuple(bool(t) for t in self.trainable)
        if len(mask) != self.depth:
            raise InvalidParameterError(f"trainable mask has length {len(mask)}, expected {self.depth}")
        object.__setattr__(self, "trainable", mask)

    @property
    def depth(self):
        return len(self.widths) - 1

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def d_out(self):
        return self.widths[-1]

    def weight_shape(self, layer):
        """Shape of W^(layer), layer in 1..L."""
        return (self.widths[layer], self.widths[layer - 1])

    def param_shapes(self):
        shapes = [self.weight_shape(l) for l in range(1, self.depth + 1)]
        if self.bias:
            shapes += [(self.widths[l],) for l in range(1, self.depth + 1)]
        return shapes

    def param_names(self):
        names = [f"W{l}" for l in range(1, self.depth + 1)]
        if self.bias:
            names += [f"b{l}" for l in range(1, self.depth + 1)]
        return names

    def param_layers(self):
        layers = list(range(1, self.depth + 1))
        return layers + layers if self.bias else layers

    def param_trainable(self):
        return [self.trainable[l - 1] for l in self.param_layers()]

    def with_widths(self, widths):
        return replace(self, widths=tuple(widths))

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "readout": self.readout,
            "trainable": list(self.trainable),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            widths=tuple(d["widths"]),
            activation=d.get("activation", "relu"),
            readout=d.get("readout", "mean"),
            trainable=tuple(d["trainable"]) if d.get("trainable") is not None else None,
            bias=bool(d.get("bias", False)),
        )


@dataclass
class MlpModel:
    """Weights of an MLP. ``multipliers[l-1]`` is the constant A in W = A * W̄."""

    spec: MlpSpec
    params: list
    multipliers: list = field(default=None)

    def __post_init__(self):
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        shapes = self.spec.param_shapes()
        if len(self.params) != len(shapes):
            raise ShapeMismatchError(f"expected {len(shapes)} parameter arrays, got {len(self.params)}")
        for name, p, s in zip(self.spec.param_names(), self.params, shapes):
            if p.shape != s:
                raise ShapeMismatchError(f"{name} has shape {p.shape}, expected {s}")
        if self.multipliers is None:
            self.multipliers = [1.0] * self.spec.depth
        self.multipliers = [float(a) for a in self.multipliers]
        if len(self.multipliers) != self.spec.depth:
            raise ShapeMismatchError("one weight multiplier per layer is required")

    @classmethod
    def zeros(cls, spec, multipliers=None):
        return cls(spec, [np.zeros(s) for s in spec.param_shapes()], multipliers)

    @property
    def weights(self):
        return self.params[: self.spec.depth]

    @property
    def biases(self):
        return self.params[self.spec.depth :] if self.spec.bias else []

    def copy(self):
        return MlpModel(self.spec, [p.copy() for p in self.params], list(self.multipliers))

    def layer_scale(self, layer):
        """Effective factor multiplying W̄^(layer) x in the forward pass."""
        scale = self.multipliers[layer - 1]
        if layer == self.spec.depth and self.spec.readout == "mean":
            scale /= self.spec.widths[-2]
        return scale

    def predict(self, X):
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    """Per-layer pre-activations h^(l) and activations x^(l), batch-major."""

    xs: list  # x^(0) .. x^(L-1)
    hs: list  # h^(1) .. h^(L)


@dataclass
class BackpropResult:
    grads: list  # same ordering as MlpModel.params
    dh: list  # dh^(1) .. dh^(L)
    dx: list  # dx^(0) .. dx^(L-1)


def _as_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.spec.d_in:
        raise ShapeMismatchError(f"input has shape {X.shape}, expected (*, {model.spec.d_in})")
    return X, single


def forward(model, X):
    """Evaluate the MLP on a vector or a batch (rows). Returns (output, cache)."""
    X, single = _as_batch(model, X)
    spec = model.spec
    phi = _PHI[spec.activation][0]
    L = spec.depth
    xs, hs = [X], []
    x = X
    for l in range(1, L + 1):
        h = (x @ model.params[l - 1].T) * model.layer_scale(l)
        if spec.bias:
            h = h + model.params[L + l - 1]
        hs.append(h)
        if l < L:
            x = phi(h)
            xs.append(x)
    out = hs[-1]
    return (out[0] if single else out), ForwardCache(xs, hs)


def backward(model, cache, loss_grad):
    """Backpropagate ``loss_grad`` = dL/dh^(L) (rows summed over the batch).

    Frozen layers (``spec.trainable``) still receive their gradient arrays but
    skip the outer product; their entries are zero.
    """
    spec = model.spec
    L = spec.depth
    G = np.asarray(loss_grad, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if len(cache.hs) != L or G.shape != cache.hs[-1].shape:
        raise ShapeMismatchError(f"loss gradient shape {G.shape} does not match cache")
    phi_prime = _PHI[spec.activation][1]
    grads = [None] * len(model.params)
    dhs = [None] * L
    dxs = [None] * L
    dh = G
    for l in range(L, 0, -1):
        dhs[l - 1] = dh
        scale = model.layer_scale(l)
        W = model.params[l - 1]
        if spec.trainable[l - 1]:
            grads[l - 1] = (dh.T @ cache.xs[l - 1]) * scale
            if spec.bias:
                grads[L + l - 1] = dh.sum(axis=0)
        else:
            grads[l - 1] = np.zeros_like(W)
            if spec.bias:
                grads[L + l - 1] = np.zeros(spec.widths[l])
        if l > 1:
            dx = (dh @ W) * scale
            dxs[l - 1] = dx
            dh = dx * phi_prime(cache.hs[l - 2])
        else:
            dxs[0] = (dh @ W) * scale
    return BackpropResult(grads, dhs, dxs)


class Loss:
    """A loss with per-sample value and derivative w.r.t. the network output."""

    name = None

    def value(self, Y, T):
        raise NotImplementedError

    def grad(self, Y, T):
        raise NotImplementedError


class MSELoss(Loss):
    """0.5 * ||y - t||^2 per sample, so that L'(y) = y - t."""

    name = "mse"

    def value(self, Y, T):
        return 0.5 * np.sum((Y - T) ** 2, axis=-1)

    def grad(self, Y, T):
        return Y - T


class CrossEntropyLoss(Loss):
    """Softmax cross-entropy; targets are integer labels or one-hot rows."""

    name = "cross_entropy"

    @staticmethod
    def _onehot(Y, T):
        T = np.asarray(T)
        if T.shape == Y.shape:
            return T.astype(np.float64)
        labels = T.reshape(-1).astype(int)
        out = np.zeros_like(Y)
        out[np.arange(len(labels)), labels] = 1.0
        return out

    @staticmethod
    def _log_softmax(Y):
        Z = Y - Y.max(axis=-1, keepdims=True)
        return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))

    def value(self, Y, T):
        return -np.sum(self._onehot(Y, T) * self._log_softmax(Y), axis=-1)

    def grad(self, Y, T):
        return np.exp(self._log_softmax(Y)) - self._onehot(Y, T)


LOSSES = {"mse": MSELoss(), "cross_entropy": CrossEntropyLoss()}


def get_loss(loss):
    if isinstance(loss, Loss):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise InvalidParameterError(f"unknown loss {loss!r}") from None


def loss_and_grad(model, X, T, loss="mse"):
    """Mean loss over the batch and the mean gradient for every parameter."""
    loss = get_loss(loss)
    X, _ = _as_batch(model, X)
    if X.shape[0] == 0:
        raise InvalidParameterError("empty batch")
    T = np.asarray(T, dtype=np.float64)
    if loss.name == "mse" and T.ndim == 1:
        T = T.reshape(X.shape[0], -1)
    Y, cache = forward(model, X)
    n = X.shape[0]
    value = float(np.mean(loss.value(Y, T)))
    res = backward(model, cache, loss.grad(Y, T) / n)
    return value, res.grads

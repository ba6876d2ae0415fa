"""Training loop pieces shared by the widening, upscaling and harness code."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError
from .model import forward, get_loss, loss_and_grad
from .optim import OptState, step


@dataclass
class Trainer:
    model: object
    rule: object
    hp: object
    loss: object = "mse"
    state: OptState = None
    clip_norm: float = None

    def __post_init__(self):
        self.loss = get_loss(self.loss)
        if self.state is None:
            self.state = OptState.fresh(self.rule, self.model.spec.param_shapes())
        if self.clip_norm is not None:
            warnings.warn(
                "gradient clipping is not an entrywise update; width equivalence no longer holds",
                stacklevel=2,
            )

    def step(self, X, Y):
        """One optimizer step on the batch; returns the loss before the update."""
        value, grads = loss_and_grad(self.model, X, Y, self.loss)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {self.state.t}")
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        step(self.model.params, grads, self.state, self.hp, self.model.spec.param_trainable())
        return value

    def evaluate(self, X, Y):
        return evaluate_loss(self.model, X, Y, self.loss)


def evaluate_loss(model, X, Y, loss="mse"):
    loss = get_loss(loss)
    out = forward(model, np.atleast_2d(X))[0]
    Y = np.asarray(Y)
    if loss.name == "mse":
        Y = Y.astype(np.float64).reshape(out.shape)
    return float(np.mean(loss.value(out, Y)))


def activation_rms(model, X):
    """RMS of each hidden pre-activation h^(1..L-1) over the batch."""
    _, cache = forward(model, X)
    return [float(np.sqrt(np.mean(h * h))) for h in cache.hs[:-1]]


class BatchStream:
    """Deterministic minibatch order over a fixed training set.

    Batches are drawn by shuffling the index set with a seeded generator
    once per epoch; identical seeds give identical batch sequences.
    """

    def __init__(self, X, Y, batch_size, rng):
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y)
        self.batch_size = min(int(batch_size), len(self.X)) if batch_size else len(self.X)
        self.rng = rng
        self._order = np.empty(0, dtype=int)

    def next(self):
        if len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(len(self.X))])
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return self.X[idx], self.Y[idx]

    def take(self, steps):
        return [self.next() for _ in range(steps)]


@dataclass
class Trajectory:
    """Per-step training log; ``diverged`` marks a run aborted on NaN/inf."""

    rows: list = field(default_factory=list)
    diverged: bool = False
    error: str = None

    @property
    def losses(self):
        return [r["train_loss"] for r in self.rows]

"""scikit-learn compatible estimators trained under μP, with in-place upscaling."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d, validate_data

from .checkpoint import Checkpoint, make_meta
from .exceptions import InvalidParameterError
from .linalg import STREAM_INIT, STREAM_ORDER, make_rng
from .model import MlpModel, MlpSpec, forward
from .mup import BaseConstants, init_weights, resolve_hparams
from .optim import UpdateRule
from .training import BatchStream, Trainer
from .upscale import UpscaleConfig, upscale


def check_hidden(hidden):
    hidden = (hidden,) if np.isscalar(hidden) else tuple(hidden)
    if not hidden or any(int(h) != h or h < 1 for h in hidden):
        raise InvalidParameterError(f"hidden widths must be positive integers, got {hidden!r}")
    return tuple(int(h) for h in hidden)


def check_positive(name, value, allow_zero=False):
    if value is None or not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise InvalidParameterError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return value


class _MupMLPBase(BaseEstimator):
    _loss = None

    def __init__(
        self,
        hidden=(32, 32),
        activation="relu",
        readout="mean",
        bias=False,
        optimizer="adam",
        decay_mode="vanilla",
        lr=0.01,
        wd=0.0,
        eps=1e-8,
        init_std=1.0,
        max_iter=200,
        batch_size=64,
        random_state=0,
    ):
        self.hidden = hidden
        self.activation = activation
        self.readout = readout
        self.bias = bias
        self.optimizer = optimizer
        self.decay_mode = decay_mode
        self.lr = lr
        self.wd = wd
        self.eps = eps
        self.init_std = init_std
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.random_state = random_state

    # hooks for the subclasses
    def _targets(self, y, fitting, classes=None):
        raise NotImplementedError

    def _d_out(self):
        raise NotImplementedError

    def _rule(self):
        return UpdateRule.parse(self.optimizer, decay_mode=self.decay_mode)

    def _base(self):
        check_positive("lr", self.lr, allow_zero=True)
        check_positive("wd", self.wd, allow_zero=True)
        check_positive("eps", self.eps, allow_zero=True)
        check_positive("init_std", self.init_std, allow_zero=True)
        return BaseConstants(lr=self.lr, wd=self.wd, eps=self.eps, init_std=self.init_std)

    def _seed(self):
        rs = self.random_state
        if rs is None:
            return 0
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        raise InvalidParameterError("random_state must be an int or None")

    def _init(self, X, Y):
        hidden = check_hidden(self.hidden)
        rule = self._rule()
        spec = MlpSpec((X.shape[1], *hidden, self._d_out()), self.activation, self.readout, bias=self.bias)
        base = self._base()
        model = init_weights(MlpModel.zeros(spec), base, make_rng(self._seed(), STREAM_INIT), m=rule.m)
        hp = resolve_hparams(spec, base, rule.m, rule.decay_mode)
        self.trainer_ = Trainer(model, rule, hp, self._loss)
        self.meta_ = make_meta(base, rule.m, [{"op": "init", "seed": self._seed()}], rule=rule.to_dict())
        self.loss_curve_ = []
        self.n_features_in_ = X.shape[1]

    def _train(self, X, Y, steps):
        if int(steps) != steps or steps < 0:
            raise InvalidParameterError(f"max_iter must be a non-negative integer, got {steps!r}")
        bs = self.batch_size if self.batch_size else len(X)
        check_positive("batch_size", bs)
        stream = BatchStream(X, Y, bs, make_rng(self._seed(), STREAM_ORDER, self.trainer_.state.t))
        for _ in range(int(steps)):
            self.loss_curve_.append(self.trainer_.step(*stream.next()))
        self.n_iter_ = self.trainer_.state.t
        return self

    def _validate(self, X, y, reset):
        return validate_data(
            self, X, y, reset=reset, dtype=np.float64, multi_output=True, y_numeric=self._loss == "mse"
        )

    def fit(self, X, y):
        X, y = self._validate(X, y, reset=True)
        Y = self._targets(y, fitting=True)
        self._init(X, Y)
        return self._train(X, Y, self.max_iter)

    def partial_fit(self, X, y, steps=1, classes=None):
        """Continue training (or start, if unfitted) for ``steps`` minibatch updates."""
        first = not hasattr(self, "trainer_")
        X, y = self._validate(X, y, reset=first)
        Y = self._targets(y, fitting=first, classes=classes)
        if first:
            self._init(X, Y)
        return self._train(X, Y, steps)

    def _raw(self, X):
        check_is_fitted(self, "trainer_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return forward(self.trainer_.model, X)[0]

    @property
    def model_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.model

    def to_checkpoint(self):
        check_is_fitted(self, "trainer_")
        t = self.trainer_
        return Checkpoint(t.model.copy(), t.state.copy(), t.hp, dict(self.meta_))

    def upscale(self, k=2, noise_std=0.0, lr=None, random_state=None):
        """Return a new fitted estimator whose hidden layers are ``k`` times wider.

        With ``noise_std=0`` and ``lr=None`` it predicts exactly like ``self``
        and keeps training as if no widening had happened.
        """
        check_is_fitted(self, "trainer_")
        seed = self._seed() if random_state is None else int(random_state)
        res = upscale(self.to_checkpoint(), UpscaleConfig(k=k, noise_std=noise_std, lr=lr, seed=seed))
        new = self.__class__(**self.get_params())
        new.set_params(hidden=tuple(res.model.spec.widths[1:-1]), lr=res.checkpoint.base.lr)
        for attr in ("n_features_in_", "n_outputs_", "classes_"):
            if hasattr(self, attr):
                setattr(new, attr, getattr(self, attr))
        new.trainer_ = Trainer(res.model, res.state.rule, res.hp, self._loss, res.state)
        new.meta_ = res.checkpoint.meta
        new.loss_curve_ = list(self.loss_curve_)
        new.n_iter_ = res.state.t
        new.upscale_report_ = res.report
        return new


class MupMLPRegressor(RegressorMixin, _MupMLPBase):
    """MLP regressor (mse) with μP initialization and per-weight hyperparameters."""

    _loss = "mse"

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags

    def _targets(self, y, fitting, classes=None):
        Y = y.reshape(len(y), -1)
        if fitting:
            self.n_outputs_ = Y.shape[1]
        elif Y.shape[1] != self.n_outputs_:
            raise InvalidParameterError(f"y has {Y.shape[1]} outputs, expected {self.n_outputs_}")
        return Y

    def _d_out(self):
        return self.n_outputs_

    def predict(self, X):
        out = self._raw(X)
        return out[:, 0] if self.n_outputs_ == 1 else out


class MupMLPClassifier(ClassifierMixin, _MupMLPBase):
    """Softmax MLP classifier with μP initialization and per-weight hyperparameters."""

    _loss = "cross_entropy"

    def partial_fit(self, X, y, classes=None, steps=1):
        """As for the regressor; ``classes`` fixes the label set on the first call."""
        return super().partial_fit(X, y, steps=steps, classes=classes)

    def _targets(self, y, fitting, classes=None):
        y = column_or_1d(y, warn=True)
        check_classification_targets(y)
        if fitting:
            self.classes_ = np.unique(y if classes is None else classes)
        unknown = ~np.isin(y, self.classes_)
        if unknown.any():
            raise InvalidParameterError(f"unseen labels {np.unique(y[unknown]).tolist()}")
        return np.searchsorted(self.classes_, y)

    def _d_out(self):
        return len(self.classes_)

    def predict_proba(self, X):
        Z = self._raw(X)
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self._raw(X)
        return self.classes_[np.argmax(scores, axis=1)]

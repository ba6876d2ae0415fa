"""μP width scalings: weight classification and per-weight hyperparameters.

Every resolved hyperparameter is a width-independent base constant times a
width factor:

================  ==================  ==========  ======
factor            matrix-like         vector-like scalar
================  ==================  ==========  ======
A (multiplier)    1                   1           1
B (init var)      1/n_in              1           1
C (lr)            n_out^m / n_in      n^m         1
D (vanilla wd)    n_in / n_out        1/n         1
D~ (decoupled wd) n_in / n_out^m      1/n^m       1
E (eps)           1/n_out             1/n         1
================  ==================  ==========  ======

The output multiplier 1/n of the last layer is realised by the model's
``readout="mean"`` rather than as a weight multiplier.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InvalidParameterError
from .linalg import gauss_mat, gauss_vec

SCALAR = "scalar_like"
VECTOR = "vector_like"
MATRIX = "matrix_like"
DECAY_MODES = ("vanilla", "decoupled")


@dataclass(frozen=True)
class WeightKind:
    kind: str
    dims: tuple = ()

    @classmethod
    def scalar(cls):
        return cls(SCALAR, ())

    @classmethod
    def vector(cls, n):
        return cls(VECTOR, (int(n),))

    @classmethod
    def matrix(cls, n_out, n_in):
        return cls(MATRIX, (int(n_out), int(n_in)))

    def to_dict(self):
        return {"kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["dims"]))

    def __str__(self):
        return f"{self.kind}({', '.join(map(str, self.dims))})" if self.dims else self.kind


@dataclass(frozen=True)
class BaseConstants:
    lr: float = 0.1
    wd: float = 0.0
    eps: float = 1e-8
    init_std: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise InvalidParameterError(f"base constant {name} must be finite and >= 0, got {value!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MupMultipliers:
    A: float = 1.0
    B: float = 1.0
    C: float = 1.0
    D: float = 1.0
    Dt: float = 1.0
    E: float = 1.0

    def rescaled(self, theta, m):
        """The one-parameter symmetry of the scalings (exactly equivalent training)."""
        return MupMultipliers(
            A=self.A * theta,
            B=self.B / theta**2,
            C=self.C / theta ** (1 + m),
            D=self.D * theta**2,
            Dt=self.Dt * theta ** (1 + m),
            E=self.E * theta,
        )

    def to_dict(self):
        return asdict(self)


def _check_m(m):
    if m not in (0, 1):
        raise InvalidParameterError(f"homogeneity degree m must be 0 or 1, got {m!r}")


def _check_decay_mode(decay_mode):
    if decay_mode not in DECAY_MODES:
        raise InvalidParameterError(f"decay_mode must be one of {DECAY_MODES}, got {decay_mode!r}")


def classify(spec):
    """WeightKind for every parameter of ``spec`` (weights first, then biases).

    The first and last weight have one width-scaling axis (vector-like), the
    hidden weights two (matrix-like). Hidden biases are vector-like and the
    output bias is scalar-like.
    """
    L, n = spec.depth, spec.widths
    kinds = []
    for l in range(1, L + 1):
        if l == 1:
            kinds.append(WeightKind.vector(n[1]))
        elif l == L:
            kinds.append(WeightKind.vector(n[L - 1]))
        else:
            kinds.append(WeightKind.matrix(n[l], n[l - 1]))
    if spec.bias:
        kinds += [WeightKind.vector(n[l]) for l in range(1, L)] + [WeightKind.scalar()]
    return kinds


def mup_multipliers(kind, m):
    _check_m(m)
    if kind.kind == SCALAR:
        return MupMultipliers()
    if kind.kind == VECTOR:
        (n,) = kind.dims
        return MupMultipliers(B=1.0, C=float(n) ** m, D=1.0 / n, Dt=float(n) ** -m, E=1.0 / n)
    if kind.kind == MATRIX:
        n_out, n_in = kind.dims
        return MupMultipliers(
            B=1.0 / n_in,
            C=float(n_out) ** m / n_in,
            D=n_in / n_out,
            Dt=n_in / float(n_out) ** m,
            E=1.0 / n_out,
        )
    raise InvalidParameterError(f"unknown weight kind {kind.kind!r}")


def anchored_multipliers(kind, base_kind, m):
    """μP multipliers normalised so they all equal 1 at ``base_kind``'s widths."""
    mult, ref = mup_multipliers(kind, m), mup_multipliers(base_kind, m)
    return MupMultipliers(**{f: getattr(mult, f) / getattr(ref, f) for f in asdict(mult)})


def apply_multipliers(mult, base, decay_mode):
    _check_decay_mode(decay_mode)
    return {
        "init_std": math.sqrt(mult.B) * base.init_std,
        "lr": mult.C * base.lr,
        "wd": (mult.D if decay_mode == "vanilla" else mult.Dt) * base.wd,
        "eps": mult.E * base.eps,
    }


def scaled_hparams(kind, m, base, decay_mode="vanilla"):
    """Resolved ``{init_std, lr, wd, eps}`` for one weight under μP."""
    return apply_multipliers(mup_multipliers(kind, m), base, decay_mode)


@dataclass
class ResolvedHParams:
    """Per-parameter learning rate, weight decay and eps (model parameter order)."""

    lr: list
    wd: list
    eps: list
    decay_mode: str = "vanilla"

    def __post_init__(self):
        _check_decay_mode(self.decay_mode)
        self.lr = [float(v) for v in self.lr]
        self.wd = [float(v) for v in self.wd]
        self.eps = [float(v) for v in self.eps]

    def __len__(self):
        return len(self.lr)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["lr"], d["wd"], d["eps"], d.get("decay_mode", "vanilla"))


def resolve_multipliers(spec, m, multipliers=None):
    kinds = classify(spec)
    if multipliers is None:
        multipliers = [mup_multipliers(k, m) for k in kinds]
    return kinds, multipliers


def resolve_hparams(spec, base, m, decay_mode="vanilla", multipliers=None):
    """μP hyperparameters for every parameter of ``spec``."""
    _, mults = resolve_multipliers(spec, m, multipliers)
    vals = [apply_multipliers(mu, base, decay_mode) for mu in mults]
    return ResolvedHParams(
        lr=[v["lr"] for v in vals],
        wd=[v["wd"] for v in vals],
        eps=[v["eps"] for v in vals],
        decay_mode=decay_mode,
    )


def init_weights(model, base, rng, m=1, multipliers=None, zero_bias=False):
    """Fill ``model.params`` in place with μP initialization and set its multipliers.

    Matrix-like entries get variance σ̄²/n_in, vector- and scalar-like σ̄².
    Weight multipliers A are copied onto the model (per layer).
    """
    spec = model.spec
    kinds, mults = resolve_multipliers(spec, m, multipliers)
    for i, (shape, mu) in enumerate(zip(spec.param_shapes(), mults)):
        std = math.sqrt(mu.B) * base.init_std
        if len(shape) == 2:
            model.params[i][...] = gauss_mat(rng, *shape, std)
        elif zero_bias:
            model.params[i][...] = 0.0
        else:
            model.params[i][...] = gauss_vec(rng, shape[0], std)
    model.multipliers = [mults[l - 1].A for l in range(1, spec.depth + 1)]
    return model


def hparam_report(spec, base, m, decay_mode="vanilla", multipliers=None):
    """JSON-ready table of every parameter's kind, μP factors and resolved values."""
    kinds, mults = resolve_multipliers(spec, m, multipliers)
    rows = []
    for name, kind, mu in zip(spec.param_names(), kinds, mults):
        rows.append(
            {
                "name": name,
                "kind": kind.kind,
                "dims": list(kind.dims),
                "multipliers": mu.to_dict(),
                "resolved": apply_multipliers(mu, base, decay_mode),
            }
        )
    return {
        "spec": spec.to_dict(),
        "m": m,
        "decay_mode": decay_mode,
        "base": base.to_dict(),
        "params": rows,
    }


def dump_hparam_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def rescaled_multipliers(spec, m, theta, multipliers=None):
    """Apply the θ-symmetry to every weight; biases keep their factors.

    Biases enter the forward pass without a multiplier, so only weights can
    absorb the A·θ reparametrization.
    """
    _, mults = resolve_multipliers(spec, m, multipliers)
    L = spec.depth
    return [mu.rescaled(theta, m) if i < L else mu for i, mu in enumerate(mults)]


def theta_rescale_deviation(spec, base, rule, theta, steps, X, Y, seed=0, loss="mse", multipliers=None):
    """Max output deviation over ``steps`` full-batch steps between the μP run
    and its θ-rescaled twin (same seed, same data).

    Both runs share init draws, so W̄ differs by exactly 1/θ and the effective
    weights A·W̄ agree up to rounding.
    """
    from .linalg import STREAM_INIT, make_rng
    from .model import MlpModel, forward
    from .training import Trainer

    m = rule.m
    _, mults = resolve_multipliers(spec, m, multipliers)
    twins = []
    for mu in (mults, rescaled_multipliers(spec, m, theta, mults)):
        model = init_weights(MlpModel.zeros(spec), base, make_rng(seed, STREAM_INIT), m=m, multipliers=mu)
        hp = resolve_hparams(spec, base, m, rule.decay_mode, multipliers=mu)
        twins.append(Trainer(model, rule, hp, loss))
    worst = 0.0
    for t in range(steps + 1):
        a, b = (forward(tr.model, X)[0] for tr in twins)
        worst = max(worst, float(np.max(np.abs(a - b))))
        if t < steps:
            for tr in twins:
                tr.step(X, Y)
    return worst


def theta_rescale_check(spec, base, rule, theta, steps, X, Y, tol=1e-8, **kw):
    """True when the θ-rescaled run tracks the original within ``tol``."""
    return theta_rescale_deviation(spec, base, rule, theta, steps, X, Y, **kw) <= tol

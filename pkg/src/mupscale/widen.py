"""Function-preserving widening with matched hyperparameters and optimizer state.

Each parameter of the widened model is ``s_w * dup(W)`` for a weight scale
``s_w``, and its gradient is ``s_g * dup(dW)`` for a gradient scale ``s_g``:

* W^(l) with sum readout (and every non-output layer): s_w = 1/k_in, s_g = 1/k_out
* W^(L) with mean readout: s_w = 1, s_g = 1/k_in (the 1/n lives in the readout)
* hidden bias b^(l): s_w = 1, s_g = 1/k_l; output bias: s_w = s_g = 1

For an update function homogeneous of degree m, keeping ``W↑_t = s_w dup(W_t)``
at every step requires

    lr↑ = s_w * s_g^-m * lr,   eps↑ = s_g * eps,
    wd↑ = (s_g / s_w) * wd            (vanilla)
    wd↑ = s_g^m / s_w * wd            (decoupled)

First-moment buffers transfer like gradients (``s_g``), second moments with
``s_g**2``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidMultiplierError, InvalidParameterError, ShapeMismatchError
from .linalg import dup_mat, dup_vec
from .mup import MATRIX, SCALAR, VECTOR, ResolvedHParams, classify
from .model import MlpModel, forward
from .optim import FIRST_MOMENT_BUFFERS, SECOND_MOMENT_BUFFERS, OptState


@dataclass(frozen=True)
class WidenPlan:
    """Per-dimension width multipliers k_0..k_L with k_0 = k_L = 1."""

    k: tuple

    def __post_init__(self):
        k = tuple(self.k)
        for v in k:
            if int(v) != v or v < 1:
                raise InvalidMultiplierError(f"width multipliers must be positive integers, got {k}")
        k = tuple(int(v) for v in k)
        if len(k) < 3:
            raise InvalidMultiplierError("a plan needs at least three multipliers (k_0..k_L)")
        if k[0] != 1 or k[-1] != 1:
            raise InvalidMultiplierError(f"input and output multipliers must be 1, got k={k}")
        object.__setattr__(self, "k", k)

    @classmethod
    def uniform(cls, depth, k):
        return cls((1,) + (int(k),) * (depth - 1) + (1,))

    def check(self, spec):
        if len(self.k) != spec.depth + 1:
            raise ShapeMismatchError(f"plan has {len(self.k)} multipliers, spec depth is {spec.depth}")

    def widths(self, spec):
        self.check(spec)
        return tuple(k * n for k, n in zip(self.k, spec.widths))


@dataclass(frozen=True)
class ParamScales:
    k_out: int
    k_in: int
    weight_scale: float
    grad_scale: float


def param_scales(spec, plan):
    """``ParamScales`` for every parameter in model order."""
    plan.check(spec)
    L, k = spec.depth, plan.k
    out = []
    for l in range(1, L + 1):
        if l == L and spec.readout == "mean":
            out.append(ParamScales(k[l], k[l - 1], 1.0, 1.0 / k[l - 1]))
        else:
            out.append(ParamScales(k[l], k[l - 1], 1.0 / k[l - 1], 1.0 / k[l]))
    if spec.bias:
        out += [ParamScales(k[l], 1, 1.0, 1.0 / k[l]) for l in range(1, L + 1)]
    return out


def hparam_factors(scales, m, decay_mode):
    """Multiplicative factors (lr, wd, eps) for one parameter."""
    sw, sg = scales.weight_scale, scales.grad_scale
    lr = sw * sg**-m
    wd = sg / sw if decay_mode == "vanilla" else sg**m / sw
    return {"lr": lr, "wd": wd, "eps": sg}


def table_factors(kind, k_out, k_in, m, decay_mode):
    """Hyperparameter factors for a weight kind under mean-readout widening.

    ``k_out``/``k_in`` are the multipliers of the kind's width axes; a
    vector-like weight uses ``k_out`` as its single multiplier.
    """
    if kind == SCALAR:
        return {"lr": 1.0, "wd": 1.0, "eps": 1.0}
    if kind == VECTOR:
        k = k_out
        return {"lr": float(k) ** m, "wd": 1.0 / k if decay_mode == "vanilla" else float(k) ** -m, "eps": 1.0 / k}
    if kind == MATRIX:
        return {
            "lr": float(k_out) ** m / k_in,
            "wd": k_in / k_out if decay_mode == "vanilla" else k_in / float(k_out) ** m,
            "eps": 1.0 / k_out,
        }
    raise InvalidParameterError(f"unknown weight kind {kind!r}")


def _dup_param(p, sc):
    if p.ndim == 2:
        return dup_mat(p, sc.k_out, sc.k_in, sc.weight_scale)
    out = dup_vec(p, sc.k_out)
    if sc.weight_scale != 1.0:
        out *= sc.weight_scale
    return out


def widen_static(model, plan):
    """Widened model computing exactly the same function as ``model``."""
    spec = model.spec
    scales = param_scales(spec, plan)
    wide_spec = spec.with_widths(plan.widths(spec))
    params = [_dup_param(p, sc) for p, sc in zip(model.params, scales)]
    return MlpModel(wide_spec, params, list(model.multipliers))


def rescale_hparams(hp, spec, plan, m):
    """Hyperparameters for the widened model so that training stays equivalent."""
    scales = param_scales(spec, plan)
    if len(scales) != len(hp):
        raise ShapeMismatchError("hyperparameters do not match the spec")
    factors = [hparam_factors(sc, m, hp.decay_mode) for sc in scales]
    return ResolvedHParams(
        lr=[v * f["lr"] for v, f in zip(hp.lr, factors)],
        wd=[v * f["wd"] for v, f in zip(hp.wd, factors)],
        eps=[v * f["eps"] for v, f in zip(hp.eps, factors)],
        decay_mode=hp.decay_mode,
    )


def transfer_opt_state(state, spec, plan, rule=None):
    """Duplicate and rescale optimizer buffers so the widened run continues exactly."""
    if rule is not None and rule != state.rule:
        raise InvalidParameterError(f"state belongs to {state.rule.name}, not {rule.name}")
    scales = param_scales(spec, plan)
    buffers = {}
    for name, bufs in state.buffers.items():
        if len(bufs) != len(scales):
            raise ShapeMismatchError(f"buffer {name} does not match the spec")
        if name in FIRST_MOMENT_BUFFERS:
            power = 1
        elif name in SECOND_MOMENT_BUFFERS:
            power = 2
        else:
            raise InvalidParameterError(f"no transfer rule for buffer {name!r}")
        new = []
        for b, sc in zip(bufs, scales):
            dup = dup_mat(b, sc.k_out, sc.k_in) if b.ndim == 2 else dup_vec(b, sc.k_out)
            dup *= sc.grad_scale**power
            new.append(dup)
        buffers[name] = new
    return OptState(state.rule, buffers, state.t)


def transfer_buffers(buffers, k):
    """Copy-over rule for non-trainable vector buffers (e.g. running statistics).

    Vector-like buffers are duplicated without rescaling; scalars are copied.
    Bias-free MLPs have none; kept for checkpoints that carry them.
    """
    out = {}
    for name, b in buffers.items():
        b = np.asarray(b, dtype=np.float64)
        out[name] = b.copy() if b.ndim == 0 else dup_vec(b, k)
    return out


def widen_report(spec, plan, m, decay_mode):
    """Per-parameter record of shapes and every scale factor applied."""
    wide = spec.with_widths(plan.widths(spec))
    rows = []
    for name, kind, old, new, sc in zip(
        spec.param_names(), classify(spec), spec.param_shapes(), wide.param_shapes(), param_scales(spec, plan)
    ):
        rows.append(
            {
                "name": name,
                "kind": kind.kind,
                "old_shape": list(old),
                "new_shape": list(new),
                "weight_scale": sc.weight_scale,
                "hparam_factors": hparam_factors(sc, m, decay_mode),
                "state_factors": {"first_moment": sc.grad_scale, "second_moment": sc.grad_scale**2},
            }
        )
    return {"plan": list(plan.k), "m": m, "decay_mode": decay_mode, "readout": spec.readout, "params": rows}


def relation_violation(base, wide, plan):
    """max |W↑ - s_w dup(W)| over all parameters."""
    worst = 0.0
    for p, q, sc in zip(base.params, wide.params, param_scales(base.spec, plan)):
        worst = max(worst, float(np.max(np.abs(q - _dup_param(p, sc)))))
    return worst


def verify_dynamic_equivalence(base, wide, batches, probe, plan):
    """Train two ``Trainer``s in lockstep and measure how far they drift apart.

    ``batches`` is a list of (X, Y) pairs fed to both sides. Returns the max
    over steps (including step 0) of the probe-output deviation and of the
    widening-relation violation, plus the per-step series.
    """
    out_dev, rel_dev = [], []

    def record():
        yb = forward(base.model, probe)[0]
        yw = forward(wide.model, probe)[0]
        out_dev.append(float(np.max(np.abs(yb - yw))))
        rel_dev.append(relation_violation(base.model, wide.model, plan))

    record()
    for X, Y in batches:
        base.step(X, Y)
        wide.step(X, Y)
        record()
    return {
        "max_output_deviation": max(out_dev),
        "max_relation_violation": max(rel_dev),
        "output_deviation": out_dev,
        "relation_violation": rel_dev,
    }

"""Upscaling a μP checkpoint: widen, inject noise, transfer optimizer state, resume.

Noise follows the fresh-initialization scaling of μP: vector-like weights
(first and last layer) get std ``σ̄_Δ``, hidden matrices ``σ̄_Δ/√N_{l-1}``
where ``N`` are the widths after widening. Noise is drawn from its own RNG
stream so noise seeds can be swept without touching data order.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .exceptions import InvalidMultiplierError, InvalidParameterError, NumericalError
from .linalg import STREAM_NOISE, gauss_mat, make_rng, max_partition_spread
from .model import forward, get_loss
from .mup import resolve_hparams
from .optim import OptState, UpdateRule
from .training import Trainer, Trajectory, activation_rms, evaluate_loss
from .widen import WidenPlan, transfer_opt_state, widen_report, widen_static


@dataclass(frozen=True)
class UpscaleConfig:
    """Inputs of one upscale.

    ``lr`` is the post-upscale learning-rate base constant (None keeps the
    checkpoint's). ``layer_noise_std`` overrides ``noise_std`` per layer and
    ``noise_layers`` switches noise off for selected layers; both are indexed
    by layer 1..L in order.
    """

    k: int = 2
    noise_std: float = 0.0
    lr: float = None
    seed: int = 0
    layer_noise_std: tuple = None
    noise_layers: tuple = None

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidMultiplierError(f"k must be a positive integer, got {self.k!r}")
        if not np.isfinite(self.noise_std) or self.noise_std < 0:
            raise InvalidParameterError(f"noise_std must be finite and >= 0, got {self.noise_std!r}")
        if self.lr is not None and (not np.isfinite(self.lr) or self.lr < 0):
            raise InvalidParameterError(f"lr must be finite and >= 0, got {self.lr!r}")
        if self.layer_noise_std is not None and any(s < 0 for s in self.layer_noise_std):
            raise InvalidParameterError("per-layer noise stds must be >= 0")

    def base_noise(self, layer, depth):
        for name, v in (("layer_noise_std", self.layer_noise_std), ("noise_layers", self.noise_layers)):
            if v is not None and len(v) != depth:
                raise InvalidParameterError(f"{name} needs {depth} entries, got {len(v)}")
        if self.noise_layers is not None and not self.noise_layers[layer - 1]:
            return 0.0
        if self.layer_noise_std is not None:
            return float(self.layer_noise_std[layer - 1])
        return float(self.noise_std)


def noise_std_for_layer(layer, widths, noise_std):
    """μP noise std for W^(layer) in a network with the given (widened) widths."""
    L = len(widths) - 1
    if not 1 <= layer <= L:
        raise InvalidParameterError(f"layer {layer} outside [1, {L}]")
    if layer in (1, L):
        return float(noise_std)
    return float(noise_std) / math.sqrt(widths[layer - 1])


@dataclass
class UpscaleResult:
    checkpoint: Checkpoint
    report: dict

    @property
    def model(self):
        return self.checkpoint.model

    @property
    def state(self):
        return self.checkpoint.state

    @property
    def hp(self):
        return self.checkpoint.hp


def _probe_loss(model, probe, loss):
    if probe is None:
        return None
    return evaluate_loss(model, probe[0], probe[1], loss)


def upscale(ckpt, cfg, probe=None, loss="mse"):
    """Widen ``ckpt`` by ``cfg.k``, add noise and transfer its optimizer state.

    Returns the upscaled checkpoint (hyperparameters re-resolved under μP at
    the new widths with base lr ``cfg.lr``) and a report of every scale used.
    """
    ckpt.require_mup()
    base, m = ckpt.base, int(ckpt.meta["m"])
    spec = ckpt.model.spec
    plan = WidenPlan.uniform(spec.depth, cfg.k)
    rule = ckpt.state.rule if ckpt.state is not None else UpdateRule.from_dict(ckpt.meta["rule"])
    if rule.m != m:
        raise InvalidParameterError(f"checkpoint records m={m} but its optimizer has m={rule.m}")

    model = widen_static(ckpt.model, plan)
    widths = model.spec.widths
    rng = make_rng(cfg.seed, STREAM_NOISE)
    stds = []
    for l in range(1, spec.depth + 1):
        std = noise_std_for_layer(l, widths, cfg.base_noise(l, spec.depth))
        stds.append(std)
        W = model.params[l - 1]
        W += gauss_mat(rng, *W.shape, std)

    if ckpt.state is not None:
        state = transfer_opt_state(ckpt.state, spec, plan)
    else:
        state = OptState.fresh(rule, model.spec.param_shapes())
        state.t = ckpt.step
    new_base = replace(base, lr=base.lr if cfg.lr is None else float(cfg.lr), noise_std=float(cfg.noise_std))
    decay_mode = ckpt.hp.decay_mode if ckpt.hp is not None else rule.decay_mode
    hp = resolve_hparams(model.spec, new_base, m, decay_mode)

    meta = dict(ckpt.meta)
    meta["base"] = new_base.to_dict()
    meta["seed_lineage"] = ckpt.seed_lineage + [{"op": "upscale", "seed": int(cfg.seed), "k": int(cfg.k), "step": ckpt.step}]
    meta["rule"] = rule.to_dict()
    out = Checkpoint(model, state, hp, meta)

    report = {
        "k": int(cfg.k),
        "seed": int(cfg.seed),
        "step": ckpt.step,
        "noise_std": float(cfg.noise_std),
        "lr_before": base.lr,
        "lr_after": new_base.lr,
        "widths_before": list(spec.widths),
        "widths_after": list(widths),
        "layer_noise_std": stds,
        "widen": widen_report(spec, plan, m, decay_mode),
        "hparams_before": None if ckpt.hp is None else ckpt.hp.to_dict(),
        "hparams_after": hp.to_dict(),
        "probe_loss_before": _probe_loss(ckpt.model, probe, loss),
        "probe_loss_after": _probe_loss(model, probe, loss),
    }
    return UpscaleResult(out, report)


def symmetry_spread(model, k):
    """Max strided-partition spread of each hidden weight (0 for an exact duplicate)."""
    L = model.spec.depth
    return [max_partition_spread(model.params[l - 1], k, k) for l in range(2, L)]


def trajectory_row(model, step, train_loss, probe, loss):
    row = {"step": int(step), "train_loss": train_loss}
    Xp, Yp = probe
    out = np.atleast_2d(forward(model, np.atleast_2d(Xp))[0])
    row["probe_loss"] = evaluate_loss(model, Xp, Yp, loss)
    for i, v in enumerate(out.ravel()):
        row[f"probe_{i}"] = float(v)
    for l, r in enumerate(activation_rms(model, np.atleast_2d(Xp)), start=1):
        row[f"rms_{l}"] = r
    return row


def trajectory_columns(model, probe):
    n_out = np.atleast_2d(probe[0]).shape[0] * model.spec.d_out
    cols = ["step", "train_loss", "probe_loss"]
    cols += [f"probe_{i}" for i in range(n_out)]
    cols += [f"rms_{l}" for l in range(1, model.spec.depth)]
    return cols


def train_upscaled(model, state, hp, steps, batches, probe, loss="mse"):
    """Train for ``steps`` and log one row per model state.

    Row 0 is the state before training (``train_loss`` empty); row i holds
    the minibatch loss of update i and the probe metrics after it. A NaN or
    inf aborts the run and returns the partial log with ``diverged`` set.
    ``batches`` is anything with a ``next()`` returning (X, Y).
    """
    loss = get_loss(loss)
    trainer = Trainer(model, state.rule, hp, loss, state)
    traj = Trajectory()
    traj.rows.append(trajectory_row(model, state.t, None, probe, loss))
    for _ in range(steps):
        X, Y = batches.next()
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                value = trainer.step(X, Y)
                row = trajectory_row(model, state.t, value, probe, loss)
            if not all(np.isfinite(v) for k, v in row.items() if k != "train_loss"):
                raise NumericalError(f"non-finite probe metrics at step {state.t}")
        except (NumericalError, FloatingPointError) as exc:
            traj.diverged, traj.error = True, str(exc)
            break
        traj.rows.append(row)
    return traj

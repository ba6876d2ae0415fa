"""Entrywise optimizers with homogeneous update functions.

Each rule is an update function Q_t over a weight entry's input history
x_0..x_t (the gradient, plus λW under vanilla decay). SGD-family rules are
degree-1 homogeneous, Adam-family rules degree-0:
``Q_t(a x; a eps) = a^m Q_t(x; eps)``.

Step counter convention: the first step has t = 0, and Adam's bias
corrections use ``1 - beta**(t + 1)`` (the number of accumulated terms), so
the first update is finite.

Update forms:

* vanilla decay:    ``W <- W - lr * Q_t(dW_0 + wd W_0, ..., dW_t + wd W_t; eps)``
* decoupled decay:  ``W <- (1 - wd lr) W - lr * Q_t(dW_0, ..., dW_t; eps)``
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidParameterError, NumericalError, ShapeMismatchError, VersionMismatchError

RULES = ("sgd", "sgd_momentum", "sgd_nesterov", "adam", "amsgrad")
FIRST_MOMENT_BUFFERS = ("momentum", "exp_avg")
SECOND_MOMENT_BUFFERS = ("exp_avg_sq", "max_exp_avg_sq")


@dataclass(frozen=True)
class UpdateRule:
    name: str = "sgd"
    beta: float = 0.9  # momentum
    tau: float = 0.0  # dampening
    beta1: float = 0.9
    beta2: float = 0.999
    decay_mode: str = "vanilla"

    def __post_init__(self):
        if self.name not in RULES:
            raise InvalidParameterError(f"unknown update rule {self.name!r}; choose from {RULES}")
        if self.decay_mode not in ("vanilla", "decoupled"):
            raise InvalidParameterError(f"unknown decay mode {self.decay_mode!r}")

    @property
    def m(self):
        """Homogeneity degree of Q_t."""
        return 1 if self.name.startswith("sgd") else 0

    @property
    def buffers(self):
        return {
            "sgd": (),
            "sgd_momentum": ("momentum",),
            "sgd_nesterov": ("momentum",),
            "adam": ("exp_avg", "exp_avg_sq"),
            "amsgrad": ("exp_avg", "exp_avg_sq", "max_exp_avg_sq"),
        }[self.name]

    @property
    def uses_eps(self):
        return self.m == 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def parse(cls, name, decay_mode=None, **kw):
        """Accepts the rule names above plus the aliases ``momentum``, ``nesterov``, ``adamw``."""
        aliases = {"momentum": "sgd_momentum", "nesterov": "sgd_nesterov", "adamw": "adam"}
        if name == "adamw":
            decay_mode = "decoupled"
        return cls(aliases.get(name, name), decay_mode=decay_mode or "vanilla", **kw)


def q_eval(rule, history, eps=0.0):
    """Reference Q_t over the full history ``x_0..x_t`` (O(t), for testing).

    Works elementwise when the history entries are arrays.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in history]
    if not xs:
        raise InvalidParameterError("history must be nonempty")
    t = len(xs) - 1
    if rule.name == "sgd":
        return xs[-1]
    if rule.name == "sgd_momentum":
        return (1 - rule.tau) * sum(rule.beta ** (t - s) * xs[s] for s in range(t + 1))
    if rule.name == "sgd_nesterov":
        b, tau = rule.beta, rule.tau
        tail = sum((b ** (t - s + 1) * xs[s] for s in range(t)), np.zeros_like(xs[-1]))
        return (1 + b - b * tau) * xs[-1] + (1 - tau) * tail
    b1, b2 = rule.beta1, rule.beta2

    def second_moment(u):
        return (1 - b2) * sum(b2 ** (u - s) * xs[s] ** 2 for s in range(u + 1)) / (1 - b2 ** (u + 1))

    num = (1 - b1) * sum(b1 ** (t - s) * xs[s] for s in range(t + 1)) / (1 - b1 ** (t + 1))
    if rule.name == "adam":
        den = second_moment(t)
    else:
        den = second_moment(0)
        for u in range(1, t + 1):
            den = np.maximum(den, second_moment(u))
    return num / (np.sqrt(den) + eps)


@dataclass
class OptState:
    """Streaming optimizer state: named per-parameter buffers and the step counter."""

    rule: UpdateRule
    buffers: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, rule, shapes):
        return cls(rule, {name: [np.zeros(s) for s in shapes] for name in rule.buffers}, 0)

    def copy(self):
        return OptState(self.rule, {k: [b.copy() for b in v] for k, v in self.buffers.items()}, self.t)


def _streaming_q(rule, state, i, x, eps):
    """Advance parameter i's buffers with input x and return Q_t."""
    t = state.t
    bufs = state.buffers
    if rule.name == "sgd":
        return x
    if rule.name in ("sgd_momentum", "sgd_nesterov"):
        buf = bufs["momentum"][i]
        buf *= rule.beta
        buf += (1 - rule.tau) * x
        return buf.copy() if rule.name == "sgd_momentum" else x + rule.beta * buf
    m, v = bufs["exp_avg"][i], bufs["exp_avg_sq"][i]
    m *= rule.beta1
    m += (1 - rule.beta1) * x
    v *= rule.beta2
    v += (1 - rule.beta2) * x * x
    bc1 = 1 - rule.beta1 ** (t + 1)
    bc2 = 1 - rule.beta2 ** (t + 1)
    if rule.name == "adam":
        den = np.sqrt(v / bc2)
    else:
        vmax = bufs["max_exp_avg_sq"][i]
        np.maximum(vmax, v / bc2, out=vmax)
        den = np.sqrt(vmax)
    return (m / bc1) / (den + eps)


def step(params, grads, state, hp, trainable=None):
    """One in-place optimizer step over all parameters.

    Frozen parameters (``trainable[i]`` false) are left untouched. The step
    counter advances once per call.
    """
    rule = state.rule
    if len(params) != len(grads) or len(params) != len(hp):
        raise ShapeMismatchError("params, grads and hyperparameters must have equal length")
    if trainable is None:
        trainable = [True] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if not trainable[i]:
            continue
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for parameter {i} at step {state.t} ({bad} entries)")
        for name in rule.buffers:
            if state.buffers[name][i].shape != p.shape:
                raise ShapeMismatchError(f"optimizer buffer {name}[{i}] does not match parameter shape")
        lr, wd, eps = hp.lr[i], hp.wd[i], hp.eps[i]
        if rule.decay_mode == "vanilla":
            x = g + wd * p if wd else g
            q = _streaming_q(rule, state, i, x, eps)
            p -= lr * q
        else:
            q = _streaming_q(rule, state, i, g, eps)
            if wd:
                p *= 1 - wd * lr
            p -= lr * q
    state.t += 1


def homogeneity_test(rule, a, trials=100, rng=None, max_len=12):
    """Max over random histories of ``|Q_t(a x; a eps) - a^m Q_t(x; eps)|``."""
    if a <= 0:
        raise InvalidParameterError("scale a must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(trials):
        length = int(rng.integers(1, max_len + 1))
        xs = list(rng.standard_normal(length))
        eps = float(rng.uniform(1e-8, 1e-1)) if rule.uses_eps else 0.0
        lhs = q_eval(rule, [a * x for x in xs], a * eps)
        rhs = a**rule.m * q_eval(rule, xs, eps)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# -- serialization ---------------------------------------------------------

STATE_MAGIC = b"MUPOPT\x00\x00"
STATE_VERSION = 1


def state_header(state):
    """JSON-ready description of the state (arrays listed, not embedded)."""
    arrays = []
    for name in state.rule.buffers:
        for i, b in enumerate(state.buffers[name]):
            arrays.append({"name": name, "index": i, "shape": list(b.shape)})
    return {"rule": state.rule.to_dict(), "t": state.t, "arrays": arrays}


def state_arrays(state):
    return [state.buffers[name][i] for name in state.rule.buffers for i in range(len(state.buffers[name]))]


def state_from_header(header, arrays):
    rule = UpdateRule.from_dict(header["rule"])
    buffers = {name: [] for name in rule.buffers}
    for meta, arr in zip(header["arrays"], arrays):
        buffers[meta["name"]].append(np.asarray(arr, dtype=np.float64).reshape(meta["shape"]))
    return OptState(rule, buffers, int(header["t"]))


def write_arrays(fh, arrays):
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(buf, offset, shapes):
    out = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(buf):
            raise VersionMismatchError("truncated array payload")
        out.append(np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += nbytes
    return out, offset


def pack(magic, version, header, arrays):
    blob = json.dumps(header, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<IQ", version, len(blob)))
    out.write(blob)
    write_arrays(out, arrays)
    return out.getvalue()


def unpack(buf, magic, version):
    """Inverse of ``pack``: returns (header, offset of the first array)."""
    if len(buf) < len(magic) + 12 or buf[: len(magic)] != magic:
        raise VersionMismatchError("bad magic bytes; not a recognised file")
    got_version, hlen = struct.unpack_from("<IQ", buf, len(magic))
    if got_version != version:
        raise VersionMismatchError(f"format version {got_version}, expected {version}")
    start = len(magic) + 12
    try:
        header = json.loads(buf[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VersionMismatchError(f"corrupted header: {exc}") from None
    return header, start + hlen


def serialize_state(state):
    return pack(STATE_MAGIC, STATE_VERSION, state_header(state), state_arrays(state))


def deserialize_state(buf):
    header, offset = unpack(bytes(buf), STATE_MAGIC, STATE_VERSION)
    arrays, _ = read_arrays(buf, offset, [tuple(a["shape"]) for a in header["arrays"]])
    return state_from_header(header, arrays)

"""Infinite-width oracles for two linear MLPs, and finite-width Monte-Carlo checks.

Both examples train on a single scalar datum ``x`` with target ``y*`` using
full-batch SGD and a mean readout. Names follow the input-to-output order
of the weights:

* 3-layer: ``y = A·(B (C x)) / n``; ``C`` (input) and ``A`` (readout) are frozen,
  only the hidden matrix ``B`` trains.
* 4-layer: ``y = A·(B (C (D x))) / n``; ``D`` and ``A`` frozen, ``C`` and ``B`` train.

Initialization: vector weights ``N(0, σ̄²)``, hidden matrices ``N(0, σ̄²/n)``.
Upscaling at step ``T`` widens ``n -> N = k n`` by duplication and adds noise
with std ``σ_Δ`` on vector weights and ``σ_Δ/√N`` on hidden matrices, then
continues with learning rate ``γ̄↑``.

Boundary convention. ``boundary="delayed"`` reproduces recursions whose
pre-upscale sums stop at ``s = T-2``: the upscaled model is built from the
weights after ``T-1`` updates, so the update of step ``T-1`` is discarded.
``boundary="continuous"`` stops at ``s = T-1`` (widen after ``T`` updates),
which is what a plain train-then-upscale run does. The Monte-Carlo
simulator implements both so they can be told apart empirically.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import InvalidParameterError, NumericalError
from .linalg import STREAM_INIT, STREAM_NOISE, dup_vec, make_rng
from .model import get_loss

BOUNDARIES = ("delayed", "continuous")


@dataclass(frozen=True)
class Oracle3Config:
    x: float = 1.0
    y_star: float = 1.0
    sigma: float = 1.0
    lr: float = 0.5
    T: int = 5
    lr_up: float = None
    noise_A: float = 0.0
    noise_B: float = 0.0
    noise_C: float = 0.0
    horizon: int = 10
    boundary: str = "delayed"
    loss: str = "mse"

    def __post_init__(self):
        _validate(self)

    @property
    def lr_after(self):
        return self.lr if self.lr_up is None else self.lr_up

    @property
    def last_pre_update(self):
        """Index P of the last pre-upscale update kept after upscaling."""
        return self.T - 2 if self.boundary == "delayed" else self.T - 1

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Oracle4Config(Oracle3Config):
    noise_D: float = 0.0
    k: int = 2
    inner_start: int = 0

    def __post_init__(self):
        super().__post_init__()
        if int(self.k) != self.k or self.k < 1:
            raise InvalidParameterError(f"k must be a positive integer, got {self.k!r}")
        if self.inner_start not in (0, 1):
            raise InvalidParameterError("inner_start must be 0 or 1")


def _validate(cfg):
    for name in ("sigma", "lr", "noise_A", "noise_B", "noise_C", "noise_D"):
        v = getattr(cfg, name, 0.0)
        if not np.isfinite(v) or v < 0:
            raise InvalidParameterError(f"{name} must be finite and >= 0, got {v!r}")
    if cfg.lr_up is not None and (not np.isfinite(cfg.lr_up) or cfg.lr_up < 0):
        raise InvalidParameterError(f"lr_up must be finite and >= 0, got {cfg.lr_up!r}")
    if cfg.horizon < 1:
        raise InvalidParameterError("horizon must be >= 1")
    if cfg.T < 1:
        raise InvalidParameterError("upscale step T must be >= 1")
    if cfg.boundary not in BOUNDARIES:
        raise InvalidParameterError(f"boundary must be one of {BOUNDARIES}")


def loss_prime(cfg):
    """Scalar L'(y) for the configured loss and target, shared with the model module."""
    loss = get_loss(cfg.loss)
    target = np.array([[cfg.y_star]])

    def lp(y):
        return float(loss.grad(np.array([[y]]), target)[0, 0])

    return lp


@dataclass
class InfWidthState:
    """Oracle output over t = 0..horizon. M', N' are zero before the upscale step."""

    y: np.ndarray
    M: np.ndarray = None
    N: np.ndarray = None
    Mp: np.ndarray = None
    Np: np.ndarray = None
    T: int = None
    extra: dict = field(default_factory=dict)


# -- 3-layer -----------------------------------------------------------------


def oracle3_plain(cfg):
    """ẙ_0..ẙ_horizon without upscaling."""
    lp = loss_prime(cfg)
    c = cfg.lr * cfg.x**2 * cfg.sigma**4
    y = np.zeros(cfg.horizon + 1)
    acc = 0.0
    for t in range(1, cfg.horizon + 1):
        acc += lp(y[t - 1])
        y[t] = -c * acc
    return y


def oracle3(cfg):
    """Full 3-layer sequence: pre-upscale for t < T, post-upscale for t >= T."""
    lp = loss_prime(cfg)
    s2 = cfg.sigma**2
    c_pre = cfg.lr * cfg.x**2 * s2 * s2
    c_post = cfg.lr_after * cfg.x**2 * (s2 + cfg.noise_C**2) * (s2 + cfg.noise_A**2)
    H, T, P = cfg.horizon, cfg.T, cfg.last_pre_update
    y = np.zeros(H + 1)
    g = np.zeros(H + 1)  # L'(ẙ_s)
    for t in range(H + 1):
        if t < T:
            y[t] = -c_pre * g[:t].sum()
        else:
            y[t] = -c_pre * g[: P + 1].sum() - c_post * g[T:t].sum()
        g[t] = lp(y[t])
    return InfWidthState(y=y, T=T)


def oracle3_pre(cfg):
    return oracle3(cfg).y[: min(cfg.T, cfg.horizon + 1)]


def oracle3_post(cfg):
    return oracle3(cfg).y[cfg.T :]


def closed_form3(cfg, t):
    """ẙ_t = y*(1 - (1 - γ̄x²σ̄⁴)^t) for the mse loss, no upscaling."""
    t = np.asarray(t)
    return cfg.y_star * (1 - (1 - cfg.lr * cfg.x**2 * cfg.sigma**4) ** t)


def preserving_lr_up(cfg):
    """γ̄↑ solving γ̄σ̄⁴ = γ̄↑(σ̄²+σ_C²)(σ̄²+σ_A²) in the 3-layer example."""
    s2 = cfg.sigma**2
    return cfg.lr * s2 * s2 / ((s2 + cfg.noise_C**2) * (s2 + cfg.noise_A**2))


# -- 4-layer -----------------------------------------------------------------


def oracle4(cfg, upscale=True):
    """Coupled (ẙ, M, N, M', N') recursion; ``upscale=False`` gives the plain run.

    ``cfg.inner_start`` sets the lower limit ℓ of the nested sums
    Σ_ℓ L'_ℓ M_ℓ / Σ_ℓ L'_ℓ N_ℓ over pre-upscale indices. Only ℓ = 0 keeps the
    zero-noise post-upscale recursion continuous with the pre-upscale one.
    """
    lp = loss_prime(cfg)
    x2, s2 = cfg.x**2, cfg.sigma**2
    s4 = s2 * s2
    g, gu = cfg.lr, cfg.lr_after
    sA, sD = s2 + cfg.noise_A**2, s2 + cfg.noise_D**2
    nA, nB, nC, nD = cfg.noise_A**2, cfg.noise_B**2, cfg.noise_C**2, cfg.noise_D**2
    H, l0 = cfg.horizon, cfg.inner_start
    T = cfg.T if upscale else H + 1
    P = cfg.last_pre_update if upscale else H

    y, M, N = np.zeros(H + 1), np.zeros(H + 1), np.zeros(H + 1)
    Mp, Np, L = np.zeros(H + 1), np.zeros(H + 1), np.zeros(H + 1)

    def inner(v, s):
        return float(np.dot(L[l0:s], v[l0:s])) if s > l0 else 0.0

    for t in range(min(T, H + 1)):
        M[t] = 1 + g * g * x2 * s4 * sum(L[s] * inner(M, s) for s in range(t))
        N[t] = -g * x2 * s2 * L[:t].sum() + g * g * x2 * s4 * sum(L[s] * inner(N, s) for s in range(t))
        one = M[:t] * M[t] * s4 * x2 + N[:t] * N[t] * s4
        y[t] = s4 * N[t] - g * s2 * float(np.dot(L[:t], one))
        L[t] = lp(y[t])

    if T <= H:
        pre = range(P + 1)
        KM = g * g * x2 * s4 * sum(L[s] * inner(M, s) for s in pre)
        KN = -g * x2 * s2 * L[: P + 1].sum() + g * g * x2 * s4 * sum(L[s] * inner(N, s) for s in pre)
        SM = g * s2 * float(np.dot(L[: P + 1], M[: P + 1]))
        SN = g * s2 * float(np.dot(L[: P + 1], N[: P + 1]))
        cM = gu * x2 * sD
        c2 = (s2 * nD / cfg.k + s2 * nC + nC * nD) * x2
        c3 = s2 * nA / cfg.k + s2 * nB + nA * nB
        for t in range(T, H + 1):
            post = range(T, t)
            M[t] = KM + cM * sum(L[s] * (SM + gu * sA * float(np.dot(L[T:s], M[T:s]))) for s in post)
            N[t] = KN + cM * sum(L[s] * (SN + gu * sA * float(np.dot(L[T:s], N[T:s]))) for s in post)
            Mp[t] = 1 + gu * gu * x2 * sD * sA * sum(L[s] * float(np.dot(L[T:s], Mp[T:s])) for s in post)
            Np[t] = -cM * sum(L[s] * (1 - gu * sA * float(np.dot(L[T:s], Np[T:s]))) for s in post)
            Mt, Nt = M[t] + Mp[t], N[t] + Np[t]
            one = M[: P + 1] * Mt * s4 * x2 + N[: P + 1] * Nt * s4
            two = (
                x2 * s4 * (M[T:t] + Mp[T:t]) * Mt
                + s4 * (N[T:t] + Np[T:t]) * Nt
                + Mp[T:t] * Mp[t] * c2
                + Np[T:t] * Np[t] * c3
            )
            y[t] = (
                s4 * Nt
                + c3 * Np[t]
                - s2 * g * float(np.dot(L[: P + 1], one))
                - sA * gu * float(np.dot(L[T:t], two))
            )
            L[t] = lp(y[t])
    return InfWidthState(y=y, M=M, N=N, Mp=Mp, Np=Np, T=T if upscale else None)


def oracle4_plain(cfg):
    return oracle4(cfg, upscale=False).y


def lr_up_grid_mismatch(cfg, grid):
    """Smallest max|post - plain| over a grid of γ̄↑ (4-layer, continuous boundary).

    Zero would mean some post-upscale learning rate reproduces the plain run.
    """
    cfg = replace(cfg, boundary="continuous")
    plain = oracle4_plain(cfg)
    best = math.inf
    for lr_up in grid:
        y = oracle4(replace(cfg, lr_up=float(lr_up))).y
        best = min(best, float(np.max(np.abs(y[cfg.T :] - plain[cfg.T :]))))
    return best


# -- finite-width simulation -------------------------------------------------


class _Hidden:
    """Hidden matrix kept as base + noise + rank-one training updates.

    The represented matrix is ``dup(base)/k + noise + Σ coef u vᵀ``. Keeping
    updates low-rank avoids materialising N×N outer products every step.
    """

    def __init__(self, base, k=1, noise=None, terms=()):
        self.base, self.k, self.noise = base, k, noise
        self.terms = list(terms)

    def _base_mv(self, h, transpose):
        B = self.base.T if transpose else self.base
        if self.k == 1:
            return B @ h
        n = B.shape[1]
        return dup_vec(B @ h.reshape(n, self.k).sum(axis=1), self.k) / self.k

    def matvec(self, h, transpose=False):
        out = self._base_mv(h, transpose)
        if self.noise is not None:
            out += (self.noise.T if transpose else self.noise) @ h
        for coef, u, v in self.terms:
            if transpose:
                out += (coef * float(u @ h)) * v
            else:
                out += (coef * float(v @ h)) * u
        return out

    def update(self, lr, u, v):
        self.terms.append((-lr, u.copy(), v.copy()))

    def widened(self, k, noise):
        terms = [(c / k, dup_vec(u, k), dup_vec(v, k)) for c, u, v in self.terms]
        return _Hidden(self.base, k, noise, terms)


class LinearChain:
    """Finite-width linear MLP of the two examples with frozen first/last weights."""

    def __init__(self, first, hidden, readout):
        self.first, self.hidden, self.readout = first, hidden, readout

    @property
    def width(self):
        return self.readout.size

    @classmethod
    def init(cls, n, n_hidden, sigma, rng):
        first = rng.standard_normal(n) * sigma
        hidden = [_Hidden(rng.standard_normal((n, n)) * (sigma / math.sqrt(n))) for _ in range(n_hidden)]
        readout = rng.standard_normal(n) * sigma
        return cls(first, hidden, readout)

    def _forward(self, x):
        hs = [self.first * x]
        for M in self.hidden:
            hs.append(M.matvec(hs[-1]))
        return float(self.readout @ hs[-1]) / self.width, hs

    def output(self, x):
        return self._forward(x)[0]

    def step(self, x, lp, lr):
        """One SGD step; returns the output before the update."""
        y, hs = self._forward(x)
        d = self.readout * (lp(y) / self.width)
        dhs = [None] * len(self.hidden)
        for j in range(len(self.hidden) - 1, -1, -1):
            dhs[j] = d
            d = self.hidden[j].matvec(d, transpose=True)
        for j, M in enumerate(self.hidden):
            M.update(lr, dhs[j], hs[j])
        return y

    def upscaled(self, k, stds, rng):
        """Widen by k and add noise; ``stds`` = (first, hidden..., readout) base stds."""
        N = self.width * k
        first = dup_vec(self.first, k) + rng.standard_normal(N) * stds[0]
        hidden = []
        for M, s in zip(self.hidden, stds[1:-1]):
            noise = rng.standard_normal((N, N))
            noise *= s / math.sqrt(N)
            hidden.append(M.widened(k, noise))
        readout = dup_vec(self.readout, k) + rng.standard_normal(N) * stds[-1]
        return LinearChain(first, hidden, readout)


def _layout(cfg):
    """(number of hidden matrices, noise stds input-to-output, k)."""
    if isinstance(cfg, Oracle4Config):
        return 2, (cfg.noise_D, cfg.noise_C, cfg.noise_B, cfg.noise_A), cfg.k
    return 1, (cfg.noise_C, cfg.noise_B, cfg.noise_A), getattr(cfg, "k", 2)


def simulate(cfg, width, seed, upscale=True, k=None, boundary=None):
    """Finite-width outputs y_0..y_horizon for one seed.

    ``boundary`` (defaults to ``cfg.boundary``) picks which weights get
    upscaled: those after T-1 updates ("delayed") or after T updates.
    """
    n_hidden, stds, k_default = _layout(cfg)
    k = k_default if k is None else k
    boundary = cfg.boundary if boundary is None else boundary
    lp = loss_prime(cfg)
    net = LinearChain.init(width, n_hidden, cfg.sigma, make_rng(seed, STREAM_INIT))
    H, T = cfg.horizon, cfg.T
    ys = np.zeros(H + 1)
    if not upscale or T > H:
        for t in range(H + 1):
            ys[t] = net.step(cfg.x, lp, cfg.lr) if t < H else net.output(cfg.x)
    else:
        for t in range(T):
            if boundary == "delayed" and t == T - 1:
                ys[t] = net.output(cfg.x)
            else:
                ys[t] = net.step(cfg.x, lp, cfg.lr)
        net = net.upscaled(k, stds, make_rng(seed, STREAM_NOISE))
        for t in range(T, H + 1):
            ys[t] = net.step(cfg.x, lp, cfg.lr_after) if t < H else net.output(cfg.x)
    if not np.all(np.isfinite(ys)):
        raise NumericalError(f"finite-width run diverged (width={width}, seed={seed})")
    return ys


def oracle(cfg, upscale=True):
    if isinstance(cfg, Oracle4Config):
        return oracle4(cfg, upscale=upscale).y
    return oracle3(cfg).y if upscale else oracle3_plain(cfg)


@dataclass
class MonteCarloResult:
    """Rows (width, t, mean_y, oracle_y, abs_err, std) plus per-width summaries."""

    rows: list
    max_abs_err: dict
    rel_err: dict

    def decreasing(self):
        errs = [self.max_abs_err[w] for w in sorted(self.max_abs_err)]
        return all(a > b for a, b in zip(errs, errs[1:]))


def monte_carlo_compare(cfg, widths, seeds, upscale=True, boundary=None, seed_offset=0):
    """Mean over ``seeds`` finite-width runs against the oracle, per width and step.

    ``rel_err[w] = max_t |mean_y - ẙ| / max_t |ẙ|``; ``std`` is the sample
    standard deviation over seeds.
    """
    target = oracle(cfg, upscale)
    scale = float(np.max(np.abs(target)))
    rows, max_abs, rel = [], {}, {}
    for w in widths:
        runs = np.stack(
            [simulate(cfg, w, seed_offset + s, upscale=upscale, boundary=boundary) for s in range(seeds)]
        )
        mean = runs.mean(axis=0)
        std = runs.std(axis=0, ddof=1) if seeds > 1 else np.zeros_like(mean)
        err = np.abs(mean - target)
        for t in range(len(target)):
            rows.append(
                {
                    "width": int(w),
                    "t": t,
                    "mean_y": float(mean[t]),
                    "oracle_y": float(target[t]),
                    "abs_err": float(err[t]),
                    "std": float(std[t]),
                }
            )
        max_abs[int(w)] = float(err.max())
        rel[int(w)] = float(err.max()) / scale if scale > 0 else float(err.max())
    return MonteCarloResult(rows, max_abs, rel)


CSV_COLUMNS = ("width", "t", "mean_y", "oracle_y", "abs_err", "std")

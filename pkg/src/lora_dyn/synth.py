"""Synthetic fine-tuning problems.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream_id,))``. Each purpose (shift, data,
pre-trained weight, initialization, ...) owns its stream, so adding a
consumer never perturbs the others. Normal variates use numpy's ziggurat
sampler (``Generator.standard_normal``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import container
from .errors import ArgumentError
from .matops import SvdFactors, as_matrix, op_norm, svd, truncate_rank

STREAMS = {
    "shift": 0,
    "data": 1,
    "pretrained": 2,
    "init": 3,
    "monte_carlo": 4,
    "resample": 5,
    "covariance": 6,
}

MODEL_KINDS = ("linear", "relu")
DATA_DISTS = ("gaussian", "rademacher", "whitened")


def rng(seed, purpose, *extra):
    """Independent generator for ``purpose`` under ``seed``."""
    key = (STREAMS[purpose],) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class Spectrum:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        for i, v in enumerate(vals):
            if not v > 0 or not np.isfinite(v):
                raise ArgumentError(f"spectrum entries must be positive, got {v}")
            if i and v > vals[i - 1]:
                raise ArgumentError("spectrum must be non-increasing")

    def __len__(self):
        return len(self.values)

    @classmethod
    def geometric(cls, r, kappa, top=1.0):
        """``r`` values decaying geometrically from ``top`` to ``top / kappa``."""
        if r == 1:
            return cls((top,))
        return cls(tuple(top * kappa ** (-i / (r - 1)) for i in range(r)))

    @property
    def kappa(self):
        return self.values[0] / self.values[-1]


@dataclass(frozen=True, eq=False)
class Problem:
    model_kind: str
    d: int
    k: int
    n: int
    r_star: int
    w_pre: np.ndarray
    delta: np.ndarray
    delta_svd: SvdFactors
    x: np.ndarray
    y: np.ndarray
    seed: int = 0

    @property
    def w_tilde(self):
        return self.w_pre + self.delta

    @cached_property
    def gram(self):
        """Empirical covariance X^T X / N."""
        return self.x.T @ self.x / self.n

    @cached_property
    def xty(self):
        return self.x.T @ self.y / self.n

    @cached_property
    def cov_eps(self):
        """Measured concentration level ||X^T X / N - I||_op."""
        return op_norm(self.gram - np.eye(self.d))

    @property
    def spectrum(self):
        return self.delta_svd.s

    @property
    def kappa(self):
        s = self.delta_svd.s
        return float(s[0] / s[-1]) if s.size else 1.0

    def to_bytes(self):
        meta = {"model_kind": self.model_kind, "d": self.d, "k": self.k, "n": self.n,
                "r_star": self.r_star, "seed": self.seed}
        return container.dumps("problem", meta, {
            "w_pre": self.w_pre, "delta": self.delta, "x": self.x, "y": self.y})

    @classmethod
    def from_bytes(cls, data):
        kind, meta, blocks = container.loads(data)
        if kind != "problem":
            raise ArgumentError(f"container holds {kind!r}, not a problem")
        return cls(meta["model_kind"], meta["d"], meta["k"], meta["n"], meta["r_star"],
                   blocks["w_pre"], blocks["delta"],
                   _shift_svd(blocks["delta"], meta["r_star"]),
                   blocks["x"], blocks["y"], meta["seed"])


@dataclass(frozen=True)
class ProblemConfig:
    """Everything needed to build a :class:`Problem` deterministically."""

    d: int
    k: int
    n: int
    r_star: int
    model_kind: str = "linear"
    spectrum: tuple | None = None
    data_dist: str = "gaussian"
    cov_eps: float | None = None
    w_pre: str = "gaussian"
    signal_ratio: float | None = None
    kappa_target: float | None = None
    seed: int = 0
    extras: dict = field(default_factory=dict)


def _shift_svd(delta, r_star):
    f = svd(delta)
    if r_star == 0:
        return SvdFactors(f.u[:, :0], f.s[:0], f.vt[:0, :])
    return truncate_rank(f, r_star)


def make_shift(d, k, r_star, spectrum, seed):
    """Rank-``r_star`` shift U diag(spectrum) V^T with Gaussian-SVD factors."""
    spectrum = spectrum if isinstance(spectrum, Spectrum) else Spectrum(tuple(spectrum))
    if len(spectrum) != r_star:
        raise ArgumentError(f"spectrum has {len(spectrum)} values, expected r_star={r_star}")
    if not 0 < r_star < min(d, k):
        raise ArgumentError(f"need 0 < r_star < min(d, k), got r_star={r_star}, d={d}, k={k}")
    g = rng(seed, "shift").standard_normal((d, k))
    f = svd(g)
    u, v = f.u[:, :r_star], f.vt[:r_star, :].T
    s = np.asarray(spectrum.values)
    delta = (u * s) @ v.T
    return delta, SvdFactors(u, s, v.T)


def make_data(d, n, dist="gaussian", seed=0, model_kind="linear", cov_eps=None):
    """N×d design matrix with i.i.d. isotropic rows.

    ``whitened`` draws Gaussian rows and then rotates/rescales them so the
    empirical covariance equals I + E exactly, with E a random symmetric
    matrix of operator norm ``cov_eps`` (0 gives population covariance).
    """
    if n < 1 or d < 1:
        raise ArgumentError("n and d must be positive")
    if dist not in DATA_DISTS:
        raise ArgumentError(f"unknown data distribution {dist!r}")
    if model_kind == "relu" and dist == "rademacher":
        raise ArgumentError("relu problems require Gaussian inputs")
    gen = rng(seed, "data")
    if dist == "rademacher":
        return gen.choice(np.array([-1.0, 1.0]), size=(n, d))
    x = gen.standard_normal((n, d))
    if dist == "gaussian":
        return x
    if cov_eps is None or not 0 <= cov_eps < 1:
        raise ArgumentError("whitened data needs 0 <= cov_eps < 1")
    if n < d:
        raise ArgumentError("whitened data needs n >= d")
    q, _ = np.linalg.qr(x)
    e = rng(seed, "covariance").standard_normal((d, d))
    e = e + e.T
    e *= cov_eps / op_norm(e)
    w, vecs = np.linalg.eigh(np.eye(d) + e)
    root = (vecs * np.sqrt(w)) @ vecs.T
    return np.sqrt(n) * q @ root


def make_nonlinear_teacher(d, k, r_star, kappa_target, signal_ratio, seed, radius=1.0):
    """Pre-trained weight and shift meeting the neuron-balance conditions.

    Columns of W are uniform on the sphere of radius ``radius``; the shift has
    a geometric spectrum with condition number ``kappa_target`` and is scaled
    so that max(lambda_min, ||delta_m||) / ||w_m + delta_m|| <= signal_ratio
    for every column m.
    """
    if not signal_ratio > 0:
        raise ArgumentError("signal_ratio must be positive; zero would force a null shift")
    if kappa_target < 1:
        raise ArgumentError("kappa_target must be at least 1")
    g = rng(seed, "pretrained").standard_normal((d, k))
    w_pre = radius * g / np.linalg.norm(g, axis=0)
    delta, f = make_shift(d, k, r_star, Spectrum.geometric(r_star, kappa_target), seed)
    col = np.linalg.norm(delta, axis=0)
    big = max(f.s[-1], col.max())
    # ||w_m + c delta_m|| >= radius - c ||delta_m|| makes this scale safe
    scale = signal_ratio * radius / (big + signal_ratio * col.max())
    return w_pre, scale * delta


def make_problem(config: ProblemConfig) -> Problem:
    c = config
    if c.model_kind not in MODEL_KINDS:
        raise ArgumentError(f"unknown model kind {c.model_kind!r}")
    if c.model_kind == "relu" and c.signal_ratio is not None:
        kappa = c.kappa_target if c.kappa_target is not None else 1.0
        w_pre, delta = make_nonlinear_teacher(c.d, c.k, c.r_star, kappa, c.signal_ratio, c.seed)
    else:
        if c.spectrum is None:
            raise ArgumentError("a spectrum is required unless a teacher signal_ratio is given")
        if c.r_star == 0:
            delta = np.zeros((c.d, c.k))
        else:
            delta, _ = make_shift(c.d, c.k, c.r_star, Spectrum(tuple(c.spectrum)), c.seed)
        if c.w_pre == "gaussian":
            w_pre = rng(c.seed, "pretrained").standard_normal((c.d, c.k))
        elif c.w_pre == "zero":
            w_pre = np.zeros((c.d, c.k))
        else:
            raise ArgumentError(f"unknown w_pre option {c.w_pre!r}")
    x = make_data(c.d, c.n, c.data_dist, c.seed, c.model_kind, c.cov_eps)
    return assemble_problem(c.model_kind, w_pre, delta, x, c.r_star, c.seed)


def assemble_problem(model_kind, w_pre, delta, x, r_star, seed=0):
    """Build a problem from explicit matrices, computing noiseless labels."""
    w_pre = as_matrix(w_pre, "w_pre")
    delta = as_matrix(delta, "delta")
    x = as_matrix(x, "x")
    if w_pre.shape != delta.shape or x.shape[1] != w_pre.shape[0]:
        raise ArgumentError("inconsistent problem shapes")
    z = x @ (w_pre + delta)
    y = relu(z) if model_kind == "relu" else z
    n, d = x.shape
    return Problem(model_kind, d, w_pre.shape[1], n, r_star, w_pre, delta,
                   _shift_svd(delta, r_star), x, y, seed)

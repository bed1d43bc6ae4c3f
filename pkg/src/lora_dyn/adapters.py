"""Adapter state and initialization strategies."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import container
from .errors import ArgumentError, DegenerateInputError
from .matops import as_matrix, numeric_rank, svd
from .synth import rng

INIT_KINDS = ("lora_random", "spectral", "lora_ga", "lora_sb")

# singular values below this fraction of the top one are treated as zero
SPECTRAL_RTOL = 1e-10


@dataclass(frozen=True)
class FrozenSubspace:
    """Fixed bases and trainable cores: A = u_fix @ core_a, B = core_b @ v_fix^T."""

    u_fix: np.ndarray
    v_fix: np.ndarray
    core_a: np.ndarray
    core_b: np.ndarray


@dataclass(frozen=True, eq=False)
class AdapterPair:
    a: np.ndarray
    b: np.ndarray
    scaling: float = 1.0
    frozen_offset: np.ndarray | None = None
    frozen_subspace: FrozenSubspace | None = None

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ArgumentError(f"adapter shapes {self.a.shape} and {self.b.shape} do not share r")

    @property
    def rank(self):
        return self.a.shape[1]

    @property
    def shape(self):
        return self.a.shape[0], self.b.shape[1]

    def product(self):
        """The effective update ``offset + scaling * A B`` added to W."""
        m = self.scaling * (self.a @ self.b)
        if self.frozen_offset is not None:
            m = m + self.frozen_offset
        return m

    def params(self):
        """The trainable pair: (A, B), or the two cores in frozen-subspace mode."""
        fs = self.frozen_subspace
        if fs is None:
            return self.a, self.b
        return fs.core_a, fs.core_b

    def with_params(self, p, q):
        fs = self.frozen_subspace
        if fs is None:
            return replace(self, a=p, b=q)
        fs = replace(fs, core_a=p, core_b=q)
        return replace(self, a=fs.u_fix @ p, b=q @ fs.v_fix.T, frozen_subspace=fs)

    def param_grads(self, ga, gb):
        """Map gradients w.r.t. (A, B) to gradients w.r.t. :meth:`params`."""
        fs = self.frozen_subspace
        if fs is None:
            return ga, gb
        return fs.u_fix.T @ ga, gb @ fs.v_fix

    def to_bytes(self):
        blocks = {"a": self.a, "b": self.b}
        if self.frozen_offset is not None:
            blocks["frozen_offset"] = self.frozen_offset
        fs = self.frozen_subspace
        if fs is not None:
            blocks.update(u_fix=fs.u_fix, v_fix=fs.v_fix, core_a=fs.core_a, core_b=fs.core_b)
        return container.dumps("adapter", {"scaling": self.scaling}, blocks)

    @classmethod
    def from_bytes(cls, data):
        kind, meta, blocks = container.loads(data)
        if kind != "adapter":
            raise ArgumentError(f"container holds {kind!r}, not an adapter")
        fs = None
        if "u_fix" in blocks:
            fs = FrozenSubspace(blocks["u_fix"], blocks["v_fix"], blocks["core_a"], blocks["core_b"])
        return cls(blocks["a"], blocks["b"], meta["scaling"], blocks.get("frozen_offset"), fs)


@dataclass(frozen=True)
class InitSpec:
    kind: str
    rank: int
    alpha: float = 1.0
    gamma: float = 1.0
    normalize_top: bool = False
    scale_s: float | None = None
    grad_batch: int | None = None
    stable_c: float = 1.0
    lora_alpha: float | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ArgumentError(f"unknown init kind {self.kind!r}")
        if self.rank < 1:
            raise ArgumentError("adapter rank must be positive")

    @property
    def effective_gamma(self):
        # a scale s sets gamma = 1/s
        return 1.0 / self.scale_s if self.scale_s is not None else self.gamma

    @property
    def scaling(self):
        return 1.0 if self.lora_alpha is None else self.lora_alpha / np.sqrt(self.rank)


def init_lora_random(d, k, r, alpha, seed):
    """A with i.i.d. N(0, alpha^2) entries, B exactly zero."""
    if not alpha > 0:
        raise ArgumentError("alpha must be positive")
    a = alpha * rng(seed, "init").standard_normal((d, r))
    return AdapterPair(a, np.zeros((r, k)))


def _top_factors(g, r):
    g = as_matrix(g, "g_natural")
    d, k = g.shape
    if not 1 <= r <= min(d, k):
        raise ArgumentError(f"rank {r} must lie in 1..{min(d, k)}")
    f = svd(g)
    if numeric_rank(f.s) == 0:
        raise DegenerateInputError("the gradient has rank zero")
    return f


def _clean_s(s):
    s = s.copy()
    s[s <= SPECTRAL_RTOL * s[0]] = 0.0
    return s


def init_spectral(g_natural, r, gamma=1.0, normalize_top=False):
    """A0 = sqrt(gamma) U_r S_r^{1/2}, B0 = sqrt(gamma) S_r^{1/2} V_r^T."""
    f = _top_factors(g_natural, r)
    s = _clean_s(f.s)
    if normalize_top:
        s = s / s[0]
    root = np.sqrt(gamma * s[:r])
    return AdapterPair(f.u[:, :r] * root, root[:, None] * f.vt[:r, :])


def init_lora_ga(g_natural, r, k_out, stable_c, lora_alpha):
    """Columns 1..r of U for A and rows r+1..2r of V^T for B, offset frozen."""
    g = as_matrix(g_natural, "g_natural")
    if 2 * r > min(g.shape):
        raise ArgumentError(f"2r = {2 * r} exceeds min(d, k) = {min(g.shape)}")
    f = _top_factors(g, r)
    c = k_out ** 0.25 / stable_c
    a = -c * f.u[:, :r]
    b = c * f.vt[r:2 * r, :]
    scaling = lora_alpha / np.sqrt(r)
    return AdapterPair(a, b, scaling, -scaling * (a @ b))


def init_lora_sb(g_natural, r):
    """Frozen top-r singular bases with trainable r×r cores diag(S^{1/2})."""
    f = _top_factors(g_natural, r)
    s = _clean_s(f.s)
    core = np.diag(np.sqrt(s[:r]))
    fs = FrozenSubspace(f.u[:, :r], f.vt[:r, :].T, core, core.copy())
    return AdapterPair(fs.u_fix @ core, core @ fs.v_fix.T, frozen_subspace=fs)


def initialize(spec: InitSpec, g_natural, seed):
    """Dispatch on ``spec.kind``."""
    d, k = g_natural.shape
    if spec.kind == "lora_random":
        ad = init_lora_random(d, k, spec.rank, spec.alpha, seed)
    elif spec.kind == "spectral":
        ad = init_spectral(g_natural, spec.rank, spec.effective_gamma, spec.normalize_top)
    elif spec.kind == "lora_ga":
        lora_alpha = spec.lora_alpha if spec.lora_alpha is not None else np.sqrt(spec.rank)
        return init_lora_ga(g_natural, spec.rank, k, spec.stable_c, lora_alpha)
    else:
        ad = init_lora_sb(g_natural, spec.rank)
    return replace(ad, scaling=spec.scaling)

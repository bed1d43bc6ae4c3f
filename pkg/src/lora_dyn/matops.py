"""Dense linear algebra primitives.

All matrices are 2-D ``float64`` numpy arrays. SVDs follow a fixed sign
convention so results are reproducible regardless of the LAPACK build.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateInputError, NumericFailure

ORTHONORMAL_TOL = 1e-8


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array, raising otherwise."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ vt`` with singular values non-increasing."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def v(self):
        return self.vt.T

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def _fix_signs(u, vt):
    # make the largest-magnitude entry of each left vector positive;
    # argmax returns the first index, which breaks ties by lowest row
    if u.shape[1] == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(m, full=False) -> SvdFactors:
    """SVD with the deterministic sign convention.

    With ``full=True`` the complete orthogonal factors are returned, so
    ``u`` is m×m and ``vt`` is n×n while ``s`` still has min(m, n) entries.
    """
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"SVD did not converge: {exc}") from exc
    p = s.shape[0]
    u_head, vt_head = _fix_signs(u[:, :p], vt[:p, :])
    if full:
        u = np.concatenate([u_head, u[:, p:]], axis=1)
        vt = np.concatenate([vt_head, vt[p:, :]], axis=0)
    else:
        u, vt = u_head, vt_head
    return SvdFactors(u, s, vt)


def truncate_rank(f: SvdFactors, r: int) -> SvdFactors:
    """Keep the top ``r`` singular triples."""
    p = f.s.shape[0]
    if not 1 <= r <= p:
        raise ArgumentError(f"rank {r} out of range 1..{p}")
    return SvdFactors(f.u[:, :r], f.s[:r], f.vt[:r, :])


def pseudo_inverse(m, tol=1e-12):
    """Moore-Penrose inverse; singular values at or below ``tol * s_max`` are dropped."""
    m = as_matrix(m)
    if tol < 0:
        raise ArgumentError("tol must be non-negative")
    f = svd(m)
    if f.s.size == 0 or f.s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    keep = f.s > tol * f.s[0]
    inv_s = np.zeros_like(f.s)
    inv_s[keep] = 1.0 / f.s[keep]
    return (f.vt.T * inv_s) @ f.u.T


def check_orthonormal(basis, name="basis", tol=ORTHONORMAL_TOL):
    basis = as_matrix(basis, name)
    gram = basis.T @ basis
    err = np.max(np.abs(gram - np.eye(basis.shape[1]))) if basis.shape[1] else 0.0
    if err > tol:
        raise ArgumentError(f"{name} columns are not orthonormal (max deviation {err:.3e})")
    return basis


def principal_angle_op(basis_a, basis_b, checked=True) -> float:
    """Operator norm of ``basis_a.T @ basis_b``.

    Callers pass an orthogonal-complement basis as ``basis_a``; the result
    is then 0 when span(basis_b) lies in the reference subspace and 1 when
    some direction of span(basis_b) is orthogonal to it. ``checked=False``
    skips the orthonormality test for bases that are orthonormal by
    construction.
    """
    if checked:
        a = check_orthonormal(basis_a, "basis_a")
        b = check_orthonormal(basis_b, "basis_b")
    else:
        a, b = basis_a, basis_b
    if a.shape[0] != b.shape[0]:
        raise ArgumentError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(a.T @ b, 2))


def op_norm(m) -> float:
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


def fro_norm(m) -> float:
    return float(np.linalg.norm(as_matrix(m)))


def condition_number(m, rank) -> float:
    """Ratio of the largest to the ``rank``-th singular value."""
    s = svd(m).s
    if not 1 <= rank <= s.size:
        raise ArgumentError(f"rank {rank} out of range 1..{s.size}")
    if s[0] == 0.0 or s[rank - 1] <= 1e-12 * s[0]:
        raise DegenerateInputError(f"rank {rank} exceeds the numeric rank")
    return float(s[0] / s[rank - 1])


def numeric_rank(s, rtol=1e-10) -> int:
    s = np.asarray(s)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def build_block_h(g, eta):
    """The (d+k)×(d+k) matrix [[I, eta*G], [eta*G^T, I]]."""
    g = as_matrix(g, "g")
    d, k = g.shape
    h = np.eye(d + k)
    h[:d, d:] = eta * g
    h[d:, :d] = eta * g.T
    return h


def schur_factors(g, eta):
    """Orthogonal ``c`` and diagonal ``t`` with ``c @ t @ c.T`` equal to H.

    For d != k the gradient is zero-padded to a square s×s matrix with
    s = max(d, k); the factors then describe the padded 2s×2s matrix, whose
    rows/columns for the padding indices are those of the identity. Use
    :func:`unpad_block` to read out the original (d+k)-sized block.
    """
    g = as_matrix(g, "g")
    d, k = g.shape
    n = max(d, k)
    gp = np.zeros((n, n))
    gp[:d, :k] = g
    f = svd(gp, full=True)
    u, s, v = f.u, f.s, f.vt.T
    c = np.block([[u, -u], [v, v]]) / np.sqrt(2.0)
    t = np.diag(np.concatenate([1.0 + eta * s, 1.0 - eta * s]))
    return c, t


def padded_index(d, k):
    """Indices of the original (d+k) coordinates inside the padded 2·max(d,k) space."""
    n = max(d, k)
    return np.concatenate([np.arange(d), n + np.arange(k)])


def unpad_block(m, d, k):
    idx = padded_index(d, k)
    return m[np.ix_(idx, idx)]


def orth_complement(basis):
    """Orthonormal basis of the orthogonal complement of span(basis)."""
    basis = as_matrix(basis)
    n, p = basis.shape
    if p == 0:
        return np.eye(n)
    q, _ = np.linalg.qr(basis, mode="complete")
    return q[:, p:]

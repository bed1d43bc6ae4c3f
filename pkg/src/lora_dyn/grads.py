"""Gradients of the fine-tuning loss and their oracles.

The loss is L(W) = 1/(2N) ||f(XW) - Y||_F^2 with f the identity or the
ReLU (derivative taken as 0 at the kink).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateInputError
from .matops import as_matrix
from .synth import STREAMS, Problem, assemble_problem, make_data, relu, rng


@dataclass(frozen=True)
class GradPair:
    ga: np.ndarray
    gb: np.ndarray


def _check_w(problem, w):
    w = as_matrix(w, "w")
    if w.shape != (problem.d, problem.k):
        raise ArgumentError(f"w has shape {w.shape}, expected {(problem.d, problem.k)}")
    return w


def loss(problem: Problem, w) -> float:
    w = _check_w(problem, w)
    z = problem.x @ w
    if problem.model_kind == "relu":
        z = relu(z)
    return float(0.5 * np.sum((z - problem.y) ** 2) / problem.n)


def full_gradient(problem: Problem, w):
    """Gradient of the loss with respect to the full weight at ``w``."""
    w = _check_w(problem, w)
    if problem.model_kind == "linear":
        return problem.gram @ w - problem.xty
    z = problem.x @ w
    resid = (relu(z) - problem.y) * (z > 0)
    return problem.x.T @ resid / problem.n


def natural_gradient(problem: Problem, rows=None):
    """The negative full gradient at the pre-trained weight, optionally on a row subset."""
    if rows is not None and rows < problem.n:
        problem = assemble_problem(problem.model_kind, problem.w_pre, problem.delta,
                                   problem.x[:rows], problem.r_star, problem.seed)
    if problem.model_kind == "linear":
        # X^T (Y - X W) / N avoids cancelling two large products
        return problem.x.T @ (problem.y - problem.x @ problem.w_pre) / problem.n
    return -full_gradient(problem, problem.w_pre)


def lora_gradients(problem: Problem, adapter, w_pre=None) -> GradPair:
    """Gradients with respect to A and B at W = w_pre + offset + scaling * A B."""
    w_pre = problem.w_pre if w_pre is None else w_pre
    g = full_gradient(problem, w_pre + adapter.product())
    s = adapter.scaling
    return GradPair(s * (g @ adapter.b.T), s * (adapter.a.T @ g))


def _angles(w_tilde, w):
    nt = np.linalg.norm(w_tilde, axis=0)
    nw = np.linalg.norm(w, axis=0)
    if np.any(nw == 0) or np.any(nt == 0):
        raise DegenerateInputError("population gradient needs non-zero columns")
    ut, uw = w_tilde / nt, w / nw
    # half-angle form is exact for identical directions, unlike arccos
    theta = 2.0 * np.arctan2(np.linalg.norm(uw - ut, axis=0), np.linalg.norm(uw + ut, axis=0))
    return theta, nt, nw


def h_function(w, v):
    """E[x 1{x^T w > 0} relu(x^T v)] for x ~ N(0, I), columnwise."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vec = w.ndim == 1
    if vec:
        w, v = w[:, None], v[:, None]
    theta, nv, nw = _angles(v, w)
    out = ((nv / nw) * np.sin(theta) * w + (np.pi - theta) * v) / (2 * np.pi)
    return out[:, 0] if vec else out


def population_gradient_relu(w_tilde, w):
    """Exact E[grad L(W)] for Gaussian inputs and teacher ``w_tilde``."""
    w_tilde = as_matrix(w_tilde, "w_tilde")
    w = as_matrix(w, "w")
    theta, nt, nw = _angles(w_tilde, w)
    return 0.5 * (w - w_tilde) - ((nt / nw) * np.sin(theta) * w - theta * w_tilde) / (2 * np.pi)


def residual_factors(w_tilde, w):
    """Diagonals (sin theta_m, theta_m, ||w~_m|| / ||w_m||) per column."""
    theta, nt, nw = _angles(as_matrix(w_tilde), as_matrix(w))
    return np.sin(theta), theta, nt / nw


def population_residual(w_tilde, w_pre, adapter):
    """Population gradient minus its signal part (offset + scaling AB - delta)/2."""
    w_tilde = as_matrix(w_tilde, "w_tilde")
    update = adapter.product()
    err = update - (w_tilde - w_pre)
    if not np.any(err):
        return np.zeros_like(err)
    return population_gradient_relu(w_tilde, w_pre + update) - 0.5 * err


def residual_decomposition(w_tilde, w_pre, update):
    """The same residual assembled from the diagonal factors.

    With E = update - delta, D1 = diag sin, D2 = diag theta and
    D3 = diag ||w~|| / ||w||, the residual equals
    -(E D1 D3 + W~ (D1 - D2 - D1 (I - D3))) / (2 pi).
    """
    w_tilde = as_matrix(w_tilde)
    err = update - (w_tilde - w_pre)
    d1, d2, d3 = residual_factors(w_tilde, w_pre + update)
    core = err * (d1 * d3) + w_tilde * (d1 - d2 - d1 * (1.0 - d3))
    return -core / (2 * np.pi)


@dataclass(frozen=True)
class FiniteDifference:
    grad: np.ndarray
    near_kink: np.ndarray  # boolean mask over columns of w


def finite_difference_gradient(problem: Problem, w, h=1e-5) -> FiniteDifference:
    """Central differences of :func:`loss`, entry by entry.

    For ReLU problems, columns m with some |x_i^T w_m| < 10 h max|x| are
    flagged in ``near_kink`` since a perturbation may cross the kink there.
    """
    if not h > 0:
        raise ArgumentError("h must be positive")
    w = _check_w(problem, w).copy()
    grad = np.empty_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            old = w[i, j]
            w[i, j] = old + h
            up = loss(problem, w)
            w[i, j] = old - h
            down = loss(problem, w)
            w[i, j] = old
            grad[i, j] = (up - down) / (2 * h)
    if problem.model_kind == "relu":
        margin = 10 * h * np.max(np.abs(problem.x))
        near = np.any(np.abs(problem.x @ w) < margin, axis=0)
    else:
        near = np.zeros(w.shape[1], dtype=bool)
    return FiniteDifference(grad, near)


@dataclass(frozen=True)
class ConcentrationTable:
    n_grid: tuple
    ratios: np.ndarray  # (len(seeds), len(n_grid))
    median: np.ndarray
    slope: float


def gradient_concentration_check(problem: Problem, w, n_grid, seed=0):
    """Empirical-vs-population gradient deviation as the sample size grows.

    For each N (and each seed when ``seed`` is a sequence) fresh Gaussian
    data is drawn and ||J - E J||_F / (sqrt(d) ||W - W~||_F) recorded. The
    slope is the least-squares fit of log median ratio against log N.
    """
    if problem.model_kind != "relu":
        raise ArgumentError("the concentration check applies to relu problems")
    w = _check_w(problem, w)
    seeds = [seed] if np.isscalar(seed) else list(seed)
    n_grid = tuple(int(n) for n in n_grid)
    w_tilde = problem.w_tilde
    pop = population_gradient_relu(w_tilde, w)
    scale = np.sqrt(problem.d) * np.linalg.norm(w - w_tilde)
    ratios = np.zeros((len(seeds), len(n_grid)))
    if scale == 0:
        return ConcentrationTable(n_grid, ratios, ratios[0].copy(), 0.0)
    for si, s in enumerate(seeds):
        for ni, n in enumerate(n_grid):
            x = make_data(problem.d, n, "gaussian", _resample_seed(s, n), "relu")
            sub = assemble_problem("relu", problem.w_pre, problem.delta, x, problem.r_star, s)
            emp = full_gradient(sub, w)
            ratios[si, ni] = np.linalg.norm(emp - pop) / scale
    med = np.median(ratios, axis=0)
    slope = float(np.polyfit(np.log(n_grid), np.log(med), 1)[0]) if len(n_grid) > 1 else 0.0
    return ConcentrationTable(n_grid, ratios, med, slope)


def _resample_seed(seed, n):
    return int(np.random.SeedSequence(int(seed), spawn_key=(STREAMS["resample"], n)).generate_state(1)[0])


def monte_carlo_gradient(w_tilde, w, samples, seed, chunk=200_000):
    """Monte Carlo estimate of the population gradient with Gaussian inputs."""
    w_tilde = as_matrix(w_tilde)
    w = as_matrix(w)
    gen = rng(seed, "monte_carlo")
    total = np.zeros_like(w)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        x = gen.standard_normal((m, w.shape[0]))
        z = x @ w
        total += x.T @ ((relu(z) - relu(x @ w_tilde)) * (z > 0))
        done += m
    return total / samples

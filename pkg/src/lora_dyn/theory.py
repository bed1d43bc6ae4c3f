"""Closed-form oracles and bound evaluators for the linearized and
convergent phases of LoRA training."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigurationError, DegenerateInputError
from .grads import natural_gradient
from .matops import as_matrix, op_norm, padded_index, schur_factors, svd

THEOREMS = ("thm_3_1", "thm_3_2", "thm_3_6", "thm_c9", "thm_c13", "thm_4_2",
            "lemma_c4", "lemma_d6")
INIT_ONLY = ("thm_3_6", "lemma_d6")

RATIO_SLACK = 1e-6


@dataclass(frozen=True)
class StackedIterate:
    z: np.ndarray
    d: int

    @classmethod
    def stack(cls, a, b):
        return cls(np.vstack([a, b.T]), a.shape[0])

    @property
    def a(self):
        return self.z[:self.d]

    @property
    def b(self):
        return self.z[self.d:].T


@dataclass
class BoundReport:
    theorem_id: str
    ingredients: dict = field(default_factory=dict)
    holds: bool | None = None
    margin: float = math.nan
    status: str = "evaluated"
    note: str = ""

    def to_dict(self):
        clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                 for k, v in sorted(self.ingredients.items())}
        margin = self.margin if math.isfinite(self.margin) else None
        return {"theorem_id": self.theorem_id, "ingredients": clean, "holds": self.holds,
                "margin": margin, "status": self.status, "note": self.note}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def pseudo_iterate(g_natural, a0, eta, t):
    """Linearized iterate H^t [A0; 0] evaluated through the Schur factors.

    Returns ``(a_lin, b_lin)`` with ``b_lin`` of shape r×k.
    """
    g = as_matrix(g_natural, "g_natural")
    a0 = as_matrix(a0, "a0")
    if t < 0:
        raise ArgumentError("t must be non-negative")
    d, k = g.shape
    if t == 0:
        return a0.copy(), np.zeros((a0.shape[1], k))
    c, tm = schur_factors(g, eta)
    n = max(d, k)
    z0 = np.zeros((2 * n, a0.shape[1]))
    z0[:d] = a0
    z = c @ ((np.diag(tm) ** t)[:, None] * (c.T @ z0))
    idx = padded_index(d, k)
    z = z[idx]
    return z[:d], z[d:].T


def propagators(g_natural, eta, t):
    """The matrices P_A (d×d) and P_B (k×d) with A_lin = P_A A0 and B_lin^T = P_B A0."""
    g = as_matrix(g_natural, "g_natural")
    d, k = g.shape
    f = svd(g)
    plus = (1.0 + eta * f.s) ** t
    minus = (1.0 - eta * f.s) ** t
    pa = np.eye(d) + (f.u * (0.5 * (plus + minus) - 1.0)) @ f.u.T
    pb = (f.vt.T * (0.5 * (plus - minus))) @ f.u.T
    return pa, pb


def _linear_problem(problem):
    if problem.model_kind != "linear":
        raise ConfigurationError("this check needs a linear problem")


def linearization_error(problem, a0, eta, t_max, g_natural=None):
    """||Z_t - Z_lin_t||_op for t = 0..t_max under GD from (A0, 0)."""
    _linear_problem(problem)
    g = natural_gradient(problem) if g_natural is None else g_natural
    a = as_matrix(a0, "a0").copy()
    b = np.zeros((a.shape[1], problem.k))
    c, tm = schur_factors(g, eta)
    diag = np.diag(tm)
    d, k = g.shape
    n = max(d, k)
    z0 = np.zeros((2 * n, a.shape[1]))
    z0[:d] = a
    coeff = c.T @ z0
    idx = padded_index(d, k)
    errors = np.zeros(t_max + 1)
    gram = problem.gram
    # both iterates start at Z_0, so t = 0 is exactly zero
    for t in range(1, t_max + 1):
        full = (gram @ a) @ b - g
        a, b = a - eta * full @ b.T, b - eta * a.T @ full
        zl = (c @ ((diag ** t)[:, None] * coeff))[idx]
        errors[t] = op_norm(np.vstack([a, b.T]) - zl)
    return errors


def alignment_time(g_natural, a0_norm_op, eta, mode="early_phase", theta=None,
                   r_star=None, a0=None):
    """Time formulas for the early phase and for reaching angle ``theta``.

    ``early_phase``: ln(l1 / (3 ||A0||^2)) / (3 ln(1 + eta l1)).
    ``theta_target``: ln(8 ||A0|| / (theta * s_min(U_{r*}^T A0))) / ln(1 + eta l_{r*}),
    where the smallest singular value is computed from the realized ``a0``.
    """
    s = svd(as_matrix(g_natural, "g_natural")).s
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateInputError("top singular value of the gradient is zero")
    if not (a0_norm_op > 0 and eta > 0):
        raise ArgumentError("a0_norm_op and eta must be positive")
    l1 = s[0]
    if mode == "early_phase":
        return math.log(l1 / (3 * a0_norm_op ** 2)) / (3 * math.log1p(eta * l1))
    if mode != "theta_target":
        raise ArgumentError(f"unknown mode {mode!r}")
    if theta is None or not 0 < theta < 1:
        raise ArgumentError("theta must lie in (0, 1)")
    if r_star is None or a0 is None:
        raise ArgumentError("theta_target needs r_star and a0")
    u = svd(g_natural).u[:, :r_star]
    smin = svd(u.T @ as_matrix(a0)).s[-1]
    if smin == 0.0:
        raise DegenerateInputError("A0 has no component along the top subspace")
    return math.log(8 * a0_norm_op / (theta * smin)) / math.log1p(eta * s[r_star - 1])


# bound evaluation ----------------------------------------------------------

def _require(cond, message):
    if not cond:
        raise ConfigurationError(message)


def step_ratios(trajectory, floor=0.0):
    """Per-step contraction factors of the Frobenius risk between records.

    A gap of g steps between records contributes (ratio)^(1/g). Pairs whose
    earlier risk is at or below ``floor`` are skipped.
    """
    steps = trajectory.steps
    risk = trajectory.column("risk_fro")
    out = []
    for i in range(1, len(steps)):
        if risk[i - 1] <= floor:
            continue
        out.append((risk[i] / risk[i - 1]) ** (1.0 / (steps[i] - steps[i - 1])))
    return np.array(out)


def _ratio_floor(problem):
    # below this the risk is dominated by rounding, not dynamics
    return 1e-12 * max(1.0, float(np.linalg.norm(problem.delta)))


def _spectrum(problem):
    s = problem.delta_svd.s
    return float(s[0]), float(s[problem.r_star - 1]), float(s[0] / s[problem.r_star - 1])


def _info(trajectory):
    init = trajectory.info.get("init", {})
    optim = trajectory.info.get("optim", {})
    return init, optim


def evaluate_bound(theorem_id, problem, trajectory, theta=0.1, rho=0.05, tol=1e-8):
    """Compare a theorem's predicted bound with the measured trajectory.

    Non-initialization theorems on a zero-step trajectory are reported with
    status ``not_applicable``.
    """
    if theorem_id not in THEOREMS:
        raise ConfigurationError(f"unknown theorem {theorem_id!r}; choose from {THEOREMS}")
    init, optim = _info(trajectory)
    kind = init.get("kind")
    okind = optim.get("kind")
    linear = problem.model_kind == "linear"
    n_steps = int(trajectory.steps[-1]) if trajectory.records else 0
    rep = BoundReport(theorem_id)
    if theorem_id not in INIT_ONLY and n_steps == 0:
        rep.status = "not_applicable"
        rep.note = "trajectory has no training steps"
        return rep
    eta = float(trajectory.info.get("eta", optim.get("eta", math.nan)))

    if theorem_id in ("thm_3_1", "thm_3_2", "lemma_c4"):
        _require(linear, f"{theorem_id} needs a linear problem")
        _require(kind == "lora_random", f"{theorem_id} needs the random LoRA initialization")
        _require(okind == "gd", f"{theorem_id} needs plain gradient descent")

    if theorem_id == "thm_3_1":
        later = trajectory.column("angle_b")[trajectory.steps >= 1]
        measured = float(later.max())
        rep.ingredients = {"max_angle_b": measured, "tolerance": tol, "eta": eta}
        rep.holds, rep.margin = measured <= tol, tol - measured

    elif theorem_id == "thm_3_2":
        g = natural_gradient(problem, init.get("grad_batch"))
        a0 = trajectory.init_adapter.a
        a0n = op_norm(a0)
        angles = trajectory.column("angle_a")
        best = float(angles.min())
        rep.ingredients = {
            "min_angle_a": best, "theta": theta, "eta": eta, "a0_norm_op": a0n,
            "t_best": float(trajectory.steps[int(np.argmin(angles))]),
            "t_star": alignment_time(g, a0n, eta, "early_phase"),
            "t_theta": alignment_time(g, a0n, eta, "theta_target", theta, problem.r_star, a0),
        }
        rep.holds, rep.margin = best <= theta, theta - best

    elif theorem_id == "lemma_c4":
        g = natural_gradient(problem, init.get("grad_batch"))
        a0 = trajectory.init_adapter.a
        a0n = op_norm(a0)
        t_star = alignment_time(g, a0n, eta, "early_phase")
        horizon = max(0, min(int(math.floor(t_star)), n_steps))
        errs = linearization_error(problem, a0, eta, n_steps, g)
        measured = float(errs[:horizon + 1].max())
        beyond = np.nonzero(errs > a0n)[0]
        rep.ingredients = {"t_star": t_star, "horizon": float(horizon),
                           "max_linearization_error": measured, "a0_norm_op": a0n, "eta": eta,
                           "first_violation_step": float(beyond[0]) if beyond.size else math.nan}
        rep.holds, rep.margin = measured <= a0n, a0n - measured
        if t_star < 1:
            rep.note = "early-phase window is empty (t_star < 1); only t = 0 is checked"

    elif theorem_id == "thm_3_6":
        _require(linear, "thm_3_6 needs a linear problem")
        _require(kind == "spectral" and not init.get("normalize_top")
                 and init.get("scale_s") is None and init.get("gamma") == 1.0,
                 "thm_3_6 needs spectral initialization in theory mode with gamma = 1")
        l1, lr, kappa = _spectrum(problem)
        eps = problem.cov_eps
        measured = float(trajectory.records[0].risk_op)
        b1 = eps * l1
        b2 = 0.5 * lr
        rep.ingredients = {"eps": eps, "kappa": kappa, "lambda_1": l1, "lambda_r": lr,
                           "init_risk_op": measured, "eps_bound": b1, "half_lambda_r": b2}
        rep.holds = measured <= b1 and measured <= b2
        rep.margin = min(b1, b2) - measured

    elif theorem_id in ("thm_c9", "thm_c13"):
        _require(linear, f"{theorem_id} needs a linear problem")
        _require(kind == "spectral", f"{theorem_id} needs spectral initialization")
        want = "gd" if theorem_id == "thm_c9" else "prec_gd"
        _require(okind == want, f"{theorem_id} needs optimizer {want}")
        l1, lr, kappa = _spectrum(problem)
        eps = problem.cov_eps
        r = problem.r_star
        if theorem_id == "thm_c9":
            eps_max = min(1 / (2 * kappa), lr / (32 * kappa * (32 * l1 + 128 * kappa ** 2)))
            eta_max = min(1 / (128 * kappa * l1), (1 - eps / kappa) / (1152 * l1))
            predicted = 1 - eta * lr / (64 * kappa)
            cond = eps <= eps_max and eta <= eta_max
        else:
            eps_max = min(1 / (2 * math.sqrt(r) * kappa), 0.25)
            eta_max = (0.5 - 2 * eps) / (1 + eps) ** 2
            predicted = 1 - eta / 2
            cond = eps <= eps_max and eta < eta_max
        ratios = step_ratios(trajectory, _ratio_floor(problem))
        measured = float(ratios.max()) if ratios.size else 0.0
        rep.ingredients = {"eps": eps, "eps_max": eps_max, "eta": eta, "eta_max": eta_max,
                           "kappa": kappa, "lambda_1": l1, "lambda_r": lr,
                           "predicted_factor": predicted, "measured_factor": measured,
                           "conditions_met": float(cond), "ratios_checked": float(ratios.size)}
        rep.holds = measured <= predicted + RATIO_SLACK
        rep.margin = predicted + RATIO_SLACK - measured
        if not cond:
            rep.note = "theorem conditions not met by this instance"

    elif theorem_id == "thm_4_2":
        _require(not linear, "thm_4_2 needs a relu problem")
        _require(kind == "spectral", "thm_4_2 needs spectral initialization")
        _require(okind in ("prec_gd", "prec_gd_smoothed"), "thm_4_2 needs preconditioned GD")
        l1, lr, kappa = _spectrum(problem)
        risk = trajectory.column("risk_fro")
        steps = trajectory.steps
        env = (1 - eta / 4) ** steps * risk[0]
        worst = float(np.max(risk / env)) if risk[0] > 0 else 0.0
        ratios = step_ratios(trajectory, _ratio_floor(problem))
        rep.ingredients = {"eta": eta, "kappa": kappa, "lambda_r": lr, "rho": rho,
                           "predicted_factor": 1 - eta / 4,
                           "measured_factor": float(ratios.max()) if ratios.size else 0.0,
                           "worst_envelope_ratio": worst, "init_risk": float(risk[0]),
                           "init_risk_over_lambda_r": float(risk[0] / lr)}
        rep.holds = worst <= 1 + 1e-9
        rep.margin = 1 + 1e-9 - worst

    elif theorem_id == "lemma_d6":
        _require(not linear, "lemma_d6 needs a relu problem")
        _require(kind == "spectral", "lemma_d6 needs spectral initialization")
        l1, lr, kappa = _spectrum(problem)
        measured = float(trajectory.records[0].risk_fro)
        rep.ingredients = {"init_risk": measured, "lambda_r": lr, "rho": rho,
                           "ratio": measured / lr, "gamma": float(init.get("gamma", math.nan))}
        rep.holds, rep.margin = measured <= rho * lr, rho * lr - measured
    return rep

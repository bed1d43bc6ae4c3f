"""Optimizer steps and the training loop."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .adapters import AdapterPair, InitSpec, initialize
from .diagnostics import MetricContext, Trajectory
from .errors import ArgumentError, DivergenceError, SingularityError
from .grads import GradPair, full_gradient, lora_gradients, natural_gradient
from .matops import op_norm, pseudo_inverse

OPTIM_KINDS = ("gd", "prec_gd", "prec_gd_smoothed", "adamw", "prec_adamw", "full_ft_gd")

# a plain inverse is refused when lambda_min <= INVERT_RTOL * lambda_max
INVERT_RTOL = 1e-10


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "gd"
    eta: float = 0.1
    lam: float = 0.0
    steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    use_pinv: bool = True
    normalize_eta: bool = False
    divergence_threshold: float = 1e12

    def __post_init__(self):
        if self.kind not in OPTIM_KINDS:
            raise ArgumentError(f"unknown optimizer kind {self.kind!r}")
        if not self.eta > 0:
            raise ArgumentError("eta must be positive")
        if self.lam < 0 or self.steps < 0:
            raise ArgumentError("lambda and steps must be non-negative")


@dataclass(frozen=True)
class AdamState:
    m_a: np.ndarray
    v_a: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, p, q):
        return cls(np.zeros_like(p), np.zeros_like(p), np.zeros_like(q), np.zeros_like(q), 0)


def gd_step(adapter: AdapterPair, grads: GradPair, eta) -> AdapterPair:
    p, q = adapter.params()
    gp, gq = adapter.param_grads(grads.ga, grads.gb)
    return adapter.with_params(p - eta * gp, q - eta * gq)


def _precond(m, lam, use_pinv, factor):
    m = m + lam * np.eye(m.shape[0]) if lam else m
    if use_pinv:
        return pseudo_inverse(m)
    w = np.linalg.eigvalsh(m)
    if w.size and w[0] <= INVERT_RTOL * max(w[-1], 0.0):
        raise SingularityError(f"preconditioner for factor {factor} is singular", factor=factor)
    return np.linalg.inv(m)


def precondition(adapter, grads, lam=0.0, use_pinv=True):
    """Preconditioned (gp (Q Q^T + lam I)^-1, (P^T P + lam I)^-1 gq) in parameter space."""
    p, q = adapter.params()
    gp, gq = adapter.param_grads(grads.ga, grads.gb)
    right = _precond(q @ q.T, lam, use_pinv, "B")
    left = _precond(p.T @ p, lam, use_pinv, "A")
    return gp @ right, left @ gq


def prec_gd_step(adapter, grads, eta, lam=0.0, use_pinv=True):
    """Both preconditioners use the pre-step factors."""
    p, q = adapter.params()
    gp, gq = precondition(adapter, grads, lam, use_pinv)
    return adapter.with_params(p - eta * gp, q - eta * gq)


def _adam_update(x, g, m, v, t, spec):
    m = spec.beta1 * m + (1 - spec.beta1) * g
    v = spec.beta2 * v + (1 - spec.beta2) * g * g
    m_hat = m / (1 - spec.beta1 ** t)
    v_hat = v / (1 - spec.beta2 ** t)
    x = x * (1 - spec.eta * spec.weight_decay) - spec.eta * m_hat / (np.sqrt(v_hat) + spec.eps_adam)
    return x, m, v


def adamw_step(adapter, grads, state: AdamState, spec: OptimSpec):
    """Decoupled-weight-decay Adam; ``prec_adamw`` preconditions the gradients first."""
    p, q = adapter.params()
    if spec.kind == "prec_adamw":
        gp, gq = precondition(adapter, grads, spec.lam, spec.use_pinv)
    else:
        gp, gq = adapter.param_grads(grads.ga, grads.gb)
    t = state.t + 1
    p, m_a, v_a = _adam_update(p, gp, state.m_a, state.v_a, t, spec)
    q, m_b, v_b = _adam_update(q, gq, state.m_b, state.v_b, t, spec)
    return adapter.with_params(p, q), AdamState(m_a, v_a, m_b, v_b, t)


def config_hash(*parts) -> str:
    """Stable short hash of JSON-able configuration parts."""
    def norm(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return asdict(obj)
        return obj
    raw = json.dumps([norm(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


class _Gradient:
    """Gradient oracle with the linear-model shortcut grad = Gram E - G."""

    def __init__(self, problem, g_natural):
        self.problem = problem
        self.linear = problem.model_kind == "linear"
        self.g = g_natural

    def __call__(self, adapter):
        if not self.linear:
            return lora_gradients(self.problem, adapter)
        gram, s = self.problem.gram, adapter.scaling
        full = s * ((gram @ adapter.a) @ adapter.b) - self.g
        if adapter.frozen_offset is not None:
            full = full + gram @ adapter.frozen_offset
        return GradPair(s * (full @ adapter.b.T), s * (adapter.a.T @ full))


def _full_ft(problem, update, eta, g_natural):
    if problem.model_kind == "linear":
        grad = problem.gram @ update - g_natural
    else:
        grad = full_gradient(problem, problem.w_pre + update)
    return update - eta * grad


def run_training(problem, init_spec: InitSpec, optim_spec: OptimSpec, record_every=1,
                 seed=None, config_id=None, angle_reference="gradient") -> Trajectory:
    """Train an adapter and return its trajectory.

    Records are taken at step 0, every ``record_every`` steps and at the
    final step. ``full_ft_gd`` trains the full update matrix directly and is
    represented as an adapter with A = update and B = I. Raises
    :class:`DivergenceError` (carrying the partial trajectory) when the
    Frobenius risk exceeds ``optim_spec.divergence_threshold`` or stops
    being finite.
    """
    if record_every < 1:
        raise ArgumentError("record_every must be positive")
    seed = problem.seed if seed is None else seed
    g_nat = natural_gradient(problem, init_spec.grad_batch)
    ctx = MetricContext(problem, g_nat, angle_reference)
    spec = optim_spec
    eta = spec.eta / op_norm(g_nat) if spec.normalize_eta else spec.eta
    if spec.kind == "full_ft_gd":
        adapter = AdapterPair(np.zeros((problem.d, problem.k)), np.eye(problem.k))
    else:
        adapter = initialize(init_spec, g_nat, seed)
    traj = Trajectory(config_id or config_hash(init_spec, spec, problem.seed, record_every),
                      init_adapter=adapter,
                      info={"eta": eta, "init": asdict(init_spec), "optim": asdict(spec)})
    traj.records.append(ctx.record(0, adapter))
    grad = _Gradient(problem, g_nat)
    adam = AdamState.zeros(*adapter.params()) if spec.kind in ("adamw", "prec_adamw") else None
    for step in range(1, spec.steps + 1):
        if spec.kind == "full_ft_gd":
            adapter = replace(adapter, a=_full_ft(problem, adapter.a, eta, g_nat))
        else:
            grads = grad(adapter)
            if spec.kind == "gd":
                adapter = gd_step(adapter, grads, eta)
            elif spec.kind in ("prec_gd", "prec_gd_smoothed"):
                adapter = prec_gd_step(adapter, grads, eta, spec.lam, spec.use_pinv)
            else:
                adapter, adam = adamw_step(adapter, grads, adam, replace(spec, eta=eta))
        risk = np.linalg.norm(adapter.product() - problem.delta)
        if not np.isfinite(risk) or risk > spec.divergence_threshold:
            traj.outcome = "diverged"
            traj.final_adapter = adapter
            traj.info["diverged_at"] = step
            raise DivergenceError(f"risk {risk:.3e} exceeded the threshold at step {step}",
                                  step, traj)
        if step % record_every == 0 or step == spec.steps:
            traj.records.append(ctx.record(step, adapter))
    traj.final_adapter = adapter
    return traj

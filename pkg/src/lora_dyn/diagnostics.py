"""Per-step metrics, trajectories and assumption checks."""
from __future__ import annotations

import io
from dataclasses import astuple, dataclass, field, fields

import numpy as np

from .errors import DegenerateInputError
from .grads import full_gradient, loss
from .matops import as_matrix, numeric_rank, op_norm, orth_complement, principal_angle_op, svd

CSV_COLUMNS = ("step", "loss", "risk_fro", "risk_op", "angle_a", "angle_b", "b_vperp",
               "balance_gap", "sigma_r_a", "sigma_r_b", "xi_norm")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    risk_fro: float
    risk_op: float
    angle_a: float
    angle_b: float
    b_vperp: float
    balance_gap: float
    sigma_r_a: float
    sigma_r_b: float
    xi_norm: float | None = None


@dataclass
class Trajectory:
    config_hash: str
    records: list = field(default_factory=list)
    outcome: str = "completed"
    init_adapter: object = None
    final_adapter: object = None
    info: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def steps(self):
        return np.array([r.step for r in self.records])

    def final(self):
        return self.records[-1]


def risk(adapter, delta):
    """(Frobenius, operator) norms of the effective update minus ``delta``."""
    e = adapter.product() - delta
    return float(np.linalg.norm(e)), op_norm(e)


@dataclass(frozen=True)
class Alignment:
    angle_a: float
    angle_b: float
    b_vperp: float | None
    rank_deficient: bool


def _top_left(f, r):
    q = min(r, numeric_rank(f.s))
    return f.u[:, :q], q < r


def alignment_metrics(adapter, g_natural, r_star, delta_v=None, context=None,
                      svd_a=None, svd_bt=None):
    """Principal angles of A's and B's top-r* subspaces against G's.

    ``angle_a`` is ||U_perp(G)^T U_{r*}(A)||_op and ``angle_b`` the right-side
    analogue. If A or B has numeric rank below r*, the available subspace is
    used and ``rank_deficient`` is set. ``b_vperp`` is ||B V_perp||_F for the
    shift's right singular basis ``delta_v`` when given.
    """
    ctx = context or AngleContext(g_natural, r_star, delta_v)
    fa = svd(adapter.a) if svd_a is None else svd_a
    fb = svd(adapter.b.T) if svd_bt is None else svd_bt
    ua, def_a = _top_left(fa, r_star)
    vb, def_b = _top_left(fb, r_star)
    # both bases come out of SVDs, so skip the orthonormality test
    angle_a = principal_angle_op(ctx.u_perp, ua, checked=False)
    angle_b = principal_angle_op(ctx.v_perp, vb, checked=False)
    b_vperp = None
    if ctx.delta_v_perp is not None:
        b_vperp = float(np.linalg.norm(adapter.b @ ctx.delta_v_perp))
    return Alignment(angle_a, angle_b, b_vperp, def_a or def_b)


class AngleContext:
    """Cached complements of G's top-r* singular subspaces (computed once per run)."""

    def __init__(self, g_natural, r_star, delta_v=None):
        f = svd(as_matrix(g_natural, "g_natural"), full=True)
        if r_star > numeric_rank(f.s):
            raise DegenerateInputError(f"r_star={r_star} exceeds the numeric rank of G")
        self.g_svd = f
        self.u_perp = f.u[:, r_star:]
        self.v_perp = f.vt[r_star:, :].T
        self.delta_v_perp = None if delta_v is None else orth_complement(delta_v)


class MetricContext:
    """Everything needed to turn an adapter into a :class:`StepRecord`."""

    def __init__(self, problem, g_natural, reference="gradient"):
        self.problem = problem
        self.r_star = problem.r_star
        if reference == "gradient":
            ref = g_natural
        else:
            # ablation: measure angles against the shift's own subspaces
            ref = problem.delta
        self.angles = AngleContext(ref, self.r_star, problem.delta_svd.v)

    def _risk_op(self, adapter, e):
        # scaling*A B - delta has rank <= r + r*; its QR-compressed core is tiny
        f = self.problem.delta_svd
        width = adapter.rank + f.s.size
        if adapter.frozen_offset is not None or 2 * width >= min(e.shape):
            return op_norm(e)
        left = np.hstack([adapter.scaling * adapter.a, -f.u * f.s])
        right = np.hstack([adapter.b.T, f.vt.T])
        _, rl = np.linalg.qr(left)
        _, rr = np.linalg.qr(right)
        return op_norm(rl @ rr.T)

    def record(self, step, adapter):
        p = self.problem
        update = adapter.product()
        e = update - p.delta
        if p.model_kind == "linear":
            lval = float(0.5 * np.sum(e * (p.gram @ e)))
            xi = None
        else:
            w = p.w_pre + update
            lval = loss(p, w)
            xi = float(np.linalg.norm(full_gradient(p, w) - 0.5 * e))
        rop = self._risk_op(adapter, e)
        fa, fb = svd(adapter.a), svd(adapter.b.T)
        al = alignment_metrics(adapter, None, self.r_star, context=self.angles, svd_a=fa, svd_bt=fb)
        sa, sb = fa.s, fb.s
        idx = self.r_star - 1
        gap = op_norm(adapter.a.T @ adapter.a - adapter.b @ adapter.b.T)
        return StepRecord(
            step=int(step), loss=lval, risk_fro=float(np.linalg.norm(e)), risk_op=rop,
            angle_a=al.angle_a, angle_b=al.angle_b, b_vperp=al.b_vperp, balance_gap=gap,
            sigma_r_a=float(sa[idx]) if 0 <= idx < sa.size else 0.0,
            sigma_r_b=float(sb[idx]) if 0 <= idx < sb.size else 0.0,
            xi_norm=xi)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trajectory_csv(trajectory) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for rec in trajectory.records:
        buf.write(",".join(_fmt(v) for v in astuple(rec)) + "\n")
    return buf.getvalue()


def write_csv(trajectory, path):
    with open(path, "w", newline="") as fh:
        fh.write(trajectory_csv(trajectory))


def read_csv(path):
    """Parse a trajectory CSV back into :class:`StepRecord` objects."""
    names = [f.name for f in fields(StepRecord)]
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError("unexpected CSV header")
        for line in fh:
            vals = line.rstrip("\n").split(",")
            row = {}
            for name, v in zip(names, vals):
                if name == "step":
                    row[name] = int(v)
                else:
                    row[name] = float(v) if v else None
            out.append(StepRecord(**row))
    return out


@dataclass(frozen=True)
class Assumption41Report:
    balance_ratio: float
    signal_ratio: float
    balance_max: float | None
    signal_max: float | None
    degenerate: bool
    holds: bool


def verify_assumption_41(w_tilde, delta, r_star=None, balance_max=None, signal_max=None):
    """Neuron-balance ratios of a teacher and its shift.

    Returns max_m ||W~||_op / ||w~_m|| and max_m max(lambda_{r*}, ||delta_m||) / ||w~_m||,
    each compared with its threshold when one is given.
    """
    w_tilde = as_matrix(w_tilde, "w_tilde")
    delta = as_matrix(delta, "delta")
    cols = np.linalg.norm(w_tilde, axis=0)
    if np.any(cols == 0):
        raise DegenerateInputError("teacher has a zero column")
    s = svd(delta).s
    if r_star is None:
        r_star = numeric_rank(s)
    lam = float(s[r_star - 1]) if r_star >= 1 else 0.0
    degenerate = lam == 0.0
    balance = float(op_norm(w_tilde) / cols.min())
    signal = float(np.max(np.maximum(lam, np.linalg.norm(delta, axis=0)) / cols))
    holds = not degenerate
    if balance_max is not None:
        holds = holds and balance <= balance_max
    if signal_max is not None:
        holds = holds and signal <= signal_max
    return Assumption41Report(balance, signal, balance_max, signal_max, degenerate, holds)

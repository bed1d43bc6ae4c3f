import numpy as np
import pytest

from conftest import population_linear, small_linear, small_relu
from lora_dyn.adapters import AdapterPair, InitSpec, init_lora_random
from lora_dyn.diagnostics import (CSV_COLUMNS, alignment_metrics, read_csv, risk,
                                  trajectory_csv, verify_assumption_41, write_csv)
from lora_dyn.errors import DegenerateInputError
from lora_dyn.grads import full_gradient, natural_gradient
from lora_dyn.optim import OptimSpec, run_training
from lora_dyn.synth import make_nonlinear_teacher, make_shift


def test_risk_cases():
    delta, _ = make_shift(100, 100, 4, (40.0, 30.0, 20.0, 10.0), seed=0)
    zero = AdapterPair(np.zeros((100, 8)), np.zeros((8, 100)))
    fro, op = risk(zero, delta)
    assert fro == pytest.approx(54.7723, abs=1e-4)
    assert op == pytest.approx(40.0, rel=1e-12)
    u, s, vt = np.linalg.svd(delta)
    exact = AdapterPair(u[:, :4] * s[:4], vt[:4])
    assert max(risk(exact, delta)) <= 1e-12


def test_alignment_extremes():
    gen = np.random.default_rng(0)
    g = gen.standard_normal((8, 2)) @ gen.standard_normal((2, 7))
    u = np.linalg.svd(g)[0]
    inside = AdapterPair(u[:, :2] @ gen.standard_normal((2, 2)), gen.standard_normal((2, 7)))
    outside = AdapterPair(u[:, 2:4], gen.standard_normal((2, 7)))
    assert alignment_metrics(inside, g, 2).angle_a <= 1e-12
    assert alignment_metrics(outside, g, 2).angle_a == pytest.approx(1.0, abs=1e-12)


def test_alignment_rank_deficiency_flagged():
    g = np.diag([3.0, 2.0, 1.0, 0.5])
    ad = AdapterPair(np.array([[1.0, 2.0], [0, 0], [0, 0], [0, 0]]), np.ones((2, 4)))
    al = alignment_metrics(ad, g, 2)
    assert al.rank_deficient and al.angle_a <= 1e-12


def test_b_vperp():
    g = np.diag([3.0, 2.0, 1.0])
    v = np.eye(3)[:, :1]
    ad = AdapterPair(np.ones((3, 1)), np.array([[1.0, 2.0, 0.0]]))
    assert alignment_metrics(ad, g, 1, delta_v=v).b_vperp == pytest.approx(2.0)


def test_random_init_is_nearly_orthogonal():
    p = population_linear(100, 100, 4, (1.0,) * 4, seed=0, n=1600)
    g = natural_gradient(p)
    angles = [alignment_metrics(init_lora_random(100, 100, 8, 0.01, s), g, 4).angle_a
              for s in range(10)]
    assert np.all(np.abs(np.array(angles) - 1.0) <= 0.15)


def test_loss_equals_half_risk_squared_at_population_covariance():
    p = population_linear(10, 8, 2, (2.0, 1.0), seed=1)
    traj = run_training(p, InitSpec("lora_random", 3, alpha=0.1), OptimSpec("gd", eta=0.2, steps=20))
    np.testing.assert_allclose(traj.column("loss"), 0.5 * traj.column("risk_fro") ** 2, rtol=1e-10)


def test_record_invariants():
    traj = run_training(small_linear(seed=2), InitSpec("spectral", 3, gamma=1.0),
                        OptimSpec("gd", eta=0.1, steps=20))
    fro, op = traj.column("risk_fro"), traj.column("risk_op")
    assert np.all(fro >= op - 1e-12) and np.all(op >= 0)
    for name in ("angle_a", "angle_b"):
        col = traj.column(name)
        assert np.all((col >= 0) & (col <= 1 + 1e-10))
    assert traj.records[0].balance_gap <= 1e-10
    assert np.all(np.diff(traj.steps) > 0) and traj.steps[0] == 0


def test_risk_op_low_rank_route_matches_dense():
    p = population_linear(40, 40, 2, (2.0, 1.0), seed=3)
    traj = run_training(p, InitSpec("lora_random", 3, alpha=0.1), OptimSpec("gd", eta=0.2, steps=5))
    e = traj.final_adapter.product() - p.delta
    assert traj.final().risk_op == pytest.approx(np.linalg.norm(e, 2), rel=1e-12)


def test_relu_xi_norm():
    p = small_relu(seed=1)
    traj = run_training(p, InitSpec("spectral", 2, gamma=2.0), OptimSpec("prec_gd", eta=0.3, steps=3))
    ad = traj.final_adapter
    e = ad.product() - p.delta
    xi = np.linalg.norm(full_gradient(p, p.w_pre + ad.product()) - 0.5 * e)
    assert traj.final().xi_norm == pytest.approx(xi, rel=1e-12)


def test_csv_layout_and_round_trip(tmp_path):
    traj = run_training(small_linear(), InitSpec("lora_random", 2, alpha=0.1),
                        OptimSpec("gd", eta=0.05, steps=3))
    text = trajectory_csv(traj)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[0] == "step,loss,risk_fro,risk_op,angle_a,angle_b,b_vperp,balance_gap,sigma_r_a,sigma_r_b,xi_norm"
    assert all(line.endswith(",") for line in lines[1:])  # empty relu-only column
    path = tmp_path / "t.csv"
    write_csv(traj, path)
    assert read_csv(path) == traj.records


def test_assumption_41_equal_columns():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 4)))
    rep = verify_assumption_41(q, 0.1 * q)
    assert rep.balance_ratio <= np.sqrt(4) + 1e-12


def test_assumption_41_zero_shift_degenerate():
    rep = verify_assumption_41(np.eye(3), np.zeros((3, 3)))
    assert rep.degenerate and not rep.holds


def test_assumption_41_zero_column():
    with pytest.raises(DegenerateInputError):
        verify_assumption_41(np.zeros((3, 2)), np.zeros((3, 2)))


def test_teacher_round_trip():
    w_pre, delta = make_nonlinear_teacher(30, 20, 3, 2.0, 1 / 6, seed=0)
    rep = verify_assumption_41(w_pre + delta, delta, 3, signal_max=1 / 6)
    assert rep.holds

import numpy as np
import pytest

from conftest import hand_problem, population_linear, small_linear, small_relu
from lora_dyn.adapters import AdapterPair, InitSpec, init_spectral
from lora_dyn.errors import ArgumentError, DivergenceError, SingularityError
from lora_dyn.grads import GradPair, lora_gradients, natural_gradient
from lora_dyn.optim import (AdamState, OptimSpec, adamw_step, gd_step, prec_gd_step,
                            precondition, run_training)
from lora_dyn.synth import ProblemConfig, make_problem


def _pair(seed, d=5, k=4, r=2):
    gen = np.random.default_rng(seed)
    return AdapterPair(gen.standard_normal((d, r)), gen.standard_normal((r, k)))


def _grads(seed, d=5, k=4, r=2):
    gen = np.random.default_rng(seed + 100)
    return GradPair(gen.standard_normal((d, r)), gen.standard_normal((r, k)))


def test_spec_validation():
    with pytest.raises(ArgumentError):
        OptimSpec(eta=0.0)
    with pytest.raises(ArgumentError):
        OptimSpec(kind="sgd")
    with pytest.raises(ArgumentError):
        OptimSpec(lam=-1.0)


def test_gd_zero_grads_unchanged():
    ad = _pair(0)
    out = gd_step(ad, GradPair(np.zeros((5, 2)), np.zeros((2, 4))), 0.3)
    assert out.a.tobytes() == ad.a.tobytes() and out.b.tobytes() == ad.b.tobytes()


def test_gd_first_step_from_lora_init():
    p = small_linear(seed=1)
    a0 = np.random.default_rng(0).standard_normal((p.d, 3))
    ad = AdapterPair(a0, np.zeros((3, p.k)))
    out = gd_step(ad, lora_gradients(p, ad), 0.1)
    np.testing.assert_array_equal(out.a, a0)
    np.testing.assert_allclose(out.b, 0.1 * a0.T @ natural_gradient(p), atol=1e-13)


def test_gd_two_steps_hand_instance():
    p = hand_problem("linear", np.zeros((2, 2)), [[2.0, 0.0], [0.0, 0.0]], np.eye(2), 1)
    ad = AdapterPair(np.array([[1.0], [0.0]]), np.zeros((1, 2)))
    ad = gd_step(ad, lora_gradients(p, ad), 0.1)
    np.testing.assert_allclose(ad.b, [[0.1, 0.0]], atol=1e-15)
    ad = gd_step(ad, lora_gradients(p, ad), 0.1)
    # full gradient (1/2)(AB - delta) = [[-0.95, 0], [0, 0]]
    np.testing.assert_allclose(ad.a, [[1.0095], [0.0]], atol=1e-15)
    np.testing.assert_allclose(ad.b, [[0.195, 0.0]], atol=1e-15)


def test_prec_gd_fixed_point_at_exact_init():
    p = population_linear(8, 7, 2, (2.0, 1.0), seed=2)
    ad = init_spectral(natural_gradient(p), 2, 1.0, False)
    out = prec_gd_step(ad, lora_gradients(p, ad), 0.4)
    np.testing.assert_allclose(out.product(), ad.product(), atol=1e-12)
    np.testing.assert_allclose(out.product(), p.delta, atol=1e-12)


def test_prec_gd_identity_preconditioner_on_a():
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((5, 2)))
    ad = AdapterPair(q, np.random.default_rng(4).standard_normal((2, 4)))
    g = _grads(1)
    out = prec_gd_step(ad, g, 0.2)
    np.testing.assert_allclose(out.b, ad.b - 0.2 * g.gb, atol=1e-12)


def test_prec_gd_uses_pre_step_factors():
    ad, g = _pair(5), _grads(5)
    out = prec_gd_step(ad, g, 0.1)
    a, b = ad.a, ad.b
    np.testing.assert_allclose(out.a, a - 0.1 * g.ga @ np.linalg.inv(b @ b.T), atol=1e-12)
    np.testing.assert_allclose(out.b, b - 0.1 * np.linalg.inv(a.T @ a) @ g.gb, atol=1e-12)


def test_prec_gd_singular_names_factor():
    ad = AdapterPair(np.random.default_rng(0).standard_normal((5, 2)), np.zeros((2, 4)))
    with pytest.raises(SingularityError) as info:
        prec_gd_step(ad, _grads(0), 0.1, use_pinv=False)
    assert info.value.factor == "B"
    # smoothing makes the same step legal
    prec_gd_step(ad, _grads(0), 0.1, lam=1e-3, use_pinv=False)


def test_prec_gd_contracts_every_step():
    # a slightly perturbed covariance keeps the spectral init away from the optimum
    p = make_problem(ProblemConfig(d=20, k=20, n=400, r_star=3, spectrum=(1.0, 0.3, 0.01),
                                   data_dist="whitened", cov_eps=1e-3, seed=4))
    traj = run_training(p, InitSpec("spectral", 3, gamma=1.0),
                        OptimSpec("prec_gd", eta=0.4, steps=30))
    risk = traj.column("risk_fro")
    assert risk[0] > 1e-6
    live = risk[:-1] > 1e-9 * risk[0]
    assert np.all(risk[1:][live] <= (1 - 0.4 / 2) * risk[:-1][live])


def test_adamw_zero_grads_unchanged():
    ad = _pair(1)
    spec = OptimSpec("adamw", eta=0.01)
    out, st = adamw_step(ad, GradPair(np.zeros((5, 2)), np.zeros((2, 4))), AdamState.zeros(ad.a, ad.b), spec)
    np.testing.assert_array_equal(out.a, ad.a)
    assert st.t == 1


def test_adamw_first_step_closed_form():
    ad, g = _pair(2), _grads(2)
    spec = OptimSpec("adamw", eta=0.01, eps_adam=1e-8, weight_decay=0.1)
    out, _ = adamw_step(ad, g, AdamState.zeros(ad.a, ad.b), spec)
    expect = ad.a * (1 - 0.01 * 0.1) - 0.01 * g.ga / (np.abs(g.ga) + 1e-8)
    np.testing.assert_allclose(out.a, expect, rtol=1e-12)


def test_prec_adamw_large_lambda_matches_adamw():
    ad, g = _pair(3), _grads(3)
    lam = 1e8
    plain = OptimSpec("adamw", eta=0.01, eps_adam=0.0)
    prec = OptimSpec("prec_adamw", eta=0.01, eps_adam=0.0, lam=lam)
    s0 = AdamState.zeros(ad.a, ad.b)
    a1, sa = adamw_step(ad, g, s0, plain)
    b1, sb = adamw_step(ad, g, s0, prec)
    np.testing.assert_allclose(b1.a, a1.a, rtol=1e-6)
    # the stored moments are those of the gradients shrunk by 1/lambda
    np.testing.assert_allclose(sb.m_a * lam, sa.m_a, rtol=1e-6)
    gp, _ = precondition(ad, g, lam)
    np.testing.assert_allclose(gp * lam, g.ga, rtol=1e-6)


def test_zero_steps_has_single_record():
    traj = run_training(small_linear(), InitSpec("lora_random", 2, alpha=0.1), OptimSpec(steps=0))
    assert list(traj.steps) == [0]


def test_record_schedule_includes_final():
    traj = run_training(small_linear(), InitSpec("lora_random", 2, alpha=0.1),
                        OptimSpec(steps=25, eta=0.05), record_every=10)
    assert list(traj.steps) == [0, 10, 20, 25]


def test_determinism():
    args = (small_relu(seed=2), InitSpec("spectral", 2, gamma=2.0), OptimSpec("prec_gd", eta=0.3, steps=15))
    a, b = run_training(*args), run_training(*args)
    assert a.records == b.records
    assert a.final_adapter.a.tobytes() == b.final_adapter.a.tobytes()


def test_full_ft_converges_to_interpolant():
    p = small_linear(seed=5, n=60)
    traj = run_training(p, InitSpec("lora_random", 1), OptimSpec("full_ft_gd", eta=0.5, steps=400))
    assert traj.final().risk_fro <= 1e-8


def test_divergence_guard():
    p = small_linear(seed=6)
    with pytest.raises(DivergenceError) as info:
        run_training(p, InitSpec("spectral", 2, gamma=1.0), OptimSpec("gd", eta=50.0, steps=100))
    assert info.value.step >= 1
    assert info.value.trajectory.outcome == "diverged"


def test_lora_init_right_alignment_is_exact():
    p = population_linear(30, 30, 3, (1.0, 1.0, 1.0), seed=7, n=120)
    traj = run_training(p, InitSpec("lora_random", 6, alpha=0.01), OptimSpec("gd", eta=0.1, steps=60))
    assert np.max(traj.column("angle_b")) <= 1e-8


@pytest.mark.parametrize("kind", ["gd", "prec_gd"])
def test_spectral_init_stays_off_complement(kind):
    p = small_linear(seed=8, d=12, k=10, n=80)
    traj = run_training(p, InitSpec("spectral", 4, gamma=1.0), OptimSpec(kind, eta=0.1, steps=40),
                        record_every=1)
    fro_b = [np.linalg.norm(traj.final_adapter.b)]
    assert np.all(traj.column("b_vperp") <= 1e-8 * max(fro_b[0], 1.0))


def test_lora_sb_updates_only_cores():
    p = small_linear(seed=9, d=10, k=8, n=80)
    traj = run_training(p, InitSpec("lora_sb", 3), OptimSpec("gd", eta=0.05, steps=20))
    fs0, fs1 = traj.init_adapter.frozen_subspace, traj.final_adapter.frozen_subspace
    assert fs0.u_fix.tobytes() == fs1.u_fix.tobytes()
    assert not np.array_equal(fs0.core_a, fs1.core_a)

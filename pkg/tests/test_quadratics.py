import numpy as np
import pytest

import f2csa
from f2csa.errors import DegenerateActiveSetError
from f2csa.quadratics import QuadraticInstance, exact_hypergradient, exact_lower_solve

from oracles import brute_box_qp, central_diff, grid_refine_box_qp


def one_d_instance(c_l, q_l=1.0, sigma=0.0):
    return QuadraticInstance(Q_u=[[1.0]], Q_l=[[q_l]], P=[[0.0]], P_y=[[0.0]],
                             c_u=[0.0], c_l=[c_l], noise_sigma=sigma)


def test_generate_deterministic():
    a = f2csa.generate(4, 5, seed=7)
    b = f2csa.generate(4, 5, seed=7)
    np.testing.assert_array_equal(a.Q_l, b.Q_l)
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.c_u, b.c_u)


def test_generate_spectrum_floor():
    for seed in range(5):
        inst = f2csa.generate(6, 6, seed=seed)
        evals = np.linalg.eigvalsh(inst.Q_l)  # independent eigensolver call
        assert evals[0] >= 1.0 - 1e-10
        assert inst.mu_g == pytest.approx(evals[0])


def test_generate_box_rows():
    inst = f2csa.generate(3, 5, seed=0)
    assert inst.problem().constraints.p == 10


def test_exact_lower_solve_interior_1d():
    sol = exact_lower_solve(one_d_instance(c_l=0.5), np.zeros(1))
    assert sol.y[0] == pytest.approx(-0.5, abs=1e-10)
    np.testing.assert_allclose(sol.lam, 0.0, atol=1e-10)


def test_exact_lower_solve_clamped_1d():
    # Minimizer of 1/2 y^2 + 2y sits at -2, clamped to -1; stationarity
    # y + 2 - lam = 0 at y = -1 gives lam = 1 on the lower bound row.
    sol = exact_lower_solve(one_d_instance(c_l=2.0), np.zeros(1))
    assert sol.y[0] == pytest.approx(-1.0, abs=1e-12)
    assert sol.lam[0] == pytest.approx(0.0, abs=1e-12)
    assert sol.lam[1] == pytest.approx(1.0, abs=1e-10)


def test_exact_lower_solve_matches_brute_force_m2():
    rng = np.random.default_rng(21)
    for _ in range(5):
        inst = f2csa.generate(2, 2, seed=int(rng.integers(1000)))
        x = rng.standard_normal(2) * 2.0
        sol = exact_lower_solve(inst, x, tol=1e-10)
        assert sol.kkt_residual <= 1e-10
        q = inst.c_l + x
        y_grid = grid_refine_box_qp(inst.Q_l, q)
        assert np.linalg.norm(sol.y - y_grid) < 1e-6


def test_exact_lower_solve_matches_enumeration():
    rng = np.random.default_rng(5)
    for seed in range(6):
        inst = f2csa.generate(5, 5, seed=seed)
        x = 2.5 * rng.standard_normal(5)
        sol = exact_lower_solve(inst, x, tol=1e-10)
        y_ref, _ = brute_box_qp(inst.Q_l, inst.c_l + x)
        assert np.linalg.norm(sol.y - y_ref) < 1e-8


def test_f_true_zero_instance():
    inst = QuadraticInstance(Q_u=[[0.0]], Q_l=[[1.0]], P=[[0.0]], P_y=[[0.0]],
                             c_u=[0.0], c_l=[0.0], noise_sigma=0.0)
    assert f2csa.F_true(inst, np.zeros(1)) == 0.0


def test_f_true_symmetry_at_origin():
    inst = f2csa.generate(4, 4, seed=11)
    inst = QuadraticInstance(Q_u=inst.Q_u, Q_l=inst.Q_l, P=inst.P, P_y=inst.P_y,
                             c_u=inst.c_u, c_l=np.zeros(4), noise_sigma=0.0)
    # c_l = 0 and x = 0 make y* = 0 and every term of f vanish.
    assert f2csa.F_true(inst, np.zeros(4)) == pytest.approx(0.0, abs=1e-18)


def test_f_true_against_independent_qp():
    rng = np.random.default_rng(2)
    for seed in (0, 1):
        inst = f2csa.generate(5, 5, seed=seed)
        x = rng.standard_normal(5)
        y_ref, _ = brute_box_qp(inst.Q_l, inst.c_l + x)
        f_ref = inst.value_f(x, y_ref, None)
        assert f2csa.F_true(inst, x) == pytest.approx(f_ref, abs=1e-8)


def test_exact_hypergradient_fd_interior_and_active():
    rng = np.random.default_rng(8)
    inst = f2csa.generate(5, 5, seed=3)
    checked = 0
    while checked < 6:
        x = 2.5 * rng.standard_normal(5)
        try:
            g = exact_hypergradient(inst, x, tol=1e-6)
        except DegenerateActiveSetError:
            continue
        fd = central_diff(lambda z: f2csa.F_true(inst, z), x, step=1e-5)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4
        checked += 1


def test_exact_hypergradient_fully_clamped():
    # Huge linear term clamps every coordinate; dy*/dx = 0 so grad F = grad_x f.
    base = f2csa.generate(3, 3, seed=5)
    inst = QuadraticInstance(Q_u=base.Q_u, Q_l=base.Q_l, P=base.P, P_y=base.P_y,
                             c_u=base.c_u, c_l=10.0 * np.ones(3), noise_sigma=0.0)
    x = 0.1 * np.ones(3)
    sol = exact_lower_solve(inst, x)
    assert np.all(sol.y == -1.0)
    g = exact_hypergradient(inst, x)
    fx, _ = inst.grad_f(x, sol.y, None)
    np.testing.assert_allclose(g, fx, atol=1e-12)


def test_exact_hypergradient_clamped_1d_hand_case():
    inst = one_d_instance(c_l=2.0)
    g = exact_hypergradient(inst, np.zeros(1))
    fx, _ = inst.grad_f(np.zeros(1), np.array([-1.0]), None)
    assert g[0] == pytest.approx(fx[0])
    fd = central_diff(lambda z: f2csa.F_true(inst, z), np.zeros(1), step=1e-5)
    assert g[0] == pytest.approx(fd[0], abs=1e-8)


def test_exact_hypergradient_degenerate_detection():
    # c_l = 1 puts the unconstrained minimizer exactly on the bound with a
    # zero multiplier: weak activity.
    inst = one_d_instance(c_l=1.0)
    with pytest.raises(DegenerateActiveSetError):
        exact_hypergradient(inst, np.zeros(1), tol=1e-6)


def test_lower_solution_lipschitz_in_x():
    inst = f2csa.generate(4, 4, seed=6)
    rng = np.random.default_rng(4)
    L_y = 1.0 / inst.mu_g
    for _ in range(10):
        x = rng.standard_normal(4)
        dx = 0.01 * rng.standard_normal(4)
        y1 = exact_lower_solve(inst, x).y
        y2 = exact_lower_solve(inst, x + dx).y
        assert np.linalg.norm(y2 - y1) <= L_y * np.linalg.norm(dx) * (1.0 + 1e-6)


def test_noise_scaled_by_x_norm():
    inst = f2csa.generate(3, 3, seed=1, noise_sigma=0.5)
    y = 0.5 * np.ones(3)
    devs = []
    for scale in (0.0, 100.0):
        x = scale * np.ones(3) / np.sqrt(3)
        fx0, _ = inst.grad_f(x, y, None)
        stream = np.random.default_rng(0)
        samp = [np.linalg.norm(inst.grad_f(x, y, stream)[0] - fx0) for _ in range(200)]
        devs.append(np.mean(samp))
    # 1/(1+||x||) damping keeps the large-x noise of the same order, not ~100x.
    assert devs[1] < 10.0 * (devs[0] + 1e-12)


def test_instance_rejects_asymmetric_blocks():
    with pytest.raises(ValueError, match="symmetric"):
        QuadraticInstance(Q_u=[[1.0, 2.0], [0.0, 1.0]], Q_l=np.eye(2), P=np.zeros((2, 2)),
                          P_y=np.zeros((2, 2)), c_u=np.zeros(2), c_l=np.zeros(2),
                          noise_sigma=0.0)


def test_instance_rejects_indefinite_lower_block():
    with pytest.raises(ValueError, match="positive definite"):
        QuadraticInstance(Q_u=np.eye(2), Q_l=-np.eye(2), P=np.zeros((2, 2)),
                          P_y=np.zeros((2, 2)), c_u=np.zeros(2), c_l=np.zeros(2),
                          noise_sigma=0.0)

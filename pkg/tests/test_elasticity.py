import logging

import numpy as np
import pytest

from voronoi_topopt.elasticity import (BoundaryConditions, DomainMask, GridElasticity, Load,
                                       MaterialModel, Support, assemble_and_solve,
                                       compliance_and_sensitivity, element_stiffness_unit,
                                       interpolate_modulus, pcg)
from voronoi_topopt.oracle import dense_fem_solve, dense_stiffness, q4_stiffness_quadrature


def cantilever_bcs(nx, ny, force=(0.0, -1.0)):
    return BoundaryConditions(supports=(Support((0, 0, 0, ny)),),
                              loads=(Load((nx, ny / 2, nx, ny / 2), force),))


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.45])
def test_element_stiffness_symmetric_with_rigid_modes(nu):
    k = element_stiffness_unit(nu)
    assert np.allclose(k, k.T, atol=0)
    w = np.linalg.eigvalsh(k)
    assert np.sum(np.abs(w) < 1e-12) == 3
    assert np.all(w > -1e-12)


@pytest.mark.parametrize("nu", [0.1, 0.3, 0.49])
def test_element_stiffness_matches_quadrature(nu):
    assert np.allclose(element_stiffness_unit(nu), q4_stiffness_quadrature(nu), atol=1e-14)


def test_interpolate_modulus():
    mat = MaterialModel()
    assert interpolate_modulus(0.0, mat) == 1e-9
    assert interpolate_modulus(1.0, mat) == 1.0
    assert interpolate_modulus(0.5, mat) == pytest.approx(0.5 + 0.5e-9, rel=1e-15)
    simp = MaterialModel(penal=3)
    assert interpolate_modulus(0.5, simp) == pytest.approx(1e-9 + 0.125 * (1 - 1e-9))


@pytest.mark.parametrize("kwargs", [dict(E_min=0), dict(E_min=2), dict(poisson=0.5),
                                    dict(penal=0.5)])
def test_material_validation(kwargs):
    with pytest.raises(ValueError):
        MaterialModel(**kwargs)


def test_mask_validation():
    with pytest.raises(ValueError):
        DomainMask(np.ones((2, 2)))                 # no design element
    with pytest.raises(ValueError):
        DomainMask(np.full((2, 2), 5))
    with pytest.raises(ValueError):
        DomainMask(np.zeros(4))
    m = DomainMask([[0, 1], [2, 0]])
    assert m.counts() == {"design": 2, "passive_void": 1, "passive_solid": 1}


def test_pcg_matches_dense_solve(rng):
    nx, ny = 16, 8
    bcs = cantilever_bcs(nx, ny)
    rho = rng.random((ny, nx))
    state = assemble_and_solve(rho, None, bcs, tol=1e-12)
    u_ref = dense_fem_solve(rho, None, bcs)
    assert np.max(np.abs(state.displacements - u_ref)) <= 1e-8 * np.max(np.abs(u_ref))
    assert state.converged
    assert state.compliance == pytest.approx(bcs.force_vector(nx, ny) @ u_ref, rel=1e-9)


def test_pcg_with_mask_matches_dense(rng):
    nx, ny = 12, 6
    states = np.zeros((ny, nx), np.int8)
    states[0, 3:6] = DomainMask.VOID
    states[4, 7:9] = DomainMask.SOLID
    mask = DomainMask(states)
    bcs = cantilever_bcs(nx, ny)
    rho = rng.random((ny, nx))
    state = assemble_and_solve(rho, mask, bcs, tol=1e-12)
    u_ref = dense_fem_solve(rho, mask, bcs)
    assert np.allclose(state.displacements, u_ref, rtol=0, atol=1e-8 * np.abs(u_ref).max())


def test_amg_preconditioner_agrees_with_jacobi(rng):
    pytest.importorskip("pyamg")
    nx, ny = 24, 12
    bcs = cantilever_bcs(nx, ny)
    rho = 0.2 + 0.8 * rng.random((ny, nx))
    a = GridElasticity(nx, ny, bcs, tol=1e-10).solve(rho)
    b = GridElasticity(nx, ny, bcs, tol=1e-10, preconditioner="amg").solve(rho)
    assert b.converged
    assert np.allclose(a.displacements, b.displacements, atol=1e-7 * np.abs(a.displacements).max())
    with pytest.raises(ValueError):
        GridElasticity(nx, ny, bcs, preconditioner="ilu")


def test_zero_load_gives_zero_displacement():
    bcs = cantilever_bcs(8, 4, force=(0.0, 0.0))
    state = assemble_and_solve(np.ones((4, 8)), None, bcs)
    assert not np.any(state.displacements)
    assert state.compliance == 0.0


def test_doubling_load_quadruples_compliance(rng):
    rho = rng.random((6, 12))
    c1 = assemble_and_solve(rho, None, cantilever_bcs(12, 6), tol=1e-12).compliance
    c2 = assemble_and_solve(rho, None, cantilever_bcs(12, 6, (0, -2.0)), tol=1e-12).compliance
    assert c2 == pytest.approx(4 * c1, rel=1e-8)


def test_matrix_free_matches_assembled(rng):
    nx, ny = 10, 6
    solver = GridElasticity(nx, ny, cantilever_bcs(nx, ny))
    E = rng.random((ny, nx)) + 0.1
    u = rng.standard_normal(solver.ndof)
    assert np.allclose(solver.stiffness_matrix(E) @ u, solver.apply_stiffness(u, E),
                       rtol=0, atol=1e-12)


def test_assembly_matches_dense_oracle(rng):
    nx, ny = 10, 6
    solver = GridElasticity(nx, ny, cantilever_bcs(nx, ny))
    rho = rng.random((ny, nx))
    E = interpolate_modulus(rho, MaterialModel())
    assert np.allclose(solver.stiffness_matrix(E).toarray(),
                       dense_stiffness(rho, None, MaterialModel()), rtol=0, atol=1e-14)


def test_sensitivity_matches_fd_with_resolve(rng):
    nx, ny = 4, 4
    bcs = cantilever_bcs(nx, ny)
    rho = 0.3 + 0.7 * rng.random((ny, nx))
    mat = MaterialModel()
    state = assemble_and_solve(rho, None, bcs, tol=1e-14)
    _, dc = compliance_and_sensitivity(state, rho, mat)
    h = 1e-6
    for e in range(nx * ny):
        up, dn = rho.copy(), rho.copy()
        up.flat[e] += h
        dn.flat[e] -= h
        fp = bcs.force_vector(nx, ny) @ dense_fem_solve(up, None, bcs)
        fm = bcs.force_vector(nx, ny) @ dense_fem_solve(dn, None, bcs)
        fd = (fp - fm) / (2 * h)
        assert abs(dc.flat[e] - fd) <= 1e-5 * max(abs(fd), 1e-8)


def test_sensitivity_nonpositive_and_zero_on_passive(rng):
    nx, ny = 8, 4
    states = np.zeros((ny, nx), np.int8)
    states[0, 0] = DomainMask.VOID
    states[3, 5] = DomainMask.SOLID
    mask = DomainMask(states)
    rho = rng.random((ny, nx))
    state = assemble_and_solve(rho, mask, cantilever_bcs(nx, ny))
    _, dc = compliance_and_sensitivity(state, rho, MaterialModel(), mask)
    assert np.all(dc <= 0)
    assert dc[0, 0] == 0 and dc[3, 5] == 0


def test_boundary_condition_errors():
    nx, ny = 4, 2
    with pytest.raises(ValueError, match="no nodes"):
        BoundaryConditions((Support((10, 10, 11, 11)),), ()).fixed_dofs(nx, ny)
    with pytest.raises(ValueError, match="at least one fixed"):
        BoundaryConditions((), (Load((4, 1, 4, 1), (0, 1)),)).fixed_dofs(nx, ny)
    with pytest.raises(ValueError, match="at least one load"):
        BoundaryConditions((Support((0, 0, 0, 2)),), ()).force_vector(nx, ny)
    with pytest.raises(ValueError, match="fixed DOF"):
        BoundaryConditions((Support((0, 0, 0, 2)),),
                           (Load((0, 1, 0, 1), (0, 1)),)).force_vector(nx, ny)
    with pytest.raises(ValueError, match="no nodes"):
        BoundaryConditions((Support((0, 0, 0, 2)),),
                           (Load((9, 9, 9, 9), (0, 1)),)).force_vector(nx, ny)


def test_distributed_load_splits_evenly():
    bcs = BoundaryConditions((Support((0, 0, 0, 4)),), (Load((8, 1, 8, 3), (0, -3.0)),))
    f = bcs.force_vector(8, 4)
    assert f.sum() == pytest.approx(-3.0)
    assert np.count_nonzero(f) == 3
    assert np.allclose(f[f != 0], -1.0)


def test_roller_support_fixes_one_axis():
    bcs = BoundaryConditions((Support((0, 0, 0, 2), axes=(0,)), Support((0, 0, 0, 0))),
                             (Load((4, 1, 4, 1), (1, 0)),))
    fixed = bcs.fixed_dofs(4, 2)
    assert set(fixed) == {0, 1, 10, 20}


def test_nonconvergence_warns_and_returns_best(caplog):
    nx, ny = 16, 8
    rho = np.full((ny, nx), 1e-3)
    with caplog.at_level(logging.WARNING, logger="voronoi_topopt.elasticity"):
        state = GridElasticity(nx, ny, cantilever_bcs(nx, ny), tol=1e-12, max_iter=3).solve(rho)
    assert not state.converged
    assert state.iterations == 3
    assert np.isfinite(state.residual) and state.residual > 1e-12
    assert any("did not converge" in r.message for r in caplog.records)


def test_pcg_warm_start_and_zero_rhs(rng):
    A = rng.standard_normal((20, 20))
    A = A @ A.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    x, it, ok = pcg(A, b, lambda r: r, 1e-12, 200)
    assert ok and np.allclose(A @ x, b)
    x2, it2, ok2 = pcg(A, b, lambda r: r, 1e-10, 200, x0=x)
    assert ok2 and it2 == 0
    z, it3, ok3 = pcg(A, np.zeros(20), lambda r: r, 1e-10, 10)
    assert ok3 and not np.any(z)


def test_dense_oracle_detects_singular_system():
    # one pinned node leaves a rotation free
    bcs = BoundaryConditions((Support((0, 0, 0, 0)),), (Load((4, 2, 4, 2), (0, -1)),))
    with pytest.raises(np.linalg.LinAlgError):
        dense_fem_solve(np.ones((2, 4)), None, bcs)

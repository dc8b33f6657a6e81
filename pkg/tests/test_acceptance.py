"""Acceptance criteria 1-12, one test each, with one PASS/FAIL line per criterion.

Criteria 9 to 11 run full optimizations and take several minutes in total.
"""
import logging
import time

import numpy as np
import pytest
from scipy import ndimage

from acceptance_report import report
from voronoi_topopt.baseline import simp
from voronoi_topopt.config import load_config
from voronoi_topopt.elasticity import (BoundaryConditions, Load, MaterialModel, Support,
                                       assemble_and_solve, compliance_and_sensitivity,
                                       element_dofs)
from voronoi_topopt.gradcheck import density_gradient_check, end_to_end_check
from voronoi_topopt.mma import DesignVector, MMAState, mma_update
from voronoi_topopt.neighbor_index import build
from voronoi_topopt.oracle import brute_force_density, dense_fem_solve, discrete_voronoi_labels
from voronoi_topopt.pipeline import (IterationRecord, OptHistory, convergence_check,
                                     first_feasible, initialize_sites, optimize,
                                     with_overrides)
from voronoi_topopt.voronoi_field import (FieldConfig, SiteSet, density_at, rasterize_density,
                                          soft_weights, soft_weights_batch)


def touching_elements(dofs, nx, ny):
    """(ny, nx) mask of elements with a node carrying one of ``dofs``."""
    return np.isin(element_dofs(nx, ny), dofs).any(axis=1).reshape(ny, nx)


def connects(rho_tilde, bcs, threshold=0.5):
    """Whether thresholded material 8-connects a loaded element to a supported one."""
    ny, nx = rho_tilde.shape
    solid = rho_tilde >= threshold
    labels, _ = ndimage.label(solid, structure=np.ones((3, 3), int))
    loaded = touching_elements(np.flatnonzero(bcs.force_vector(nx, ny)), nx, ny)
    fixed = touching_elements(bcs.fixed_dofs(nx, ny), nx, ny)
    a = set(np.unique(labels[loaded & solid]))
    b = set(np.unique(labels[fixed & solid]))
    return bool(a & b)


def test_criterion_01_density_gradients():
    t0 = time.perf_counter()
    res = density_gradient_check(seed=0, n_configs=20, n_sites=5, sharpness=10.0,
                                 step=1e-6, threshold=1e-4, min_magnitude=1e-8)
    dt = time.perf_counter() - t0
    ok = res.passed and dt < 10
    report(1, ok, f"20 configs, max rel. error {res.max_relative_error:.2e} (< 1e-4), "
                  f"{dt:.1f} s (< 10 s)")
    assert ok


def test_criterion_02_partition_of_unity():
    rng = np.random.default_rng(2)
    sites = SiteSet(rng.random((8, 2)) * 10,
                    np.column_stack([rng.uniform(0.3, 2, 8), rng.uniform(-0.3, 0.3, 8),
                                     rng.uniform(0.3, 2, 8)]))
    pts = rng.uniform(-10, 20, (10_000, 2))
    ids = np.arange(8)
    t0 = time.perf_counter()
    worst = 0.0
    for eps in (0.0, 1e-7):
        s0, s, _ = soft_weights_batch(pts, sites, FieldConfig(50.0, eps, 8), ids)
        worst = max(worst, float(np.max(np.abs(s0 + s.sum(axis=1) - 1.0))))
    dt = time.perf_counter() - t0
    per_pass = dt / 2
    ok = worst <= 1e-12 and per_pass < 1
    report(2, ok, f"10^4 points x 2 virtual weights, max |sum - 1| {worst:.1e} (<= 1e-12), "
                  f"{per_pass:.2f} s per pass (< 1 s)")
    assert ok


def test_criterion_03_discrete_consistency():
    rng = np.random.default_rng(3)
    n = 12
    sites = SiteSet(rng.random((n, 2)) * 10, np.tile([1.0, 0.0, 1.0], (n, 1)))
    pts = rng.random((1000, 2)) * 10
    cfg = FieldConfig(50.0, 0.0, n)
    d = np.sqrt(((pts[:, None] - sites.positions[None]) ** 2).sum(-1))
    d.sort(axis=1)
    keep = d[:, 1] - d[:, 0] > 1e-9
    soft = np.array([np.argmax(soft_weights(x, sites, cfg, np.arange(n)).site_weights)
                     for x in pts])
    hard = discrete_voronoi_labels(sites, pts)
    agree = int(np.sum(soft[keep] == hard[keep]))
    ok = agree == keep.sum()
    report(3, ok, f"{agree}/{keep.sum()} points agree ({1000 - keep.sum()} within 1e-9 "
                  f"of a bisector excluded)")
    assert ok


def test_criterion_04_midline_density():
    sites = SiteSet([[0.0, 0.0], [2.0, 0.0]], [[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    values = {}
    worst = 0.0
    for beta in (1, 10, 50):
        cfg = FieldConfig(float(beta), 0.0, 2)
        rhos = [density_at([1.0, y], sites, cfg, [0, 1]) for y in (-3.0, 0.0, 0.7, 5.0)]
        worst = max(worst, max(abs(r - (1 - 2 * 0.5 ** beta)) for r in rhos))
        values[beta] = rhos[1]
    ordered = values[1] < values[10] < values[50]
    ok = worst <= 1e-12 and ordered and values[1] == 0.0
    report(4, ok, f"max |rho - (1 - 2*0.5^beta)| {worst:.1e}; rho(beta=1,10,50) = "
                  f"{values[1]:.3g}, {values[10]:.6f}, {values[50]:.15f}")
    assert ok


def test_criterion_05_knn_acceleration():
    rng = np.random.default_rng(5)
    nx, ny, n = 128, 64, 50
    # isotropic D = 3 per element unit; the k = 10 bound depends on D (see README)
    sites = SiteSet(rng.random((n, 2)) * [nx, ny], np.tile([3.0, 0.0, 3.0], (n, 1)))
    t0 = time.perf_counter()
    index = build(sites)
    ref = brute_force_density(sites, (nx, ny), FieldConfig(50.0, 0.0, n))
    full = rasterize_density(sites, (nx, ny), FieldConfig(50.0, 0.0, n), index).values
    knn = rasterize_density(sites, (nx, ny), FieldConfig(50.0, 0.0, 10), index).values
    dt = time.perf_counter() - t0
    bitwise = np.array_equal(full, ref)
    dev = float(np.max(np.abs(knn - ref)))
    ok = bitwise and dev < 1e-6 and dt < 5
    report(5, ok, f"k = N bitwise equal: {bitwise}; k = 10 max deviation {dev:.1e} (< 1e-6); "
                  f"{dt:.2f} s (< 5 s)")
    assert ok


def test_criterion_06_fem_correctness():
    nx, ny = 16, 8
    bcs = BoundaryConditions((Support((0, 0, 0, ny)),), (Load((nx, ny / 2, nx, ny / 2), (0, -1)),))
    worst_c = 0.0
    for level in (1.0, 0.5):
        rho = np.full((ny, nx), level)
        c_pcg = assemble_and_solve(rho, None, bcs, tol=1e-12).compliance
        c_ref = float(bcs.force_vector(nx, ny) @ dense_fem_solve(rho, None, bcs))
        worst_c = max(worst_c, abs(c_pcg - c_ref) / abs(c_ref))

    nx, ny = 4, 4
    bcs = BoundaryConditions((Support((0, 0, 0, ny)),), (Load((nx, 2, nx, 2), (0, -1)),))
    rho = 0.3 + 0.7 * np.random.default_rng(6).random((ny, nx))
    state = assemble_and_solve(rho, None, bcs, tol=1e-14)
    _, dc = compliance_and_sensitivity(state, rho, MaterialModel())
    f = bcs.force_vector(nx, ny)
    h = 1e-6
    worst_s = 0.0
    for e in range(nx * ny):
        up, dn = rho.copy(), rho.copy()
        up.flat[e] += h
        dn.flat[e] -= h
        fd = (f @ dense_fem_solve(up, None, bcs) - f @ dense_fem_solve(dn, None, bcs)) / (2 * h)
        worst_s = max(worst_s, abs(dc.flat[e] - fd) / abs(fd))
    ok = worst_c <= 1e-8 and worst_s <= 1e-5
    report(6, ok, f"16x8 PCG vs dense compliance rel. diff {worst_c:.1e} (<= 1e-8); "
                  f"4x4 sensitivity vs FD re-solve {worst_s:.1e} (<= 1e-5)")
    assert ok


def _mma_run(x0, fun, updates):
    x = DesignVector(np.asarray(x0, float), 0.0, 1.0)
    state = MMAState.initial(x)
    for _ in range(updates):
        f, df, g, dg = fun(x.values)
        x, state = mma_update(x, f, df, g, dg, state)
    return x.values


def test_criterion_07_mma_benchmarks():
    def constrained(v):
        return float(v @ v), 2 * v, float(1 - v.sum()), -np.ones(2)

    def scalar(v):
        return float((v[0] - 0.3) ** 2), 2 * (v - 0.3), -1.0, np.zeros(1)

    xc = _mma_run([0.9, 0.2], constrained, 100)
    xs = _mma_run([0.9], scalar, 100)
    err_c = float(np.max(np.abs(xc - 0.5)))
    err_s = float(abs(xs[0] - 0.3))
    viol = max(0.0, 1 - xc.sum())
    ok = err_c <= 1e-4 and err_s <= 1e-4 and viol <= 1e-6
    report(7, ok, f"constrained |x - (0.5, 0.5)| {err_c:.1e}, violation {viol:.1e}; "
                  f"scalar |x - 0.3| {err_s:.1e}; 100 updates each")
    assert ok


def test_criterion_08_end_to_end_chain_rule():
    comp, vol = end_to_end_check()
    ok = comp.passed and vol.passed
    report(8, ok, f"compliance {comp.max_relative_error:.1e} (< 1e-3), "
                  f"volume {vol.max_relative_error:.1e} (< 1e-5)")
    assert ok


@pytest.mark.slow
def test_criterion_09_cantilever():
    run = load_config(preset="cantilever")
    p = run.problem
    t0 = time.perf_counter()
    result = optimize(p)
    dt = time.perf_counter() - t0
    hist = result.history
    vol = hist[-1].volume_fraction
    final_c = hist[-1].compliance
    k = first_feasible(hist, p.target_volume)
    reduction = 1 - final_c / hist[k].compliance if k is not None else float("nan")
    linked = connects(result.rho_tilde, p.bcs)
    ok = abs(vol - p.target_volume) <= 0.01 and reduction >= 0.5 and linked and dt < 600

    try:
        import pyamg  # noqa: F401
        precond = "amg"
    except ImportError:
        precond = "jacobi"
    base = simp(p.nx, p.ny, p.bcs, p.target_volume, preconditioner=precond)
    gap = final_c / base.compliance - 1
    report(9, ok, f"{len(hist)} iterations ({result.stop_reason}), volume {vol:.4f}, "
                  f"c {final_c:.4g}, reduction {reduction:.1%} from first feasible iterate "
                  f"{k}, load-support connected: {linked}, {dt:.0f} s; informative: "
                  f"{gap:+.1%} vs SIMP baseline c {base.compliance:.4g}")
    assert ok


@pytest.mark.slow
def test_criterion_10_free_boundary(caplog):
    run = load_config(preset="free_boundary_cantilever")
    # the compliance test would end the run early on the low steepness plateau
    p = with_overrides(run.problem, compliance_tol=0.0)
    sites = initialize_sites(p)
    rho = rasterize_density(sites, p.shape, p.field_config, build(sites)).values
    band = np.zeros_like(rho, dtype=bool)
    band[[0, -1], :] = True
    band[:, [0, -1]] = True
    border = float(rho[band].max())
    with caplog.at_level(logging.WARNING, logger="voronoi_topopt.pipeline"):
        result = optimize(p, sites=sites)
    warnings = sum("FEM residual" in r.getMessage() for r in caplog.records)
    completed = len(result.history) == 100
    finite = bool(np.all(np.isfinite(result.history.column("compliance"))))
    ok = border < 1e-6 and completed and finite
    report(10, ok, f"max border-band density before optimization {border:.1e} (< 1e-6); "
                   f"{len(result.history)} iterations completed with {warnings} FEM "
                   f"non-convergence warnings")
    assert ok


@pytest.mark.slow
def test_criterion_11_ablations():
    push = load_config(preset="pushdown_two_sites")
    pp = push.problem
    res_p = optimize(pp)
    moved = float(np.max(np.abs(res_p.sites.positions - res_p.initial_sites.positions)))
    fixed_D = np.array_equal(res_p.sites.metric_lower, res_p.initial_sites.metric_lower)
    linked = connects(res_p.rho_tilde, pp.bcs)

    arch = load_config(preset="arch_two_sites")
    res_a = optimize(arch.problem)
    fixed_x = np.array_equal(res_a.sites.positions, res_a.initial_sites.positions)
    D = res_a.sites.metric_factors * arch.scale       # back to config units
    dominant = all(abs(m[0, 0]) > abs(m[0, 1]) and abs(m[1, 1]) > abs(m[0, 1]) for m in D)
    first_larger = all(m[0, 0] > m[1, 1] for m in D)
    ok = linked and fixed_D and moved > 0 and fixed_x and dominant and first_larger
    Ds = "; ".join(f"D{i + 1} = [{m[0, 0]:.0f}, {m[0, 1]:.2g}; {m[1, 1]:.0f}]"
                   for i, m in enumerate(D))
    report(11, ok, f"pushdown: sites moved up to {moved / push.scale:.3f}, load-base "
                   f"connected: {linked}; arch: {Ds}, diagonally dominant: {dominant}, "
                   f"D11 > D22: {first_larger}")
    assert ok


def _history(cs):
    h = OptHistory()
    for i, c in enumerate(cs):
        h.append(IterationRecord(i, c, 0.3, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0))
    return h


def test_criterion_12_stopping_rules():
    checks = {}
    const = [convergence_check(_history([3.0] * (i + 1)), 1.0).stop for i in range(6)]
    checks["constant fires first at i = 3"] = const == [False, False, False, True, True, True]
    osc = _history([1.0, 2.0, 1.0, 2.0, 1.0])
    checks["oscillating fires"] = (convergence_check(osc, 1.0).reason == "compliance")
    decay = _history([100 * 0.9 ** i for i in range(10)])
    checks["decaying continues"] = not convergence_check(decay, 1.0).stop
    one = _history([5.0])
    checks["delta = 1e-4 stops"] = convergence_check(one, 1e-4).reason == "delta"
    checks["delta just above 1e-4 continues"] = not convergence_check(one, 1.0001e-4).stop
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    report(12, ok, f"{len(checks) - len(failed)}/{len(checks)} hand-built histories behave "
                   f"as expected" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok

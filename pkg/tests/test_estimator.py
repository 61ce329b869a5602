import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexadapt.errors import InvalidArgumentError
from hexadapt.estimator import (
    ErrorEstimator,
    center_stress,
    element_error,
    element_error_batch,
    element_stresses,
    global_relative_error,
    mark,
    recover_stress_field,
    spr_basis,
    spr_recover,
)
from hexadapt.fem import Material
from hexadapt.mesh import GAUSS_POINTS, HexMesh, build_grid, shape_values


def jittered_grid(rng, res=(3, 3, 3), amount=0.08):
    grid = build_grid([0, 0, 0], [1, 1, 1], res)
    X = grid.rest_positions.copy()
    inner = np.all((X > 1e-9) & (X < 1 - 1e-9), axis=1)
    X[inner] += amount * rng.uniform(-1, 1, (inner.sum(), 3)) / max(res)
    return HexMesh(X, grid.connectivity())


def interior_nodes(mesh):
    X = mesh.rest_positions[mesh.live_nodes()]
    inner = np.all((X > 1e-9) & (X < 1 - 1e-9), axis=1)
    return mesh.live_nodes()[inner]


def centers(mesh):
    c = np.zeros((mesh.element_capacity, 3))
    e = mesh.live_elements()
    c[e] = mesh.element_coords(e).mean(axis=1)
    return c


def test_center_stress_cases():
    mesh = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    mat = Material(5.0, 0.0)
    assert np.allclose(center_stress(mesh, 0, mat, np.zeros((8, 3))), 0.0)
    u = np.zeros((8, 3))
    u[:, 0] = 1e-3 * mesh.rest_positions[:, 0]
    assert np.allclose(center_stress(mesh, 0, mat, u), [5e-3, 0, 0, 0, 0, 0], atol=1e-15)


def test_center_stress_linear_field(rng):
    grid = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    mesh = HexMesh(grid.rest_positions + 0.1 * rng.uniform(-1, 1, (8, 3)), grid.connectivity())
    mat = Material(2.0, 0.3)
    G = 1e-3 * rng.normal(size=(3, 3))
    u = mesh.rest_positions @ G.T
    eps = 0.5 * (G + G.T)
    voigt = np.array([eps[0, 0], eps[1, 1], eps[2, 2], 2 * eps[0, 1], 2 * eps[1, 2], 2 * eps[2, 0]])
    got = center_stress(mesh, 0, mat, u, corotated=False)
    assert np.allclose(got, mat.elasticity_matrix() @ voigt, rtol=1e-10, atol=1e-16)


def test_spr_reproduces_constant_and_trilinear(rng):
    mesh = jittered_grid(rng)
    c = centers(mesh)
    const = np.tile(rng.normal(size=6), (mesh.element_capacity, 1))
    coef = rng.normal(size=(8, 6))
    tri = spr_basis(c) @ coef
    rc = recover_stress_field(mesh, const).nodal
    rt = recover_stress_field(mesh, tri).nodal
    for n in interior_nodes(mesh):
        assert np.allclose(rc[n], const[0], rtol=1e-9, atol=1e-12)
        exact = spr_basis(mesh.rest_positions[n]) @ coef
        assert np.linalg.norm(rt[n] - exact) <= 1e-9 * np.linalg.norm(exact)


def test_spr_matches_least_squares_oracle(rng):
    mesh = jittered_grid(rng, (4, 4, 4))
    sig = rng.normal(size=(mesh.element_capacity, 6))
    c = centers(mesh)
    for n in interior_nodes(mesh)[:5]:
        patch = mesh.node_patch(n)
        P = spr_basis(c[patch])
        a = np.linalg.solve(P.T @ P, P.T @ sig[patch])
        expect = spr_basis(mesh.rest_positions[n]) @ a
        got = spr_recover(mesh, n, sig)
        assert np.allclose(got, expect, rtol=1e-10, atol=1e-10 * np.abs(expect).max())


def test_constant_field_has_zero_error(rng):
    mesh = jittered_grid(rng)
    mat = Material(3.0, 0.25)
    G = 1e-3 * rng.normal(size=(3, 3))
    x = mesh.rest_positions + mesh.rest_positions @ G.T
    emap = ErrorEstimator(mat, corotated=False).estimate(mesh, x)
    scale = np.sqrt(emap.energies.sum())
    assert emap.errors.max() <= 1e-12 * scale
    assert emap.relative <= 1e-12


def test_element_error_equal_fields_zero():
    mesh = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    s = np.array([1.0, 2, 3, 0.5, 0, -1])
    nodal = np.tile(s, (8, 1))
    assert element_error(mesh, 0, s, nodal, Material(1.0, 0.3)) == pytest.approx(0.0, abs=1e-15)


class IdentityCompliance:
    def compliance_matrix(self):
        return np.eye(6)


def test_element_error_closed_form():
    mesh = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    d = np.array([0.3, -0.2, 0.1, 0.4, 0.0, 0.2])
    sigma_h = np.tile(d, (1, 8, 1))
    dvol = np.full((1, 8), 1 / 8)
    eta = element_error_batch(mesh, IdentityCompliance(), [0], sigma_h, dvol, np.zeros((8, 6)))
    assert eta[0] == pytest.approx(np.linalg.norm(d), rel=1e-14)


def gauss_4():
    g, w = np.polynomial.legendre.leggauss(4)
    pts = np.array([[a, b, c] for c in g for b in g for a in g])
    wts = np.array([wa * wb * wc for wc in w for wb in w for wa in w])
    return pts, wts


def test_element_error_against_fine_quadrature(rng):
    mesh = jittered_grid(rng, (3, 3, 3), 0.05)
    mat = Material(2.0, 0.3)
    x = mesh.rest_positions + 1e-3 * np.sin(3 * mesh.rest_positions)
    sig_c, _ = element_stresses(mesh, mat, x, points=np.zeros((1, 3)), corotated=False)
    center = np.zeros((mesh.element_capacity, 6))
    center[mesh.live_elements()] = sig_c[:, 0]
    nodal = recover_stress_field(mesh, center).nodal
    pts, wts = gauss_4()
    Cm = mat.compliance_matrix()
    for e in mesh.live_elements()[:4]:
        sh, dv = element_stresses(mesh, mat, x, [e], points=pts, corotated=False)
        ss = shape_values(pts) @ nodal[mesh.element_nodes(e)]
        d = sh[0] - ss
        # dv uses equal weights for non-Gauss point sets; rebuild with 4-point weights
        det = dv[0] / (8.0 / len(pts))
        oracle = np.sqrt(np.einsum("qi,ij,qj,q->", d, Cm, d, det * wts))
        sg, _ = element_stresses(mesh, mat, x, [e], points=GAUSS_POINTS, corotated=False)
        got = element_error(mesh, e, sg[0], nodal, mat)
        assert got == pytest.approx(oracle, rel=1e-4)


def test_global_relative_error():
    assert global_relative_error([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert global_relative_error([np.sqrt(0.04 * 3.0)], [3.0]) == pytest.approx(0.2)


def test_mark_examples():
    assert mark([1.0, 0.2, 0.4], {0: 1, 1: 1, 2: 1}, 0.3).refine == [0, 2]
    assert mark([0.5, 0.5, 0.5], None, 0.3).refine == [0, 1, 2]
    assert ErrorEstimator(Material(1.0, 0.3)).theta == 0.3
    with pytest.raises(InvalidArgumentError):
        mark([1.0], None, 1.5)


def test_mark_coarsens_only_falling_refined():
    res = mark({0: 1.0, 1: 0.1, 2: 0.1}, {0: 1, 1: -1, 2: -1}, 0.3, levels={0: 0, 1: 1, 2: 0})
    assert res.refine == [0]
    assert res.coarsen == [1]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12),
    st.floats(1e-3, 1e3),
)
def test_mark_scale_invariant(errors, k):
    a = mark([e * k for e in errors], None, 0.3).refine
    b = mark(errors, None, 0.3).refine
    # exact threshold ties may flip under rounding of the scaled values
    eta_m = max(errors)
    ties = {i for i, e in enumerate(errors) if abs(e - 0.3 * eta_m) <= 1e-12 * max(eta_m, 1e-300)}
    assert set(a) ^ set(b) <= ties


def test_trend():
    mesh = build_grid([0, 0, 0], [1, 1, 1], [3, 3, 3])
    mat = Material(1.0, 0.3)
    est = ErrorEstimator(mat, corotated=False)
    X = mesh.rest_positions
    x1 = X.copy()
    x1[:, 0] *= 1.001
    assert set(est.trend(est.estimate(mesh, x1)).values()) == {0}
    x2 = X.copy()
    x2[:, 0] *= 1.002
    assert set(est.trend(est.estimate(mesh, x2)).values()) == {1}
    assert set(est.trend(est.estimate(mesh, x1)).values()) == {-1}
    assert set(est.trend(est.estimate(mesh, x1)).values()) == {0}

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from hexadapt.adaptivity import (
    RefinementHistory,
    build_T,
    builtin_templates,
    coarsen,
    detect_t_junctions,
    reduce_and_expand,
    reduce_system,
    refine,
)
from hexadapt.errors import CoarsenError, InvalidArgumentError, StaleReferenceError
from hexadapt.fem import Material, TissueAssembler
from hexadapt.integrator import apply_dirichlet
from hexadapt.mesh import HexMesh, build_grid, inverse_map, shape_values

from .conftest import random_hex


def test_template_counts():
    t = builtin_templates()
    assert len(t["2x2x2"].child_elements) == 8 and len(t["2x2x2"].child_nodes) == 19
    assert len(t["3x3x3"].child_elements) == 27 and len(t["3x3x3"].child_nodes) == 56
    assert len(t["2x3x3"].child_elements) == 18
    with pytest.raises(InvalidArgumentError):
        refine(build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1]), 0, "4x4x4")


def test_tiling_random_parents():
    rng = np.random.default_rng(11)
    for name in builtin_templates():
        for _ in range(100 // len(builtin_templates()) + 1):
            m = HexMesh(random_hex(rng, 0.1), [np.arange(8)])
            parent = m.element_volumes()[0]
            rec = refine(m, 0, name)
            vols = m.element_volumes(rec.children)
            assert np.all(vols > 0)
            assert vols.sum() == pytest.approx(parent, rel=1e-12)


def test_unit_hex_children_volume():
    m = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    rec = refine(m, 0, "2x2x2")
    assert np.allclose(m.element_volumes(rec.children), 1 / 8)
    assert all(m.level(c) == 1 and m.parent(c) == 0 for c in rec.children)


def test_new_node_fields_interpolate():
    m = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    rng = np.random.default_rng(0)
    v = rng.normal(size=(8, 3))
    m.add_field("v", v)
    a, b = m.element_nodes(0)[:2]
    refine(m, 0, "2x2x2")
    mid = m.find_node(0.5 * (m.rest_positions[a] + m.rest_positions[b]))
    assert np.allclose(m.field("v")[mid], 0.5 * (v[a] + v[b]))


def test_refine_coarsen_roundtrip():
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 1, 1])
    before = m.snapshot()
    rec = refine(m, 0, "3x3x3")
    assert m.n_nodes == 12 + 56 and m.n_elements == 1 + 27
    removed = coarsen(m, rec)
    assert len(removed) == 56
    assert m.snapshot() == before
    with pytest.raises(StaleReferenceError):
        refine(m, rec.children[0], "2x2x2")


def test_coarsen_restores_moved_corners():
    m = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    m.add_field("x", m.rest_positions.copy())
    rec = refine(m, 0, "2x2x2")
    d = np.array([0.3, -0.1, 2.0])
    m.set_field("x", m.field("x") + d)
    coarsen(m, rec)
    corners = m.element_nodes(0)
    assert np.allclose(m.field("x")[corners], m.rest_positions[corners] + d)


def test_coarsen_requires_leaf_children():
    m = build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])
    h = RefinementHistory()
    rec = h.refine(m, 0, "2x2x2")
    h.refine(m, rec.children[0], "2x2x2")
    with pytest.raises(CoarsenError):
        h.coarsen(m, 0)
    assert h.coarsenable(m) == [rec.children[0]]


def test_conforming_mesh_has_no_slaves():
    m = build_grid([0, 0, 0], [2, 2, 2], [2, 2, 2])
    assert detect_t_junctions(m) == {}
    tm = build_T(m, {})
    assert (tm.T != sp.identity(3 * m.n_nodes)).nnz == 0


def test_hanging_weights():
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 1, 1])
    refine(m, 0, "2x2x2")
    slaves = detect_t_junctions(m)
    # 4 mid-edge nodes and 1 face centre on the shared face x = 1
    assert len(slaves) == 5
    kinds = sorted(len(v) for v in slaves.values())
    assert kinds == [2, 2, 2, 2, 4]
    for s, masters in slaves.items():
        w = [wt for _, wt in masters]
        assert np.allclose(w, 0.5 if len(w) == 2 else 0.25)
        pos = sum(wt * m.rest_positions[n] for n, wt in masters)
        assert np.allclose(pos, m.rest_positions[s])


def test_T_for_single_mid_edge_slave():
    # one DOF per node, one mid-edge slave: identity plus a (0.5, 0.5) row
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 1, 1])
    refine(m, 0, "2x2x2")
    slaves = {s: v for s, v in detect_t_junctions(m).items() if len(v) == 2}
    s0 = min(slaves)
    tm = build_T(m, {s0: slaves[s0]}, dofs_per_node=1)
    T = tm.T.toarray()
    assert T.shape == (m.n_nodes, m.n_nodes - 1)
    row = T[tm.full_index[s0]]
    masters = [tm.reduced_index[n] for n, _ in slaves[s0]]
    assert np.allclose(row[masters], 0.5) and row.sum() == pytest.approx(1.0)
    others = np.delete(T, tm.full_index[s0], axis=0)
    assert np.allclose(np.sort(others, axis=1)[:, -1], 1.0) and np.allclose(others.sum(axis=1), 1.0)


def test_two_level_chain_matches_direct_interpolation():
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 1, 1])
    h = RefinementHistory()
    rec = h.refine(m, 0, "2x2x2")
    X = m.rest_positions
    # refine the child touching the coarse neighbour at x = 1
    child = max(rec.children, key=lambda c: (X[m.element_nodes(c)][:, 0].mean(), -c))
    h.refine(m, child, "2x2x2")
    X = m.rest_positions
    direct = detect_t_junctions(m)
    chained = [s for s, ms in direct.items() if any(n in direct for n, _ in ms)]
    assert chained
    tm = build_T(m, direct)
    # a globally trilinear field is interpolated exactly by every box element,
    # so composing the weights must reproduce it at every slave
    rng = np.random.default_rng(5)
    c = rng.normal(size=8)

    def g(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z + c[6] * z * x + c[7] * x * y * z

    ur = g(X[tm.free_nodes])
    for s, masters in tm.slaves.items():
        assert all(n not in direct for n, _ in masters)
        assert sum(w * g(X[n]) for n, w in masters) == pytest.approx(g(X[s]), abs=1e-12)


def test_reduction_triple_product(rng):
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 1, 1])
    refine(m, 0, "2x3x3")
    tm = build_T(m, detect_t_junctions(m))
    n = tm.n_full
    Q = rng.normal(size=(n, n))
    A = Q @ Q.T + n * np.eye(n)
    f = rng.normal(size=n)
    A_r, f_r = reduce_system(sp.csr_matrix(A), f, tm)
    Td = tm.T.toarray()
    assert np.allclose(A_r.toarray(), Td.T @ A @ Td, rtol=0, atol=1e-12 * np.abs(A).max())
    assert np.allclose(f_r, Td.T @ f)
    A_i, f_i, dv = reduce_and_expand(sp.csr_matrix(A), f, sp.identity(n, format="csr"))
    assert np.allclose(A_i.toarray(), A) and np.allclose(dv, np.linalg.solve(A, f))


def patch_test(template, jitter_refined=False):
    """Affine Dirichlet data on the boundary, static solve on a mesh with one refined element."""
    m = build_grid([0, 0, 0], [3, 3, 3], [3, 3, 3])
    centre = [e for e in m.live_elements() if np.allclose(m.element_coords([e])[0].mean(axis=0), 1.5)][0]
    corner = 0
    refine(m, centre, template)
    refine(m, corner, template)
    mat = Material(1.0, 0.3)
    K = TissueAssembler(mat).assemble(m)["K"]
    tm = build_T(m, detect_t_junctions(m))
    X = m.rest_positions
    G = np.array([[1e-3, 2e-3, 0.0], [-1e-3, 5e-4, 3e-3], [2e-3, 0.0, -2e-3]])
    c = np.array([1e-3, -2e-3, 5e-4])
    u_exact = X @ G.T + c
    free = tm.free_nodes
    on_bnd = np.any((X[free] < 1e-12) | (X[free] > 3 - 1e-12), axis=1)
    dofs = (3 * tm.reduced_index[free[on_bnd]][:, None] + np.arange(3)).ravel()
    vals = u_exact[free[on_bnd]].ravel()
    Kr, fr = reduce_system(K, np.zeros(tm.n_full), tm)
    order = np.argsort(dofs)
    A, b = apply_dirichlet(Kr, fr, dofs[order], vals[order])
    ur = sla.spsolve(A.tocsc(), b)
    uf = (tm.T @ ur).reshape(-1, 3)
    idx = m.node_index()
    live = m.live_nodes()
    return m, tm, uf, u_exact[live], idx


@pytest.mark.parametrize("template", ["2x2x2", "3x3x3", "2x3x3"])
def test_hanging_node_patch_test(template):
    m, tm, uf, exact, idx = patch_test(template)
    assert len(tm.slaves) > 0
    assert np.max(np.abs(uf - exact)) <= 1e-8 * np.max(np.abs(exact))
    for s, masters in tm.slaves.items():
        interp = sum(w * uf[idx[n]] for n, w in masters)
        assert np.array_equal(uf[idx[s]], interp) or np.allclose(uf[idx[s]], interp, rtol=0, atol=1e-18)


def test_slave_rows_equal_master_interpolation_exactly():
    m, tm, uf, _, idx = patch_test("2x2x2")
    T = tm.T.tocsr()
    for s, masters in tm.slaves.items():
        for a in range(3):
            r = 3 * idx[s] + a
            cols = T.indices[T.indptr[r] : T.indptr[r + 1]]
            assert sorted((cols // 3).tolist()) == sorted(tm.reduced_index[n] for n, _ in masters)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**6), st.sampled_from(sorted(builtin_templates()))), min_size=1, max_size=5))
def test_refine_sequence_reverses_exactly(seq):
    m = build_grid([0, 0, 0], [2, 1, 1], [2, 2, 2])
    m.add_field("x", m.rest_positions.copy())
    before = (m.snapshot(), m.rest_positions[m.live_nodes()].copy(), m.field("x")[m.live_nodes()].copy())
    h = RefinementHistory()
    done = []
    for pick, name in seq:
        elems = m.live_elements()
        e = int(elems[pick % len(elems)])
        if m.level(e) >= 2:
            continue
        h.refine(m, e, name)
        done.append(e)
    for e in reversed(done):
        h.coarsen(m, e)
    assert m.snapshot() == before[0]
    assert np.array_equal(m.rest_positions[m.live_nodes()], before[1])
    assert np.array_equal(m.field("x")[m.live_nodes()], before[2])
    assert detect_t_junctions(m) == {}

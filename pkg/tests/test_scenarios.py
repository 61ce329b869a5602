import copy

import numpy as np
import pytest

from hexadapt.config import config_from_dict
from hexadapt.fem import Material
from hexadapt.mesh import build_grid, shape_values
from hexadapt.scenarios import (
    STEP_COLUMNS,
    base_motion,
    build_mesh,
    canonical_topology,
    curve_distance,
    momentum_drift,
    probe_variant,
    run_displacement_probe,
    run_lshape,
    run_phantom_insertion,
    run_sweep,
    sweep_variants,
)


def test_mode_consistency_fixed_fine_equals_uniform_level_one():
    fine = config_from_dict({"scenario": "insert", "geometry": {"resolution": [18, 8, 8]}})
    uni = config_from_dict({"scenario": "insert", "adaptivity": {"mode": "uniform", "uniform_level": 1}})
    m_fine, _ = build_mesh(fine)
    m_uni, _ = build_mesh(uni)
    assert canonical_topology(m_fine) == canonical_topology(m_uni)
    assert m_fine.n_nodes == m_uni.n_nodes == 19 * 9 * 9


def test_lshape_mesh_excludes_corner_block():
    m, _ = build_mesh(config_from_dict({"scenario": "lshape"}))
    # 8 x 8 x 4 grid minus the 4 x 4 x 4 corner block
    assert m.n_elements == 8 * 8 * 4 - 4 * 4 * 4


def test_momentum_conserved_for_free_body():
    mesh = build_grid([0, 0, 0], [0.02, 0.01, 0.01], [2, 2, 2])
    mat = Material(1e5, 0.3, density=1000.0, rayleigh_alpha=0.0, rayleigh_beta=0.05)
    rng = np.random.default_rng(0)
    v = np.array([0.1, -0.05, 0.02]) + 0.02 * rng.normal(size=(mesh.n_nodes, 3))
    assert momentum_drift(mesh, mat, v, n_steps=100, tau=0.01) <= 1e-8


def test_base_motion():
    cfg = config_from_dict({"scenario": "insert"})
    motion, n = base_motion(cfg)
    assert n == 110 and motion(n * 0.01) == pytest.approx(0.011)
    cfg.motion.retract = True
    motion, n = base_motion(cfg)
    assert n == 220 and motion(2.2) == 0.0 and motion(1.1) == pytest.approx(0.011)


def test_step_table_columns_and_time_order(coarse_run):
    rows = coarse_run.tables["steps"]
    assert list(rows[0]) == list(STEP_COLUMNS)
    t = [r["time"] for r in rows]
    assert np.all(np.diff(t) > 0)
    assert coarse_run.summary["failed_steps"] == []
    tm = coarse_run.timings
    assert tm["topology"] + tm["solve"] <= tm["total"]


def test_constraint_counts_follow_insertion(coarse_run, insert_cfg):
    sim = coarse_run.simulation
    rows = coarse_run.tables["steps"]
    # needle far from tissue: no constraints
    assert rows[0]["n_surface"] + rows[0]["n_tip"] + rows[0]["n_shaft"] == 0
    # tip pressing on the surface below the puncture strength: one sticking surface point
    pre = [r for r in rows if r["n_surface"] == 1 and not r["event"]]
    assert pre and all(0 < r["force"] < insert_cfg.contact.puncture_strength for r in pre if r["force"] > 1e-9)
    # after puncture: one tip point and floor(depth / h) shaft points
    assert rows[-1]["n_tip"] == 1
    assert rows[-1]["n_shaft"] == int(np.floor(sim.depth() / sim.shaft_spacing))


def test_adaptive_dofs_between_coarse_and_fine(adaptive_run, coarse_run, fine_run):
    coarse = coarse_run.summary["max_dofs"]
    fine = fine_run.summary["max_dofs"]
    rows = adaptive_run.tables["steps"]
    first = next(i for i, r in enumerate(rows) if r["n_surface"] + r["n_tip"] > 0)
    dofs = np.array([r["dofs"] for r in rows])
    assert np.all(dofs >= coarse) and np.all(dofs < fine)
    # refinement starts with the first contact; after it the count stays above coarse
    assert np.all(dofs[first + 1 :] > coarse)


def test_curve_distance_properties(coarse_run, adaptive_run):
    a, b = coarse_run.tables["steps"], adaptive_run.tables["steps"]
    assert curve_distance(a, a) == 0.0
    assert curve_distance(a, b) == pytest.approx(curve_distance(b, a), rel=1e-12)


def test_sweep_variants():
    names = [n for n, _ in sweep_variants(config_from_dict({"scenario": "insert"}))]
    assert names == ["lambda0_mu0.5", "lambda10_mu0.5", "lambda20_mu0.5", "lambda10_mu0.1", "lambda10_mu0.3"]


def test_sweep_puncture_strength_orders_first_peak():
    cfg = config_from_dict({"scenario": "insert", "motion": {"depth": 0.001}})
    variants = [v for v in sweep_variants(cfg) if v[0] in ("lambda0_mu0.5", "lambda10_mu0.5", "lambda20_mu0.5")]
    rep = run_sweep(cfg, variants)
    peaks = [rep.summary[n]["peak_force"] for n, _ in variants]
    assert peaks[0] < peaks[1] < peaks[2]
    assert peaks[1] >= 10.0 and peaks[2] >= 20.0


def test_lshape_small_run():
    cfg = config_from_dict({"scenario": "lshape", "lshape": {"uniform_passes": 2, "adaptive_passes": 2}})
    rep = run_lshape(cfg)
    rows = rep.tables["convergence"]
    uni = [r for r in rows if r["mode"] == "uniform"]
    assert [r["pass"] for r in uni] == [0, 1]
    assert uni[1]["eta"] < uni[0]["eta"] and uni[1]["dofs"] > uni[0]["dofs"]
    assert rep.summary["uniform"]["slope"] < 0


@pytest.fixture(scope="module")
def probe_report():
    cfg = config_from_dict({"scenario": "probe", "probe": {"samples": 21, "modes": ["unrefined", "2x3x3", "3x3x3"]}})
    return cfg, run_displacement_probe(cfg)


def profiles(rep):
    out = {}
    for r in rep.tables["profile"]:
        out.setdefault(r["mode"], []).append((r["coordinate"], r["displacement"], r["distance"]))
    return {k: np.array(v) for k, v in out.items()}


def test_probe_monotone_away_from_shaft(probe_report):
    _, rep = probe_report
    for mode, p in profiles(rep).items():
        tip = p[np.argmin(p[:, 2]), 0]
        for side in (p[p[:, 0] <= tip], p[p[:, 0] >= tip][::-1]):
            assert np.all(np.diff(side[:, 1]) >= -1e-12), mode


def test_probe_anisotropic_matches_isotropic_with_fewer_dofs(probe_report):
    _, rep = probe_report
    p = profiles(rep)
    a, i = p["2x3x3"][:, 1], p["3x3x3"][:, 1]
    assert np.max(np.abs(a - i)) <= 0.1 * np.max(i)
    assert rep.summary["2x3x3"]["dofs"] < rep.summary["3x3x3"]["dofs"]
    assert rep.summary["unrefined"]["dofs"] < rep.summary["2x3x3"]["dofs"]


def test_unrefined_profile_is_linear_inside_elements(probe_report):
    cfg, _ = probe_report
    c, res = probe_variant(cfg, "unrefined")
    sim = run_phantom_insertion(c, resolution=res).simulation
    tip = sim.needle.x[-1]
    z = np.linspace(0.0, 0.02, 41)
    pts = np.repeat(np.clip(tip, 0, [0.04, 0.02, 0.02])[None], len(z), axis=0)
    pts[:, 2] = z
    x = sim.mesh.field("x")
    X = sim.mesh.rest_positions
    u = []
    for p in pts:
        e, xi = sim.mesh.locate(p)
        n = sim.mesh.element_nodes(e)
        u.append(shape_values(xi) @ (x[n] - X[n]))
    u = np.array(u)
    h = 0.02 / cfg.geometry.resolution[2]
    # second differences vanish whenever a stencil stays inside one element layer
    checked = 0
    for k in range(1, len(z) - 1):
        if np.floor(z[k - 1] / h + 1e-9) != np.floor(z[k + 1] / h - 1e-9):
            continue
        assert np.allclose(u[k - 1] - 2 * u[k] + u[k + 1], 0.0, atol=1e-9 * np.abs(u).max())
        checked += 1
    assert checked >= 20

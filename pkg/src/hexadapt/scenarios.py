"""Experiment drivers: L-shaped static benchmark, needle insertion, probe, sweeps."""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as sla

from .adaptivity import RefinementHistory, build_T, detect_t_junctions
from .beam import NeedleModel
from .config import ScenarioConfig, config_to_dict
from .errors import SolverError
from .estimator import ErrorEstimator, mark
from .fem import TissueAssembler, damping_matrix, surface_load
from .integrator import apply_dirichlet, assemble_step
from .interaction import ConstraintSet
from .mesh import build_grid, shape_values
from .simulation import AdaptSettings, InsertionSimulation

STEP_COLUMNS = (
    "step",
    "time",
    "base_displacement",
    "tip_displacement",
    "force",
    "surface_force",
    "tip_force",
    "shaft_force",
    "n_surface",
    "n_tip",
    "n_shaft",
    "uzawa_iterations",
    "dofs",
    "full_dofs",
    "eta",
    "eta_max",
    "n_refined",
    "n_coarsened",
    "event",
    "failed",
)


@dataclass
class RunReport:
    """Tables and timings of one scenario run.

    ``tables`` maps a CSV name to a list of row dicts; rows of step tables
    are in time order.  Wall-clock times live in ``timings`` only, so the
    tables stay bitwise reproducible.
    """

    scenario: str
    config: dict
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


# ------------------------------------------------------------------ geometry
_AXIS = {"x": 0, "y": 1, "z": 2}


def face_predicate(geometry, face):
    """Predicate on rest points for a named box face."""
    axis = _AXIS[face[0]]
    origin = np.asarray(geometry.origin, dtype=float)
    ext = np.asarray(geometry.extents, dtype=float)
    value = origin[axis] + (ext[axis] if face.endswith("max") else 0.0)
    eps = 1e-9 * float(ext.max())
    return lambda p: np.abs(np.asarray(p)[:, axis] - value) < eps


def notch_predicate(geometry):
    """Inside test for the L-shape: drop the block ``x < mid_x, y > mid_y``."""
    o = np.asarray(geometry.origin, dtype=float)
    e = np.asarray(geometry.extents, dtype=float)
    mx, my = o[0] + 0.5 * e[0], o[1] + 0.5 * e[1]
    eps = 1e-9 * float(e.max())
    return lambda p: ~((p[:, 0] < mx + eps) & (p[:, 1] > my - eps))


def build_mesh(cfg, resolution=None):
    """Mesh for ``cfg`` with the uniform refinement passes already applied."""
    g = cfg.geometry
    res = g.resolution if resolution is None else resolution
    inside = notch_predicate(g) if g.notch else None
    mesh = build_grid(g.origin, g.extents, [int(r) for r in res], inside=inside)
    history = RefinementHistory()
    if cfg.adaptivity.mode == "uniform":
        uniform_refine(mesh, history, cfg.adaptivity.uniform_level, cfg.adaptivity.template)
    return mesh, history


def uniform_refine(mesh, history, levels, template="2x2x2"):
    for _ in range(levels):
        for e in mesh.live_elements().tolist():
            history.refine(mesh, e, template)
    return mesh


def canonical_topology(mesh):
    """Id-free description of the live elements: sorted corner coordinates."""
    q = mesh.quantum
    xyz = np.round(mesh.element_coords() / q).astype(np.int64)
    return sorted(tuple(map(tuple, e)) for e in xyz.tolist())


# ------------------------------------------------------------------- L-shape
def static_solve(mesh, material, cfg):
    """Linear static solve with the configured clamps, supports and traction.

    Returns full nodal displacements (node-capacity rows), the transformation
    map and the solve time.
    """
    b = cfg.boundary
    g = cfg.geometry
    K = TissueAssembler(material).assemble(mesh, None, rotations=False)["K"]
    tm = build_T(mesh, detect_t_junctions(mesh))
    live = mesh.live_nodes()
    f = np.zeros((mesh.node_capacity, 3))
    if b.traction_face is not None:
        f = surface_load(mesh, face_predicate(g, b.traction_face), b.traction)
    Kr = (tm.T.T @ K @ tm.T).tocsr()
    fr = tm.T.T @ f[live].ravel()
    X = mesh.rest_positions
    free = tm.free_nodes
    dofs = []
    for face in b.clamped:
        sel = free[face_predicate(g, face)(X[free])]
        dofs.append((3 * tm.reduced_index[sel][:, None] + np.arange(3)).ravel())
    for s in b.supports:
        face, _, axis = s.partition(":")
        sel = free[face_predicate(g, face)(X[free])]
        dofs.append(3 * tm.reduced_index[sel] + _AXIS[axis])
    A, rhs = apply_dirichlet(Kr, fr, np.concatenate(dofs) if dofs else np.zeros(0, dtype=int))
    t0 = time.perf_counter()
    if A.shape[0] <= cfg.lshape.iterative_above:
        ur = sla.spsolve(A.tocsc(), rhs)
    else:
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=500)
        resid = []
        ur = ml.solve(rhs, tol=cfg.integrator.solver_tolerance, accel="cg", maxiter=1000, residuals=resid)
        rel = resid[-1] / max(resid[0], 1e-300)
        if not rel <= 10 * cfg.integrator.solver_tolerance:
            raise SolverError("AMG-CG did not converge", rel)
    t_solve = time.perf_counter() - t0
    u = np.zeros((mesh.node_capacity, 3))
    u[live] = (tm.T @ ur).reshape(-1, 3)
    return u, tm, t_solve


def _slope(dofs, etas):
    if len(dofs) < 2:
        return float("nan")
    return float(np.polyfit(np.log(dofs), np.log(etas), 1)[0])


def run_lshape(cfg, modes=("uniform", "adaptive"), log=None):
    """Refinement study on the static L-shaped domain.

    Uniform passes refine every element; adaptive passes refine the elements
    with ``eta_e >= theta * max eta_e``.  Adaptive passes stop once the
    relative error reaches ``target_error``.
    """
    material = cfg.tissue.build()
    rows = []
    summary = {}
    t_top = t_solve = t_est = 0.0
    t_all = time.perf_counter()
    base = copy.deepcopy(cfg)
    base.adaptivity.mode = "fixed"
    for mode in modes:
        mesh, history = build_mesh(base)
        n_pass = cfg.lshape.uniform_passes if mode == "uniform" else cfg.lshape.adaptive_passes
        dofs, etas = [], []
        for p in range(n_pass):
            try:
                t0 = time.perf_counter()
                u, tm, ts = static_solve(mesh, material, cfg)
                est = ErrorEstimator(material, cfg.adaptivity.theta, corotated=False)
                emap = est.estimate(mesh, mesh.rest_positions + u, tm.slaves)
            except SolverError as exc:
                err = SolverError(f"{mode} pass {p}: {exc}", exc.residual)
                err.pass_index = p
                raise err from exc
            eta = emap.relative
            t_solve += ts
            dofs.append(tm.n_reduced)
            etas.append(eta)
            rows.append(
                {
                    "mode": mode,
                    "pass": p,
                    "elements": mesh.n_elements,
                    "dofs": tm.n_reduced,
                    "full_dofs": tm.n_full,
                    "eta": eta,
                }
            )
            if log:
                log(f"{mode} pass {p}: dofs={tm.n_reduced} eta={eta:.4f}")
            last = p == n_pass - 1
            if last or (mode == "adaptive" and eta <= cfg.lshape.target_error):
                break
            t1 = time.perf_counter()
            if mode == "uniform":
                uniform_refine(mesh, history, 1, cfg.adaptivity.template)
            else:
                mk = mark(emap.as_dict(), None, cfg.adaptivity.theta)
                for e in mk.refine:
                    if mesh.level(e) < cfg.adaptivity.max_level:
                        history.refine(mesh, e, cfg.adaptivity.template)
            t_top += time.perf_counter() - t1
            t_est += t1 - t0 - ts
        reached = [d for d, e in zip(dofs, etas) if e <= cfg.lshape.target_error]
        summary[mode] = {
            "slope": _slope(dofs, etas),
            "dofs_at_target": reached[0] if reached else None,
            "max_dofs": dofs[-1],
            "final_eta": etas[-1],
        }
    total = time.perf_counter() - t_all
    return RunReport(
        "lshape",
        config_to_dict(cfg),
        {"convergence": rows},
        summary,
        {"total": total, "topology": t_top, "solve": t_solve, "assemble_estimate": t_est},
    )


# ------------------------------------------------------------------ insertion
def base_motion(cfg):
    """Prescribed base displacement ``t -> d`` and the number of steps."""
    V = cfg.motion.speed
    total = cfg.needle.standoff + cfg.motion.depth
    t_in = total / V
    n_in = int(np.ceil(t_in / cfg.integrator.time_step - 1e-9))
    if not cfg.motion.retract:
        return (lambda t: min(V * t, total)), n_in

    def motion(t):
        if t <= t_in:
            return V * t
        return max(total - V * (t - t_in), 0.0)

    return motion, 2 * n_in


def build_insertion(cfg, resolution=None):
    """``InsertionSimulation`` for ``cfg`` (mesh, needle, contact, motion)."""
    g = cfg.geometry
    mesh, _ = build_mesh(cfg, resolution)
    o = np.asarray(g.origin, dtype=float)
    e = np.asarray(g.extents, dtype=float)
    entry = o + np.array([0.0, 0.5 * e[1], 0.5 * e[2]])
    axis = np.array([1.0, 0.0, 0.0])
    n = cfg.needle
    base = entry - (n.standoff + n.length) * axis
    needle = NeedleModel.straight(base, axis, n.length, n.segments, n.radius, n.material.build())
    c = cfg.contact
    cs = ConstraintSet(
        mu_surface=c.mu_surface,
        mu_shaft=c.mu_shaft,
        puncture_strength=c.puncture_strength,
        cut_strength=c.cut_strength,
        shaft_spacing=c.shaft_spacing,
        shaft_grip=c.shaft_grip,
        tol=c.tolerance,
        max_iter=c.max_iterations,
    )
    faces = [face_predicate(g, f) for f in cfg.boundary.clamped]

    def clamped(p):
        out = np.zeros(len(p), dtype=bool)
        for f in faces:
            out |= f(p)
        return out

    a = cfg.adaptivity
    adapt = AdaptSettings(
        mode="adaptive" if a.mode == "adaptive" else "fixed",
        template=a.template,
        theta=a.theta,
        cadence=a.cadence,
        max_level=a.max_level,
    )
    motion, n_steps = base_motion(cfg)
    sim = InsertionSimulation(
        mesh,
        cfg.tissue.build(),
        needle,
        cs,
        clamped,
        entry,
        axis,
        motion,
        tau=cfg.integrator.time_step,
        adapt=adapt,
        cut_advance=c.cut_advance,
    )
    return sim, n_steps


def step_row(rec):
    return {k: getattr(rec, k) for k in STEP_COLUMNS}


def run_phantom_insertion(cfg, resolution=None, n_steps=None, callback=None, log=None):
    """Drive the needle by its base and record force, DOFs and error per step.

    A contact-solver failure is recorded as ``failed`` on that step's row and
    the run continues.
    """
    sim, n_default = build_insertion(cfg, resolution)
    n = n_default if n_steps is None else n_steps
    t0 = time.perf_counter()
    rows = []
    for _ in range(n):
        rec = sim.step()
        rows.append(step_row(rec))
        if callback is not None:
            callback(sim, rec)
        if log and rec.step % 50 == 0:
            log(f"step {rec.step}: base={rec.base_displacement:.5f} force={rec.force:.4f} dofs={rec.dofs}")
    total = time.perf_counter() - t0
    forces = np.array([r["force"] for r in rows])
    dofs = np.array([r["dofs"] for r in rows])
    summary = {
        "steps": len(rows),
        "peak_force": float(forces.max()) if len(rows) else 0.0,
        "final_force": float(forces[-1]) if len(rows) else 0.0,
        "min_dofs": int(dofs.min()) if len(rows) else 0,
        "max_dofs": int(dofs.max()) if len(rows) else 0,
        "failed_steps": [r["step"] for r in rows if r["failed"]],
    }
    timings = {
        "total": total,
        "topology": float(sum(r.time_topology for r in sim.records)),
        "solve": float(sum(r.time_solve for r in sim.records)),
    }
    report = RunReport("insert", config_to_dict(cfg), {"steps": rows}, summary, timings)
    report.simulation = sim
    return report


def force_curve(rows):
    """``(base displacement, force)`` arrays from step rows."""
    d = np.array([r["base_displacement"] for r in rows])
    f = np.array([r["force"] for r in rows])
    return d, f


def curve_distance(rows_a, rows_b):
    """RMS force difference of two force-displacement curves.

    Curve ``b`` is linearly interpolated at the base displacements of ``a``
    over the shared displacement range.
    """
    da, fa = force_curve(rows_a)
    db, fb = force_curve(rows_b)
    lo, hi = max(da.min(), db.min()), min(da.max(), db.max())
    sel = (da >= lo) & (da <= hi)
    order = np.argsort(db, kind="stable")
    fb_i = np.interp(da[sel], db[order], fb[order])
    return float(np.sqrt(np.mean((fa[sel] - fb_i) ** 2)))


# --------------------------------------------------------------------- probe
def sample_displacement(mesh, points):
    """``|u|`` at rest-configuration points (``nan`` outside the mesh)."""
    x = mesh.field("x")
    X = mesh.rest_positions
    out = np.full(len(points), np.nan)
    for i, p in enumerate(points):
        hit = mesh.locate(p)
        if hit is None:
            continue
        e, xi = hit
        nodes = mesh.element_nodes(e)
        u = shape_values(xi) @ (x[nodes] - X[nodes])
        out[i] = float(np.linalg.norm(u))
    return out


def probe_variant(cfg, mode):
    """Config used for one probe mode."""
    c = copy.deepcopy(cfg)
    c.motion.depth = cfg.probe.depth
    c.motion.retract = False
    res = None
    if mode == "unrefined":
        c.adaptivity.mode = "fixed"
    elif mode == "full":
        c.adaptivity.mode = "fixed"
        res = list(cfg.probe.full_resolution)
    else:
        c.adaptivity.mode = "adaptive"
        c.adaptivity.template = mode
        c.adaptivity.max_level = max(1, c.adaptivity.max_level)
    return c, res


def run_displacement_probe(cfg, log=None):
    """Pause an insertion at ``probe.depth`` and sample ``|u|`` on a line
    through the tip, for every configured mode."""
    rows, summary = [], {}
    t0 = time.perf_counter()
    g = cfg.geometry
    ax = _AXIS[cfg.probe.axis]
    o = np.asarray(g.origin, dtype=float)
    e = np.asarray(g.extents, dtype=float)
    t_top = t_solve = 0.0
    for mode in cfg.probe.modes:
        c, res = probe_variant(cfg, mode)
        rep = run_phantom_insertion(c, resolution=res)
        sim = rep.simulation
        t_top += rep.timings["topology"]
        t_solve += rep.timings["solve"]
        tip = sim.needle.x[-1]
        # clamp the line inside the block so the locate succeeds on its ends
        base = np.clip(tip, o, o + e)
        s = np.linspace(o[ax], o[ax] + e[ax], cfg.probe.samples)
        pts = np.repeat(base[None], len(s), axis=0)
        pts[:, ax] = s
        mag = sample_displacement(sim.mesh, pts)
        dofs = sim.transformation().n_reduced
        for si, m in zip(s, mag):
            rows.append(
                {
                    "mode": mode,
                    "dofs": dofs,
                    "coordinate": float(si),
                    "distance": float(abs(si - tip[ax])),
                    "displacement": float(m),
                }
            )
        summary[mode] = {"dofs": dofs, "tip": tip.tolist(), "max_displacement": float(np.nanmax(mag))}
        if log:
            log(f"probe {mode}: dofs={dofs} max|u|={np.nanmax(mag):.3e}")
    timings = {"total": time.perf_counter() - t0, "topology": t_top, "solve": t_solve}
    return RunReport("probe", config_to_dict(cfg), {"profile": rows}, summary, timings)


# --------------------------------------------------------------------- sweep
def sweep_variants(cfg):
    """Puncture strengths {0, 10, 20} N at mu 0.5 and mu {0.1, 0.3, 0.5} at 10 N."""
    out = []
    for lam in (0.0, 10.0, 20.0):
        out.append((f"lambda{lam:g}_mu0.5", {"puncture_strength": lam, "mu_shaft": 0.5}))
    for mu in (0.1, 0.3):
        out.append((f"lambda10_mu{mu:g}", {"puncture_strength": 10.0, "mu_shaft": mu}))
    variants = []
    for name, over in out:
        c = copy.deepcopy(cfg)
        c.contact = dataclasses.replace(c.contact, cut_strength=None, **over)
        variants.append((name, c))
    return variants


def run_sweep(cfg, variants=None, log=None):
    """Run every sweep variant; one step table per variant."""
    variants = sweep_variants(cfg) if variants is None else variants
    tables, summary = {}, {}
    t0 = time.perf_counter()
    t_top = t_solve = 0.0
    for name, c in variants:
        rep = run_phantom_insertion(c)
        tables[f"steps_{name}"] = rep.tables["steps"]
        summary[name] = rep.summary
        t_top += rep.timings["topology"]
        t_solve += rep.timings["solve"]
        if log:
            log(f"sweep {name}: peak={rep.summary['peak_force']:.3f}")
    timings = {"total": time.perf_counter() - t0, "topology": t_top, "solve": t_solve}
    return RunReport("sweep", config_to_dict(cfg), tables, summary, timings)


# ----------------------------------------------------------- conservation
def momentum_drift(mesh, material, velocity, n_steps=100, tau=0.01):
    """Relative drift of total linear momentum of a free body over ``n_steps``.

    No clamps, no contact: only internal and stiffness-proportional damping
    forces act, and both are self-equilibrated.  Mass-proportional damping
    resists rigid motion by design, so use ``rayleigh_alpha = 0`` here.
    """

    asm = TissueAssembler(material)
    live = mesh.live_nodes()
    if "x" not in mesh.fields:
        mesh.add_field("x", mesh.rest_positions.copy())
        mesh.add_field("v", np.zeros((mesh.node_capacity, 3)))
    v = mesh.field("v").copy()
    v[live] = velocity
    mesh.set_field("v", v)
    p0 = None
    for _ in range(n_steps):
        x = mesh.field("x")
        v = mesh.field("v")
        out = asm.assemble(mesh, positions=x, rotations=True)
        K, M, f_int = out["K"], out["M"], out["f_int"]
        C = damping_matrix(K, M, material)
        vf = v[live].ravel()
        if p0 is None:
            p0 = (M * vf).reshape(-1, 3).sum(axis=0)
        sys_ = assemble_step(M, C, K, -f_int - C @ vf, vf, tau)
        dv = sla.spsolve(sys_.A.tocsc(), sys_.b)
        vf = vf + dv
        v_new = v.copy()
        v_new[live] = vf.reshape(-1, 3)
        x_new = x.copy()
        x_new[live] = x[live] + tau * v_new[live]
        mesh.set_field("v", v_new)
        mesh.set_field("x", x_new)
    p1 = (M * vf).reshape(-1, 3).sum(axis=0)
    return float(np.linalg.norm(p1 - p0) / max(np.linalg.norm(p0), 1e-300))

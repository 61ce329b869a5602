"""Coupled needle-tissue stepping with error-driven mesh adaptation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from . import interaction as ia
from .adaptivity import RefinementHistory, build_T, detect_t_junctions
from .beam import _perpendicular_frame
from .errors import ContactSolverError, InvalidArgumentError
from .estimator import ErrorEstimator
from .fem import TissueAssembler
from .integrator import apply_dirichlet


@dataclass
class AdaptSettings:
    mode: str = "fixed"  # fixed | adaptive
    template: str = "2x2x2"
    theta: float = 0.3
    cadence: int = 1
    max_level: int = 1


@dataclass
class StepRecord:
    step: int
    time: float
    base_displacement: float
    tip_displacement: float
    force: float
    surface_force: float
    tip_force: float
    shaft_force: float
    n_surface: int
    n_tip: int
    n_shaft: int
    uzawa_iterations: int
    dofs: int
    full_dofs: int
    eta: float
    eta_max: float
    n_refined: int
    n_coarsened: int
    event: str
    failed: bool
    time_topology: float
    time_solve: float


class InsertionSimulation:
    """Needle driven at its base into a tissue block.

    Parameters
    ----------
    mesh : HexMesh
        Tissue mesh; fields ``x`` and ``v`` are registered here.
    material : Material
        Tissue material.
    needle : NeedleModel
    constraints : ConstraintSet
    clamped : callable
        Predicate on rest points selecting clamped tissue nodes.
    entry_point, entry_normal : 3-vectors
        A point on the entry face and its inward unit normal.
    base_motion : callable
        ``t -> base displacement`` along the needle axis.
    tau : float
        Time step.
    adapt : AdaptSettings, optional
    cut_advance : float, optional
        Distance ahead of the tip where a cut re-anchors the tip constraint
        (default: shaft point spacing).
    footprint : float, optional
        Radius of the disk patch carrying the surface and tip loads (default:
        needle radius; 0 pins a single material point).
    """

    def __init__(
        self,
        mesh,
        material,
        needle,
        constraints,
        clamped,
        entry_point,
        entry_normal,
        base_motion,
        tau=0.01,
        adapt=None,
        cut_advance=None,
        footprint=None,
    ):
        if not tau > 0:
            raise InvalidArgumentError("tau must be > 0")
        self.mesh = mesh
        self.material = material
        self.needle = needle
        self.cs = constraints
        self.clamped = clamped
        self.entry_point = np.asarray(entry_point, dtype=float)
        n = np.asarray(entry_normal, dtype=float)
        self.entry_normal = n / np.linalg.norm(n)
        self.base_motion = base_motion
        self.tau = tau
        self.adapt = adapt or AdaptSettings()
        self.history = RefinementHistory()
        self.assembler = TissueAssembler(material)
        self.estimator = ErrorEstimator(material, self.adapt.theta, corotated=True)
        self.axis = needle.rest[-1] - needle.rest[0]
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.base0 = needle.rest[0].copy()
        self.tip0 = needle.rest[-1].copy()
        if "x" not in mesh.fields:
            mesh.add_field("x", mesh.rest_positions.copy())
            mesh.add_field("v", np.zeros((mesh.node_capacity, 3)))
        self.t = 0.0
        self.step_index = 0
        self.entry = None
        self.pending = None
        self._tmap = None
        self._topology_version = -1
        self._version = 0
        self.records = []
        self.last_emap = None
        self._cut_advance = cut_advance
        self.footprint = needle.radius if footprint is None else float(footprint)

    # ------------------------------------------------------------ helpers
    @property
    def shaft_spacing(self):
        if self.cs.shaft_spacing:
            return self.cs.shaft_spacing
        return 0.5 * float(np.mean(self.needle.rest_lengths))

    @property
    def cut_advance(self):
        return self._cut_advance if self._cut_advance else self.shaft_spacing

    def transformation(self):
        if self._topology_version != self._version:
            self._tmap = build_T(self.mesh, detect_t_junctions(self.mesh))
            self._topology_version = self._version
        return self._tmap

    def _frame_along(self, s):
        _, (a, b), _ = self.needle.arc_position(s)
        d = self.needle.x[b] - self.needle.x[a]
        return _perpendicular_frame(d).T

    def _patch(self, point, normal):
        return ia.footprint_at(self.mesh, point, normal, self.footprint, self.mesh.field("x"))

    def _anchor_pos(self, p):
        return p.anchor.position(self.mesh, self.mesh.field("x"))

    def depth(self):
        if self.entry is None:
            return 0.0
        s_e = self.needle.project(self.entry.position(self.mesh, self.mesh.field("x")))[0]
        return self.needle.length - s_e

    # ------------------------------------------------------- constraints
    def _update_points(self, events):
        cs = self.cs
        mesh = self.mesh
        x = mesh.field("x")
        tip = self.needle.x[-1]
        L = self.needle.length
        # surface contact / puncture
        surf = cs.of_kind(ia.SURFACE)
        tips = cs.of_kind(ia.TIP)
        ahead = tip + self.cut_advance * self.axis
        if "puncture" in events and surf:
            sp_ = surf[0]
            a0 = sp_.anchor.parts[0] if isinstance(sp_.anchor, ia.FootprintAnchor) else sp_.anchor
            self.entry = ia.TissueAnchor(a0.rest.copy(), a0.elem, a0.xi.copy())
            anchor = self._patch(ahead, self.axis) or sp_.anchor
            cs.points = [q for q in cs.points if q is not sp_]
            cs.points.append(ia.ConstraintPoint(ia.TIP, anchor, L, self._frame_along(L), state=ia.CUT))
            return
        if not surf and not tips:
            gap = float(np.dot(self.entry_point - tip, self.entry_normal))
            if gap <= cs.contact_tolerance:
                p = tip + max(gap, 0.0) * self.entry_normal
                anchor = self._patch(p, self.entry_normal)
                if anchor is not None:
                    frame = _perpendicular_frame(self.entry_normal).T
                    cs.points.append(ia.ConstraintPoint(ia.SURFACE, anchor, L, frame, state=ia.STICK))
            return
        if surf:
            sp_ = surf[0]
            gap = float(np.dot(self._anchor_pos(sp_) - tip, self.entry_normal))
            if sp_.lam[0] <= 0 and gap > cs.contact_tolerance:
                cs.points = [q for q in cs.points if q is not sp_]
            return
        tp = tips[0]
        d = self.depth()
        if d <= 0:
            cs.points = []
            self.entry = None
            return
        # a cut moves the tip anchor one advance ahead; the tip then travels
        # freely (open unilateral gap) until it meets that material point
        if "cut" in events:
            anchor = self._patch(ahead, self.axis)
            if anchor is not None:
                tp.anchor = anchor
            tp.state = ia.CUT
            tp.lam = np.zeros(3)
        else:
            tp.state = ia.STICK if tp.lam[0] > 0 else ia.CUT
        tp.frame = self._frame_along(L)
        # shaft points at depths k h from the entry point
        h = self.shaft_spacing
        s_e = L - d
        shafts = sorted(cs.of_kind(ia.SHAFT), key=lambda p: p.index)
        n_target = int(np.floor(d / h + 1e-9))
        # half-spacing hysteresis: tissue relaxing after a cut must not drop
        # and re-create the newest point
        n_keep = int(np.floor(d / h + 0.5))
        cs.points = [p for p in cs.points if not (p.kind == ia.SHAFT and p.index > n_keep)]
        have = {p.index for p in cs.of_kind(ia.SHAFT)}
        for k in range(1, n_target + 1):
            if k in have:
                continue
            s_k = s_e + k * h
            pos = self.needle.arc_position(s_k)[0]
            anchor = ia.anchor_at(mesh, pos, x)
            if anchor is None:
                continue
            cs.points.append(ia.ConstraintPoint(ia.SHAFT, anchor, s_k, self._frame_along(s_k), index=k))
        for p in cs.of_kind(ia.SHAFT):
            p.s = float(self.needle.project(self._anchor_pos(p))[0])
            p.frame = self._frame_along(min(max(p.s, 0.0), L))
        cs.points.sort(key=lambda p: (p.kind != ia.SURFACE, p.kind != ia.TIP, p.s))

    def _row_setup(self, x, v_t_full, node_col):
        """Constraint rows, targets, modes and friction groups for this step."""
        cs = self.cs
        rows_J1, rows_J2, meta = [], [], []
        mesh = self.mesh
        n1 = 3 * (int(node_col.max()) + 1)
        n2 = 6 * self.needle.n_nodes
        c_list, mode, gap_list = [], [], []
        groups = []
        r = 0
        for i, p in enumerate(cs.points):
            comps = [0, 1, 2]
            base_row = r
            for comp in comps:
                dvec = p.frame[comp]
                cols, vals = ia.tissue_row(mesh, p.anchor, dvec, n1, node_col)
                rows_J1.append((cols, vals))
                _, (a, b), (wa, wb) = self.needle.arc_position(p.s)
                c2 = np.concatenate([6 * a + np.arange(3), 6 * b + np.arange(3)])
                v2 = np.concatenate([-wa * dvec, -wb * dvec])
                rows_J2.append((c2, v2))
                xt = p.anchor.position(mesh, x)
                xn = self.needle.arc_position(p.s)[0]
                g = float(np.dot(dvec, xt - xn))
                if p.kind == ia.SURFACE:
                    mode.append(ia.UNILATERAL if comp == 0 else ia.BILATERAL)
                    gap_list.append(g if comp == 0 else 0.0)
                elif p.kind == ia.TIP:
                    mode.append(ia.UNILATERAL if comp == 0 else ia.BILATERAL)
                    gap_list.append(g)
                else:
                    mode.append(ia.BILATERAL)
                    gap_list.append(0.0 if comp == 0 else g)
                meta.append((i, comp))
                r += 1
            if p.kind == ia.SURFACE:
                groups.append(
                    ia.FrictionGroup([base_row + 1, base_row + 2], cs.mu_surface, normal_row=base_row,
                                     state=p.state if p.state in (ia.STICK, ia.SLIP) else ia.STICK)
                )
            elif p.kind == ia.SHAFT:
                N = float(np.linalg.norm(p.lam[1:])) + cs.shaft_grip * self.shaft_spacing
                groups.append(
                    ia.FrictionGroup([base_row], cs.mu_shaft, normal=N,
                                     state=p.state if p.state in (ia.STICK, ia.SLIP) else ia.STICK)
                )

        def build(rows, n):
            rr, cc, vv = [], [], []
            for k, (cols, vals) in enumerate(rows):
                rr.extend([k] * len(cols))
                cc.extend(cols)
                vv.extend(vals)
            return sp.coo_matrix((vv, (rr, cc)), shape=(len(rows), n)).tocsr()

        J1 = build(rows_J1, n1)
        J2 = build(rows_J2, n2)
        return J1, J2, meta, np.array(gap_list), np.array(mode, dtype=int), groups

    # ------------------------------------------------------------- stepping
    def _clamped_nodes(self, nodes):
        flags = np.asarray(self.clamped(self.mesh.rest_positions[nodes]), dtype=bool)
        return nodes[flags]

    def step(self):
        tau = self.tau
        mesh = self.mesh
        mat = self.material
        t_solve = 0.0
        t0 = time.perf_counter()
        x = mesh.field("x")
        v = mesh.field("v")
        live = mesh.live_nodes()
        tm = self.transformation()
        asm = self.assembler.assemble(mesh, positions=x, rotations=True)
        K, M, f_int = asm["K"], asm["M"], asm["f_int"]
        a, b_ = mat.rayleigh_alpha, mat.rayleigh_beta
        vf = v[live].ravel()
        Kv = K @ vf
        Cv = a * M * vf + b_ * Kv
        A_f = (sp.diags((1 + tau * a) * M) + (tau * b_ + tau * tau) * K).tocsr()
        b_f = tau * (-f_int - Cv) - tau * tau * Kv
        T = tm.T
        A_r = (T.T @ A_f @ T).tocsr()
        b_r = T.T @ b_f
        free = tm.free_nodes
        cl = self._clamped_nodes(free)
        cl_dofs = (3 * tm.reduced_index[cl][:, None] + np.arange(3)).ravel()
        A_r, b_r = apply_dirichlet(A_r, b_r, cl_dofs)
        # needle
        nd = self.needle
        Kn = nd.tangent_stiffness()
        Mn = nd.lumped_mass()
        fn = nd.internal_force().ravel()
        vn = np.column_stack([nd.v, nd.w]).ravel()
        na, nb = nd.material.rayleigh_alpha, nd.material.rayleigh_beta
        Knv = Kn @ vn
        A_n = (sp.diags((1 + tau * na) * Mn) + (tau * nb + tau * tau) * Kn).tocsr()
        b_n = tau * (-fn - na * Mn * vn - nb * Knv) - tau * tau * Knv
        target = self.base0 + self.base_motion(self.t + tau) * self.axis
        vb = (target - nd.x[0]) / tau
        base_dofs = np.arange(6)
        base_vals = np.concatenate([vb - nd.v[0], -nd.w[0]])
        A_n, b_n = apply_dirichlet(A_n, b_n, base_dofs, base_vals)
        nr = A_r.shape[0]
        t1 = time.perf_counter()
        lu_t = sla.splu(A_r.tocsc())
        lu_n = sla.splu(A_n.tocsc())

        def solve_A(rhs):
            rhs = np.asarray(rhs, dtype=float)
            out = np.empty_like(rhs)
            out[:nr] = lu_t.solve(np.ascontiguousarray(rhs[:nr]))
            out[nr:] = lu_n.solve(np.ascontiguousarray(rhs[nr:]))
            return out

        # constraints
        node_col = mesh.node_index()
        J1, J2, meta, gaps, modes, groups = self._row_setup(x, vf, node_col)
        rcount = J1.shape[0]
        iters = 0
        failed = False
        if rcount:
            J1r = (J1 @ T).tocsr()
            vel = J1 @ vf + J2 @ vn
            c = -(vel + gaps / tau)
            # prescribed dofs: move their known increments to the target
            dvD = np.zeros(J2.shape[1])
            dvD[base_dofs] = base_vals
            c = c - J2 @ dvD
            J2m = J2.tolil()
            J2m[:, base_dofs] = 0.0
            J2 = J2m.tocsr()
            keep = np.ones(nr)
            keep[cl_dofs] = 0.0
            J1r = (J1r @ sp.diags(keep)).tocsr()
            J = sp.hstack([J1r, J2]).tocsr()
            A_diag = np.concatenate([A_r.diagonal(), A_n.diagonal()])
            W = ia.penalty_weights(A_diag, J, self.cs.penalty_scale)
            lam0 = np.array([self.cs.points[i].lam[comp] for i, comp in meta])
            solver = ia.ConstraintSolver(self.cs.tol, self.cs.max_iter)
            b_all = np.concatenate([b_r, b_n])
            try:
                res = solver.solve(solve_A, b_all, J, c, W, modes, groups, lam0=lam0, tau=tau)
            except ContactSolverError:
                failed = True
                res = None
            if res is None:
                dv = solve_A(b_all)
                lam = np.zeros(rcount)
                states = [g.state for g in groups]
            else:
                dv, lam, iters, states = res.dv, res.lam, res.iterations, res.states
            # write back multipliers and friction states
            for p in self.cs.points:
                p.lam = np.zeros(3)
            for (i, comp), l in zip(meta, lam):
                self.cs.points[i].lam[comp] = l
            gi = 0
            for p in self.cs.points:
                if p.kind in (ia.SURFACE, ia.SHAFT):
                    p.state = states[gi]
                    gi += 1
        else:
            dv = solve_A(np.concatenate([b_r, b_n]))
        t_solve += time.perf_counter() - t1
        # update tissue (reduced -> full) and needle
        dv_f = T @ dv[:nr]
        vf_new = vf + dv_f
        v_new = v.copy()
        v_new[live] = vf_new.reshape(-1, 3)
        mesh.set_field("v", v_new)
        x_new = x.copy()
        x_new[live] = x[live] + tau * vf_new.reshape(-1, 3)
        mesh.set_field("x", x_new)
        nd.advance(dv[nr:], tau)
        self.t += tau
        self.step_index += 1
        # events from converged multipliers (take effect next step)
        events = set()
        parts = {ia.SURFACE: 0.0, ia.TIP: 0.0, ia.SHAFT: 0.0}
        for p in self.cs.points:
            parts[p.kind] += float(np.dot(p.lam, p.frame @ self.axis))
            if p.kind == ia.SURFACE and p.lam[0] > self.cs.puncture_strength:
                events.add("puncture")
            if p.kind == ia.TIP and p.lam[0] > 0:
                lt = float(np.linalg.norm(p.lam[1:]))
                if p.lam[0] >= self.cs.mu_shaft * lt + self.cs.cut_strength:
                    events.add("cut")
        counts = self.cs.counts()
        t_top0 = time.perf_counter()
        self._update_points(events)
        eta, eta_m, n_ref, n_coa = float("nan"), float("nan"), 0, 0
        if self.adapt.mode == "adaptive" and self.step_index % self.adapt.cadence == 0:
            eta, eta_m, n_ref, n_coa = self._adapt()
        t_top = time.perf_counter() - t_top0 + (t1 - t0)
        tm = self.transformation()
        rec = StepRecord(
            step=self.step_index,
            time=self.t,
            base_displacement=float(np.dot(nd.x[0] - self.base0, self.axis)),
            tip_displacement=float(np.dot(nd.x[-1] - self.tip0, self.axis)),
            force=parts[ia.SURFACE] + parts[ia.TIP] + parts[ia.SHAFT],
            surface_force=parts[ia.SURFACE],
            tip_force=parts[ia.TIP],
            shaft_force=parts[ia.SHAFT],
            n_surface=counts[ia.SURFACE],
            n_tip=counts[ia.TIP],
            n_shaft=counts[ia.SHAFT],
            uzawa_iterations=iters,
            dofs=tm.n_reduced,
            full_dofs=tm.n_full,
            eta=eta,
            eta_max=eta_m,
            n_refined=n_ref,
            n_coarsened=n_coa,
            event="+".join(sorted(events)),
            failed=failed,
            time_topology=t_top,
            time_solve=t_solve,
        )
        self.records.append(rec)
        return rec

    # ----------------------------------------------------------- adaptivity
    def _protected_families(self, mesh):
        """Parents whose rest box (grown by half its size) holds a constraint anchor.

        Coarsening such a family would discard the sharp indentation field
        around the needle and make anchored material points jump.
        """
        pts = [p.anchor.rest for p in self.cs.points]
        if self.entry is not None:
            pts.append(self.entry.rest)
        if not pts:
            return set()
        pts = np.asarray(pts)
        out = set()
        for parent in self.history.coarsenable(mesh):
            # children are live here, and their corners span the parent box
            corners = mesh.rest_positions[mesh.connectivity(self.history.records[parent].children)]
            lo, hi = corners.reshape(-1, 3).min(axis=0), corners.reshape(-1, 3).max(axis=0)
            pad = 0.5 * (hi - lo)
            if np.any(np.all((pts >= lo - pad) & (pts <= hi + pad), axis=1)):
                out.add(parent)
        return out

    def _project_slaves(self):
        """Put hanging nodes exactly on their master interpolation."""
        tm = self.transformation()
        if not len(tm.slaves):
            return
        live = self.mesh.live_nodes()
        for name in ("x", "v"):
            f = self.mesh.field(name).copy()
            f[live] = (tm.T @ f[tm.free_nodes].ravel()).reshape(-1, 3)
            self.mesh.set_field(name, f)

    def _adapt(self):
        mesh = self.mesh
        x = mesh.field("x")
        live = mesh.live_nodes()
        span = float(np.ptp(mesh.rest_positions[live], axis=0).max())
        if float(np.abs(x[live] - mesh.rest_positions[live]).max()) <= 1e-9 * span:
            # the rest state is stress free: it is the baseline for the trend
            self.estimator._previous = dict.fromkeys(mesh.live_elements().tolist(), 0.0)
            return float("nan"), 0.0, 0, 0
        tm = self.transformation()
        emap = self.estimator.estimate(mesh, x, tm.slaves)
        trend = self.estimator.trend(emap)
        levels = dict(zip(emap.elements.tolist(), mesh.levels(emap.elements).tolist()))
        mk = self.estimator.mark(emap, trend, levels)
        self.last_emap = emap
        n_ref = 0
        for e in mk.refine:
            if levels[e] < self.adapt.max_level and mesh.is_live_element(e):
                self.history.refine(mesh, e, self.adapt.template)
                n_ref += 1
        n_coa = 0
        coarse_set = set(mk.coarsen)
        protected = self._protected_families(mesh)
        for parent in self.history.coarsenable(mesh):
            kids = self.history.records[parent].children
            if parent not in protected and all(k in coarse_set for k in kids):
                self.history.coarsen(mesh, parent)
                n_coa += 1
        if n_ref or n_coa:
            self._version += 1
            for p in self.cs.points:
                p.anchor.refresh(mesh, self.history)
            if self.entry is not None:
                self.entry.refresh(mesh, self.history)
            self._project_slaves()
        return emap.relative, emap.eta_max, n_ref, n_coa

    def run(self, n_steps, callback=None):
        for _ in range(n_steps):
            rec = self.step()
            if callback is not None:
                callback(self, rec)
        return self.records

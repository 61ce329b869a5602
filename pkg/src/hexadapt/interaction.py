"""Needle-tissue constraints with Coulomb friction, solved by Uzawa iteration.

Row convention: each constraint row has a unit direction ``d``.  The tissue
Jacobian carries ``+w d`` (shape weights of the anchor element), the needle
Jacobian ``-w d`` (centreline interpolation weights), so ``J v`` is the rate
of the gap ``d . (x_tissue - x_needle)``.  A positive multiplier pushes the
tissue along ``d`` and the needle against it.

The Uzawa loop runs with impulses ``mu = tau * lambda`` internally and
reports ``lambda`` in force units.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear

from .errors import ContactSolverError, InvalidArgumentError, StaleReferenceError
from .mesh import shape_values

SURFACE = "surface_puncture"
TIP = "needle_tip"
SHAFT = "shaft"

INACTIVE = "inactive"
STICK = "stick"
SLIP = "slip"
CUT = "cut"

BILATERAL = 0
UNILATERAL = 1


@dataclass
class TissueAnchor:
    """Material point of the tissue: rest position plus cached ``(elem, xi)``."""

    rest: np.ndarray
    elem: int
    xi: np.ndarray

    def refresh(self, mesh, history=None):
        """Re-locate after refinement or coarsening of the cached element."""
        if mesh.is_live_element(self.elem):
            return self
        cand = None
        if history is not None:
            cand = history.leaf_descendants(mesh, self.elem)
            p = self.elem
            while not cand:
                p = history.parent_of(p)
                if p is None:
                    break
                if mesh.is_live_element(p):
                    cand = [p]
        hit = mesh.locate(self.rest, candidates=cand) if cand else None
        if hit is None:
            hit = mesh.locate(self.rest)
        if hit is None:
            raise StaleReferenceError(f"anchor at {self.rest} left the tissue")
        self.elem, self.xi = hit
        return self

    def position(self, mesh, positions):
        return shape_values(self.xi) @ positions[mesh.element_nodes(self.elem)]

    def stencil(self, mesh):
        """Tissue nodes and weights whose combination gives this point."""
        return mesh.element_nodes(self.elem), shape_values(self.xi)


@dataclass(eq=False)
class FootprintAnchor:
    """Weighted average of material points covering a contact patch.

    Used for loads carried by the needle cross-section: the patch averages
    the tissue motion over the disk instead of pinning one point, which
    removes the dependence of the contact stiffness on where the point
    falls relative to the mesh nodes.
    """

    parts: list
    weights: np.ndarray

    @property
    def rest(self):
        return self.weights @ np.array([a.rest for a in self.parts])

    @property
    def elem(self):
        return self.parts[0].elem

    def refresh(self, mesh, history=None):
        for a in self.parts:
            a.refresh(mesh, history)
        return self

    def position(self, mesh, positions):
        return self.weights @ np.array([a.position(mesh, positions) for a in self.parts])

    def stencil(self, mesh):
        nodes, w = [], []
        for a, wa in zip(self.parts, self.weights):
            n_, w_ = a.stencil(mesh)
            nodes.append(n_)
            w.append(wa * w_)
        return np.concatenate(nodes), np.concatenate(w)


def anchor_at(mesh, point, positions):
    """Anchor the tissue material point currently located at ``point``."""
    hit = mesh.locate(point, positions=positions, tol=1e-6)
    if hit is None:
        return None
    elem, xi = hit
    rest = shape_values(xi) @ mesh.rest_positions[mesh.element_nodes(elem)]
    return TissueAnchor(rest, elem, xi)


def footprint_at(mesh, point, normal, radius, positions, n_ring=8):
    """Disk patch of ``radius`` around ``point`` in the plane normal to ``normal``.

    The centre carries weight 1/3 and ``n_ring`` points at ``sqrt(3)/2``
    radius share the rest; this matches the area mean of quadratic fields
    over the disk.  Ring points outside the tissue are dropped and the
    weights renormalised.  Falls back to a single point for ``radius = 0``.
    """
    centre = anchor_at(mesh, point, positions)
    if centre is None or not radius > 0:
        return centre
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    e1 = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    rho = 0.5 * np.sqrt(3.0) * radius
    parts, weights = [centre], [1.0 / 3.0]
    for k in range(n_ring):
        a = 2.0 * np.pi * k / n_ring
        q = anchor_at(mesh, np.asarray(point) + rho * (np.cos(a) * e1 + np.sin(a) * e2), positions)
        if q is not None:
            parts.append(q)
            weights.append(2.0 / (3.0 * n_ring))
    w = np.array(weights)
    return FootprintAnchor(parts, w / w.sum())


@dataclass
class ConstraintPoint:
    """One needle-tissue contact point.

    ``frame`` rows are ``(n, t1, t2)``; for tip and shaft points ``n`` runs
    along the needle, for the surface point it is the inward surface normal.
    ``lam`` holds the converged multipliers (force) in frame components.
    """

    kind: str
    anchor: TissueAnchor
    s: float
    frame: np.ndarray
    state: str = STICK
    lam: np.ndarray = field(default_factory=lambda: np.zeros(3))
    index: int = 0
    slip_sign: float = 1.0

    def directions(self):
        """Frame components that carry rows in the current state."""
        if self.state == INACTIVE:
            return []
        if self.kind == SHAFT:
            return [1, 2] if self.state == SLIP else [0, 1, 2]
        if self.kind == TIP:
            return [1, 2] if self.state == CUT else [0, 1, 2]
        return [0, 1, 2]


@dataclass
class ConstraintSet:
    points: list = field(default_factory=list)
    mu_surface: float = 0.8
    mu_shaft: float = 0.5
    puncture_strength: float = 10.0
    cut_strength: float | None = None
    penalty_scale: float = 1.0
    shaft_spacing: float | None = None
    shaft_grip: float = 300.0
    contact_tolerance: float = 1e-4
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if self.cut_strength is None:
            self.cut_strength = self.puncture_strength
        for name in ("mu_surface", "mu_shaft", "puncture_strength", "cut_strength", "shaft_grip"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if self.penalty_scale <= 0:
            raise InvalidArgumentError("penalty_scale must be > 0")

    @property
    def n_rows(self):
        return sum(len(p.directions()) for p in self.points)

    def counts(self):
        out = {SURFACE: 0, TIP: 0, SHAFT: 0}
        for p in self.points:
            out[p.kind] += 1
        return out

    def of_kind(self, kind):
        return [p for p in self.points if p.kind == kind]


# ------------------------------------------------------------ contact laws


def friction_projection(lam_t, lam_n, mu, unilateral=True):
    """Project tangential multipliers onto the Coulomb cone ``|lam_t| <= mu lam_n``.

    Returns ``(lam_t, lam_n, active)``; a negative normal on a unilateral point
    deactivates it.
    """
    lam_t = np.atleast_1d(np.asarray(lam_t, dtype=float))
    if unilateral and lam_n < 0:
        return np.zeros_like(lam_t), 0.0, False
    bound = mu * abs(lam_n)
    norm = np.linalg.norm(lam_t)
    if norm > bound:
        lam_t = lam_t * (bound / norm) if norm > 0 else lam_t
    return lam_t, float(lam_n), True


def classify_states(points, lam, cs):
    """State of each point from trial multipliers ``lam`` (per point, frame components).

    Surface: penetrate iff ``lam_n > lam_n0``; tangential stick iff
    ``|lam_t| < mu_surface lam_n``.  Tip: stick iff ``lam_n < mu |lam_t| +
    cut_strength``.  Shaft: stick iff ``|lam_n| < mu_shaft |lam_t|`` (normal
    along the shaft), else sliding.

    Returns a list of ``(state, event)`` with event in
    ``{None, "puncture", "cut"}``.
    """
    out = []
    for p, l in zip(points, lam):
        l = np.asarray(l, dtype=float)
        ln, lt = l[0], np.linalg.norm(l[1:])
        if p.kind == SURFACE:
            if ln < 0:
                out.append((INACTIVE, None))
                continue
            state = STICK if lt < cs.mu_surface * ln else SLIP
            out.append((state, "puncture" if ln > cs.puncture_strength else None))
        elif p.kind == TIP:
            if ln < cs.mu_shaft * lt + cs.cut_strength:
                out.append((STICK, None))
            else:
                out.append((CUT, "cut"))
        else:
            out.append((STICK if abs(ln) < cs.mu_shaft * lt else SLIP, None))
    return out


# -------------------------------------------------------------- jacobians


def tissue_row(mesh, anchor, direction, n_cols, node_col):
    """Sparse row distributing ``direction`` over the anchor element's corners."""
    nodes, w = anchor.stencil(mesh)
    cols = (3 * node_col[nodes][:, None] + np.arange(3)).ravel()
    vals = (w[:, None] * direction[None, :]).ravel()
    return cols, vals


def assemble_jacobians(cs, mesh, needle, positions=None, node_col=None):
    """Constraint Jacobians for the current states.

    Parameters
    ----------
    node_col : ndarray, optional
        Node id -> tissue column block (default: compact live index).

    Returns
    -------
    J1 : csr (rows x 3 n_tissue), J2 : csr (rows x 6 n_needle), rows : list
        ``rows`` holds ``(point index, frame component)`` per row.
    """
    node_col = mesh.node_index() if node_col is None else node_col
    n1 = 3 * (int(node_col.max()) + 1 if len(node_col) else 0)
    n2 = 6 * needle.n_nodes
    r1, c1, v1, r2, c2, v2, rows = [], [], [], [], [], [], []
    for i, p in enumerate(cs.points):
        if not mesh.is_live_element(p.anchor.elem):
            raise StaleReferenceError(f"constraint anchor element {p.anchor.elem} is dead")
        for comp in p.directions():
            d = p.frame[comp]
            r = len(rows)
            cols, vals = tissue_row(mesh, p.anchor, d, n1, node_col)
            r1.extend([r] * len(cols))
            c1.extend(cols)
            v1.extend(vals)
            _, (a, b), (wa, wb) = needle.arc_position(p.s)
            for node, w in ((a, wa), (b, wb)):
                if w == 0:
                    continue
                r2.extend([r] * 3)
                c2.extend(6 * node + np.arange(3))
                v2.extend(-w * d)
            rows.append((i, comp))
    m = len(rows)
    J1 = sp.coo_matrix((v1, (r1, c1)), shape=(m, n1)).tocsr()
    J2 = sp.coo_matrix((v2, (r2, c2)), shape=(m, n2)).tocsr()
    return J1, J2, rows


# ------------------------------------------------------------ Uzawa solver


def penalty_weights(A_diag, J, scale=1.0):
    """Per-row weight: ``scale`` times the mean diagonal of A over the row support."""
    J = sp.csr_matrix(J)
    W = np.empty(J.shape[0])
    for r in range(J.shape[0]):
        cols = J.indices[J.indptr[r] : J.indptr[r + 1]]
        W[r] = scale * float(np.mean(A_diag[cols])) if len(cols) else scale
    return W


def uzawa_step(A, b, J, W, lam, c=None):
    """One augmented-Lagrangian iteration.

    Solves ``(A + J^T W J) dv = b + J^T (lam + W c)`` and returns
    ``(dv, lam - W (J dv - c))``.  With ``c = 0`` this is the plain
    bilateral update.
    """
    J = sp.csr_matrix(J)
    W = np.asarray(W, dtype=float)
    lam = np.asarray(lam, dtype=float)
    c = np.zeros(J.shape[0]) if c is None else np.asarray(c, dtype=float)
    if J.shape[0] == 0:
        from scipy.sparse.linalg import spsolve

        dv = spsolve(sp.csc_matrix(A), b) if sp.issparse(A) else np.linalg.solve(A, b)
        return np.atleast_1d(dv), lam
    Aa = A + J.T @ sp.diags(W) @ J
    rhs = b + J.T @ (lam + W * c)
    if sp.issparse(Aa):
        from scipy.sparse.linalg import spsolve

        dv = spsolve(sp.csc_matrix(Aa), rhs)
    else:
        dv = np.linalg.solve(Aa, rhs)
    return dv, lam - W * (J @ dv - c)


def _spsolve(A, rhs):
    if sp.issparse(A):
        from scipy.sparse.linalg import spsolve

        return np.atleast_1d(spsolve(sp.csc_matrix(A), rhs))
    return np.linalg.solve(A, rhs)


def uzawa_solve(A, b, J, c=None, modes=None, W=None, lam0=None, tol=1e-10, max_iter=500):
    """Augmented-Lagrangian Uzawa loop for frictionless constraints.

    Bilateral rows enforce ``J dv = c``; unilateral rows ``J dv >= c`` with
    ``lam >= 0`` and complementarity.  Each iteration minimises the augmented
    Lagrangian in ``dv`` for fixed ``lam`` (the inequality term is resolved
    by an inner active-set loop, exact for the piecewise quadratic), then
    updates ``lam <- P(lam - W (J dv - c))`` with ``P`` the projection on
    ``lam >= 0`` for unilateral rows.
    """
    J = sp.csr_matrix(J)
    r = J.shape[0]
    b = np.asarray(b, dtype=float)
    c = np.zeros(r) if c is None else np.asarray(c, dtype=float)
    uni = np.zeros(r, dtype=bool) if modes is None else np.asarray(modes) == UNILATERAL
    if W is None:
        A_diag = A.diagonal() if sp.issparse(A) else np.diag(A)
        W = penalty_weights(np.asarray(A_diag, dtype=float), J)
    W = np.broadcast_to(np.asarray(W, dtype=float), (r,))
    lam = np.zeros(r) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    dv = _spsolve(A, b + J.T @ lam)
    delta = np.inf
    for it in range(1, max_iter + 1):
        act = ~uni | (lam - W * (J @ dv - c) > 0)
        for _ in range(max(r, 1) + 1):
            Ja = J[np.flatnonzero(act)]
            Wa = W[act]
            Aa = A + Ja.T @ sp.diags(Wa) @ Ja
            dv = _spsolve(Aa, b + Ja.T @ (lam[act] + Wa * c[act]))
            new_act = ~uni | (lam - W * (J @ dv - c) > 0)
            if np.array_equal(new_act, act):
                break
            act = new_act
        new = lam - W * (J @ dv - c)
        new[uni] = np.maximum(new[uni], 0.0)
        delta = float(np.max(np.abs(new - lam), initial=0.0))
        lam = new
        if delta <= tol * max(1.0, float(np.max(np.abs(lam), initial=0.0))):
            gap = J @ dv - c
            res = float(np.max(np.abs(np.where(uni, np.minimum(gap, 0.0), gap)), initial=0.0))
            return UzawaResult(dv, lam, it, [], ~uni | (lam > 0), res)
    raise ContactSolverError(f"Uzawa loop did not converge in {max_iter} iterations", residual=delta)


@dataclass
class FrictionGroup:
    """Rows sharing one Coulomb cone.

    ``normal_row`` names the row whose multiplier bounds the cone; when it is
    ``None`` the fixed ``normal`` value is used (shaft grip).
    """

    rows: list
    mu: float
    normal_row: int | None = None
    normal: float = 0.0
    state: str = STICK


@dataclass
class UzawaResult:
    dv: np.ndarray
    lam: np.ndarray
    iterations: int
    states: list
    active: np.ndarray
    residual: float


class ConstraintSolver:
    """Contact solve in constraint space, with friction bounds iterated outside.

    ``solve_A(rhs)`` must apply ``A^{-1}`` (to a vector or a matrix of
    columns); it is called once for ``b`` and once for ``J^T``, after which
    every iteration is an ``r x r`` solve.  This is an exact rewriting of the
    coupled system in terms of the Delassus operator ``G = J A^{-1} J^T``.
    """

    def __init__(self, tol=1e-6, max_iter=200, max_flips=4, compliance=1e-6):
        self.tol = tol
        self.max_iter = max_iter
        self.compliance = compliance
        self.max_flips = max_flips

    def solve(self, solve_A, b, J, c, W, modes, groups=(), lam0=None, tau=1.0, fixed=None):
        J = sp.csr_matrix(J)
        r = J.shape[0]
        dv0 = solve_A(b)
        if r == 0:
            return UzawaResult(dv0, np.zeros(0), 0, [], np.zeros(0, bool), 0.0)
        Y = solve_A(J.T.toarray())
        Y = Y.reshape(len(b), r)
        G = J @ Y
        u0 = J @ dv0
        return self.solve_dense(G, u0, c, W, modes, groups, lam0, tau, dv0=dv0, Y=Y)

    def solve_dense(self, G, u0, c, W=None, modes=None, groups=(), lam0=None, tau=1.0, dv0=None, Y=None):
        """Contact problem in constraint space.

        With impulses ``mu = tau lam`` the constrained velocity increment is
        ``dv = dv0 + Y mu`` and ``u = J dv = u0 + G mu``.  For fixed friction
        bounds the conditions (``u = c`` on bilateral rows, complementarity on
        unilateral rows, stick inside / slip on the bound for friction rows)
        are the optimality conditions of ``min 1/2 mu^T G mu + mu^T (u0 - c)``
        over a box, solved exactly by bounded-variable least squares.  The
        outer loop updates the bounds from the normal multipliers and the
        slip directions until the multipliers settle.  ``W`` is accepted for
        interface symmetry and ignored.
        """
        G = np.asarray(G, dtype=float)
        G = 0.5 * (G + G.T)
        r = len(u0)
        c = np.asarray(c, dtype=float)
        modes = np.zeros(r, dtype=int) if modes is None else np.asarray(modes)
        uni = modes == UNILATERAL
        diag = np.diag(G).copy()
        live = diag > 1e-14 * max(float(np.max(diag, initial=0.0)), 1e-300)
        idx = np.flatnonzero(live)
        S = 1.0 / np.sqrt(diag[idx])
        Gs = S[:, None] * G[np.ix_(idx, idx)] * S[None, :]
        w, V = np.linalg.eigh(Gs)
        w = np.maximum(w, self.compliance * max(float(w[-1]) if len(w) else 1.0, 1e-300))
        Lm = np.sqrt(w)[:, None] * V.T
        rhs = -(V.T @ (S * (u0 - c)[idx])) / np.sqrt(w)
        lb = np.full(r, -np.inf)
        ub = np.full(r, np.inf)
        lb[uni] = 0.0
        shape = [np.ones(len(g.rows)) for g in groups]
        mu = np.zeros(r) if lam0 is None else tau * np.asarray(lam0, dtype=float)
        it = 0
        while True:
            it += 1
            for g, grp in enumerate(groups):
                N = tau * grp.normal if grp.normal_row is None else max(mu[grp.normal_row], 0.0)
                b = grp.mu * N * shape[g]
                lb[grp.rows] = -b
                ub[grp.rows] = b
            new = np.zeros(r)
            if len(idx):
                lo, hi = lb[idx] / S, ub[idx] / S
                hi = np.maximum(hi, lo)
                sol = lo.copy()
                free = hi > lo
                if np.any(free):
                    rr = rhs - Lm[:, ~free] @ sol[~free]
                    sol[free] = lsq_linear(Lm[:, free], rr, bounds=(lo[free], hi[free]), method="bvls", tol=1e-12).x
                new[idx] = S * sol
            for g, grp in enumerate(groups):
                N = tau * grp.normal if grp.normal_row is None else max(new[grp.normal_row], 0.0)
                bound = grp.mu * N
                t = new[grp.rows]
                nt = float(np.linalg.norm(t))
                on_bound = np.any(np.abs(t) >= np.abs(ub[grp.rows]) * (1 - 1e-9)) and bound > 0
                if bound <= 0 or nt > bound * (1 + 1e-9) or (on_bound and len(t) == 1):
                    grp.state = SLIP
                    if len(t) > 1 and nt > 0:
                        shape[g] = np.abs(t) / nt
                elif on_bound and len(t) > 1:
                    grp.state = SLIP
                else:
                    grp.state = STICK
                    shape[g] = np.ones(len(t))
            delta = float(np.max(np.abs(new - mu), initial=0.0)) / tau
            mu = new
            scale = max(1.0, float(np.max(np.abs(mu), initial=0.0)) / tau)
            if it > 1 and delta < self.tol * scale:
                break
            if it >= self.max_iter:
                raise ContactSolverError(
                    f"contact solver did not converge in {self.max_iter} iterations", residual=float(delta)
                )
        u = u0 + G @ mu
        active = live & (~uni | (mu > 0))
        dv = None if dv0 is None else dv0 + Y @ mu
        in_group = np.zeros(r, dtype=bool)
        for grp in groups:
            in_group[grp.rows] = True
        bil = active & ~in_group
        res = float(np.max(np.abs((u - c)[bil]), initial=0.0))
        return UzawaResult(dv, mu / tau, it, [g.state for g in groups], active, res)

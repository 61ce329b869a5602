"""Recovery-based error estimation and maximum-strategy marking.

Raw stresses are sampled at element centres, smoothed by a least-squares
patch fit (basis ``1 x y z xy yz zx xyz``) around every node, and the energy
norm of the raw-minus-smoothed stress gives the per-element error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EstimatorError, InvalidArgumentError
from .fem import _physical_gradients, rotation_batch, strain_displacement
from .mesh import GAUSS_POINTS, GAUSS_WEIGHTS, shape_values

N_BASIS = 8
MIN_SAMPLES = 8
MAX_COND = 1e10
CENTER = np.zeros((1, 3))


def spr_basis(y):
    """Rows ``[1 x y z xy yz zx xyz]`` for points ``y`` (..., 3)."""
    y = np.asarray(y, dtype=float)
    x, yy, z = y[..., 0], y[..., 1], y[..., 2]
    return np.stack([np.ones_like(x), x, yy, z, x * yy, yy * z, z * x, x * yy * z], axis=-1)


def voigt_norm(s):
    """Frobenius norm of the symmetric tensor stored in Voigt form."""
    s = np.asarray(s)
    return np.sqrt(np.sum(s[..., :3] ** 2, axis=-1) + 2 * np.sum(s[..., 3:] ** 2, axis=-1))


def element_stresses(mesh, material, positions=None, elems=None, points=GAUSS_POINTS, corotated=True):
    """Stress (Voigt) at natural ``points`` of each element.

    Parameters
    ----------
    positions : ndarray, optional
        Current node positions (by id); ``None`` gives zero stress.
    corotated : bool
        Strip the element rotation before measuring strain.

    Returns
    -------
    sigma : (m, q, 6) array
    dvol : (m, q) array
        Quadrature weight times Jacobian determinant.
    """
    elems = mesh.live_elements() if elems is None else np.asarray(elems, dtype=np.int64)
    conn = mesh.connectivity(elems)
    x0 = mesh.rest_positions[conn]
    dNdx, det = _physical_gradients(x0, np.atleast_2d(points))
    B = strain_displacement(dNdx)
    if positions is None:
        u = np.zeros_like(x0)
    else:
        x = np.asarray(positions)[conn]
        if corotated:
            R = rotation_batch(x0, x)
            u = np.einsum("eba,eib->eia", R, x) - x0
        else:
            u = x - x0
    eps = np.einsum("eqij,ej->eqi", B, u.reshape(len(elems), 24))
    sigma = eps @ material.elasticity_matrix().T
    q = len(np.atleast_2d(points))
    w = GAUSS_WEIGHTS if q == 8 else np.full(q, 8.0 / q)
    return sigma, det * w


def center_stress(mesh, elem, material, displacements, corotated=True):
    """Raw stress at the centre of one element from nodal displacements (by id)."""
    pos = mesh.rest_positions + np.asarray(displacements)[: mesh.node_capacity]
    return element_stresses(mesh, material, pos, [elem], CENTER, corotated)[0][0, 0]


@dataclass
class RecoveredStressField:
    """Nodal recovered stress plus the raw centre stresses it came from.

    ``nodal`` and ``center`` are indexed by node and element id respectively;
    ``fallback`` maps each boundary node to the interior node whose patch
    polynomial supplied its value.
    """

    nodal: np.ndarray
    center: np.ndarray
    fallback: dict = field(default_factory=dict)


def _fit_patches(centers, values, pair_node, pair_elem, n_slots):
    """Batched least-squares patch fits.

    Returns coefficients (n_slots, 8, 6), shift, scale, sample counts and
    condition numbers, all per node slot.
    """
    pts = centers[pair_elem]
    lo = np.full((n_slots, 3), np.inf)
    hi = np.full((n_slots, 3), -np.inf)
    np.minimum.at(lo, pair_node, pts)
    np.maximum.at(hi, pair_node, pts)
    count = np.bincount(pair_node, minlength=n_slots)
    shift = np.where(count[:, None] > 0, 0.5 * (lo + hi), 0.0)
    scale = np.where(count[:, None] > 0, 0.5 * (hi - lo), 1.0)
    scale = np.where(scale > 0, scale, 1.0)
    P = spr_basis((pts - shift[pair_node]) / scale[pair_node])
    A = np.zeros((n_slots, N_BASIS, N_BASIS))
    b = np.zeros((n_slots, N_BASIS, 6))
    np.add.at(A, pair_node, P[:, :, None] * P[:, None, :])
    np.add.at(b, pair_node, P[:, :, None] * values[pair_elem][:, None, :])
    cond = np.full(n_slots, np.inf)
    ok = count >= MIN_SAMPLES
    if ok.any():
        cond[ok] = np.linalg.cond(A[ok])
    good = ok & (cond <= MAX_COND)
    coef = np.zeros((n_slots, N_BASIS, 6))
    if good.any():
        coef[good] = np.linalg.solve(A[good], b[good])
    return coef, shift, scale, count, cond, good


def recover_stress_field(mesh, center_stresses, slaves=None):
    """Superconvergent patch recovery at every live node.

    Parameters
    ----------
    center_stresses : (element_capacity, 6) array
        Raw centre stress by element id (rows of dead elements are ignored).
    slaves : dict, optional
        Hanging nodes with resolved master weights; their value is the
        master interpolation so the recovered field stays continuous.
    """
    sigma = np.asarray(center_stresses, dtype=float)
    slaves = slaves or {}
    elems = mesh.live_elements()
    nodes = mesh.live_nodes()
    conn = mesh.connectivity(elems)
    rest = mesh.rest_positions
    centers = np.zeros((mesh.element_capacity, 3))
    centers[elems] = rest[conn].mean(axis=1)
    slot = np.full(mesh.node_capacity, -1, dtype=np.int64)
    slot[nodes] = np.arange(len(nodes))
    pair_node = slot[conn.ravel()]
    pair_elem = np.repeat(elems, 8)
    coef, shift, scale, count, cond, good = _fit_patches(centers, sigma, pair_node, pair_elem, len(nodes))
    is_slave = np.zeros(len(nodes), dtype=bool)
    for s in slaves:
        is_slave[slot[s]] = True
    nodal = np.zeros((mesh.node_capacity, 6))
    idx = np.flatnonzero(good)
    if idx.size == 0:
        raise EstimatorError("no node has a well-conditioned recovery patch")
    Pn = spr_basis((rest[nodes[idx]] - shift[idx]) / scale[idx])
    nodal[nodes[idx]] = np.einsum("nk,nkj->nj", Pn, coef[idx])
    fallback = {}
    need = np.flatnonzero(~good & ~is_slave)
    if need.size:
        tree = cKDTree(rest[nodes[idx]])
        _, near = tree.query(rest[nodes[need]])
        src = idx[near]
        P = spr_basis((rest[nodes[need]] - shift[src]) / scale[src])
        nodal[nodes[need]] = np.einsum("nk,nkj->nj", P, coef[src])
        fallback = {int(nodes[a]): int(nodes[b]) for a, b in zip(need, src)}
    for s, masters in slaves.items():
        nodal[s] = sum(w * nodal[m] for m, w in masters)
    return RecoveredStressField(nodal, sigma, fallback)


def spr_recover(mesh, node, center_stresses):
    """Recovered stress at a single node (falls back as in ``recover_stress_field``)."""
    if not mesh.is_live_node(node):
        raise InvalidArgumentError(f"node {node} is not live")
    return recover_stress_field(mesh, center_stresses).nodal[node]


def element_error_batch(mesh, material, elems, sigma_h_gp, dvol, nodal):
    """Energy-norm distance between raw and recovered stress per element."""
    conn = mesh.connectivity(elems)
    N = shape_values(GAUSS_POINTS)
    sigma_s = np.einsum("qi,eij->eqj", N, nodal[conn])
    d = sigma_h_gp - sigma_s
    Cm = material.compliance_matrix()
    e2 = np.einsum("eqi,ij,eqj,eq->e", d, Cm, d, dvol)
    return np.sqrt(np.maximum(e2, 0.0))


def element_error(mesh, elem, sigma_h, sigma_s_nodal, material):
    """Energy-norm error of one element.

    ``sigma_h`` is the raw stress at the 8 Gauss points (8, 6) or a single
    constant Voigt vector; ``sigma_s_nodal`` is indexed by node id.
    """
    sigma_h = np.broadcast_to(np.asarray(sigma_h, dtype=float), (8, 6))
    _, det = _physical_gradients(mesh.element_coords([elem]), GAUSS_POINTS)
    return float(
        element_error_batch(mesh, material, [elem], sigma_h[None], det * GAUSS_WEIGHTS, np.asarray(sigma_s_nodal))[0]
    )


def element_energy_batch(material, sigma_h_gp, dvol):
    """``int eps^T sigma`` per element from Gauss-point stresses."""
    Cm = material.compliance_matrix()
    return np.einsum("eqi,ij,eqj,eq->e", sigma_h_gp, Cm, sigma_h_gp, dvol)


def global_relative_error(errors, energies):
    """``sqrt(sum eta_e^2) / sqrt(sum energy)``; NaN when the energy is zero."""
    num = float(np.sum(np.square(errors)))
    den = float(np.sum(energies))
    if den <= 0:
        return float("nan")
    return float(np.sqrt(num / den))


@dataclass
class ElementErrorMap:
    elements: np.ndarray
    errors: np.ndarray
    energies: np.ndarray
    center_norms: np.ndarray
    recovered: RecoveredStressField

    @property
    def eta_max(self):
        return float(self.errors.max()) if len(self.errors) else 0.0

    @property
    def relative(self):
        return global_relative_error(self.errors, self.energies)

    def as_dict(self):
        return dict(zip(self.elements.tolist(), self.errors.tolist()))


@dataclass
class MarkingResult:
    refine: list
    coarsen: list
    theta: float


def mark(errors, stress_trend=None, theta=0.3, levels=None):
    """Maximum-strategy marking.

    Parameters
    ----------
    errors : dict or sequence
        ``elem -> eta_e`` (a sequence is indexed by position).
    stress_trend : dict, optional
        ``elem -> +1 / 0 / -1``; ``None`` treats every element as rising.
    levels : dict, optional
        ``elem -> refinement level``; coarsening needs level > 0.
    """
    if not 0 < theta < 1:
        raise InvalidArgumentError("theta must lie in (0, 1)")
    if not isinstance(errors, dict):
        errors = dict(enumerate(np.asarray(errors, dtype=float).tolist()))
    if not errors:
        return MarkingResult([], [], theta)
    eta_m = max(errors.values())
    cut = theta * eta_m
    refine, coarsen = [], []
    for e in sorted(errors):
        tr = 1 if stress_trend is None else stress_trend.get(e, 0)
        if tr > 0 and errors[e] >= cut and eta_m > 0:
            refine.append(e)
        elif tr < 0 and errors[e] < cut and (levels is None or levels.get(e, 0) > 0):
            coarsen.append(e)
    return MarkingResult(refine, coarsen, theta)


class ErrorEstimator:
    """Stateful estimator that also tracks the stress trend between calls."""

    def __init__(self, material, theta=0.3, corotated=True, dead_band=1e-12):
        if not 0 < theta < 1:
            raise InvalidArgumentError("theta must lie in (0, 1)")
        self.material = material
        self.theta = theta
        self.corotated = corotated
        self.dead_band = dead_band
        self._previous = {}

    def estimate(self, mesh, positions, slaves=None, chunk=8192):
        elems = mesh.live_elements()
        center = np.zeros((mesh.element_capacity, 6))
        err = np.zeros(len(elems))
        energy = np.zeros(len(elems))
        for a in range(0, len(elems), chunk):
            sel = elems[a : a + chunk]
            sig_c, _ = element_stresses(mesh, self.material, positions, sel, CENTER, self.corotated)
            center[sel] = sig_c[:, 0]
        rec = recover_stress_field(mesh, center, slaves)
        for a in range(0, len(elems), chunk):
            sel = elems[a : a + chunk]
            sig_gp, dvol = element_stresses(mesh, self.material, positions, sel, GAUSS_POINTS, self.corotated)
            err[a : a + chunk] = element_error_batch(mesh, self.material, sel, sig_gp, dvol, rec.nodal)
            energy[a : a + chunk] = element_energy_batch(self.material, sig_gp, dvol)
        return ElementErrorMap(elems, err, energy, voigt_norm(center[elems]), rec)

    def trend(self, emap):
        """Sign of the centre-stress norm change since the previous call, per element."""
        out = {}
        current = dict(zip(emap.elements.tolist(), emap.center_norms.tolist()))
        for e, s in current.items():
            prev = self._previous.get(e)
            if prev is None:
                out[e] = 0
            else:
                d = s - prev
                out[e] = 0 if abs(d) <= self.dead_band else (1 if d > 0 else -1)
        self._previous = current
        return out

    def mark(self, emap, trend, levels=None):
        return mark(emap.as_dict(), trend, self.theta, levels)

"""Linear-elastic hexahedral elements with a corotational frame.

Strains and stresses use Voigt ordering ``xx, yy, zz, xy, yz, zx`` with
engineering shear strains.  Element vectors are node-major:
``[u0x, u0y, u0z, u1x, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateGeometryError, InvalidArgumentError
from .mesh import GAUSS_POINTS, GAUSS_WEIGHTS, shape_gradients, shape_values


@dataclass(frozen=True)
class Material:
    young_modulus: float
    poisson_ratio: float
    density: float = 1000.0
    rayleigh_alpha: float = 0.1
    rayleigh_beta: float = 0.1

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise InvalidArgumentError("young_modulus must be > 0")
        if not 0 <= self.poisson_ratio < 0.5:
            raise InvalidArgumentError("poisson_ratio must be in [0, 0.5)")
        if not self.density > 0:
            raise InvalidArgumentError("density must be > 0")
        if self.rayleigh_alpha < 0 or self.rayleigh_beta < 0:
            raise InvalidArgumentError("Rayleigh coefficients must be >= 0")

    @property
    def lame(self):
        E, nu = self.young_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        return lam, mu

    @property
    def shear_modulus(self):
        return self.lame[1]

    def elasticity_matrix(self):
        """6x6 isotropic stiffness in Voigt form."""
        lam, mu = self.lame
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D

    def compliance_matrix(self):
        return np.linalg.inv(self.elasticity_matrix())


def lame_stress(strain, material):
    """Stress from a Voigt strain through ``lam tr(eps) I + 2 mu eps``."""
    lam, mu = material.lame
    e = np.asarray(strain, dtype=float)
    eps = np.array(
        [[e[0], e[3] / 2, e[5] / 2], [e[3] / 2, e[1], e[4] / 2], [e[5] / 2, e[4] / 2, e[2]]]
    )
    s = lam * np.trace(eps) * np.eye(3) + 2 * mu * eps
    return np.array([s[0, 0], s[1, 1], s[2, 2], s[0, 1], s[1, 2], s[2, 0]])


def _physical_gradients(coords, xi):
    """dN/dx and det J for element batch ``coords`` (m, 8, 3) at points ``xi`` (q, 3)."""
    dN = shape_gradients(xi)  # (q, 8, 3)
    J = np.einsum("mia,qib->mqab", coords, dN)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise DegenerateGeometryError("non-positive Jacobian determinant")
    Jinv = np.linalg.inv(J)
    dNdx = np.einsum("qia,mqab->mqib", dN, Jinv)
    return dNdx, det


def strain_displacement(dNdx):
    """B matrices (..., 6, 24) from physical gradients (..., 8, 3)."""
    shape = dNdx.shape[:-2]
    B = np.zeros(shape + (6, 8, 3))
    dx, dy, dz = dNdx[..., 0], dNdx[..., 1], dNdx[..., 2]
    B[..., 0, :, 0] = dx
    B[..., 1, :, 1] = dy
    B[..., 2, :, 2] = dz
    B[..., 3, :, 0] = dy
    B[..., 3, :, 1] = dx
    B[..., 4, :, 1] = dz
    B[..., 4, :, 2] = dy
    B[..., 5, :, 0] = dz
    B[..., 5, :, 2] = dx
    return B.reshape(shape + (6, 24))


def stiffness_batch(coords, material):
    """Element stiffness matrices (m, 24, 24) by 2x2x2 Gauss quadrature."""
    coords = np.asarray(coords, dtype=float)
    dNdx, det = _physical_gradients(coords, GAUSS_POINTS)
    B = strain_displacement(dNdx)
    D = material.elasticity_matrix()
    K = np.einsum("mq,mqai,ab,mqbj->mij", det * GAUSS_WEIGHTS, B, D, B, optimize=True)
    return 0.5 * (K + K.transpose(0, 2, 1))


def element_stiffness(mesh, elem, material):
    return stiffness_batch(mesh.element_coords([elem]), material)[0]


def lumped_mass_batch(coords, material):
    """Row-sum lumped nodal masses (m, 8)."""
    dN = shape_gradients(GAUSS_POINTS)
    J = np.einsum("mia,qib->mqab", coords, dN)
    det = np.linalg.det(J)
    N = shape_values(GAUSS_POINTS)  # (q, 8)
    return material.density * np.einsum("mq,qi->mi", det * GAUSS_WEIGHTS, N)


def lumped_mass(mesh, elem, material):
    """Lumped element mass as a 24-vector (same mass on each axis of a node)."""
    m = lumped_mass_batch(mesh.element_coords([elem]), material)[0]
    return np.repeat(m, 3)


def rotation_batch(rest, current):
    """Polar rotation of the center deformation gradient for each element.

    ``rest`` and ``current`` are (m, 8, 3) corner coordinates.
    """
    rest = np.asarray(rest, dtype=float)
    current = np.asarray(current, dtype=float)
    dNdX, _ = _physical_gradients(rest, np.zeros((1, 3)))
    F = np.einsum("mia,mib->mab", current, dNdX[:, 0])
    U, s, Vt = np.linalg.svd(F)
    if np.any(s[:, -1] <= 1e-12 * np.maximum(s[:, 0], 1e-300)) or np.any(np.linalg.det(F) <= 0):
        raise DegenerateGeometryError("collapsed or inverted element")
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, -1] *= -1
        R = U @ Vt
    return R


def element_rotation(rest_positions, current_positions):
    return rotation_batch(np.asarray(rest_positions)[None], np.asarray(current_positions)[None])[0]


def _block(R, n=8):
    return np.kron(np.eye(n), R)


def corotational_force(K_e, R_e, x_e, x0_e):
    """``R K (R^T x - x0)`` with ``R`` applied node by node."""
    Rb = _block(np.asarray(R_e))
    return Rb @ (K_e @ (Rb.T @ np.ravel(x_e) - np.ravel(x0_e)))


def damping_matrix(K, M, material):
    """Rayleigh damping ``alpha M + beta K``; ``M`` may be a diagonal vector."""
    if np.ndim(M) == 1:
        M = sp.diags(M)
    return (material.rayleigh_alpha * sp.csr_matrix(M) + material.rayleigh_beta * sp.csr_matrix(K)).tocsr()


class TissueAssembler:
    """Global matrices for a (possibly refined) tissue mesh.

    Rest-configuration element matrices are cached per element id (ids are
    never reused, so entries stay valid across refinement and coarsening) and
    shared between elements of identical shape up to translation.
    """

    chunk = 4096

    def __init__(self, material):
        self.material = material
        self._shape_of = {}
        self._shape_key = {}
        self._K = []
        self._m = []

    def _ensure(self, mesh, elems):
        missing = [e for e in elems if e not in self._shape_of]
        if not missing:
            return
        coords = mesh.element_coords(missing)
        rel = coords - coords[:, :1]
        keys = np.round(rel / mesh.quantum).astype(np.int64)
        todo = {}
        for e, key, c in zip(missing, keys, coords):
            kb = key.tobytes()
            sid = self._shape_key.get(kb)
            if sid is None:
                if kb not in todo:
                    todo[kb] = (len(self._K) + len(todo), c)
                sid = todo[kb][0]
            self._shape_of[e] = sid
        if todo:
            batch = np.array([c for _, c in todo.values()])
            self._K.extend(stiffness_batch(batch, self.material))
            self._m.extend(lumped_mass_batch(batch, self.material))
            for kb, (sid, _) in todo.items():
                self._shape_key[kb] = sid

    def shape_ids(self, mesh, elems):
        elems = [int(e) for e in elems]
        self._ensure(mesh, elems)
        return np.array([self._shape_of[e] for e in elems], dtype=np.int64)

    def element_matrices(self, mesh, elems):
        sid = self.shape_ids(mesh, elems)
        return np.asarray(self._K)[sid], np.asarray(self._m)[sid]

    def assemble(self, mesh, positions=None, rotations=True):
        """Assemble stiffness, lumped mass and internal force.

        Parameters
        ----------
        positions : ndarray, optional
            Current positions indexed by node id.  ``None`` means rest state.
        rotations : bool
            Use corotated element matrices (frames from ``positions``).

        Returns
        -------
        dict with ``K`` (csr, compact dofs), ``M`` (diagonal vector),
        ``f_int``, ``R`` (per-element rotations) and ``elements``.
        """
        elems = mesh.live_elements()
        idx = mesh.node_index()
        n = mesh.n_nodes * 3
        sid = self.shape_ids(mesh, elems)
        Ktab = np.asarray(self._K)
        mtab = np.asarray(self._m)
        rest = mesh.rest_positions
        parts = []
        f_int = np.zeros(n)
        M = np.zeros(n)
        Rs = []
        for a in range(0, len(elems), self.chunk):
            sl = slice(a, a + self.chunk)
            conn = mesh.connectivity(elems[sl])
            Ke = Ktab[sid[sl]]
            x0 = rest[conn]
            x = x0 if positions is None else positions[conn]
            dofs = (3 * idx[conn][:, :, None] + np.arange(3)).reshape(-1, 24)
            M += np.bincount(dofs.ravel(), weights=np.repeat(mtab[sid[sl]], 3, axis=1).ravel(), minlength=n)
            if rotations and positions is not None:
                R = rotation_batch(x0, x)
                K5 = Ke.reshape(-1, 8, 3, 8, 3)
                Kr = np.einsum("eab,eibjc,edc->eiajd", R, K5, R, optimize=True).reshape(-1, 24, 24)
                local = np.einsum("eba,eib->eia", R, x) - x0
                f_loc = np.einsum("eij,ej->ei", Ke, local.reshape(-1, 24)).reshape(-1, 8, 3)
                f_e = np.einsum("eab,eib->eia", R, f_loc)
            else:
                R = np.broadcast_to(np.eye(3), (len(conn), 3, 3))
                Kr = Ke
                f_e = np.einsum("eij,ej->ei", Ke, (x - x0).reshape(-1, 24))
            Rs.append(np.asarray(R))
            rows = np.broadcast_to(dofs[:, :, None], Kr.shape).ravel()
            cols = np.broadcast_to(dofs[:, None, :], Kr.shape).ravel()
            parts.append(sp.coo_matrix((Kr.ravel(), (rows, cols)), shape=(n, n)).tocsr())
            f_int += np.bincount(dofs.ravel(), weights=np.ravel(f_e), minlength=n)
        while len(parts) > 1:
            parts = [parts[i] + parts[i + 1] if i + 1 < len(parts) else parts[i] for i in range(0, len(parts), 2)]
        K = parts[0] if parts else sp.csr_matrix((n, n))
        R = np.concatenate(Rs) if Rs else np.zeros((0, 3, 3))
        return {"K": K, "M": M, "f_int": f_int, "R": R, "elements": elems}

    def forget(self, elems):
        for e in elems:
            self._shape_of.pop(int(e), None)


# corner indices of the six faces, ordered (-xi, +xi, -eta, +eta, -zeta, +zeta)
HEX_FACES = np.array(
    [[0, 3, 7, 4], [1, 2, 6, 5], [0, 1, 5, 4], [3, 2, 6, 7], [0, 1, 2, 3], [4, 5, 6, 7]]
)
_FACE_GAUSS = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) / np.sqrt(3.0)


def boundary_faces(mesh, on_face):
    """``(elem, face)`` pairs of live elements whose 4 face corners satisfy ``on_face``.

    ``on_face`` maps rest points (k, 3) to booleans.
    """
    elems = mesh.live_elements()
    conn = mesh.connectivity(elems)
    flags = np.asarray(on_face(mesh.rest_positions), dtype=bool)
    out = []
    for f, idx in enumerate(HEX_FACES):
        hit = flags[conn[:, idx]].all(axis=1)
        out.extend((int(e), f) for e in elems[hit])
    return sorted(out)


def surface_load(mesh, on_face, traction):
    """Consistent nodal forces (node_capacity, 3) of a constant traction on a face set."""
    traction = np.asarray(traction, dtype=float)
    f = np.zeros((mesh.node_capacity, 3))
    s, t = _FACE_GAUSS[:, 0], _FACE_GAUSS[:, 1]
    # bilinear face shape functions, corners in face order
    N = 0.25 * np.stack([(1 - s) * (1 - t), (1 + s) * (1 - t), (1 + s) * (1 + t), (1 - s) * (1 + t)], axis=1)
    dNs = 0.25 * np.stack([-(1 - t), (1 - t), (1 + t), -(1 + t)], axis=1)
    dNt = 0.25 * np.stack([-(1 - s), -(1 + s), (1 + s), (1 - s)], axis=1)
    for e, face in boundary_faces(mesh, on_face):
        nodes = mesh.element_nodes(e)[HEX_FACES[face]]
        X = mesh.rest_positions[nodes]
        da = np.linalg.norm(np.cross(dNs @ X, dNt @ X), axis=1)
        f[nodes] += np.outer(N.T @ da, traction)
    return f

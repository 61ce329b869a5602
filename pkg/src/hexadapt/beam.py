"""Serially linked corotational Timoshenko beams for the needle.

Each node carries 6 DOFs ``[ux, uy, uz, rx, ry, rz]``; rotational DOFs are
spins in the world frame.  Node orientations are kept as unit quaternions
(scipy ``Rotation``) measuring rotation away from the rest triad.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, InvalidArgumentError
from .fem import Material


def beam_stiffness(rest_length, radius, material, shear_correction=0.9):
    """Local 12x12 Timoshenko stiffness of a circular beam segment.

    Local axis 1 runs along the segment; DOF order per node is
    ``u, v, w, theta_x, theta_y, theta_z``.
    """
    L = float(rest_length)
    r = float(radius)
    if L <= 0 or r <= 0:
        raise InvalidArgumentError("beam length and radius must be positive")
    E = material.young_modulus
    G = material.shear_modulus
    A = np.pi * r**2
    I = np.pi * r**4 / 4
    J = 2 * I
    phi = 12 * E * I / (shear_correction * G * A * L**2)
    K = np.zeros((12, 12))
    # axial and torsion
    for a, k in ((0, E * A / L), (3, G * J / L)):
        K[a, a] = K[a + 6, a + 6] = k
        K[a, a + 6] = K[a + 6, a] = -k
    c = E * I / ((1 + phi) * L**3)
    bend = c * np.array(
        [
            [12, 6 * L, -12, 6 * L],
            [6 * L, (4 + phi) * L**2, -6 * L, (2 - phi) * L**2],
            [-12, -6 * L, 12, -6 * L],
            [6 * L, (2 - phi) * L**2, -6 * L, (4 + phi) * L**2],
        ]
    )
    # v / theta_z plane
    idx = [1, 5, 7, 11]
    K[np.ix_(idx, idx)] += bend
    # w / theta_y plane: rotation sign flips the coupling terms
    flip = np.diag([1.0, -1.0, 1.0, -1.0])
    idx = [2, 4, 8, 10]
    K[np.ix_(idx, idx)] += flip @ bend @ flip
    return K


def _perpendicular_frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    e2 = np.cross(axis, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(axis, e2)
    return np.column_stack([axis, e2, e3])


def _align(frame, direction):
    """Rotate ``frame`` minimally so its first column matches ``direction``."""
    a = frame[:, 0]
    b = direction
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-15:
        if c > 0:
            return frame
        raise DegenerateGeometryError("segment frame flipped by 180 degrees")
    rot = Rotation.from_rotvec(v / s * np.arctan2(s, c))
    return rot.as_matrix() @ frame


class NeedleModel:
    """Needle discretised by two-node beams.

    Parameters
    ----------
    rest_positions : (n, 3) array
        Rest node positions along the needle, base first, tip last.
    radius : float
    material : Material
    """

    def __init__(self, rest_positions, radius, material, shear_correction=0.9):
        rest = np.asarray(rest_positions, dtype=float)
        if rest.ndim != 2 or rest.shape[0] < 2:
            raise InvalidArgumentError("needle needs at least two nodes")
        seg = np.diff(rest, axis=0)
        self.rest_lengths = np.linalg.norm(seg, axis=1)
        if np.any(self.rest_lengths <= 0):
            raise InvalidArgumentError("consecutive needle nodes must be distinct")
        self.rest = rest
        self.radius = float(radius)
        self.material = material
        self.shear_correction = shear_correction
        self.rest_frames = [_perpendicular_frame(d) for d in seg]
        self.local_stiffness = [
            beam_stiffness(L, radius, material, shear_correction) for L in self.rest_lengths
        ]
        n = len(rest)
        self.x = rest.copy()
        self.q = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
        self.v = np.zeros((n, 3))
        self.w = np.zeros((n, 3))

    @classmethod
    def straight(cls, base, direction, length, n_segments, radius, material, **kw):
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = np.linspace(0.0, length, n_segments + 1)
        return cls(np.asarray(base, dtype=float) + s[:, None] * d, radius, material, **kw)

    @property
    def n_nodes(self):
        return len(self.rest)

    @property
    def n_segments(self):
        return len(self.rest) - 1

    @property
    def length(self):
        return float(self.rest_lengths.sum())

    @property
    def rotations(self):
        return Rotation.from_quat(self.q).as_matrix()

    def lumped_mass(self):
        """Diagonal mass for the 6n DOFs (translational mass, isotropic rotary inertia)."""
        rho = self.material.density
        A = np.pi * self.radius**2
        Jp = np.pi * self.radius**4 / 2
        m = np.zeros(self.n_nodes)
        jr = np.zeros(self.n_nodes)
        for i, L in enumerate(self.rest_lengths):
            m[i : i + 2] += rho * A * L / 2
            jr[i : i + 2] += rho * Jp * L / 2
        return np.column_stack([m, m, m, jr, jr, jr]).ravel()

    def segment_frames(self, x=None, q=None):
        """Current corotated frames of all segments."""
        x = self.x if x is None else x
        q = self.q if q is None else q
        R = Rotation.from_quat(q)
        frames = []
        for s in range(self.n_segments):
            chord = x[s + 1] - x[s]
            L = np.linalg.norm(chord)
            if L <= 1e-12 * self.rest_lengths[s]:
                raise DegenerateGeometryError(f"needle segment {s} collapsed")
            rel = R[s].inv() * R[s + 1]
            mean = R[s] * Rotation.from_rotvec(0.5 * rel.as_rotvec())
            frames.append(_align(mean.as_matrix() @ self.rest_frames[s], chord / L))
        return frames

    def internal_force(self, x=None, q=None):
        """Corotational elastic forces and moments, shape (n, 6)."""
        x = self.x if x is None else x
        q = self.q if q is None else q
        R = Rotation.from_quat(q)
        frames = self.segment_frames(x, q)
        f = np.zeros((self.n_nodes, 6))
        for s, E in enumerate(frames):
            E0 = self.rest_frames[s]
            L0 = self.rest_lengths[s]
            L = np.linalg.norm(x[s + 1] - x[s])
            th1 = Rotation.from_matrix(E.T @ R[s].as_matrix() @ E0).as_rotvec()
            th2 = Rotation.from_matrix(E.T @ R[s + 1].as_matrix() @ E0).as_rotvec()
            d = np.concatenate([[0.0, 0.0, 0.0], th1, [L - L0, 0.0, 0.0], th2])
            fl = self.local_stiffness[s] @ d
            # shear from end moments must use the current lever arm
            fl[[1, 2, 7, 8]] *= L0 / L
            f[s, :3] += E @ fl[0:3]
            f[s, 3:] += E @ fl[3:6]
            f[s + 1, :3] += E @ fl[6:9]
            f[s + 1, 3:] += E @ fl[9:12]
        return f

    def tangent_stiffness(self, x=None, q=None):
        """Global 6n x 6n stiffness with every segment matrix rotated to its frame."""
        frames = self.segment_frames(x, q)
        n = 6 * self.n_nodes
        rows, cols, vals = [], [], []
        for s, E in enumerate(frames):
            T = np.kron(np.eye(4), E)
            Kg = T @ self.local_stiffness[s] @ T.T
            dofs = np.arange(6 * s, 6 * s + 12)
            rows.append(np.repeat(dofs, 12))
            cols.append(np.tile(dofs, 12))
            vals.append(Kg.ravel())
        K = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        return K.tocsr()

    def advance(self, dv, tau):
        """Backward-Euler update from the velocity increment ``dv`` (6n)."""
        dv = np.asarray(dv).reshape(-1, 6)
        self.v = self.v + dv[:, :3]
        self.w = self.w + dv[:, 3:]
        self.x = self.x + tau * self.v
        R = Rotation.from_rotvec(tau * self.w) * Rotation.from_quat(self.q)
        self.q = R.as_quat()

    def arc_position(self, s, x=None):
        """Point at arc length ``s`` (rest parametrisation) and its node weights.

        Returns ``(point, (i, j), (wi, wj))`` with linear interpolation between
        the bracketing nodes.
        """
        x = self.x if x is None else x
        cum = np.concatenate([[0.0], np.cumsum(self.rest_lengths)])
        s = float(np.clip(s, 0.0, cum[-1]))
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, self.n_segments - 1))
        t = (s - cum[i]) / self.rest_lengths[i]
        return (1 - t) * x[i] + t * x[i + 1], (i, i + 1), (1 - t, t)

    def project(self, point, x=None):
        """Closest point on the current centreline; returns ``(s, point, tangent)``.

        ``s`` is reported in rest arc length and may exceed the needle ends
        (extrapolated along the end segments) so callers can tell when a
        point is no longer covered by the needle.
        """
        x = self.x if x is None else x
        point = np.asarray(point, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.rest_lengths)])
        best = None
        for i in range(self.n_segments):
            a, b = x[i], x[i + 1]
            d = b - a
            t = float(np.dot(point - a, d) / np.dot(d, d))
            lo = -np.inf if i == 0 else 0.0
            hi = np.inf if i == self.n_segments - 1 else 1.0
            tc = min(max(t, lo), hi)
            p = a + tc * d
            dist = np.linalg.norm(point - p)
            if best is None or dist < best[0] - 1e-15:
                best = (dist, cum[i] + tc * self.rest_lengths[i], p, d / np.linalg.norm(d))
        return best[1], best[2], best[3]

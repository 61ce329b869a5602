"""Hexahedral mesh with trilinear geometry and refinement-safe bookkeeping.

Corner ordering follows the VTK hexahedron convention: corners 0-3 walk the
``zeta = -1`` face counter-clockwise seen from ``+zeta``, corners 4-7 repeat
the walk on ``zeta = +1``.  Node and element ids are plain integers that are
never reused; removing an entity tombstones its id.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError, StaleReferenceError

CORNERS = np.array(
    [
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
    ]
)

_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = CORNERS * _G
GAUSS_WEIGHTS = np.ones(8)


def shape_values(c):
    """Trilinear shape functions.

    Parameters
    ----------
    c : array_like, shape (..., 3)
        Natural coordinates in the reference cube.

    Returns
    -------
    ndarray, shape (..., 8)
    """
    c = np.asarray(c, dtype=float)
    terms = 1.0 + c[..., None, :] * CORNERS
    return 0.125 * terms[..., 0] * terms[..., 1] * terms[..., 2]


def shape_gradients(c):
    """Derivatives of the shape functions w.r.t. natural coordinates, shape (..., 8, 3)."""
    c = np.asarray(c, dtype=float)
    t = 1.0 + c[..., None, :] * CORNERS
    d = np.empty(t.shape)
    d[..., 0] = CORNERS[:, 0] * t[..., 1] * t[..., 2]
    d[..., 1] = CORNERS[:, 1] * t[..., 0] * t[..., 2]
    d[..., 2] = CORNERS[:, 2] * t[..., 0] * t[..., 1]
    return 0.125 * d


def jacobian(coords, c):
    """Jacobian dx/dxi of the trilinear map(s); ``coords`` is (..., 8, 3)."""
    return np.einsum("...ia,...ib->...ab", coords, shape_gradients(c))


def inverse_map(coords, point, tol=1e-13, maxiter=30):
    """Natural coordinates of ``point`` in the element with corner ``coords``.

    Newton iteration on the trilinear map; the result may lie outside the
    reference cube if the point is outside the element.
    """
    coords = np.asarray(coords, dtype=float)
    point = np.asarray(point, dtype=float)
    xi = np.zeros(3)
    for _ in range(maxiter):
        r = shape_values(xi) @ coords - point
        J = jacobian(coords, xi)
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError("singular element map") from exc
        xi = xi - step
        if np.max(np.abs(step)) < tol:
            break
    return xi


class _Buffer:
    """Append-only array with amortized O(1) growth along axis 0."""

    def __init__(self, data):
        data = np.asarray(data)
        self._data = data.copy()
        self.size = len(data)

    @property
    def view(self):
        return self._data[: self.size]

    def append(self, row):
        if self.size == len(self._data):
            cap = max(16, 2 * len(self._data))
            grown = np.zeros((cap,) + self._data.shape[1:], dtype=self._data.dtype)
            grown[: self.size] = self._data[: self.size]
            self._data = grown
        self._data[self.size] = row
        self.size += 1
        return self.size - 1


class HexMesh:
    """Mutable hexahedral mesh.

    Parameters
    ----------
    rest_positions : array_like, shape (n, 3)
    elements : array_like of int, shape (m, 8)

    Notes
    -----
    Per-node arrays registered with :meth:`add_field` (current positions,
    velocities, ...) are indexed by node id and interpolated by the shape
    functions whenever refinement creates a node.
    """

    def __init__(self, rest_positions, elements):
        rest = np.asarray(rest_positions, dtype=float).reshape(-1, 3)
        conn = np.asarray(elements, dtype=np.int64).reshape(-1, 8)
        self._rest_buf = _Buffer(rest)
        self._node_alive_buf = _Buffer(np.ones(len(rest), dtype=bool))
        self._conn_buf = _Buffer(conn)
        self._level_buf = _Buffer(np.zeros(len(conn), dtype=np.int64))
        self._parent_buf = _Buffer(np.full(len(conn), -1, dtype=np.int64))
        self._elem_alive_buf = _Buffer(np.ones(len(conn), dtype=bool))
        self.template = [None] * len(conn)
        self._fields = {}
        span = np.ptp(rest, axis=0).max() if len(rest) else 1.0
        self._quantum = 1e-9 * max(span, 1e-300)
        self._lookup = {}
        for i, p in enumerate(rest):
            self._lookup[self._key(p)] = i
        self.node_to_elements = [set() for _ in range(len(rest))]
        for e, nodes in enumerate(conn):
            if len(set(nodes.tolist())) != 8:
                raise InvalidArgumentError(f"element {e} has repeated nodes")
            for n in nodes:
                self.node_to_elements[n].add(e)

    # buffers are exposed as views sized to the current id range
    @property
    def _rest(self):
        return self._rest_buf.view

    @property
    def _node_alive(self):
        return self._node_alive_buf.view

    @property
    def _conn(self):
        return self._conn_buf.view

    @property
    def _level(self):
        return self._level_buf.view

    @property
    def _parent(self):
        return self._parent_buf.view

    @property
    def _elem_alive(self):
        return self._elem_alive_buf.view

    @property
    def fields(self):
        """Registered per-node fields, each indexed by node id."""
        return {name: buf.view for name, buf in self._fields.items()}

    def field(self, name):
        return self._fields[name].view

    # ------------------------------------------------------------------ queries
    @property
    def rest_positions(self):
        """Rest coordinates indexed by node id (dead rows are stale)."""
        return self._rest

    @property
    def node_capacity(self):
        return len(self._rest)

    @property
    def element_capacity(self):
        return len(self._conn)

    @property
    def n_nodes(self):
        return int(self._node_alive.sum())

    @property
    def n_elements(self):
        return int(self._elem_alive.sum())

    def live_nodes(self):
        return np.flatnonzero(self._node_alive)

    def live_elements(self):
        return np.flatnonzero(self._elem_alive)

    def is_live_node(self, n):
        return 0 <= n < len(self._node_alive) and bool(self._node_alive[n])

    def is_live_element(self, e):
        return 0 <= e < len(self._elem_alive) and bool(self._elem_alive[e])

    def _check_element(self, e):
        if not self.is_live_element(e):
            raise StaleReferenceError(f"element {e} is not live")

    def element_nodes(self, e):
        self._check_element(e)
        return self._conn[e].copy()

    def connectivity(self, elems=None):
        if elems is None:
            elems = self.live_elements()
        return self._conn[np.asarray(elems, dtype=np.int64)]

    def level(self, e):
        return int(self._level[e])

    def levels(self, elems=None):
        if elems is None:
            elems = self.live_elements()
        return self._level[np.asarray(elems, dtype=np.int64)]

    def parent(self, e):
        p = int(self._parent[e])
        return None if p < 0 else p

    def element_coords(self, elems=None, positions=None):
        """Corner coordinates, shape (m, 8, 3), from ``positions`` (default rest)."""
        pos = self._rest if positions is None else positions
        return pos[self.connectivity(elems)]

    def node_index(self):
        """Map node id -> compact index over live nodes (``-1`` for dead ids)."""
        idx = np.full(len(self._rest), -1, dtype=np.int64)
        live = self.live_nodes()
        idx[live] = np.arange(len(live))
        return idx

    def node_patch(self, n):
        """Live elements incident to node ``n``, sorted by id."""
        if not self.is_live_node(n):
            raise StaleReferenceError(f"node {n} is not live")
        return sorted(self.node_to_elements[n])

    def natural_to_cartesian(self, elem, c, positions=None):
        self._check_element(elem)
        pos = self._rest if positions is None else positions
        return shape_values(c) @ pos[self._conn[elem]]

    def find_node(self, point):
        """Id of a live node at ``point`` (within round-off), else ``None``."""
        base = np.round(np.asarray(point, dtype=float) / self._quantum).astype(np.int64)
        for dx in (0, -1, 1):
            for dy in (0, -1, 1):
                for dz in (0, -1, 1):
                    n = self._lookup.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if n is not None and self._node_alive[n]:
                        return n
        return None

    def locate(self, point, positions=None, candidates=None, tol=1e-9):
        """Find ``(elem, xi)`` with ``point`` inside ``elem``; ``None`` if outside.

        Among several containing elements (shared faces) the lowest id wins so
        the answer is deterministic.
        """
        point = np.asarray(point, dtype=float)
        pos = self._rest if positions is None else positions
        elems = self.live_elements() if candidates is None else np.asarray(sorted(candidates))
        if len(elems) == 0:
            return None
        xyz = pos[self._conn[elems]]
        lo = xyz.min(axis=1)
        hi = xyz.max(axis=1)
        pad = tol * np.maximum(np.ptp(xyz, axis=1).max(axis=1), 1e-300)[:, None]
        inside = np.all((point >= lo - pad) & (point <= hi + pad), axis=1)
        for k in np.flatnonzero(inside):
            try:
                xi = inverse_map(xyz[k], point)
            except DegenerateGeometryError:
                continue
            if np.all(np.abs(xi) <= 1.0 + 1e-7):
                return int(elems[k]), np.clip(xi, -1.0, 1.0)
        return None

    def element_volumes(self, elems=None):
        xyz = self.element_coords(elems)
        J = jacobian(xyz[:, None, :, :], GAUSS_POINTS[None])
        return np.linalg.det(J).sum(axis=1)

    def check_orientation(self, elems=None):
        """Raise if any element has a non-positive Jacobian at its center."""
        xyz = self.element_coords(elems)
        det = np.linalg.det(jacobian(xyz, np.zeros(3)))
        bad = np.flatnonzero(det <= 0)
        if len(bad):
            raise DegenerateGeometryError(f"{len(bad)} inverted element(s)")

    # ---------------------------------------------------------------- mutation
    @property
    def quantum(self):
        """Length below which two rest points are considered identical."""
        return self._quantum

    def _key(self, p):
        q = np.round(np.asarray(p) / self._quantum).astype(np.int64)
        return (int(q[0]), int(q[1]), int(q[2]))

    def add_field(self, name, values):
        """Register a per-node array that is interpolated on refinement."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != len(self._rest):
            raise InvalidArgumentError("field length must equal node capacity")
        self._fields[name] = _Buffer(values)

    def set_field(self, name, values):
        self._fields[name].view[...] = values

    def add_node(self, rest, field_values=None):
        nid = self._rest_buf.append(np.asarray(rest, dtype=float))
        self._node_alive_buf.append(True)
        self.node_to_elements.append(set())
        field_values = field_values or {}
        for name, buf in self._fields.items():
            val = field_values.get(name)
            buf.append(0.0 if val is None else val)
        self._lookup[self._key(rest)] = nid
        return nid

    def add_element(self, nodes, level=0, parent=None, template=None):
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(set(nodes.tolist())) != 8:
            raise InvalidArgumentError("hexahedron needs 8 distinct nodes")
        for n in nodes:
            if not self.is_live_node(n):
                raise StaleReferenceError(f"node {n} is not live")
        eid = self._conn_buf.append(nodes)
        self._level_buf.append(level)
        self._parent_buf.append(-1 if parent is None else parent)
        self._elem_alive_buf.append(True)
        self.template.append(template)
        for n in nodes:
            self.node_to_elements[n].add(eid)
        return eid

    def kill_element(self, e):
        self._check_element(e)
        self._elem_alive[e] = False
        for n in self._conn[e]:
            self.node_to_elements[n].discard(e)

    def revive_element(self, e):
        if self._elem_alive[e]:
            return
        for n in self._conn[e]:
            if not self._node_alive[n]:
                raise StaleReferenceError(f"node {n} of element {e} is dead")
        self._elem_alive[e] = True
        for n in self._conn[e]:
            self.node_to_elements[n].add(e)

    def kill_node(self, n):
        if self.node_to_elements[n]:
            raise InvalidArgumentError(f"node {n} still has incident elements")
        self._node_alive[n] = False
        key = self._key(self._rest[n])
        if self._lookup.get(key) == n:
            del self._lookup[key]

    def prune_orphans(self, candidates=None):
        """Tombstone live nodes without incident elements; returns their ids."""
        cand = self.live_nodes() if candidates is None else candidates
        dead = [int(n) for n in cand if self._node_alive[n] and not self.node_to_elements[n]]
        for n in dead:
            self.kill_node(n)
        return dead

    def rebuild_adjacency(self):
        """Adjacency recomputed from scratch (for consistency checks)."""
        adj = [set() for _ in range(len(self._rest))]
        for e in self.live_elements():
            for n in self._conn[e]:
                adj[n].add(int(e))
        return adj

    def copy(self):
        import copy

        return copy.deepcopy(self)

    def snapshot(self):
        """Hashable description of the live topology."""
        elems = self.live_elements()
        return (
            tuple(self.live_nodes().tolist()),
            tuple(elems.tolist()),
            tuple(map(tuple, self._conn[elems].tolist())),
        )


def build_grid(origin, extents, resolution, inside=None):
    """Regular box grid of hexahedra.

    Parameters
    ----------
    origin, extents : 3-vectors
    resolution : 3 ints
        Number of elements per axis.
    inside : callable, optional
        Predicate on points, shape (k, 3) -> bool (k,).  Elements whose eight
        corners all fail it are dropped (immersed-boundary style box mesh), so
        pass a strict-interior test to also drop elements that only touch the
        domain boundary.
    """
    origin = np.asarray(origin, dtype=float)
    extents = np.asarray(extents, dtype=float)
    res = np.asarray(resolution)
    if res.shape != (3,) or np.any(res < 1) or np.any(res != np.round(res)):
        raise InvalidArgumentError(f"resolution must be 3 positive integers, got {resolution}")
    if extents.shape != (3,) or np.any(extents <= 0):
        raise InvalidArgumentError(f"extents must be positive, got {extents}")
    nx, ny, nz = (int(r) for r in res)
    xs = origin[0] + extents[0] * np.arange(nx + 1) / nx
    ys = origin[1] + extents[1] * np.arange(ny + 1) / ny
    zs = origin[2] + extents[2] * np.arange(nz + 1) / nz
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (k * (ny + 1) + j) * (nx + 1) + i

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    conn = np.column_stack(
        [
            nid(i, j, k),
            nid(i + 1, j, k),
            nid(i + 1, j + 1, k),
            nid(i, j + 1, k),
            nid(i, j, k + 1),
            nid(i + 1, j, k + 1),
            nid(i + 1, j + 1, k + 1),
            nid(i, j + 1, k + 1),
        ]
    )
    if inside is not None:
        flags = np.asarray(inside(nodes), dtype=bool)
        conn = conn[flags[conn].any(axis=1)]
        used = np.unique(conn)
        remap = np.full(len(nodes), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        nodes = nodes[used]
        conn = remap[conn]
    return HexMesh(nodes, conn)

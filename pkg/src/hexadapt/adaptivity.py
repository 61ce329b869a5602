"""Template-based reversible h-refinement and hanging-node condensation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import CoarsenError, InvalidArgumentError, StaleReferenceError, TopologyError
from .mesh import CORNERS, inverse_map, shape_values


@dataclass(frozen=True)
class RefinementTemplate:
    """Subdivision pattern of the reference cube.

    ``child_elements`` index into ``parent corners (0..7) + child_nodes``.
    """

    name: str
    child_nodes: np.ndarray
    child_elements: np.ndarray

    def child_volumes(self):
        pts = np.vstack([CORNERS, self.child_nodes])
        from .mesh import GAUSS_POINTS, jacobian

        xyz = pts[self.child_elements]
        return np.linalg.det(jacobian(xyz[:, None], GAUSS_POINTS[None])).sum(axis=1)


def regular_template(nx, ny, nz):
    """Tensor-product subdivision into ``nx * ny * nz`` children."""
    if min(nx, ny, nz) < 1:
        raise InvalidArgumentError("subdivision counts must be >= 1")
    grid = {}
    corner_of = {tuple(c): i for i, c in enumerate(CORNERS.astype(int))}
    nodes = []
    for k in range(nz + 1):
        for j in range(ny + 1):
            for i in range(nx + 1):
                xi = (-1 + 2 * i / nx, -1 + 2 * j / ny, -1 + 2 * k / nz)
                on_corner = (i in (0, nx)) and (j in (0, ny)) and (k in (0, nz))
                if on_corner:
                    key = (1 if i else -1, 1 if j else -1, 1 if k else -1)
                    grid[i, j, k] = corner_of[key]
                else:
                    grid[i, j, k] = 8 + len(nodes)
                    nodes.append(xi)
    elems = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elems.append(
                    [
                        grid[i, j, k],
                        grid[i + 1, j, k],
                        grid[i + 1, j + 1, k],
                        grid[i, j + 1, k],
                        grid[i, j, k + 1],
                        grid[i + 1, j, k + 1],
                        grid[i + 1, j + 1, k + 1],
                        grid[i, j + 1, k + 1],
                    ]
                )
    return RefinementTemplate(
        f"{nx}x{ny}x{nz}", np.array(nodes, dtype=float).reshape(-1, 3), np.array(elems)
    )


def builtin_templates():
    """Named templates: isotropic 2x2x2 / 3x3x3 and the anisotropic 2x3x3 family."""
    out = {}
    for dims in [(2, 2, 2), (3, 3, 3), (2, 3, 3), (3, 2, 3), (3, 3, 2)]:
        t = regular_template(*dims)
        out[t.name] = t
    return out


def get_template(name):
    try:
        return builtin_templates()[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown template {name!r}") from None


@dataclass
class RefinementRecord:
    parent: int
    template: str
    nodes: list  # mesh ids of all template child nodes (created or reused)
    created_nodes: list
    children: list


def refine(mesh, elem, template):
    """Replace ``elem`` by the children of ``template``.

    Child node positions (rest and every registered node field) come from the
    parent's trilinear map; nodes already present at the same rest location
    (created by a refined neighbour) are reused.
    """
    if isinstance(template, str):
        template = get_template(template)
    if not mesh.is_live_element(elem):
        raise StaleReferenceError(f"element {elem} is not live")
    corners = mesh.element_nodes(elem)
    N = shape_values(template.child_nodes)
    rest_new = N @ mesh.rest_positions[corners]
    fields = mesh.fields
    ids, created = [], []
    for k, X in enumerate(rest_new):
        nid = mesh.find_node(X)
        if nid is None:
            vals = {name: N[k] @ arr[corners] for name, arr in fields.items()}
            nid = mesh.add_node(X, vals)
            created.append(nid)
        ids.append(nid)
    lookup = np.concatenate([corners, np.asarray(ids, dtype=np.int64)])
    level = mesh.level(elem) + 1
    mesh.kill_element(elem)
    children = [
        mesh.add_element(lookup[c], level=level, parent=elem, template=template.name)
        for c in template.child_elements
    ]
    return RefinementRecord(elem, template.name, ids, created, children)


def coarsen(mesh, record):
    """Undo ``record``: drop its children, restore the parent, prune orphans."""
    for c in record.children:
        if not mesh.is_live_element(c):
            raise CoarsenError(
                f"child {c} of element {record.parent} is refined; coarsen its children first"
            )
    for c in record.children:
        mesh.kill_element(c)
    mesh.revive_element(record.parent)
    return mesh.prune_orphans(record.nodes)


class RefinementHistory:
    """Live refinement records keyed by parent element id."""

    def __init__(self):
        self.records = {}
        self._owner = {}

    def refine(self, mesh, elem, template):
        rec = refine(mesh, elem, template)
        self.records[elem] = rec
        for c in rec.children:
            self._owner[c] = elem
        return rec

    def coarsen(self, mesh, parent):
        rec = self.records[parent]
        removed = coarsen(mesh, rec)
        del self.records[parent]
        for c in rec.children:
            self._owner.pop(c, None)
        return removed

    def parent_of(self, elem):
        return self._owner.get(elem)

    def coarsenable(self, mesh):
        """Parents whose children are all live leaves."""
        return [p for p, r in sorted(self.records.items()) if all(mesh.is_live_element(c) for c in r.children)]

    def leaf_descendants(self, mesh, elem):
        """Live elements descended from (or equal to) ``elem``."""
        if mesh.is_live_element(elem):
            return [elem]
        rec = self.records.get(elem)
        if rec is None:
            return []
        out = []
        for c in rec.children:
            out.extend(self.leaf_descendants(mesh, c))
        return out


# ---------------------------------------------------------------- hanging nodes


def _candidate_pairs(mesh, elems, nodes):
    """(element, node) pairs whose rest bounding boxes intersect, bucketed by size class."""
    rest = mesh.rest_positions
    xyz = rest[mesh.connectivity(elems)]
    lo = xyz.min(axis=1)
    hi = xyz.max(axis=1)
    ext = (hi - lo).max(axis=1)
    P = rest[nodes]
    origin = P.min(axis=0) - 1.0
    cls = np.round(np.log2(ext / ext.min()) * 4).astype(int)
    pe, pn = [], []
    for c in np.unique(cls):
        sel = np.flatnonzero(cls == c)
        cell = ext[sel].max() * 1.0001
        pk = np.floor((P - origin) / cell).astype(np.int64)
        span = pk.max(axis=0) + 3
        pkey = (pk[:, 0] * span[1] + pk[:, 1]) * span[2] + pk[:, 2]
        order = np.argsort(pkey, kind="stable")
        skey = pkey[order]
        tol = 1e-9 * cell
        elo = np.floor((lo[sel] - tol - origin) / cell).astype(np.int64)
        ehi = np.floor((hi[sel] + tol - origin) / cell).astype(np.int64)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    cx = elo[:, 0] + dx
                    cy = elo[:, 1] + dy
                    cz = elo[:, 2] + dz
                    ok = (cx <= ehi[:, 0]) & (cy <= ehi[:, 1]) & (cz <= ehi[:, 2])
                    key = (cx * span[1] + cy) * span[2] + cz
                    a = np.searchsorted(skey, key[ok], side="left")
                    b = np.searchsorted(skey, key[ok], side="right")
                    cnt = b - a
                    if cnt.sum() == 0:
                        continue
                    e_rep = np.repeat(sel[ok], cnt)
                    start = np.repeat(a - np.cumsum(cnt) + cnt, cnt)
                    pos = np.arange(cnt.sum()) + start
                    pe.append(e_rep)
                    pn.append(order[pos])
    if not pe:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pe = np.concatenate(pe)
    pn = np.concatenate(pn)
    # bounding-box filter
    tol = 1e-9 * ext[pe]
    inside = np.all((P[pn] >= lo[pe] - tol[:, None]) & (P[pn] <= hi[pe] + tol[:, None]), axis=1)
    return pe[inside], pn[inside]


def detect_t_junctions(mesh):
    """Hanging nodes and their direct master weights.

    Returns
    -------
    dict
        ``slave node id -> list of (master node id, weight)``, sorted by id.
        The master element is the coarsest live element (lowest level, then
        lowest id) whose closure holds the node without having it as a corner.
    """
    elems = mesh.live_elements()
    nodes = mesh.live_nodes()
    if len(elems) == 0:
        return {}
    pe, pn = _candidate_pairs(mesh, elems, nodes)
    conn = mesh.connectivity(elems)
    node_ids = nodes[pn]
    is_corner = np.any(conn[pe] == node_ids[:, None], axis=1)
    pe, node_ids = pe[~is_corner], node_ids[~is_corner]
    rest = mesh.rest_positions
    levels = mesh.levels(elems)
    best = {}
    for k in np.lexsort((elems[pe], levels[pe])):
        n = int(node_ids[k])
        if n in best:
            continue
        e = pe[k]
        xyz = rest[conn[e]]
        xi = inverse_map(xyz, rest[n])
        if np.any(np.abs(xi) > 1 + 1e-8):
            continue
        w = shape_values(np.clip(xi, -1, 1))
        keep = w > 1e-10
        w = w[keep] / w[keep].sum()
        best[n] = [(int(m), float(wt)) for m, wt in zip(conn[e][keep], w)]
    return dict(sorted(best.items()))


def resolve_chains(slaves):
    """Compose slave->master weights until every master is a free node."""
    resolved = {}
    state = {}

    def visit(n):
        if n in resolved:
            return resolved[n]
        if state.get(n) == "active":
            raise TopologyError(f"cyclic master dependency through node {n}")
        state[n] = "active"
        acc = {}
        for m, w in slaves[n]:
            if m in slaves:
                for mm, ww in visit(m):
                    acc[mm] = acc.get(mm, 0.0) + w * ww
            else:
                acc[m] = acc.get(m, 0.0) + w
        state[n] = "done"
        resolved[n] = sorted(acc.items())
        return resolved[n]

    for n in sorted(slaves):
        visit(n)
    return resolved


@dataclass
class TransformationMatrix:
    """Full <- reduced DOF map ``u_f = T u_r`` (3 DOFs per node).

    Attributes
    ----------
    T : csr_matrix, shape (3 n_full, 3 n_reduced)
    slaves : dict
        Resolved slave weights (masters are all free nodes).
    full_index, reduced_index : ndarray
        Node id -> row block / column block (``-1`` if absent).
    """

    T: sp.csr_matrix
    slaves: dict
    full_index: np.ndarray
    reduced_index: np.ndarray
    free_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_full(self):
        return self.T.shape[0]

    @property
    def n_reduced(self):
        return self.T.shape[1]


def build_T(mesh, slaves, dofs_per_node=3):
    """Assemble the transformation matrix for ``slaves`` (direct or resolved)."""
    resolved = resolve_chains(slaves)
    live = mesh.live_nodes()
    full_index = mesh.node_index()
    is_slave = np.zeros(mesh.node_capacity, dtype=bool)
    if resolved:
        is_slave[list(resolved)] = True
    free = live[~is_slave[live]]
    reduced_index = np.full(mesh.node_capacity, -1, dtype=np.int64)
    reduced_index[free] = np.arange(len(free))
    rows, cols, vals = [], [], []
    d = dofs_per_node
    fr = full_index[free]
    for a in range(d):
        rows.append(d * fr + a)
        cols.append(d * np.arange(len(free)) + a)
        vals.append(np.ones(len(free)))
    for s, masters in resolved.items():
        for m, w in masters:
            if reduced_index[m] < 0:
                raise TopologyError(f"master {m} of slave {s} is not a free live node")
            for a in range(d):
                rows.append([d * full_index[s] + a])
                cols.append([d * reduced_index[m] + a])
                vals.append([w])
    T = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(d * len(live), d * len(free)),
    ).tocsr()
    return TransformationMatrix(T, resolved, full_index, reduced_index, free)


def reduce_system(A_f, f_f, T):
    """``(T^T A_f T, T^T f_f)``."""
    Tm = T.T if isinstance(T, TransformationMatrix) else T
    Tm = sp.csr_matrix(Tm)
    A_r = Tm.T @ A_f @ Tm
    if sp.issparse(A_r):
        A_r = A_r.tocsr()
    return A_r, Tm.T @ f_f


def expand(T, dv_r):
    Tm = T.T if isinstance(T, TransformationMatrix) else T
    return Tm @ dv_r


def reduce_and_expand(A_f, f_f, T, solve=None):
    """Reduce, solve with ``solve(A_r, f_r)`` (sparse direct by default), expand."""
    import scipy.sparse.linalg as sla

    A_r, f_r = reduce_system(A_f, f_f, T)
    if solve is None:
        dv_r = sla.spsolve(sp.csc_matrix(A_r), f_r) if sp.issparse(A_r) else np.linalg.solve(A_r, f_r)
    else:
        dv_r = solve(A_r, f_r)
    return A_r, f_r, expand(T, dv_r)

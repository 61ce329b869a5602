"""Implicit backward-Euler stepping in velocity-increment form.

With ``K`` and ``C`` the assembled (positive) stiffness and damping the step
solves ``(M + tau C + tau^2 K) dv = tau (f_ext - f_int - C v) - tau^2 K v``
and then updates ``v += dv``, ``x += tau v``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import InvalidArgumentError, SolverError


@dataclass
class SystemState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0
    tau: float = 0.01

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.x.shape != self.v.shape:
            raise InvalidArgumentError("x and v must have the same shape")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be > 0")


@dataclass
class SteppingSystem:
    A: sp.csr_matrix
    b: np.ndarray
    reduction: object = None


def _as_sparse(M, n):
    if M is None:
        return sp.csr_matrix((n, n))
    if np.ndim(M) == 1:
        return sp.diags(np.asarray(M, dtype=float)).tocsr()
    return sp.csr_matrix(M)


def assemble_step(M, C, K, f_net, v, tau):
    """Backward-Euler matrix and right-hand side.

    Parameters
    ----------
    M : diagonal vector or matrix
    C, K : sparse matrices or ``None`` (zero)
    f_net : ndarray
        ``f_ext - f_int - C v`` evaluated at the start of the step.
    """
    if not tau > 0:
        raise InvalidArgumentError("tau must be > 0")
    v = np.asarray(v, dtype=float)
    n = v.size
    Ms, Cs, Ks = _as_sparse(M, n), _as_sparse(C, n), _as_sparse(K, n)
    A = (Ms + tau * Cs + tau * tau * Ks).tocsr()
    b = tau * np.asarray(f_net, dtype=float) - tau * tau * (Ks @ v)
    return SteppingSystem(A, b)


def apply_dirichlet(A, b, dofs, values=None):
    """Eliminate ``dofs`` (rows and columns, unit diagonal) keeping symmetry.

    ``values`` prescribes the solution on those dofs (default 0).
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    dofs = np.unique(np.asarray(dofs, dtype=np.int64))
    vals = np.zeros(len(dofs)) if values is None else np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    fixed = np.zeros(n)
    fixed[dofs] = vals
    b = np.asarray(b, dtype=float) - A @ fixed
    keep = np.ones(n)
    keep[dofs] = 0.0
    D = sp.diags(keep)
    A = (D @ A @ D + sp.diags(1.0 - keep)).tocsr()
    b = b * keep + fixed
    return A, b


def solve_reduced(system, tol=1e-8, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    ``system`` is a ``SteppingSystem`` or an ``(A, b)`` pair.  Raises
    ``SolverError`` (with the final relative residual) if the tolerance is
    not met within ``maxiter`` (default ``10 n``) iterations.
    """
    A, b = (system.A, system.b) if isinstance(system, SteppingSystem) else system
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = b.size
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros(n)
    maxiter = 10 * n if maxiter is None else maxiter
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has a non-positive diagonal entry")
    P = sp.diags(1.0 / d)
    dv, _ = sla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=P)
    res = np.linalg.norm(A @ dv - b) / nb
    if not np.isfinite(res) or res > tol * 1.0001:
        raise SolverError(f"CG stopped at relative residual {res:.3e}", residual=float(res))
    return dv


def update_state(state, dv):
    """``v <- v + dv`` then ``x <- x + tau v``; returns a new state."""
    dv = np.asarray(dv, dtype=float).reshape(state.v.shape)
    v = state.v + dv
    return replace(state, x=state.x + state.tau * v, v=v, t=state.t + state.tau)

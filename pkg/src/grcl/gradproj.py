"""Constrained gradient update: project a proposed gradient onto the set
whose inner products with every constraint gradient are nonnegative.

The primal problem min 0.5*||g - z||^2 s.t. Gz >= 0 is solved through its
dual, a k-dimensional nonnegative QP (k = number of constraints):

    min_u 0.5 u' G G' u + g' G' u   s.t. u >= 0,      z* = G'u* + g.

The dual is solved by cyclic coordinate descent with an exact active-set
polish; a ridge is added to G G' only when it is numerically singular
(near-parallel constraints) and only to stabilize the iteration — the
returned point is always refined against the unridged system, so the
feasibility invariant holds to machine precision.

``oracle_project`` is an independent brute-force solver (active-set
enumeration) used to cross-check ``project``; the two must never share code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONDITION_LIMIT = 1e12
DEFAULT_RIDGE = 1e-3
ORACLE_MAX_CONSTRAINTS = 12


class QPSolverError(RuntimeError):
    """Dual solver failed to converge; carries the best iterate found."""

    def __init__(self, message: str, best_u: np.ndarray, residual: float):
        super().__init__(message)
        self.best_u = best_u
        self.residual = residual


@dataclass
class ConstraintSet:
    """Proposed gradient plus the stacked constraint gradients."""

    proposed: np.ndarray
    constraint_grads: np.ndarray  # (k, P); k may be 0
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.proposed = np.asarray(self.proposed, dtype=np.float64)
        self.constraint_grads = np.asarray(self.constraint_grads, dtype=np.float64)
        if self.constraint_grads.size == 0:
            self.constraint_grads = self.constraint_grads.reshape(0, self.proposed.size)
        if self.constraint_grads.ndim != 2 or \
                self.constraint_grads.shape[1] != self.proposed.size:
            raise ValueError("constraint gradients must be rows of length P")
        if not self.labels:
            self.labels = [f"c{i}" for i in range(self.constraint_grads.shape[0])]
        if len(self.labels) != self.constraint_grads.shape[0]:
            raise ValueError("one label per constraint row required")
        if not (np.all(np.isfinite(self.proposed))
                and np.all(np.isfinite(self.constraint_grads))):
            raise ValueError("non-finite entries in constraint set")

    @property
    def num_constraints(self) -> int:
        return self.constraint_grads.shape[0]


@dataclass
class ProjectionResult:
    projected: np.ndarray
    multipliers: np.ndarray
    active: np.ndarray  # bool per constraint: multiplier > 0
    distortion: float


def default_eps_feas(proposed: np.ndarray) -> float:
    """Scale-relative feasibility tolerance."""
    return 1e-9 * (1.0 + float(np.linalg.norm(proposed)))


def check_violation(cs: ConstraintSet, eps_feas: float) -> np.ndarray:
    """Row k is violated iff <g_t, g_k> < -eps_feas (boundary is feasible)."""
    if cs.num_constraints == 0:
        return np.zeros(0, dtype=bool)
    return (cs.constraint_grads @ cs.proposed) < -eps_feas


def _kkt_residual(H: np.ndarray, b: np.ndarray, u: np.ndarray) -> float:
    """Max violation of stationarity/complementarity for min .5u'Hu+b'u, u>=0."""
    g = H @ u + b
    return max(float(np.max(-g, initial=0.0)),
               float(np.max(np.abs(u * g), initial=0.0)),
               float(np.max(-u, initial=0.0)))


def _polish_active_set(H: np.ndarray, b: np.ndarray, candidate: np.ndarray,
                       tol: float) -> np.ndarray | None:
    """Solve the KKT equalities on a candidate active set; None if invalid.

    The system H_AA u_A = -b_A is always consistent (b lies in range(H) by
    construction), so lstsq handles rank-deficient active sets. Indices whose
    multiplier comes out negative are pruned and the system re-solved, as in
    the inner loop of Lawson-Hanson NNLS.
    """
    idx = list(np.flatnonzero(candidate))
    u = np.zeros(b.size)
    for _ in range(len(idx) + 1):
        if not idx:
            break
        sub = H[np.ix_(idx, idx)]
        u_a, *_ = np.linalg.lstsq(sub, -b[idx], rcond=None)
        worst = int(np.argmin(u_a))
        if u_a[worst] < -tol:
            idx.pop(worst)
            continue
        u[:] = 0.0
        u[idx] = np.maximum(u_a, 0.0)
        break
    g = H @ u + b
    if np.any(g < -tol):
        return None
    return u


def _cd_sweeps(H, b, u, diag, n_sweeps):
    for _ in range(n_sweeps):
        for i in range(b.size):
            if diag[i] <= 0.0:
                u[i] = 0.0  # zero constraint row: trivially feasible
                continue
            rest = H[i] @ u - diag[i] * u[i]
            u[i] = max(0.0, -(b[i] + rest) / diag[i])
    return u


def _solve_nonneg_qp(H: np.ndarray, b: np.ndarray, scale: float,
                     ridge: float = 0.0, max_sweeps: int = 20000) -> np.ndarray:
    """Cyclic coordinate descent with an exact active-set polish.

    ``ridge`` conditions a burn-in phase when H is numerically singular; the
    accepted point always satisfies the KKT system of the *unridged* problem.
    """
    k = b.size
    u = np.zeros(k)
    if ridge > 0.0:
        u = _cd_sweeps(H + ridge * np.eye(k), b, u, np.diag(H) + ridge, 50)
    diag = np.diag(H)
    tol = 1e-12 * scale
    best_u, best_res = u.copy(), _kkt_residual(H, b, u)
    for sweep in range(1, max_sweeps + 1):
        u = _cd_sweeps(H, b, u, diag, 1)
        res = _kkt_residual(H, b, u)
        if res < best_res:
            best_u, best_res = u.copy(), res
        if res <= tol:
            return u
        g = H @ u + b
        for candidate in (u > 1e-10 * scale,
                          (u > 1e-10 * scale) | (g < 1e-6 * scale)):
            polished = _polish_active_set(H, b, candidate, 1e-10 * scale)
            if polished is not None and _kkt_residual(H, b, polished) <= tol:
                return polished
    raise QPSolverError(
        f"dual QP did not converge after {max_sweeps} sweeps "
        f"(residual {best_res:.3e})", best_u, best_res)


def project(cs: ConstraintSet, ridge: float = DEFAULT_RIDGE,
            eps_feas: float | None = None) -> ProjectionResult:
    """Closest update to the proposed gradient satisfying every constraint.

    Feasible inputs are returned unchanged with zero multipliers.
    """
    g_t = cs.proposed
    k = cs.num_constraints
    if eps_feas is None:
        eps_feas = default_eps_feas(g_t)
    if k == 0 or not np.any(check_violation(cs, eps_feas)):
        return ProjectionResult(g_t.copy(), np.zeros(k),
                                np.zeros(k, dtype=bool), 0.0)

    G = cs.constraint_grads
    H = G @ G.T
    b = G @ g_t
    scale = max(1.0, float(np.max(np.abs(H))), float(np.max(np.abs(b))))

    # near-parallel constraint gradients make H singular; the ridge then
    # conditions the solver's burn-in while the result stays exact
    use_ridge = ridge if (k > 1 and np.linalg.cond(H) > CONDITION_LIMIT) else 0.0
    u = _solve_nonneg_qp(H, b, scale, ridge=use_ridge)

    projected = G.T @ u + g_t
    feas = G @ projected
    if np.any(feas < -eps_feas):
        raise QPSolverError(
            f"projection violates feasibility by {float(-feas.min()):.3e}",
            u, float(-feas.min()))
    return ProjectionResult(projected, u, u > 0.0,
                            float(np.linalg.norm(g_t - projected)))


def oracle_project(cs: ConstraintSet) -> np.ndarray:
    """Brute-force reference: enumerate every active set, keep the feasible
    equality-constrained projection with minimal distortion (ties toward the
    smaller active set)."""
    k = cs.num_constraints
    if k > ORACLE_MAX_CONSTRAINTS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_CONSTRAINTS} constraints")
    g_t = cs.proposed
    G = cs.constraint_grads
    feas_tol = 1e-9 * (1.0 + float(np.linalg.norm(g_t)))
    tie_tol = 1e-10 * (1.0 + float(np.linalg.norm(g_t)))

    best_z, best_dist, best_size = None, np.inf, -1
    for mask in range(2 ** k):
        active = [i for i in range(k) if mask >> i & 1]
        if active:
            Ga = G[active]
            # projection onto the null space of the active rows
            z = g_t - Ga.T @ (np.linalg.pinv(Ga @ Ga.T) @ (Ga @ g_t))
        else:
            z = g_t.copy()
        if np.any(G @ z < -feas_tol):
            continue
        dist = float(np.linalg.norm(g_t - z))
        if dist < best_dist - tie_tol or \
                (abs(dist - best_dist) <= tie_tol and len(active) < best_size):
            best_z, best_dist, best_size = z, dist, len(active)
    # the optimum's active set is one of the enumerated subsets and its
    # candidate is feasible, so at least one candidate always survives
    assert best_z is not None
    return best_z

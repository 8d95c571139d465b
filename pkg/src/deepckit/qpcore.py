"""Embedded solver for epigraph scenario programs.

The problem class is: minimize t over (z, t) subject to

    J_k(z) = z' P_k z + q_k' z + r0_k <= t    (one per scenario cost)
    E z = f                                   (affine equalities)
    lo <= z <= hi                             (per-coordinate boxes)

with every P_k symmetric positive semidefinite, so each epigraph row is a
rotated second-order-cone constraint on (z, t). The solver is a primal-dual
interior-point method with an infeasible start for the equalities and a
strictly feasible start for the inequalities (always available here: raise t
above every cost at any box-interior point). Newton steps are computed from
a sparse augmented KKT system in which each cost's rank-structured barrier
Hessian term appears through one auxiliary row instead of a dense outer
product, so scenario problems with a few thousand variables factor in
milliseconds.

The contract is the KKT system itself: a result reports primal, dual and
complementarity residuals that can be recomputed independently from the
returned point and multipliers (see :func:`kkt_residuals`), and ``Optimal``
status means all three are below the requested tolerance.

Coordinates pinned by a degenerate box (lo == hi) are converted to equality
rows up front so the interior stays non-empty. Infeasibility is reported
(never silently relaxed): either certified through inconsistent equalities
or declared after the primal residual stalls.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import lsqr, splu

from .errors import DimensionMismatch

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200

# Surrogate-gap reduction factor per centering step.
_MU = 10.0
_BETA = 0.5  # backtracking factor
_ALPHA_FRACTION = 0.99  # fraction-to-boundary rule


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


def _to_csr(P, n: int) -> sp.csr_matrix:
    if sp.issparse(P):
        M = P.tocsr().astype(float)
    else:
        M = sp.csr_matrix(np.asarray(P, dtype=float))
    if M.shape != (n, n):
        raise DimensionMismatch(f"P has shape {M.shape}, expected ({n}, {n})")
    return M


@dataclass(frozen=True)
class QuadCost:
    """Convex quadratic z' P z + q' z + r0 with P symmetric PSD."""

    P: sp.csr_matrix
    q: np.ndarray
    r0: float = 0.0

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float).reshape(-1)
        n = q.shape[0]
        P = _to_csr(self.P, n)
        asym = abs(P - P.T)
        scale = max(1.0, abs(P).max() if P.nnz else 0.0)
        if asym.nnz and asym.max() > 1e-9 * scale:
            raise DimensionMismatch("P must be symmetric")
        if n <= 64:
            # Cheap eigencheck at small sizes; large instances are built from
            # Gram products and are PSD by construction.
            w = np.linalg.eigvalsh(P.toarray())
            if w.size and w[0] < -1e-10 * max(1.0, abs(w).max()):
                raise DimensionMismatch("P must be positive semidefinite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r0", float(self.r0))

    @property
    def dim(self) -> int:
        return self.q.shape[0]


def eval_cost(c: QuadCost, z: np.ndarray) -> float:
    """Value of the quadratic at ``z``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != c.dim:
        raise DimensionMismatch(f"z has dim {z.shape[0]}, cost expects {c.dim}")
    return float(z @ (c.P @ z) + c.q @ z + c.r0)


@dataclass(frozen=True)
class ConvexProblem:
    """Epigraph program data: costs, equalities and boxes over an n_z vector."""

    n_z: int
    quad_epigraph: tuple[QuadCost, ...]
    equalities: tuple[sp.csr_matrix, np.ndarray] | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self) -> None:
        costs = tuple(self.quad_epigraph)
        if not costs:
            raise DimensionMismatch("at least one epigraph cost is required")
        for c in costs:
            if c.dim != self.n_z:
                raise DimensionMismatch(
                    f"cost dimension {c.dim} != decision dimension {self.n_z}"
                )
        object.__setattr__(self, "quad_epigraph", costs)
        if self.equalities is not None:
            E, f = self.equalities
            E = E.tocsr().astype(float) if sp.issparse(E) else sp.csr_matrix(
                np.atleast_2d(np.asarray(E, dtype=float))
            )
            f = np.asarray(f, dtype=float).reshape(-1)
            if E.shape != (f.shape[0], self.n_z):
                raise DimensionMismatch(
                    f"equalities shaped {E.shape} vs rhs {f.shape} and n_z {self.n_z}"
                )
            object.__setattr__(self, "equalities", (E, f))
        lo = np.full(self.n_z, -np.inf) if self.lo is None else np.asarray(
            self.lo, dtype=float
        ).reshape(-1)
        hi = np.full(self.n_z, np.inf) if self.hi is None else np.asarray(
            self.hi, dtype=float
        ).reshape(-1)
        if lo.shape[0] != self.n_z or hi.shape[0] != self.n_z:
            raise DimensionMismatch("box bounds must have length n_z")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass
class SolveResult:
    z_star: np.ndarray
    t_star: float
    status: SolveStatus
    kkt_primal: float
    kkt_dual: float
    kkt_gap: float
    iterations: int
    # Multipliers in canonical order; needed to recompute the KKT residuals.
    lam_quad: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_hi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class _Canonical:
    """Problem in solver form: pinned coordinates folded into equalities."""

    n: int  # n_z
    costs: tuple[QuadCost, ...]
    E: sp.csr_matrix  # (n_eq, n_z), may have 0 rows
    f: np.ndarray
    jlo: np.ndarray  # coords with finite lower bound (not pinned)
    jhi: np.ndarray
    lo: np.ndarray  # values aligned with jlo
    hi: np.ndarray
    pinned_infeasible: bool


def _canonicalize(p: ConvexProblem) -> _Canonical:
    lo, hi = p.lo, p.hi
    if np.any(lo > hi):
        return _Canonical(
            p.n_z, p.quad_epigraph, sp.csr_matrix((0, p.n_z)), np.zeros(0),
            np.zeros(0, dtype=int), np.zeros(0, dtype=int),
            np.zeros(0), np.zeros(0), True,
        )
    pinned = np.flatnonzero(lo == hi)
    free_lo = np.flatnonzero(np.isfinite(lo) & (lo < hi))
    free_hi = np.flatnonzero(np.isfinite(hi) & (lo < hi))
    rows = []
    rhs = []
    if p.equalities is not None:
        rows.append(p.equalities[0])
        rhs.append(p.equalities[1])
    if pinned.size:
        pin = sp.csr_matrix(
            (np.ones(pinned.size), (np.arange(pinned.size), pinned)),
            shape=(pinned.size, p.n_z),
        )
        rows.append(pin)
        rhs.append(lo[pinned])
    if rows:
        E = sp.vstack(rows, format="csr")
        f = np.concatenate(rhs)
    else:
        E = sp.csr_matrix((0, p.n_z))
        f = np.zeros(0)
    return _Canonical(
        p.n_z, p.quad_epigraph, E, f, free_lo, free_hi, lo[free_lo], hi[free_hi], False
    )


_DENSE_KKT_DIM = 700


def _newton_solve(
    Szz_base: sp.csr_matrix,
    Ehat: sp.csr_matrix | None,
    Aq: sp.csr_matrix,
    bq_inv: np.ndarray,
    rhs: np.ndarray,
    delta: float,
    dense: bool,
) -> np.ndarray | None:
    """Solve one regularized KKT system; None signals 'raise delta and retry'."""
    nx = Szz_base.shape[0]
    n_eq = Ehat.shape[0] if Ehat is not None else 0
    K = bq_inv.shape[0]
    if dense:
        dim = nx + n_eq + K
        M = np.zeros((dim, dim))
        M[:nx, :nx] = Szz_base.toarray()
        M[:nx, :nx] += delta * np.eye(nx)
        if n_eq:
            Ed = Ehat.toarray()
            M[nx : nx + n_eq, :nx] = Ed
            M[:nx, nx : nx + n_eq] = Ed.T
            M[nx : nx + n_eq, nx : nx + n_eq] = -delta * np.eye(n_eq)
        Ad = Aq.toarray()
        M[nx + n_eq :, :nx] = Ad
        M[:nx, nx + n_eq :] = Ad.T
        M[nx + n_eq :, nx + n_eq :] = -np.diag(bq_inv)
        try:
            lu, piv = lu_factor(M, check_finite=False)
            cand = lu_solve((lu, piv), rhs, check_finite=False)
            resid = rhs - M @ cand
            if np.abs(resid).max() > 1e-13 * max(1.0, np.abs(rhs).max()):
                cand = cand + lu_solve((lu, piv), resid, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        return cand if np.all(np.isfinite(cand)) else None

    Bq_inv = sp.diags(bq_inv)
    reg = delta * sp.eye(nx)
    if n_eq:
        Kmat = sp.bmat(
            [
                [Szz_base + reg, Ehat.T, Aq.T],
                [Ehat, -delta * sp.eye(n_eq), None],
                [Aq, None, -Bq_inv],
            ],
            format="csc",
        )
    else:
        Kmat = sp.bmat([[Szz_base + reg, Aq.T], [Aq, -Bq_inv]], format="csc")
    try:
        lu = splu(Kmat)
        cand = lu.solve(rhs)
        for _ in range(2):
            resid = rhs - Kmat @ cand
            if np.abs(resid).max() <= 1e-13 * max(1.0, np.abs(rhs).max()):
                break
            cand = cand + lu.solve(resid)
    except RuntimeError:
        return None
    return cand if np.all(np.isfinite(cand)) else None


def _solve_single_cost(
    p: ConvexProblem, c: _Canonical, tol: float
) -> SolveResult | None:
    """Direct solve of min J(z) s.t. E z = f when it is the whole problem.

    Returns None when the linear KKT system cannot deliver the required
    residuals (rank-deficient curvature along feasible directions), in which
    case the caller falls through to the interior-point iteration.
    """
    cost = c.costs[0]
    n = c.n
    n_eq = c.E.shape[0]
    twoP = (2.0 * cost.P).tocsr()
    dense = (n + n_eq) <= _DENSE_KKT_DIM
    delta = 1e-11 * max(1.0, float(abs(twoP).max()) if twoP.nnz else 0.0)
    try:
        if dense:
            M = np.zeros((n + n_eq, n + n_eq))
            M[:n, :n] = twoP.toarray() + delta * np.eye(n)
            if n_eq:
                Ed = c.E.toarray()
                M[n:, :n] = Ed
                M[:n, n:] = Ed.T
                M[n:, n:] = -delta * np.eye(n_eq)
            rhs = np.concatenate([-cost.q, c.f])
            lu, piv = lu_factor(M, check_finite=False)
            sol = lu_solve((lu, piv), rhs, check_finite=False)
            resid = rhs - M @ sol
            sol = sol + lu_solve((lu, piv), resid, check_finite=False)
        else:
            blocks = [[twoP + delta * sp.eye(n), c.E.T], [c.E, -delta * sp.eye(n_eq)]]
            Kmat = sp.bmat(blocks, format="csc") if n_eq else (twoP + delta * sp.eye(n)).tocsc()
            rhs = np.concatenate([-cost.q, c.f]) if n_eq else -cost.q
            lu = splu(Kmat)
            sol = lu.solve(rhs)
            sol = sol + lu.solve(rhs - Kmat @ sol)
    except (RuntimeError, ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    z = sol[:n]
    nu = sol[n:]
    res = SolveResult(
        z_star=z, t_star=eval_cost(cost, z), status=SolveStatus.OPTIMAL,
        kkt_primal=np.inf, kkt_dual=np.inf, kkt_gap=np.inf, iterations=1,
        lam_quad=np.ones(1), lam_lo=np.zeros(0), lam_hi=np.zeros(0), nu=nu,
    )
    pri, dual, gap = kkt_residuals(p, res)
    if max(pri, dual, gap) > tol:
        return None
    res.kkt_primal, res.kkt_dual, res.kkt_gap = pri, dual, gap
    return res


def _equalities_consistent(c: _Canonical) -> bool:
    """Least-squares certificate that E z = f admits a solution."""
    if not c.E.shape[0]:
        return True
    out = lsqr(c.E, c.f, atol=1e-13, btol=1e-13, iter_lim=10_000)
    return out[3] <= 1e-7 * (1.0 + float(np.linalg.norm(c.f)))


def _strict_start(c: _Canonical) -> np.ndarray:
    """A point strictly inside the boxes (equalities handled infeasibly)."""
    z = np.zeros(c.n)
    lo = np.full(c.n, -np.inf)
    hi = np.full(c.n, np.inf)
    lo[c.jlo] = c.lo
    hi[c.jhi] = c.hi
    both = np.isfinite(lo) & np.isfinite(hi)
    z[both] = 0.5 * (lo[both] + hi[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    z[only_lo] = lo[only_lo] + 1.0
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    z[only_hi] = hi[only_hi] - 1.0
    # pinned coords live in E as single-entry rows; start them on their value
    counts = np.diff(c.E.indptr)
    for r in np.flatnonzero(counts == 1):
        ptr = c.E.indptr[r]
        j = c.E.indices[ptr]
        if c.E.data[ptr] == 1.0 and not np.isfinite(lo[j]) and not np.isfinite(hi[j]):
            z[j] = c.f[r]
    return z


def _ineq_state(c: _Canonical, z: np.ndarray, t: float):
    """Values J_k(z), slacks of all inequality constraints (quads, lo, hi)."""
    J = np.array([eval_cost(ck, z) for ck in c.costs])
    s_quad = t - J
    s_lo = z[c.jlo] - c.lo
    s_hi = c.hi - z[c.jhi]
    return J, s_quad, s_lo, s_hi


def _dual_residual(
    c: _Canonical,
    z: np.ndarray,
    grads: np.ndarray,
    lam_q: np.ndarray,
    lam_lo: np.ndarray,
    lam_hi: np.ndarray,
    nu: np.ndarray,
) -> np.ndarray:
    """Gradient of the Lagrangian over (z, t); ``grads`` holds 2 P_k z + q_k."""
    r = np.zeros(c.n + 1)
    r[-1] = 1.0 - lam_q.sum()
    r[:-1] = grads.T @ lam_q
    np.subtract.at(r[:-1], c.jlo, lam_lo)
    np.add.at(r[:-1], c.jhi, lam_hi)
    if c.E.shape[0]:
        r[:-1] += c.E.T @ nu
    return r


def solve(
    p: ConvexProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> SolveResult:
    """Solve the epigraph program; see the module docstring for the contract.

    Returns a result whose status is ``OPTIMAL`` only if the independently
    recomputable KKT residuals are all at most ``tol``. ``INFEASIBLE`` is
    reported for inconsistent constraints (certified through the equality
    system or a stalled primal residual); ``MAX_ITERATIONS`` returns the best
    iterate found.
    """
    c = _canonicalize(p)
    if c.pinned_infeasible:
        return SolveResult(
            z_star=np.zeros(p.n_z), t_star=np.nan, status=SolveStatus.INFEASIBLE,
            kkt_primal=np.inf, kkt_dual=np.inf, kkt_gap=np.inf, iterations=0,
        )

    if len(c.costs) == 1 and c.jlo.size == 0 and c.jhi.size == 0:
        # single active-by-construction epigraph row, no inequalities left:
        # equality-constrained minimization of one quadratic, one linear solve
        direct = _solve_single_cost(p, c, tol)
        if direct is not None:
            return direct

    K = len(c.costs)
    n = c.n
    n_eq = c.E.shape[0]
    m_ineq = K + c.jlo.size + c.jhi.size
    twoP = [2.0 * ck.P for ck in c.costs]

    z = _strict_start(c)
    J, _, s_lo, s_hi = _ineq_state(c, z, 0.0)
    t = float(J.max()) + 1.0 + 0.1 * abs(J.max())
    s_quad = t - J
    lam_q = 1.0 / s_quad
    lam_lo = 1.0 / np.maximum(s_lo, 1e-12)
    lam_hi = 1.0 / np.maximum(s_hi, 1e-12)
    nu = np.zeros(n_eq)

    tol_feas = 0.5 * tol
    tol_dual = 0.5 * tol
    tol_gap = 0.1 * tol / max(1, K)

    Ehat = sp.hstack([c.E, sp.csr_matrix((n_eq, 1))], format="csr") if n_eq else None
    best = None
    stall_count = 0
    r_pri_hist: list[float] = []

    def full_residual_norm(z, t, lam_q, lam_lo, lam_hi, nu, inv_tbar):
        J, s_quad, s_lo, s_hi = _ineq_state(c, z, t)
        grads = np.vstack([tp @ z + ck.q for tp, ck in zip(twoP, c.costs)])
        r_d = _dual_residual(c, z, grads, lam_q, lam_lo, lam_hi, nu)
        r_c = np.concatenate(
            [lam_q * s_quad - inv_tbar, lam_lo * s_lo - inv_tbar, lam_hi * s_hi - inv_tbar]
        )
        r_p = (c.E @ z - c.f) if n_eq else np.zeros(0)
        return np.sqrt(np.sum(r_d**2) + np.sum(r_c**2) + np.sum(r_p**2))

    iters = 0
    for iters in range(1, max_iter + 1):
        J, s_quad, s_lo, s_hi = _ineq_state(c, z, t)
        grads = np.vstack([tp @ z + ck.q for tp, ck in zip(twoP, c.costs)])
        eta = float(lam_q @ s_quad + lam_lo @ s_lo + lam_hi @ s_hi)
        gap_max = max(
            float((lam_q * s_quad).max(initial=0.0)),
            float((lam_lo * s_lo).max(initial=0.0)),
            float((lam_hi * s_hi).max(initial=0.0)),
        )

        r_dual = _dual_residual(c, z, grads, lam_q, lam_lo, lam_hi, nu)
        r_pri = (c.E @ z - c.f) if n_eq else np.zeros(0)
        r_pri_inf = float(np.abs(r_pri).max()) if n_eq else 0.0
        r_dual_inf = float(np.abs(r_dual).max())

        # Centering target: never let complementarity outrun feasibility and
        # stationarity, or iterates get pinned to the constraint surface
        # while still infeasible and the line search collapses.
        inv_tbar = max(eta, r_pri_inf + r_dual_inf) / (_MU * m_ineq)

        # Track the best iterate by worst residual for MAX_ITERATIONS exits.
        score = max(r_pri_inf, r_dual_inf, gap_max)
        if best is None or score < best[0]:
            best = (score, z.copy(), t, lam_q.copy(), lam_lo.copy(), lam_hi.copy(), nu.copy())

        if r_pri_inf <= tol_feas and r_dual_inf <= tol_dual and gap_max <= tol_gap:
            break

        # Stall detection: primal residual refuses to shrink while the barrier
        # keeps tightening. Declare infeasibility only with evidence (an
        # inconsistent equality system, or diverging multipliers); otherwise
        # run to the iteration cap.
        r_pri_hist.append(r_pri_inf)
        if len(r_pri_hist) > 40:
            r_pri_hist.pop(0)
            if (
                r_pri_inf > max(1e3 * tol, 1e-10)
                and r_pri_inf > 0.99 * r_pri_hist[0]
            ):
                stall_count += 1
            else:
                stall_count = 0
            if stall_count >= 20:
                stall_count = 0
                if n_eq and not _equalities_consistent(c):
                    return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                                   SolveStatus.INFEASIBLE, tol)
                mult_norm = max(
                    np.abs(lam_q).max(initial=0.0),
                    np.abs(lam_lo).max(initial=0.0),
                    np.abs(lam_hi).max(initial=0.0),
                    np.abs(nu).max(initial=0.0),
                )
                if mult_norm > 1e8:
                    return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                                   SolveStatus.INFEASIBLE, tol)

        # Newton system on (dz_t, dnu, aux); see module docstring.
        r_cent_q = lam_q * s_quad - inv_tbar
        r_cent_lo = lam_lo * s_lo - inv_tbar
        r_cent_hi = lam_hi * s_hi - inv_tbar

        S = sum(lq * tp for lq, tp in zip(lam_q, twoP))
        diag = np.zeros(n + 1)
        np.add.at(diag[:-1], c.jlo, lam_lo / s_lo)
        np.add.at(diag[:-1], c.jhi, lam_hi / s_hi)
        Szz_base = sp.block_diag([S, sp.csr_matrix((1, 1))], format="csr") + sp.diags(diag)

        Aq = sp.hstack(
            [sp.csr_matrix(grads), sp.csr_matrix(-np.ones((K, 1)))], format="csr"
        )

        rhs1 = -r_dual.copy()
        rhs1 += Aq.T @ (r_cent_q / s_quad)
        np.subtract.at(rhs1[:-1], c.jlo, r_cent_lo / s_lo)
        np.add.at(rhs1[:-1], c.jhi, r_cent_hi / s_hi)

        bq_inv = np.maximum(s_quad / lam_q, 1e-300)
        if n_eq:
            rhs = np.concatenate([rhs1, -r_pri, np.zeros(K)])
        else:
            rhs = np.concatenate([rhs1, np.zeros(K)])

        # Factor a statically regularized KKT matrix and refine against it;
        # escalate the regularization if the factorization fails or returns
        # garbage (rank-deficient Hessian/equality blocks). The
        # already-negative B^{-1} block must stay untouched: perturbing it
        # biases the multiplier recovery by delta/s. Small systems go through
        # dense LAPACK, large ones through sparse LU.
        sol = None
        delta = 1e-10 * max(1.0, float(abs(Szz_base).max() if Szz_base.nnz else 0.0))
        kkt_dim = (n + 1) + n_eq + K
        for _ in range(4):
            sol = _newton_solve(
                Szz_base, Ehat, Aq, bq_inv, rhs, delta, kkt_dim <= _DENSE_KKT_DIM
            )
            if sol is not None:
                break
            delta *= 1e4
        if sol is None:
            return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                           SolveStatus.MAX_ITERATIONS, tol)

        dx = sol[: n + 1]
        dnu = sol[n + 1 : n + 1 + n_eq] if n_eq else np.zeros(0)
        dz = dx[:-1]
        dt = dx[-1]

        gdx_q = Aq @ dx
        dlam_q = (lam_q * gdx_q - r_cent_q) / s_quad
        dlam_lo = (lam_lo * (-dz[c.jlo]) - r_cent_lo) / s_lo
        dlam_hi = (lam_hi * (dz[c.jhi]) - r_cent_hi) / s_hi

        # Fraction-to-boundary on the multipliers and (linearized) slacks: no
        # component may lose more than a 0.99 fraction per step, which keeps
        # iterates off the boundary until complementarity genuinely converges.
        alpha = 1.0
        for lam, dlam in ((lam_q, dlam_q), (lam_lo, dlam_lo), (lam_hi, dlam_hi)):
            neg = dlam < 0
            if np.any(neg):
                alpha = min(alpha, _ALPHA_FRACTION * float(np.min(-lam[neg] / dlam[neg])))
        ds_quad = -gdx_q  # d/dalpha of s = t - J
        ds_lo = dz[c.jlo]
        ds_hi = -dz[c.jhi]
        for s, ds in ((s_quad, ds_quad), (s_lo, ds_lo), (s_hi, ds_hi)):
            neg = ds < 0
            if np.any(neg):
                alpha = min(alpha, _ALPHA_FRACTION * float(np.min(-s[neg] / ds[neg])))

        # Backtrack to strict primal feasibility of the inequalities.
        def strictly_feasible(a: float) -> bool:
            _, s_q_n, s_lo_n, s_hi_n = _ineq_state(c, z + a * dz, t + a * dt)
            return (
                (s_q_n > 0).all()
                and ((s_lo_n > 0).all() if s_lo_n.size else True)
                and ((s_hi_n > 0).all() if s_hi_n.size else True)
            )

        for _ in range(60):
            if strictly_feasible(alpha):
                break
            alpha *= _BETA
        else:
            return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                           SolveStatus.INFEASIBLE, tol)

        # Backtrack on the full residual norm; if no decrease shows up, fall
        # through with a cautious small step (the stall detector owns cycles).
        base_norm = full_residual_norm(z, t, lam_q, lam_lo, lam_hi, nu, inv_tbar)
        for _ in range(30):
            if full_residual_norm(
                z + alpha * dz,
                t + alpha * dt,
                lam_q + alpha * dlam_q,
                lam_lo + alpha * dlam_lo,
                lam_hi + alpha * dlam_hi,
                nu + alpha * dnu,
                inv_tbar,
            ) <= (1.0 - 0.01 * alpha) * base_norm:
                break
            alpha *= _BETA

        z = z + alpha * dz
        t = float(t + alpha * dt)
        lam_q = np.maximum(lam_q + alpha * dlam_q, 1e-300)
        lam_lo = np.maximum(lam_lo + alpha * dlam_lo, 1e-300)
        lam_hi = np.maximum(lam_hi + alpha * dlam_hi, 1e-300)
        nu = nu + alpha * dnu

        if not np.isfinite(t) or abs(t) > 1e13:
            return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                           SolveStatus.MAX_ITERATIONS, tol)
    else:
        # iteration cap: report the best iterate
        _, z, t, lam_q, lam_lo, lam_hi, nu = best
        return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, max_iter,
                       SolveStatus.MAX_ITERATIONS, tol)

    return _finish(p, c, z, t, lam_q, lam_lo, lam_hi, nu, iters,
                   SolveStatus.OPTIMAL, tol)


def _finish(
    p: ConvexProblem,
    c: _Canonical,
    z: np.ndarray,
    t: float,
    lam_q: np.ndarray,
    lam_lo: np.ndarray,
    lam_hi: np.ndarray,
    nu: np.ndarray,
    iters: int,
    status: SolveStatus,
    tol: float,
) -> SolveResult:
    res = SolveResult(
        z_star=z.copy(), t_star=float(t), status=status,
        kkt_primal=np.inf, kkt_dual=np.inf, kkt_gap=np.inf, iterations=iters,
        lam_quad=lam_q.copy(), lam_lo=lam_lo.copy(), lam_hi=lam_hi.copy(),
        nu=nu.copy(),
    )
    pri, dual, gap = kkt_residuals(p, res)
    res.kkt_primal, res.kkt_dual, res.kkt_gap = pri, dual, gap
    if status is SolveStatus.OPTIMAL and max(pri, dual, gap) > tol:
        res.status = SolveStatus.MAX_ITERATIONS
    return res


def kkt_residuals(p: ConvexProblem, result: SolveResult) -> tuple[float, float, float]:
    """Recompute (primal, dual, complementarity) residuals from scratch.

    Uses only the problem data and the point/multipliers stored in the
    result, not any solver state.
    """
    c = _canonicalize(p)
    z, t = np.asarray(result.z_star, dtype=float), float(result.t_star)
    if not np.all(np.isfinite(z)) or not np.isfinite(t):
        return np.inf, np.inf, np.inf
    J, s_quad, s_lo, s_hi = _ineq_state(c, z, t)
    viol = [max(0.0, float(-s_quad.min())) if s_quad.size else 0.0]
    if s_lo.size:
        viol.append(max(0.0, float(-s_lo.min())))
    if s_hi.size:
        viol.append(max(0.0, float(-s_hi.min())))
    if c.E.shape[0]:
        viol.append(float(np.abs(c.E @ z - c.f).max()))
    primal = max(viol)

    lam_q = np.asarray(result.lam_quad, dtype=float)
    lam_lo = np.asarray(result.lam_lo, dtype=float)
    lam_hi = np.asarray(result.lam_hi, dtype=float)
    nu = np.asarray(result.nu, dtype=float)
    if lam_q.size != len(c.costs) or nu.size != c.E.shape[0]:
        return primal, np.inf, np.inf
    grads = np.vstack([2.0 * (ck.P @ z) + ck.q for ck in c.costs])
    r_d = _dual_residual(c, z, grads, lam_q, lam_lo, lam_hi, nu)
    neg = min(
        0.0,
        float(lam_q.min(initial=0.0)),
        float(lam_lo.min(initial=0.0)),
        float(lam_hi.min(initial=0.0)),
    )
    dual = max(float(np.abs(r_d).max()), -neg)
    comp = [lam_q * s_quad, lam_lo * s_lo, lam_hi * s_hi]
    gap = max(float(np.abs(v).max()) if v.size else 0.0 for v in comp)
    return primal, dual, gap


def dump_problem(p: ConvexProblem) -> str:
    """Text dump (dimensions, then matrices row-major) for external checks."""
    out = io.StringIO()
    n_eq = p.equalities[0].shape[0] if p.equalities is not None else 0
    print(f"n_z {p.n_z}", file=out)
    print(f"n_costs {len(p.quad_epigraph)}", file=out)
    print(f"n_eq {n_eq}", file=out)
    for k, cst in enumerate(p.quad_epigraph):
        print(f"cost {k} r0 {cst.r0:.17g}", file=out)
        dense = cst.P.toarray()
        for row in dense:
            print(" ".join(f"{v:.17g}" for v in row), file=out)
        print(" ".join(f"{v:.17g}" for v in cst.q), file=out)
    if p.equalities is not None:
        E, f = p.equalities
        for row in E.toarray():
            print(" ".join(f"{v:.17g}" for v in row), file=out)
        print(" ".join(f"{v:.17g}" for v in f), file=out)
    print(" ".join(f"{v:.17g}" for v in p.lo), file=out)
    print(" ".join(f"{v:.17g}" for v in p.hi), file=out)
    return out.getvalue()

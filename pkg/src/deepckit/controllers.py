"""Predictive controllers: data-driven baseline, robust scenario variant, oracle.

All three controllers pose each receding-horizon step as an epigraph program
for :mod:`deepckit.qpcore` over the input sequence plus auxiliary decision
blocks, and share the conventions: prediction index j covers absolute steps
k..k+N-1, the first predicted output is the (already determined) current one,
and history buffers hold the T_ini most recent applied inputs and measured
outputs.

The unknown subsystem enters through its recorded behavior. Stacking the
four Hankel row blocks as rows of H, the trajectory equation H g = h (h the
stacked past/future window) together with the ridge ``lambda_g ||g||^2`` is
eliminated in closed form: the minimizing coefficient vector for a window h
in range(H) is the pseudoinverse solution, so the ridge becomes the PSD
quadratic ``lambda_g h' W h`` with W built from the SVD of H, and membership
in range(H) becomes explicit equality rows (empty when noisy data makes H
full row rank). This presolve keeps the scenario program a few hundred
variables instead of a few thousand; the optimal coefficient vector is
recoverable exactly via :meth:`BehaviorModel.recover_g`.

The known subsystem is rolled out with its parameter-dependent blocks, with
the unknown-state coupling replaced by the measured-output coupling column
(the position column of the discrete coupling block); the dropped velocity
column is what the process-noise ambiguity absorbs. The rollout is folded
affinely into the tracking cost, so per-scenario decision blocks are the
predicted unknown outputs and the initial-condition slack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ambiguity import AmbiguitySpec, Scenario, draw_scenarios
from .errors import (
    BuffersNotWarm,
    DimensionMismatch,
    ScenarioCountMismatch,
)
from .plant import (
    MSD_N_KNOWN,
    MSD_P_KNOWN,
    DiscreteLTI,
    HybridPartition,
    MsdParams,
    ThetaBox,
    msd_discrete_hybrid,
    partition_hybrid,
)
from .qpcore import ConvexProblem, QuadCost, SolveResult, SolveStatus, eval_cost, solve
from .trajkit import RANK_RTOL, Signal, build_hankel, split_past_future


@dataclass(frozen=True)
class TerminalBox:
    """Known-state positions within ``radius`` of their reference at k+N."""

    radius: float


@dataclass(frozen=True)
class ControllerConfig:
    T_ini: int = 4
    N: int = 20
    Q: np.ndarray = field(default_factory=lambda: np.eye(3))
    R: np.ndarray = field(default_factory=lambda: 1e-3 * np.eye(3))
    lambda_g: float = 1e-4
    lambda_y: float = 1e3
    u_bounds: tuple[np.ndarray, np.ndarray] | None = None
    y_bounds: tuple[np.ndarray, np.ndarray] | None = None
    terminal_mode: TerminalBox | None = None
    M: int = 5
    eps_w: float = 0.05
    eps_v: float = 0.005
    integral_action: bool = False
    k_integral: float = 0.1
    solver_tol: float = 1e-6
    solver_max_iter: int = 200

    def __post_init__(self) -> None:
        if self.T_ini < 1 or self.N < 1 or self.M < 1:
            raise DimensionMismatch("T_ini, N and M must all be >= 1")
        if self.lambda_g < 0 or self.lambda_y < 0:
            raise DimensionMismatch("regularization weights must be >= 0")
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        for name, Mx in (("Q", Q), ("R", R)):
            try:
                np.linalg.cholesky(Mx)
            except np.linalg.LinAlgError as exc:
                raise DimensionMismatch(f"{name} must be positive definite") from exc
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class DataBlocks:
    """Past/future Hankel row blocks of the offline (input, unknown-output) data."""

    Up: np.ndarray
    Uf: np.ndarray
    Yp: np.ndarray
    Yf: np.ndarray

    @property
    def g_dim(self) -> int:
        return self.Up.shape[1]

    def __post_init__(self) -> None:
        cols = {self.Up.shape[1], self.Uf.shape[1], self.Yp.shape[1], self.Yf.shape[1]}
        if len(cols) != 1:
            raise DimensionMismatch("Hankel blocks must share a column count")

    @classmethod
    def from_data(
        cls, u_d: Signal, y_u_d: Signal, T_ini: int, N: int
    ) -> "DataBlocks":
        L = T_ini + N
        Up, Uf = split_past_future(build_hankel(u_d, L), T_ini, N)
        Yp, Yf = split_past_future(build_hankel(y_u_d, L), T_ini, N)
        return cls(Up=Up, Uf=Uf, Yp=Yp, Yf=Yf)


class BehaviorModel:
    """SVD presolve of the stacked behavior equation H g = h.

    Rows of H are ordered (u_ini, y_ini, u, y_u). ``weight`` is the PSD
    matrix W with ||g_min(h)||^2 = h' W h on range(H); ``null_rows`` spans
    the orthogonal complement of range(H) (empty for full row rank).
    """

    def __init__(self, blocks: DataBlocks, m: int, p_u: int, T_ini: int, N: int):
        H = np.vstack([blocks.Up, blocks.Yp, blocks.Uf, blocks.Yf])
        self.blocks = blocks
        self.m, self.p_u, self.T_ini, self.N = m, p_u, T_ini, N
        self.rows = H.shape[0]
        U, s, Vt = np.linalg.svd(H, full_matrices=True)
        rank = int(np.count_nonzero(s > RANK_RTOL * s[0])) if s.size else 0
        self.rank = rank
        U1 = U[:, :rank]
        self.weight = U1 @ np.diag(1.0 / s[:rank] ** 2) @ U1.T
        self.null_rows = U[:, rank:].T
        self._g_map = Vt[:rank].T @ np.diag(1.0 / s[:rank]) @ U1.T

    def recover_g(self, h: np.ndarray) -> np.ndarray:
        """Minimum-norm coefficient vector reproducing the window h."""
        return self._g_map @ np.asarray(h, dtype=float).reshape(-1)

    # segment offsets inside h
    @property
    def off_u_ini(self) -> int:
        return 0

    @property
    def off_y_ini(self) -> int:
        return self.m * self.T_ini

    @property
    def off_u(self) -> int:
        return self.m * self.T_ini + self.p_u * self.T_ini

    @property
    def off_y(self) -> int:
        return self.off_u + self.m * self.N


@dataclass
class IoBuffers:
    """Rolling history of the last T_ini applied inputs and measured outputs."""

    T_ini: int
    m: int
    p: int
    u_hist: list[np.ndarray] = field(default_factory=list)
    y_hist: list[np.ndarray] = field(default_factory=list)

    @property
    def warm(self) -> bool:
        return len(self.u_hist) >= self.T_ini

    def push(self, u: np.ndarray, y: np.ndarray) -> None:
        u = np.asarray(u, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if u.shape[0] != self.m or y.shape[0] != self.p:
            raise DimensionMismatch("buffer push with wrong input/output dims")
        self.u_hist.append(u)
        self.y_hist.append(y)
        del self.u_hist[:-self.T_ini]
        del self.y_hist[:-self.T_ini]

    def u_ini_vec(self) -> np.ndarray:
        return np.concatenate(self.u_hist)

    def y_ini_vec(self) -> np.ndarray:
        return np.concatenate(self.y_hist)

    def y_u_ini_vec(self, p_k: int) -> np.ndarray:
        return np.concatenate([y[p_k:] for y in self.y_hist])


@dataclass(frozen=True)
class MdrModel:
    """Nominal hybrid blocks plus the parameter-to-blocks rebuild map."""

    nominal: HybridPartition
    a_y: np.ndarray
    theta_box: ThetaBox
    Ts: float
    nominal_params: MsdParams

    @classmethod
    def from_plant(
        cls, nominal_params: MsdParams, Ts: float, theta_box: ThetaBox
    ) -> "MdrModel":
        part = partition_hybrid(
            msd_discrete_hybrid(nominal_params, Ts), MSD_N_KNOWN, MSD_P_KNOWN
        )
        return cls(
            nominal=part,
            a_y=part.A_ku[:, : part.p_u].copy(),
            theta_box=theta_box,
            Ts=Ts,
            nominal_params=nominal_params,
        )

    def remap(self, theta: MsdParams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Blocks (A_k, A_y, B_k, C_k) of the chain rebuilt at ``theta``."""
        part = partition_hybrid(
            msd_discrete_hybrid(theta, self.Ts), self.nominal.n_k, self.nominal.p_k
        )
        return part.A_k, part.A_ku[:, : part.p_u], part.B_k, part.C_k


@dataclass
class ControlStep:
    u_applied: np.ndarray
    predicted_y: Signal
    t_star: float
    per_scenario_costs: tuple[float, ...]
    solver_status: SolveStatus
    fallback: bool = False


def terminal_set(
    cfg: ControllerConfig, r_terminal: np.ndarray
) -> list[tuple[int, float, float]]:
    """Box rows (known-state coord, lo, hi) for the end-of-horizon state.

    The known-state positions are its leading p_k coordinates; mode None
    yields no rows, radius 0 collapses to equalities.
    """
    if cfg.terminal_mode is None:
        return []
    rho = cfg.terminal_mode.radius
    r_terminal = np.asarray(r_terminal, dtype=float).reshape(-1)
    p_k = MSD_P_KNOWN
    return [(i, float(r_terminal[i] - rho), float(r_terminal[i] + rho)) for i in range(p_k)]


def _rollout_maps(
    A_k: np.ndarray, A_y: np.ndarray, B_k: np.ndarray, N: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine maps for x_0..x_{N-1} stacked: X = Phi x0 + Gu U + Gy Yu (+ noise drive).

    Returns (Phi, Gu, Gy) with shapes (N n_k, n_k), (N n_k, N m), (N n_k, N p_u).
    The same recursion applied to a stacked noise path gives its drive term.
    """
    n_k, m = B_k.shape
    p_u = A_y.shape[1]
    Phi = np.zeros((N * n_k, n_k))
    Gu = np.zeros((N * n_k, N * m))
    Gy = np.zeros((N * n_k, N * p_u))
    Phi[:n_k] = np.eye(n_k)
    for j in range(1, N):
        rj, rp = slice(j * n_k, (j + 1) * n_k), slice((j - 1) * n_k, j * n_k)
        Phi[rj] = A_k @ Phi[rp]
        Gu[rj] = A_k @ Gu[rp]
        Gy[rj] = A_k @ Gy[rp]
        Gu[rj, (j - 1) * m : j * m] += B_k
        Gy[rj, (j - 1) * p_u : j * p_u] += A_y
    return Phi, Gu, Gy


def _noise_drive(A_k: np.ndarray, w_path: np.ndarray, N: int) -> np.ndarray:
    """Stacked contribution of the process-noise path to x_0..x_{N-1}."""
    n_k = A_k.shape[0]
    d = np.zeros(N * n_k)
    for j in range(1, N):
        rj, rp = slice(j * n_k, (j + 1) * n_k), slice((j - 1) * n_k, j * n_k)
        d[rj] = A_k @ d[rp] + w_path[j - 1]
    return d


def _terminal_state_map(
    A_k: np.ndarray, A_y: np.ndarray, B_k: np.ndarray, N: int,
    Phi: np.ndarray, Gu: np.ndarray, Gy: np.ndarray,
    x0: np.ndarray, drive: np.ndarray, w_last: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine map of the terminal state x_N from (U, Yu): rows (cU, cY, const)."""
    n_k = A_k.shape[0]
    m = B_k.shape[1]
    p_u = A_y.shape[1]
    last = slice((N - 1) * n_k, N * n_k)
    cU = A_k @ Gu[last]
    cY = A_k @ Gy[last]
    cU[:, (N - 1) * m :] += B_k
    cY[:, (N - 1) * p_u :] += A_y
    const = A_k @ (Phi[last] @ x0 + drive[last]) + w_last
    return cU, cY, const


class _Layout:
    """Coordinate bookkeeping for the stacked decision vector."""

    def __init__(self, m: int, N: int):
        self.n_u = m * N
        self.size = self.n_u
        self.slices: dict[str, slice] = {"u": slice(0, self.n_u)}

    def add(self, name: str, width: int) -> slice:
        sl = slice(self.size, self.size + width)
        self.slices[name] = sl
        self.size += width
        return sl


def _behavior_terms(
    beh: BehaviorModel,
    lay: _Layout,
    sl_yu: slice,
    sl_sig: slice,
    u_ini: np.ndarray,
    y_u_ini: np.ndarray,
    lambda_g: float,
    sig_scale: float,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray | None, np.ndarray | None]:
    """Quadratic and equality contributions of the data-behavior window.

    The window is h = c0 + T z with T placing (u, y_u, sigma) blocks; returns
    (P_add, q_add, r0_add, E_rows, E_rhs) on the full decision vector. The
    slack coordinates are the rescaled sigma-tilde = sig_scale * sigma, so
    their window contribution carries 1/sig_scale.
    """
    rows = beh.rows
    n_z = lay.size
    T = np.zeros((rows, n_z))
    c0 = np.zeros(rows)
    c0[beh.off_u_ini : beh.off_y_ini] = u_ini
    c0[beh.off_y_ini : beh.off_u] = y_u_ini
    T[beh.off_y_ini : beh.off_u, sl_sig] = np.eye(beh.p_u * beh.T_ini) / sig_scale
    T[beh.off_u : beh.off_y, lay.slices["u"]] = np.eye(beh.m * beh.N)
    T[beh.off_y :, sl_yu] = np.eye(beh.p_u * beh.N)

    WT = beh.weight @ T
    P_add = lambda_g * (T.T @ WT)
    q_add = 2.0 * lambda_g * (WT.T @ c0)
    r0_add = float(lambda_g * c0 @ (beh.weight @ c0))

    if beh.null_rows.shape[0]:
        E_rows = beh.null_rows @ T
        E_rhs = -(beh.null_rows @ c0)
        return P_add, q_add, r0_add, E_rows, E_rhs
    return P_add, q_add, r0_add, None, None


def _tracking_terms(
    cfg: ControllerConfig,
    lay: _Layout,
    S: np.ndarray,
    b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadratic pieces of sum_j ||y_j - r_j||_Q^2 + ||u_j||_R^2 given y = S z + b."""
    N = cfg.N
    Qbar = np.kron(np.eye(N), cfg.Q)
    QS = Qbar @ S
    P = S.T @ QS
    q = 2.0 * (QS.T @ b)
    r0 = float(b @ (Qbar @ b))
    Rbar = np.kron(np.eye(N), cfg.R)
    P[lay.slices["u"], lay.slices["u"]] += Rbar
    return P, q, r0


def _apply_box(
    lo: np.ndarray, hi: np.ndarray, sl: slice, bounds, N: int
) -> None:
    if bounds is None:
        return
    blo, bhi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    lo[sl] = np.tile(blo, N)
    hi[sl] = np.tile(bhi, N)


def _scenario_blocks(
    model: MdrModel, theta: MsdParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return model.remap(theta)


def build_mpc_oracle(
    truth: DiscreteLTI, cfg: ControllerConfig, x: np.ndarray, r: Signal
) -> ConvexProblem:
    """Condensed finite-horizon tracking problem on the exact model.

    The decision vector is the input sequence; predicted outputs start at the
    current step (a constant term) and outputs are eliminated unless finite
    output bounds require explicit coordinates.
    """
    N, m, p, n = cfg.N, truth.m, truth.p, truth.n
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != n:
        raise DimensionMismatch("oracle needs the full plant state")
    rvec = r.data[:N].reshape(-1)

    # y_j = C A^j x0 + sum_{l<j} C A^{j-1-l} B u_l + D u_j
    Phi = np.zeros((N * n, n))
    Gu = np.zeros((N * n, N * m))
    Phi[:n] = np.eye(n)
    for j in range(1, N):
        rj, rp = slice(j * n, (j + 1) * n), slice((j - 1) * n, j * n)
        Phi[rj] = truth.Ad @ Phi[rp]
        Gu[rj] = truth.Ad @ Gu[rp]
        Gu[rj, (j - 1) * m : j * m] += truth.Bd
    Cbar = np.kron(np.eye(N), truth.Cd)
    Dbar = np.kron(np.eye(N), truth.Dd)

    lay = _Layout(m, N)
    extra_eq_rows, extra_eq_rhs = [], []
    lo = np.full(lay.size, -np.inf)
    hi = np.full(lay.size, np.inf)

    S = np.zeros((N * p, lay.size))
    S[:, lay.slices["u"]] = Cbar @ Gu + Dbar
    b = Cbar @ (Phi @ x) - rvec

    if cfg.y_bounds is not None:
        sl_y = lay.add("y", N * p)
        lo = np.concatenate([lo, np.full(N * p, -np.inf)])
        hi = np.concatenate([hi, np.full(N * p, np.inf)])
        S = np.hstack([S, np.zeros((N * p, N * p))])
        E = np.zeros((N * p, lay.size))
        E[:, sl_y] = np.eye(N * p)
        E[:, lay.slices["u"]] = -(Cbar @ Gu + Dbar)
        extra_eq_rows.append(E)
        extra_eq_rhs.append(Cbar @ (Phi @ x))
        _apply_box(lo, hi, sl_y, cfg.y_bounds, N)

    term_rows = terminal_set(cfg, r.data[min(N, r.data.shape[0] - 1)])
    if term_rows:
        n_k = MSD_N_KNOWN
        sl_t = lay.add("x_term", n_k)
        lo = np.concatenate([lo, np.full(n_k, -np.inf)])
        hi = np.concatenate([hi, np.full(n_k, np.inf)])
        S = np.hstack([S, np.zeros((N * p, n_k))])
        last = slice((N - 1) * n, N * n)
        xN_u = (truth.Ad @ Gu[last])
        xN_u[:, (N - 1) * m :] += truth.Bd
        E = np.zeros((n_k, lay.size))
        E[:, sl_t] = np.eye(n_k)
        E[:, lay.slices["u"]] = -xN_u[:n_k]
        extra_eq_rows.append(E)
        extra_eq_rhs.append((truth.Ad @ (Phi[last] @ x))[:n_k])
        for i, tlo, thi in term_rows:
            lo[sl_t.start + i] = tlo
            hi[sl_t.start + i] = thi

    _apply_box(lo, hi, lay.slices["u"], cfg.u_bounds, N)
    S = _pad_cols(S, lay.size)
    P, q, r0 = _tracking_terms(cfg, lay, S, b)
    q = np.concatenate([q, np.zeros(lay.size - q.shape[0])]) if q.shape[0] < lay.size else q
    eq = None
    if extra_eq_rows:
        eq = (
            np.vstack([_pad_cols(E, lay.size) for E in extra_eq_rows]),
            np.concatenate(extra_eq_rhs),
        )
    return ConvexProblem(
        lay.size, (QuadCost(P=P, q=q, r0=r0),), equalities=eq, lo=lo, hi=hi
    )


def _hybrid_cost_and_rows(
    cfg: ControllerConfig,
    model: MdrModel,
    beh: BehaviorModel,
    lay: _Layout,
    sl_yu: slice,
    sl_sig: slice,
    blocks_theta,
    x_known: np.ndarray,
    buf: IoBuffers,
    rvec: np.ndarray,
    w_path: np.ndarray,
    v_path: np.ndarray,
    eq_rows: list,
    eq_rhs: list,
    lo: np.ndarray,
    hi: np.ndarray,
    lay_extra: dict,
) -> QuadCost:
    """One scenario's cost plus its equality/box rows, shared by both builders."""
    A_k, A_y, B_k, C_k = blocks_theta
    part = model.nominal
    N, m = cfg.N, B_k.shape[1]
    p_k, p_u, n_k = part.p_k, part.p_u, part.n_k
    p = p_k + p_u

    Phi, Gu, Gy = _rollout_maps(A_k, A_y, B_k, N)
    drive = _noise_drive(A_k, w_path, N)
    x_stack_const = Phi @ x_known + drive

    # outputs: known rows from the rollout, unknown rows from the data block
    Ck_bar = np.kron(np.eye(N), C_k)
    Dk_bar = np.kron(np.eye(N), part.D_k)
    S = np.zeros((N * p, lay.size))
    b = np.zeros(N * p)
    known_rows = np.zeros((N * p, N * p_k))
    unknown_rows = np.zeros((N * p, N * p_u))
    for j in range(N):
        known_rows[j * p : j * p + p_k, j * p_k : (j + 1) * p_k] = np.eye(p_k)
        unknown_rows[j * p + p_k : (j + 1) * p, j * p_u : (j + 1) * p_u] = np.eye(p_u)
    Sk = Ck_bar @ Gu + Dk_bar
    S[:, lay.slices["u"]] = known_rows @ Sk
    S[:, sl_yu] = known_rows @ (Ck_bar @ Gy) + unknown_rows
    b += known_rows @ (Ck_bar @ x_stack_const)
    b += v_path.reshape(-1)
    b -= rvec

    P, q, r0 = _tracking_terms(cfg, lay, S, b)
    # slack coordinates hold sigma-tilde = sqrt(lambda_y) * sigma, penalized
    # with unit weight: keeps the Hessian spread flat for stiff lambda_y
    sig_scale = np.sqrt(cfg.lambda_y) if cfg.lambda_y > 0 else 1.0
    P[sl_sig, sl_sig] += np.eye(p_u * cfg.T_ini) * (1.0 if cfg.lambda_y > 0 else 0.0)

    P_b, q_b, r0_b, E_b, f_b = _behavior_terms(
        beh, lay, sl_yu, sl_sig, buf.u_ini_vec(), buf.y_u_ini_vec(p_k),
        cfg.lambda_g, sig_scale,
    )
    P += P_b
    q += q_b
    r0 += r0_b
    if E_b is not None:
        eq_rows.append(E_b)
        eq_rhs.append(f_b)

    if cfg.y_bounds is not None:
        # unknown channels are coordinates; known channels need explicit vars
        ylo = np.tile(np.asarray(cfg.y_bounds[0], dtype=float), N)
        yhi = np.tile(np.asarray(cfg.y_bounds[1], dtype=float), N)
        for j in range(N):
            for c in range(p_u):
                lo[sl_yu.start + j * p_u + c] = max(
                    lo[sl_yu.start + j * p_u + c],
                    ylo[j * p + p_k + c] - v_path[j, p_k + c],
                )
                hi[sl_yu.start + j * p_u + c] = min(
                    hi[sl_yu.start + j * p_u + c],
                    yhi[j * p + p_k + c] - v_path[j, p_k + c],
                )
        sl_yk = lay_extra["add"]("y_known", N * p_k)
        E = np.zeros((N * p_k, sl_yk.stop))
        E[:, sl_yk] = np.eye(N * p_k)
        E[:, lay.slices["u"]] = -Sk
        E[:, sl_yu] = -(Ck_bar @ Gy)
        eq_rows.append(E)
        eq_rhs.append(Ck_bar @ x_stack_const + np.array(
            [v_path[j, c] for j in range(N) for c in range(p_k)]
        ))
        known_lo = np.array([ylo[j * p + c] for j in range(N) for c in range(p_k)])
        known_hi = np.array([yhi[j * p + c] for j in range(N) for c in range(p_k)])
        lay_extra["lo"].append(known_lo)
        lay_extra["hi"].append(known_hi)

    term_rows = terminal_set(cfg, rvec[(N - 1) * p : N * p])
    if term_rows:
        cU, cY, const = _terminal_state_map(
            A_k, A_y, B_k, N, Phi, Gu, Gy, x_known, drive, w_path[N - 1]
        )
        sl_t = lay_extra["add"]("x_term", n_k)
        E = np.zeros((n_k, sl_t.stop))
        E[:, sl_t] = np.eye(n_k)
        E[:, lay.slices["u"]] = -cU
        E[:, sl_yu] = -cY
        eq_rows.append(E)
        eq_rhs.append(const)
        tlo = np.full(n_k, -np.inf)
        thi = np.full(n_k, np.inf)
        for i, lo_i, hi_i in term_rows:
            tlo[i], thi[i] = lo_i, hi_i
        lay_extra["lo"].append(tlo)
        lay_extra["hi"].append(thi)

    return QuadCost(P=P, q=q, r0=r0)


def build_deepc(
    blocks: DataBlocks,
    cfg: ControllerConfig,
    buf: IoBuffers,
    r: Signal,
    *,
    model: MdrModel,
    x_known: np.ndarray,
) -> ConvexProblem:
    """Baseline data-driven problem at the nominal parameters, no uncertainty.

    Decision blocks: input sequence, predicted unknown outputs, and the
    initial-condition slack (the behavior coefficient vector is eliminated by
    its minimum-norm identity, see module docstring). Known outputs come from
    the nominal rollout; there are no sampled disturbance paths.
    """
    return _build_hybrid_problem(
        model, blocks, cfg, x_known, buf, scenarios=None, r=r
    )


def build_mdr(
    model: MdrModel,
    blocks: DataBlocks,
    cfg: ControllerConfig,
    x_known: np.ndarray,
    buf: IoBuffers,
    scenarios: list[Scenario],
    r: Signal,
) -> ConvexProblem:
    """Scenario program: shared input, one epigraph cost per scenario.

    Each scenario rebuilds the known-subsystem blocks at its sampled
    parameters, rolls the known state with its process-noise path, applies
    its measurement-noise path to the outputs, and carries its own predicted
    unknown outputs and slack. Output boxes and the terminal box are enforced
    per scenario.
    """
    if len(scenarios) != cfg.M:
        raise ScenarioCountMismatch(
            f"expected {cfg.M} scenarios, got {len(scenarios)}"
        )
    return _build_hybrid_problem(model, blocks, cfg, x_known, buf, scenarios, r)


def _build_hybrid_problem(
    model: MdrModel,
    blocks: DataBlocks,
    cfg: ControllerConfig,
    x_known: np.ndarray,
    buf: IoBuffers,
    scenarios: list[Scenario] | None,
    r: Signal,
) -> ConvexProblem:
    if not buf.warm:
        raise BuffersNotWarm("need T_ini input/output pairs before solving")
    part = model.nominal
    N, m = cfg.N, part.B_k.shape[1]
    p_u, p_k = part.p_u, part.p_k
    p = p_u + p_k
    n_k = part.n_k
    x_known = np.asarray(x_known, dtype=float).reshape(-1)
    if x_known.shape[0] != n_k:
        raise DimensionMismatch("x_known must match the known-block size")
    rvec = r.data[:N].reshape(-1)
    if rvec.shape[0] != N * p:
        raise DimensionMismatch("reference window shorter than the horizon")

    beh = BehaviorModel(blocks, m, p_u, cfg.T_ini, N)

    nominal_blocks = (part.A_k, model.a_y, part.B_k, part.C_k)
    if scenarios is None:
        scen_list = [None]
    else:
        scen_list = scenarios

    lay = _Layout(m, N)
    per = []
    for i, _ in enumerate(scen_list):
        sl_yu = lay.add(f"yu{i}", N * p_u)
        sl_sig = lay.add(f"sig{i}", p_u * cfg.T_ini)
        per.append((sl_yu, sl_sig))

    lo = np.full(lay.size, -np.inf)
    hi = np.full(lay.size, np.inf)
    _apply_box(lo, hi, lay.slices["u"], cfg.u_bounds, N)

    # extra variables (known-output boxes, terminal states) appended after the
    # core block; collected through a tiny mutable registry
    extra = {"size": lay.size, "lo": [], "hi": []}

    def add_extra(name: str, width: int) -> slice:
        sl = slice(extra["size"], extra["size"] + width)
        extra["size"] += width
        return sl

    extra["add"] = add_extra

    eq_rows: list[np.ndarray] = []
    eq_rhs: list[np.ndarray] = []
    costs = []
    for i, scen in enumerate(scen_list):
        sl_yu, sl_sig = per[i]
        if scen is None:
            blocks_theta = nominal_blocks
            w_path = np.zeros((N, n_k))
            v_path = np.zeros((N, p))
        else:
            blocks_theta = _scenario_blocks(model, scen.theta)
            w_path = scen.w_path.data
            v_path = scen.v_path.data
        costs.append(
            _hybrid_cost_and_rows(
                cfg, model, beh, lay, sl_yu, sl_sig, blocks_theta, x_known,
                buf, rvec, w_path, v_path, eq_rows, eq_rhs, lo, hi, extra,
            )
        )

    n_z = extra["size"]
    if n_z > lay.size:
        pad = n_z - lay.size
        lo = np.concatenate([lo, np.concatenate(extra["lo"]) if extra["lo"] else np.full(pad, -np.inf)])
        hi = np.concatenate([hi, np.concatenate(extra["hi"]) if extra["hi"] else np.full(pad, np.inf)])
        costs = [
            QuadCost(
                P=_pad_matrix(c.P.toarray(), n_z),
                q=np.concatenate([c.q, np.zeros(pad)]),
                r0=c.r0,
            )
            for c in costs
        ]
        eq_rows = [_pad_cols(E, n_z) for E in eq_rows]

    eq = None
    if eq_rows:
        eq = (np.vstack(eq_rows), np.concatenate(eq_rhs))
    return ConvexProblem(n_z, tuple(costs), equalities=eq, lo=lo, hi=hi)


def _pad_matrix(P: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    out[: P.shape[0], : P.shape[1]] = P
    return out


def _pad_cols(E: np.ndarray, n: int) -> np.ndarray:
    if E.shape[1] == n:
        return E
    out = np.zeros((E.shape[0], n))
    out[:, : E.shape[1]] = E
    return out


class _RecedingController:
    """Shared receding-horizon driver: warm-up, fallback, buffer upkeep.

    The first T_ini steps apply zero input while the history buffers fill;
    afterwards each step builds the controller's problem, solves it, applies
    the first input and pushes (input, measurement) into the buffers. An
    infeasible or unusable solve falls back to the previously applied input
    (zero-order hold) and flags the step.
    """

    #: residual level beyond which a MAX_ITERATIONS result is not trusted
    USABLE_RESIDUAL = 1e-4

    def __init__(self, cfg: ControllerConfig, m: int, p: int):
        self.cfg = cfg
        self.m = m
        self.p = p
        self.buffers = IoBuffers(cfg.T_ini, m, p)
        self.last_u = np.zeros(m)
        self.err_sum = np.zeros(p)
        self.fallback_count = 0
        self.step_count = 0

    def _build(self, known_state, r_window, rng_seed) -> ConvexProblem:
        raise NotImplementedError

    def _effective_reference(self, r: Signal, measurement: np.ndarray) -> Signal:
        if not self.cfg.integral_action:
            return r
        self.err_sum = self.err_sum + (r.data[0] - measurement)
        return Signal(r.data + self.cfg.k_integral * self.err_sum)

    def receding_step(
        self,
        measurement: np.ndarray,
        known_state: np.ndarray,
        r: Signal,
        rng_seed: int = 0,
    ) -> ControlStep:
        measurement = np.asarray(measurement, dtype=float).reshape(-1)
        cfg = self.cfg
        N, p = cfg.N, self.p
        if not self.buffers.warm:
            u = np.zeros(self.m)
            self.buffers.push(u, measurement)
            self.last_u = u
            self.step_count += 1
            return ControlStep(
                u_applied=u,
                predicted_y=Signal(np.zeros((N, p))),
                t_star=float("nan"),
                per_scenario_costs=(),
                solver_status=SolveStatus.OPTIMAL,
                fallback=False,
            )

        r_eff = self._effective_reference(r, measurement)
        problem = self._build(known_state, r_eff, rng_seed)
        result = solve(problem, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
        usable = result.status is SolveStatus.OPTIMAL or (
            result.status is SolveStatus.MAX_ITERATIONS
            and max(result.kkt_primal, result.kkt_dual) <= self.USABLE_RESIDUAL
        )
        if usable:
            u = result.z_star[: self.m].copy()
            costs = tuple(
                eval_cost(cst, result.z_star) for cst in problem.quad_epigraph
            )
            pred = self._predicted_outputs(result.z_star, known_state, r_eff)
            step = ControlStep(
                u_applied=u,
                predicted_y=pred,
                t_star=result.t_star,
                per_scenario_costs=costs,
                solver_status=result.status,
                fallback=False,
            )
        else:
            self.fallback_count += 1
            u = self.last_u.copy()
            step = ControlStep(
                u_applied=u,
                predicted_y=Signal(np.zeros((N, p))),
                t_star=float("nan"),
                per_scenario_costs=(),
                solver_status=result.status,
                fallback=True,
            )
        self.buffers.push(u, measurement)
        self.last_u = u
        self.step_count += 1
        return step

    def _predicted_outputs(self, z, known_state, r) -> Signal:
        return Signal(np.zeros((self.cfg.N, self.p)))


class OracleController(_RecedingController):
    """Exact-model tracking controller; ``known_state`` is the full state."""

    def __init__(self, truth: DiscreteLTI, cfg: ControllerConfig):
        super().__init__(cfg, truth.m, truth.p)
        self.truth = truth

    def _build(self, known_state, r_window, rng_seed):
        return build_mpc_oracle(self.truth, self.cfg, known_state, r_window)

    def _predicted_outputs(self, z, known_state, r) -> Signal:
        N, n, m = self.cfg.N, self.truth.n, self.truth.m
        u = z[: N * m].reshape(N, m)
        ys = np.zeros((N, self.truth.p))
        x = np.asarray(known_state, dtype=float).reshape(-1)
        for j in range(N):
            ys[j] = self.truth.Cd @ x + self.truth.Dd @ u[j]
            x = self.truth.Ad @ x + self.truth.Bd @ u[j]
        return Signal(ys)


class DeepcController(_RecedingController):
    """Nominal hybrid data-driven controller (the comparison baseline)."""

    def __init__(self, model: MdrModel, blocks: DataBlocks, cfg: ControllerConfig):
        part = model.nominal
        super().__init__(cfg, part.B_k.shape[1], part.p_k + part.p_u)
        self.model = model
        self.blocks = blocks

    def _build(self, known_state, r_window, rng_seed):
        return build_deepc(
            self.blocks, self.cfg, self.buffers, r_window,
            model=self.model, x_known=known_state,
        )

    def _predicted_outputs(self, z, known_state, r) -> Signal:
        return _hybrid_predicted_outputs(
            self.model, self.cfg, z, 0, known_state, None
        )


class MdrController(_RecedingController):
    """Distributionally robust scenario controller."""

    def __init__(
        self,
        model: MdrModel,
        blocks: DataBlocks,
        cfg: ControllerConfig,
        spec_w: AmbiguitySpec,
        spec_v: AmbiguitySpec,
    ):
        part = model.nominal
        super().__init__(cfg, part.B_k.shape[1], part.p_k + part.p_u)
        self.model = model
        self.blocks = blocks
        self.spec_w = spec_w
        self.spec_v = spec_v
        self._last_scenarios: list[Scenario] = []

    def _build(self, known_state, r_window, rng_seed):
        self._last_scenarios = draw_scenarios(
            self.model.theta_box, self.spec_w, self.spec_v,
            self.cfg.M, self.cfg.N, rng_seed, nominal=self.model.nominal_params,
        )
        return build_mdr(
            self.model, self.blocks, self.cfg, known_state, self.buffers,
            self._last_scenarios, r_window,
        )

    def _predicted_outputs(self, z, known_state, r) -> Signal:
        if not self._last_scenarios:
            return Signal(np.zeros((self.cfg.N, self.p)))
        # report the binding (worst-cost) scenario's prediction
        part = self.model.nominal
        costs = []
        for i, scen in enumerate(self._last_scenarios):
            costs.append((i, scen))
        worst = max(
            costs,
            key=lambda pair: _scenario_cost_value(
                self.model, self.cfg, z, pair[0], known_state, pair[1], r
            ),
        )
        return _hybrid_predicted_outputs(
            self.model, self.cfg, z, worst[0], known_state, worst[1]
        )


def _hybrid_predicted_outputs(
    model: MdrModel,
    cfg: ControllerConfig,
    z: np.ndarray,
    scenario_index: int,
    x_known: np.ndarray,
    scen: Scenario | None,
) -> Signal:
    """Predicted outputs of one scenario block at the solved point."""
    part = model.nominal
    N, m = cfg.N, part.B_k.shape[1]
    p_k, p_u, n_k = part.p_k, part.p_u, part.n_k
    if scen is None:
        A_k, A_y, B_k, C_k = part.A_k, model.a_y, part.B_k, part.C_k
        w_path = np.zeros((N, n_k))
        v_path = np.zeros((N, p_k + p_u))
    else:
        A_k, A_y, B_k, C_k = model.remap(scen.theta)
        w_path = scen.w_path.data
        v_path = scen.v_path.data
    n_u = m * N
    per = p_u * N + p_u * cfg.T_ini
    yu = z[n_u + scenario_index * per : n_u + scenario_index * per + p_u * N]
    u = z[:n_u].reshape(N, m)
    yu = yu.reshape(N, p_u)
    ys = np.zeros((N, p_k + p_u))
    x = np.asarray(x_known, dtype=float).reshape(-1)
    for j in range(N):
        ys[j, :p_k] = C_k @ x + part.D_k @ u[j] + v_path[j, :p_k]
        ys[j, p_k:] = yu[j] + v_path[j, p_k:]
        x = A_k @ x + A_y @ yu[j] + B_k @ u[j] + w_path[j]
    return Signal(ys)


def _scenario_cost_value(
    model: MdrModel,
    cfg: ControllerConfig,
    z: np.ndarray,
    scenario_index: int,
    x_known: np.ndarray,
    scen: Scenario,
    r: Signal,
) -> float:
    ys = _hybrid_predicted_outputs(model, cfg, z, scenario_index, x_known, scen)
    err = ys.data - r.data[: cfg.N]
    u = z[: cfg.N * model.nominal.B_k.shape[1]].reshape(cfg.N, -1)
    val = 0.0
    for j in range(cfg.N):
        val += err[j] @ cfg.Q @ err[j] + u[j] @ cfg.R @ u[j]
    return val


def receding_step(
    controller: _RecedingController,
    measurement: np.ndarray,
    known_state: np.ndarray,
    r: Signal,
    rng_seed: int = 0,
) -> ControlStep:
    """One receding-horizon step; see :meth:`_RecedingController.receding_step`."""
    return controller.receding_step(measurement, known_state, r, rng_seed)

"""Triple-mass-spring-damper ground truth and its hybrid known/unknown split.

The chain is wall -- (k1,c1) -- m1 -- (k2,c2) -- m2 -- (k3,c3) -- m3 with one
force actuator per mass and position outputs. Masses 1-2 form the modeled
(known) subsystem; mass 3 is the data-driven (unknown) one. States are built
as (x1, x2, x3, v1, v2, v3) and re-ordered to (x1, x2, v1, v2, x3, v3) so the
known block occupies the leading coordinates and the partition is literal
block slicing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from .errors import BadSplit, DimensionMismatch, ExcitationFailed, NonPositiveMass
from .trajkit import Signal, persistently_exciting

# State permutation taking build order (x1,x2,x3,v1,v2,v3) to hybrid order
# (x1,x2,v1,v2 | x3,v3): known block first, mass-3 block last.
MSD_HYBRID_ORDER = (0, 1, 3, 4, 2, 5)

# Known/unknown split sizes of the permuted 6-state model.
MSD_N_KNOWN = 4
MSD_P_KNOWN = 2


@dataclass(frozen=True)
class MsdParams:
    """Chain parameters; defaults are the nominal desk-scale configuration."""

    m1: float = 1.0
    m2: float = 1.0
    m3: float = 1.0
    k1: float = 100.0
    k2: float = 100.0
    k3: float = 100.0
    c1: float = 5.0
    c2: float = 5.0
    c3: float = 5.0

    def __post_init__(self) -> None:
        if min(self.m1, self.m2, self.m3) <= 0.0:
            raise NonPositiveMass("all masses must be positive")
        if min(self.k1, self.k2, self.k3, self.c1, self.c2, self.c3) < 0.0:
            raise NonPositiveMass("stiffness and damping must be non-negative")


@dataclass(frozen=True)
class ContinuousLTI:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


@dataclass(frozen=True)
class DiscreteLTI:
    Ad: np.ndarray
    Bd: np.ndarray
    Cd: np.ndarray
    Dd: np.ndarray
    Ts: float

    @property
    def n(self) -> int:
        return self.Ad.shape[0]

    @property
    def m(self) -> int:
        return self.Bd.shape[1]

    @property
    def p(self) -> int:
        return self.Cd.shape[0]


@dataclass(frozen=True)
class HybridPartition:
    """Contiguous block split of a discrete model into known/unknown parts.

    The (known-output, unknown-state) output block is structurally zero and
    not stored; :meth:`reassemble` puts the blocks back together.
    """

    n_k: int
    n_u: int
    p_k: int
    p_u: int
    A_k: np.ndarray
    A_ku: np.ndarray
    A_uk: np.ndarray
    A_u: np.ndarray
    B_k: np.ndarray
    B_u: np.ndarray
    C_k: np.ndarray
    C_uk: np.ndarray
    C_u: np.ndarray
    D_k: np.ndarray
    D_u: np.ndarray

    def reassemble(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Rebuild (Ad, Bd, Cd, Dd) from the blocks."""
        A = np.block([[self.A_k, self.A_ku], [self.A_uk, self.A_u]])
        B = np.vstack([self.B_k, self.B_u])
        C = np.block(
            [[self.C_k, np.zeros((self.p_k, self.n_u))], [self.C_uk, self.C_u]]
        )
        D = np.vstack([self.D_k, self.D_u])
        return A, B, C, D


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise levels: per-state process std, per-output measurement std."""

    sigma_w: float = 0.0
    sigma_v: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_w < 0.0 or self.sigma_v < 0.0:
            raise DimensionMismatch("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class ThetaBox:
    """Uniform uncertainty intervals for the third mass's spring and damper."""

    k3_range: tuple[float, float] = (80.0, 120.0)
    c3_range: tuple[float, float] = (3.0, 7.0)

    def __post_init__(self) -> None:
        if self.k3_range[0] > self.k3_range[1] or self.c3_range[0] > self.c3_range[1]:
            raise DimensionMismatch("interval lower bound exceeds upper bound")


def build_msd(p: MsdParams) -> ContinuousLTI:
    """Continuous 6-state chain model in build order (positions, velocities).

    Force balance per mass (Newton), chain topology: spring/damper i couples
    mass i to mass i-1 (wall for i=1). Inputs are one force per mass; outputs
    are the three positions; no feedthrough.
    """
    m1, m2, m3 = p.m1, p.m2, p.m3
    K = np.array(
        [
            [-(p.k1 + p.k2) / m1, p.k2 / m1, 0.0],
            [p.k2 / m2, -(p.k2 + p.k3) / m2, p.k3 / m2],
            [0.0, p.k3 / m3, -p.k3 / m3],
        ]
    )
    G = np.array(
        [
            [-(p.c1 + p.c2) / m1, p.c2 / m1, 0.0],
            [p.c2 / m2, -(p.c2 + p.c3) / m2, p.c3 / m2],
            [0.0, p.c3 / m3, -p.c3 / m3],
        ]
    )
    A = np.block([[np.zeros((3, 3)), np.eye(3)], [K, G]])
    B = np.vstack([np.zeros((3, 3)), np.diag([1.0 / m1, 1.0 / m2, 1.0 / m3])])
    C = np.hstack([np.eye(3), np.zeros((3, 3))])
    D = np.zeros((3, 3))
    return ContinuousLTI(A=A, B=B, C=C, D=D)


def discretize_zoh(c: ContinuousLTI, Ts: float) -> DiscreteLTI:
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    if Ts <= 0.0:
        raise DimensionMismatch("sample time must be positive")
    n = c.A.shape[0]
    m = c.B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = c.A
    aug[:n, n:] = c.B
    phi = expm(aug * Ts)
    return DiscreteLTI(
        Ad=phi[:n, :n], Bd=phi[:n, n:], Cd=c.C.copy(), Dd=c.D.copy(), Ts=Ts
    )


def reorder_states(d: DiscreteLTI, order: tuple[int, ...]) -> DiscreteLTI:
    """Apply a state permutation; input/output behavior is unchanged."""
    idx = np.asarray(order)
    if sorted(order) != list(range(d.n)):
        raise DimensionMismatch(f"{order} is not a permutation of 0..{d.n - 1}")
    return DiscreteLTI(
        Ad=d.Ad[np.ix_(idx, idx)],
        Bd=d.Bd[idx, :],
        Cd=d.Cd[:, idx],
        Dd=d.Dd.copy(),
        Ts=d.Ts,
    )


def msd_discrete_hybrid(p: MsdParams, Ts: float) -> DiscreteLTI:
    """Build, discretize and permute the chain into hybrid state order."""
    return reorder_states(discretize_zoh(build_msd(p), Ts), MSD_HYBRID_ORDER)


def partition_hybrid(d: DiscreteLTI, n_k: int, p_k: int) -> HybridPartition:
    """Split a discrete model into contiguous known/unknown blocks.

    The caller is responsible for having the state in known-first order
    (see :func:`reorder_states`); reassembling the blocks reproduces the
    input matrices entry-wise.

    Raises:
        BadSplit: if ``n_k`` is not in ``1 .. n-1`` or ``p_k`` not in ``0 .. p``.
    """
    n, p = d.n, d.p
    if not 0 < n_k < n:
        raise BadSplit(f"n_k={n_k} must satisfy 0 < n_k < {n}")
    if not 0 <= p_k <= p:
        raise BadSplit(f"p_k={p_k} must satisfy 0 <= p_k <= {p}")
    n_u, p_u = n - n_k, p - p_k
    return HybridPartition(
        n_k=n_k,
        n_u=n_u,
        p_k=p_k,
        p_u=p_u,
        A_k=d.Ad[:n_k, :n_k],
        A_ku=d.Ad[:n_k, n_k:],
        A_uk=d.Ad[n_k:, :n_k],
        A_u=d.Ad[n_k:, n_k:],
        B_k=d.Bd[:n_k, :],
        B_u=d.Bd[n_k:, :],
        C_k=d.Cd[:p_k, :n_k],
        C_uk=d.Cd[p_k:, :n_k],
        C_u=d.Cd[p_k:, n_k:],
        D_k=d.Dd[:p_k, :],
        D_u=d.Dd[p_k:, :],
    )


def simulate(
    d: DiscreteLTI,
    x0: np.ndarray,
    u_seq: Signal,
    noise: NoiseSpec = NoiseSpec(),
    rng_seed: int = 0,
) -> tuple[Signal, Signal]:
    """Simulate x+ = Ad x + Bd u + w, y = Cd x + Dd u + v for len(u_seq) steps.

    Returns ``(states, outputs)`` where states has T+1 samples (including the
    terminal state) and outputs has T. Same seed, same trajectories.
    """
    if u_seq.dim != d.m:
        raise DimensionMismatch(f"input dim {u_seq.dim} != model m {d.m}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != d.n:
        raise DimensionMismatch(f"x0 dim {x0.shape[0]} != model n {d.n}")
    T = u_seq.length
    rng = np.random.default_rng(rng_seed)
    w = rng.normal(0.0, 1.0, size=(T, d.n)) * noise.sigma_w
    v = rng.normal(0.0, 1.0, size=(T, d.p)) * noise.sigma_v
    xs = np.empty((T + 1, d.n))
    ys = np.empty((T, d.p))
    xs[0] = x0
    for k in range(T):
        u = u_seq.data[k]
        ys[k] = d.Cd @ xs[k] + d.Dd @ u + v[k]
        xs[k + 1] = d.Ad @ xs[k] + d.Bd @ u + w[k]
    return Signal(xs), Signal(ys)


def sample_theta(box: ThetaBox, rng_seed: int, nominal: MsdParams = MsdParams()) -> MsdParams:
    """Draw (k3, c3) uniformly from the box; all other fields stay nominal."""
    rng = np.random.default_rng(rng_seed)
    k3 = rng.uniform(box.k3_range[0], box.k3_range[1])
    c3 = rng.uniform(box.c3_range[0], box.c3_range[1])
    return replace(nominal, k3=float(k3), c3=float(c3))


def collect_data_full(
    d: DiscreteLTI,
    part: HybridPartition,
    T: int,
    excitation_amplitude: float,
    noise: NoiseSpec,
    rng_seed: int,
    pe_order: int,
) -> tuple[Signal, Signal, Signal]:
    """Offline experiment returning ``(u_d, states, outputs)`` in full.

    Same contract as :func:`collect_data` but keeps the simulated state
    trajectory and all output channels, which residual estimation needs.
    """
    if T < 1:
        raise DimensionMismatch("T must be >= 1")
    x0 = np.zeros(d.n)
    for tag in (0, 2):
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, tag]))
        u_d = Signal(rng.uniform(-excitation_amplitude, excitation_amplitude, (T, d.m)))
        if persistently_exciting(u_d, pe_order):
            sim_seed = np.random.SeedSequence([rng_seed, 1])
            xs, y = simulate(d, x0, u_d, noise, rng_seed=sim_seed)
            return u_d, xs, y
    raise ExcitationFailed(
        f"input of length {T} not persistently exciting at order {pe_order}"
    )


def collect_data(
    d: DiscreteLTI,
    part: HybridPartition,
    T: int,
    excitation_amplitude: float,
    noise: NoiseSpec,
    rng_seed: int,
    pe_order: int,
) -> tuple[Signal, Signal]:
    """Run the offline experiment: uniform random input, unknown-output record.

    The input is i.i.d. Uniform(-a, a) per channel and must pass the
    persistency-of-excitation check at ``pe_order``; on failure it is redrawn
    once with a derived seed before giving up. The returned output signal is
    the unknown-subsystem slice of the measured outputs.

    Raises:
        ExcitationFailed: if both excitation draws fail the PE check.
    """
    u_d, _, y = collect_data_full(
        d, part, T, excitation_amplitude, noise, rng_seed, pe_order
    )
    return u_d, Signal(y.data[:, part.p_k :])


def mechanical_energy(p: MsdParams, x: np.ndarray) -> float:
    """Kinetic plus spring potential energy of a hybrid-ordered state."""
    x1, x2, v1, v2, x3, v3 = np.asarray(x, dtype=float).reshape(-1)
    kinetic = 0.5 * (p.m1 * v1**2 + p.m2 * v2**2 + p.m3 * v3**2)
    potential = 0.5 * (p.k1 * x1**2 + p.k2 * (x2 - x1) ** 2 + p.k3 * (x3 - x2) ** 2)
    return kinetic + potential

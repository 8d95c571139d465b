"""Stochastic-uncertainty machinery around empirical disturbance distributions.

Process and measurement noise are never observed directly; they are estimated
as one-step residuals of the hybrid model against recorded data. The residual
samples form empirical distributions, and robustness is expressed as a
1-Wasserstein ball around them: any distribution within radius epsilon is
considered plausible. Scenario generation samples a member distribution of
each ball plus a parameter vector, then draws noise paths from it.

The 1-Wasserstein distance is computed channel-wise (1-D closed form) and
summed over channels. Ball members are produced by perturbing atoms under an
explicit shift budget, which is itself a transport coupling, so membership
holds by construction rather than by rejection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .plant import HybridPartition, MsdParams, ThetaBox, sample_theta
from .trajkit import Signal


@dataclass(frozen=True)
class EmpiricalDist:
    """Uniformly weighted atoms of a d-dimensional empirical distribution."""

    atoms: np.ndarray  # (S, d)

    def __post_init__(self) -> None:
        arr = np.asarray(self.atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionMismatch(
                f"atoms must form a (S, d) array with S >= 1, got {arr.shape}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "atoms", arr)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def point_mass(cls, vec: np.ndarray) -> "EmpiricalDist":
        return cls(np.asarray(vec, dtype=float).reshape(1, -1))


@dataclass(frozen=True)
class AmbiguitySpec:
    """1-Wasserstein ball: center distribution plus radius (order fixed to 1)."""

    center: EmpiricalDist
    radius: float
    order: int = 1

    def __post_init__(self) -> None:
        if self.radius < 0.0:
            raise DimensionMismatch("ambiguity radius must be >= 0")
        if self.order != 1:
            raise DimensionMismatch("only the 1-Wasserstein order is supported")


@dataclass(frozen=True)
class Scenario:
    """One sampled uncertainty realization for the scenario program."""

    theta: MsdParams
    w_path: Signal  # length N, dim n_k
    v_path: Signal  # length N, dim p


def estimate_residuals(
    part: HybridPartition,
    u: Signal,
    y: Signal,
    x_known: Signal,
    a_y: np.ndarray | None = None,
) -> tuple[EmpiricalDist, EmpiricalDist]:
    """One-step residuals of the hybrid model against recorded data.

    The process residual at step k is the known-state prediction error

        w_k = x_known[k+1] - (A_k x_known[k] + A_y y_u[k] + B_k u[k])

    where ``a_y`` defaults to the position column of the discrete coupling
    block, matching the controller's prediction model. The measurement
    residual covers all output channels: known channels against
    C_k x_known + D_k u, the unknown channel against a local two-state
    reconstruction of the unknown block from neighbouring unknown-output
    samples (its states are never measured). Both residuals vanish on
    noiseless model-consistent data.

    Returns:
        ``(w_samples, v_samples)`` with dimensions ``n_k`` and ``p``.
    """
    if u.dim != part.B_k.shape[1] or y.dim != part.p_k + part.p_u:
        raise DimensionMismatch("input/output dims do not match the partition")
    if x_known.dim != part.n_k:
        raise DimensionMismatch(
            f"x_known dim {x_known.dim} != known block size {part.n_k}"
        )
    if a_y is None:
        a_y = part.A_ku[:, : part.p_u]
    K = min(u.length, y.length, x_known.length - 1)
    if K < 2:
        raise DimensionMismatch("need at least 2 aligned steps for residuals")

    y_u = y.data[:K, part.p_k :]
    w = (
        x_known.data[1 : K + 1]
        - x_known.data[:K] @ part.A_k.T
        - y_u @ np.asarray(a_y).T
        - u.data[:K] @ part.B_k.T
    )

    # Known output channels: direct prediction error.
    v_known = y.data[:K, : part.p_k] - x_known.data[:K] @ part.C_k.T - u.data[:K] @ part.D_k.T

    # Unknown channels: fit the 2-(or n_u-)state unknown block to a local
    # window of unknown outputs, leave the centre sample's misfit as noise.
    v_unknown = _unknown_output_residuals(part, u.data[:K], y.data[:K], x_known.data[:K])

    v = np.hstack([v_known, v_unknown])
    return EmpiricalDist(w), EmpiricalDist(v)


def _unknown_output_residuals(
    part: HybridPartition, u: np.ndarray, y: np.ndarray, xk: np.ndarray
) -> np.ndarray:
    """Least-squares misfit of each unknown-output sample in a 3-point window.

    For every interior step k the unknown state at k-1 is fit to the three
    measured unknown outputs at k-1, k, k+1 using the nominal unknown-block
    dynamics (driven by the measured known state and input); the residual at
    k is the centre equation's misfit. Exact data gives zero misfit; endpoint
    steps reuse the nearest interior fit.
    """
    K = u.shape[0]
    p_u, n_u = part.p_u, part.n_u
    y_u = y[:, part.p_k :]
    out = np.zeros((K, p_u))
    if K < 3:
        return out

    # y_u[k-1+i] = C_u A_u^i x_u[k-1] + (known-state/input drive) for i=0,1,2
    C0 = part.C_u
    C1 = part.C_u @ part.A_u
    C2 = C1 @ part.A_u
    obs = np.vstack([C0, C1, C2])  # (3 p_u, n_u)
    pinv_obs = np.linalg.pinv(obs)
    proj = obs @ pinv_obs  # projector onto the observable range

    for k in range(1, K - 1):
        drive1 = part.A_uk @ xk[k - 1] + part.B_u @ u[k - 1]
        drive2 = part.A_u @ drive1 + part.A_uk @ xk[k] + part.B_u @ u[k]
        rhs = np.concatenate(
            [
                y_u[k - 1] - part.C_uk @ xk[k - 1] - part.D_u @ u[k - 1],
                y_u[k] - part.C_uk @ xk[k] - part.D_u @ u[k] - C0 @ drive1,
                y_u[k + 1] - part.C_uk @ xk[k + 1] - part.D_u @ u[k + 1] - C0 @ drive2,
            ]
        )
        misfit = rhs - proj @ rhs
        out[k] = misfit[p_u : 2 * p_u]
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def w1_distance(P: EmpiricalDist, Q: EmpiricalDist) -> float:
    """1-Wasserstein distance, computed per channel and summed.

    Equal atom counts reduce to the mean absolute difference of sorted
    samples; otherwise the piecewise-constant quantile functions are
    integrated over the merged probability breakpoints.
    """
    if P.dim != Q.dim:
        raise DimensionMismatch(f"dimension mismatch: {P.dim} vs {Q.dim}")
    total = 0.0
    for ch in range(P.dim):
        a = np.sort(P.atoms[:, ch])
        b = np.sort(Q.atoms[:, ch])
        if a.size == b.size:
            total += float(np.mean(np.abs(a - b)))
        else:
            total += _quantile_integral(a, b)
    return total


def _quantile_integral(a: np.ndarray, b: np.ndarray) -> float:
    """Integral of |F_a^{-1} - F_b^{-1}| over (0, 1) for sorted samples."""
    Sa, Sb = a.size, b.size
    cuts = np.union1d(np.arange(1, Sa + 1) / Sa, np.arange(1, Sb + 1) / Sb)
    prev = 0.0
    total = 0.0
    for q in cuts:
        mid = 0.5 * (prev + q)
        qa = a[min(int(np.ceil(mid * Sa)) - 1, Sa - 1)] if mid > 0 else a[0]
        qb = b[min(int(np.ceil(mid * Sb)) - 1, Sb - 1)] if mid > 0 else b[0]
        total += (q - prev) * abs(qa - qb)
        prev = q
    return float(total)


def sample_dist_in_ball(spec: AmbiguitySpec, rng_seed: int) -> EmpiricalDist:
    """Draw a random member of the ambiguity ball by perturbing atoms.

    Atoms are shifted by random vectors rescaled so the summed per-channel
    mean absolute shift is at most the radius; the identity coupling between
    original and shifted atoms then witnesses W1 <= radius.
    """
    if spec.radius == 0.0:
        return spec.center
    rng = np.random.default_rng(rng_seed)
    shifts = rng.normal(size=spec.center.atoms.shape)
    cost = float(np.sum(np.mean(np.abs(shifts), axis=0)))
    if cost == 0.0:
        return spec.center
    budget = spec.radius * rng.uniform(0.0, 1.0)
    shifts *= budget / cost
    return EmpiricalDist(spec.center.atoms + shifts)


def draw_scenarios(
    box: ThetaBox,
    spec_w: AmbiguitySpec,
    spec_v: AmbiguitySpec,
    M: int,
    N: int,
    rng_seed: int,
    nominal: MsdParams = MsdParams(),
) -> list[Scenario]:
    """Sample M scenarios: a parameter draw plus noise paths of length N.

    Scenario i uses the derived seed ``rng_seed + i``, so scenarios can be
    generated independently (and in parallel) with identical results.
    """
    if M < 1 or N < 1:
        raise DimensionMismatch("M and N must be >= 1")
    out = []
    for i in range(M):
        seed_i = rng_seed + i
        theta = sample_theta(box, seed_i, nominal=nominal)
        dist_w = sample_dist_in_ball(spec_w, seed_i + 1_000_003)
        dist_v = sample_dist_in_ball(spec_v, seed_i + 2_000_003)
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, i, 7]))
        w_path = dist_w.atoms[rng.integers(0, dist_w.size, size=N)]
        v_path = dist_v.atoms[rng.integers(0, dist_v.size, size=N)]
        out.append(Scenario(theta=theta, w_path=Signal(w_path), v_path=Signal(v_path)))
    return out


def update_dist(
    d: EmpiricalDist, new_samples: np.ndarray, window: int
) -> EmpiricalDist:
    """Append samples and keep the most recent ``window`` atoms."""
    arr = np.asarray(new_samples, dtype=float)
    if arr.size == 0:
        return d
    if arr.ndim == 1:
        arr = arr.reshape(-1, d.dim) if d.dim > 1 else arr.reshape(-1, 1)
    if arr.shape[1] != d.dim:
        raise DimensionMismatch(f"sample dim {arr.shape[1]} != atom dim {d.dim}")
    merged = np.vstack([d.atoms, arr])
    if window < 1:
        raise DimensionMismatch("window must be >= 1")
    return EmpiricalDist(merged[-window:])


def dist_to_csv(d: EmpiricalDist, path: str) -> None:
    """Write atoms one per row with header ``ch0,ch1,...``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"ch{i}" for i in range(d.dim)])
        for row in d.atoms:
            writer.writerow([f"{v:.17g}" for v in row])


def dist_from_csv(path: str) -> EmpiricalDist:
    """Read a distribution written by :func:`dist_to_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return EmpiricalDist(np.asarray(rows))

"""Trajectory-data algebra: signals, block-Hankel matrices, excitation checks.

A :class:`Signal` is a finite sequence of d-dimensional samples. Its
block-Hankel matrix of depth ``L`` stacks every sliding window of ``L``
consecutive samples as one column, so the block entry at block-row ``i``,
column ``j`` is sample ``i + j`` (0-based). Persistency of excitation of a
given order is the full-row-rank condition on the Hankel matrix of that
depth, which is what makes the collected data informative enough to span
every system trajectory of matching length.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DepthExceedsData, DepthMismatch, DimensionMismatch

# Relative singular-value cutoff for numerical rank decisions.
RANK_RTOL = 1e-9


@dataclass(frozen=True)
class Signal:
    """A length-T sequence of d-dimensional samples, stored as a (T, d) array."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.atleast_1d(np.asarray(self.data, dtype=float))
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionMismatch(
                f"signal must be a (T, d) array with T >= 1, got shape {arr.shape}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def window(self, start: int, count: int) -> np.ndarray:
        """Samples ``start .. start+count-1`` flattened to a single vector."""
        if start < 0 or start + count > self.length:
            raise DepthExceedsData(
                f"window [{start}, {start + count}) outside signal of length {self.length}"
            )
        return self.data[start : start + count].reshape(-1)


@dataclass(frozen=True)
class HankelMatrix:
    """Block-Hankel arrangement of a signal: (d*L) rows by (T-L+1) columns."""

    data: np.ndarray
    depth: int
    block_dim: int

    @property
    def columns(self) -> int:
        return self.data.shape[1]

    def block_row(self, i: int) -> np.ndarray:
        """Rows of block-row ``i`` (0-based), a (d, T-L+1) slice."""
        d = self.block_dim
        return self.data[i * d : (i + 1) * d, :]


def build_hankel(s: Signal, depth: int) -> HankelMatrix:
    """Build the depth-``L`` block-Hankel matrix of ``s``.

    Column ``j`` is the flattened window ``(s_j, ..., s_{j+L-1})``, so block
    entry ``(i, j)`` equals sample ``s_{i+j}`` (0-based index law).

    Raises:
        DepthExceedsData: if ``depth`` is not in ``1 .. s.length``.
    """
    T, d = s.length, s.dim
    if depth < 1 or depth > T:
        raise DepthExceedsData(f"depth {depth} not in [1, {T}]")
    cols = T - depth + 1
    H = np.empty((d * depth, cols))
    for j in range(cols):
        H[:, j] = s.data[j : j + depth].reshape(-1)
    H.flags.writeable = False
    return HankelMatrix(data=H, depth=depth, block_dim=d)


def persistently_exciting(u: Signal, order: int) -> bool:
    """Whether ``u`` is persistently exciting of the given order.

    True iff the depth-``order`` Hankel matrix of ``u`` has full row rank
    ``d * order``, judged on singular values with relative tolerance
    ``RANK_RTOL`` against the largest one.

    Raises:
        DepthExceedsData: if ``order`` exceeds the signal length.
    """
    H = build_hankel(u, order)
    target = u.dim * order
    if H.columns < target:
        return False
    sv = np.linalg.svd(H.data, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return False
    rank = int(np.count_nonzero(sv > RANK_RTOL * sv[0]))
    return rank == target


def split_past_future(
    H: HankelMatrix, T_ini: int, N: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split a depth-(T_ini+N) Hankel matrix into past and future row blocks.

    Returns ``(past, future)`` with ``d*T_ini`` and ``d*N`` rows; stacking
    them vertically reproduces ``H.data``.

    Raises:
        DepthMismatch: if ``H.depth != T_ini + N``.
    """
    if T_ini < 0 or N < 0 or H.depth != T_ini + N:
        raise DepthMismatch(
            f"depth {H.depth} does not split into T_ini={T_ini} + N={N}"
        )
    cut = H.block_dim * T_ini
    return H.data[:cut, :], H.data[cut:, :]


def signal_to_csv(s: Signal, path: str) -> None:
    """Write a signal as CSV with header ``t,ch0,ch1,...``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"ch{i}" for i in range(s.dim)])
        for t in range(s.length):
            writer.writerow([t] + [f"{v:.17g}" for v in s.data[t]])


def signal_from_csv(path: str) -> Signal:
    """Read a signal written by :func:`signal_to_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t":
            raise DimensionMismatch(f"{path}: expected header starting with 't'")
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    return Signal(np.asarray(rows))

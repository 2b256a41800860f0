"""Real, antipodally symmetric spherical harmonics and channel normalization.

Basis convention (MRtrix3 style, even degrees only), columns ordered by
degree ``l = 0, 2, ..., L`` and within a degree by ``m = -l, ..., l``::

    m < 0:  sqrt(2) * Im(Y_l^|m|)
    m = 0:  Y_l^0
    m > 0:  sqrt(2) * Re(Y_l^m)

``Y_l^m`` is the orthonormal complex harmonic with the Condon-Shortley phase
(``scipy.special.sph_harm_y``). The basis is orthonormal on the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.special import sph_harm_y


class RankDeficientError(np.linalg.LinAlgError):
    """The basis matrix cannot be inverted in the least-squares sense."""


class DegenerateChannelError(ValueError):
    """A channel has zero variance over the masked voxels."""


def n_coefficients(order: int) -> int:
    """Number of coefficients of an even-order symmetric basis, ``(L+1)(L+2)/2``."""
    _check_order(order)
    return (order + 1) * (order + 2) // 2


def degree_blocks(order: int) -> list[int]:
    """Sizes of the per-degree coefficient blocks, e.g. ``[1, 5, 9, 13]`` for L=6."""
    _check_order(order)
    return [2 * l + 1 for l in range(0, order + 1, 2)]


def channel_groups(n_channels: int) -> list[int]:
    """Partition ``n_channels`` into consecutive SH degree blocks.

    Channels beyond the last complete block form one trailing group, so any
    channel count is accepted (28 -> [1, 5, 9, 13], 6 -> [1, 5], 4 -> [1, 3]).
    """
    if n_channels < 1:
        raise ValueError("need at least one channel")
    groups, used, l = [], 0, 0
    while used + 2 * l + 1 <= n_channels:
        groups.append(2 * l + 1)
        used += 2 * l + 1
        l += 2
    if used < n_channels:
        groups.append(n_channels - used)
    return groups


def _check_order(order: int) -> None:
    if order < 0 or order % 2:
        raise ValueError(f"SH order must be a non-negative even integer, got {order}")


def check_directions(dirs, tol: float = 1e-6) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3 or len(d) < 1:
        raise ValueError(f"directions must be an (n, 3) array, got shape {d.shape}")
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"directions must be unit vectors (worst |norm - 1| = {worst:.3g})")
    return d


def sh_basis_matrix(dirs, order: int = 6) -> np.ndarray:
    """Evaluate every basis function at every direction: an ``(n, K)`` matrix."""
    _check_order(order)
    d = check_directions(dirs)
    polar = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    azimuth = np.arctan2(d[:, 1], d[:, 0])
    cols = []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), polar, azimuth)
            if m < 0:
                cols.append(np.sqrt(2.0) * y.imag)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2.0) * y.real)
    return np.stack(cols, axis=1)


def fit_sh(signals, dirs, order: int = 6) -> np.ndarray:
    """Least-squares SH coefficients via Cholesky-factored normal equations.

    ``signals`` may be ``(n,)`` or ``(..., n)``; the last axis runs over
    directions.
    """
    basis = sh_basis_matrix(dirs, order)
    n, k = basis.shape
    if n < k:
        raise RankDeficientError(f"{n} directions cannot determine {k} coefficients")
    gram = basis.T @ basis
    if np.linalg.cond(gram) > 1e12:
        raise RankDeficientError("basis matrix is rank deficient for these directions")
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(str(exc)) from exc
    s = np.asarray(signals, dtype=np.float64)
    if s.shape[-1] != n:
        raise ValueError(f"signal has {s.shape[-1]} samples for {n} directions")
    rhs = s.reshape(-1, n) @ basis
    coeffs = scipy.linalg.cho_solve(factor, rhs.T).T
    return coeffs.reshape(s.shape[:-1] + (k,))


def eval_sh(coeffs, dirs, order: int | None = None) -> np.ndarray:
    """Synthesize signals ``B @ c`` from coefficients (last axis = coefficients)."""
    c = np.asarray(coeffs, dtype=np.float64)
    k = c.shape[-1]
    if order is None:
        order = int(round((-3 + np.sqrt(1 + 8 * k)) / 2))
    if n_coefficients(order) != k:
        raise ValueError(f"{k} coefficients do not match an order-{order} basis")
    return c @ sh_basis_matrix(dirs, order).T


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the full sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def load_directions(path) -> np.ndarray:
    """Read ``x y z`` triples, one per line; blank lines and ``#`` comments skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return check_directions(np.array(rows).reshape(-1, 3))


def save_directions(path, dirs) -> None:
    d = check_directions(dirs)
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in d.tolist()))


@dataclass
class NormStats:
    """Per-channel mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(obj["mean"], obj["std"])


def compute_stats(volume, mask) -> NormStats:
    """Statistics over masked voxels of a channels-last ``(X, Y, Z, C)`` array.

    Several volumes may be pooled by passing lists of arrays and masks.
    """
    def raw(v):
        return np.asarray(getattr(v, "data", v), np.float64)

    if isinstance(volume, (list, tuple)):
        vox = np.concatenate([raw(v)[np.asarray(m, bool)] for v, m in zip(volume, mask)])
    else:
        vox = raw(volume)[np.asarray(mask, bool)]
    if len(vox) == 0:
        raise DegenerateChannelError("mask selects no voxels")
    mean = vox.mean(axis=0)
    std = np.sqrt(((vox - mean) ** 2).mean(axis=0))
    bad = np.flatnonzero(std <= 0)
    if len(bad):
        raise DegenerateChannelError(f"zero-variance channel(s): {bad.tolist()}")
    return NormStats(mean, std)


def _checked(stats: NormStats, n_channels: int) -> NormStats:
    if len(stats.mean) != n_channels:
        raise ValueError(f"stats cover {len(stats.mean)} channels, data has {n_channels}")
    if np.any(stats.std <= 0):
        raise DegenerateChannelError("normalization needs std > 0 for every channel")
    return stats


def normalize_channels(volume, stats: NormStats):
    """``(v - mean) / std`` per channel (last axis), computed in float64.

    Accepts a channels-last array or a :class:`~mspharm.volume.Volume`; the
    result has the same kind, with float32 values.
    """
    return _apply(volume, stats, lambda d: (d - stats.mean) / stats.std)


def denormalize_channels(volume, stats: NormStats):
    return _apply(volume, stats, lambda d: d * stats.std + stats.mean)


def _apply(volume, stats, fn):
    raw = volume.data if hasattr(volume, "replace_data") else volume
    d = np.asarray(raw)
    _checked(stats, d.shape[-1])
    out = fn(d.astype(np.float64)).astype(np.float32)
    return volume.replace_data(out) if hasattr(volume, "replace_data") else out

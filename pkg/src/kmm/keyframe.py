"""Density-peaks key-frame selection over a temporal token matrix.

For active tokens ``x_1 .. x_n``::

    D[i, j]  = ||x_i - x_j||
    d[i]     = sum_j exp(-D[i, j]**2 / h**2)          (self term included)
    S[i]     = min { D[i, j] : d[j] > d[i] }           (strictly denser only)
    Gamma[i] = d[i] * S[i]

Tokens without a strictly denser neighbour get ``S = max(D)``.  Key frames are
the ``ceil(ratio * n)`` tokens with the largest ``Gamma``.

Density comparisons are exact for the given float64 tokens.  The self term
makes every density ``1 + m`` where the neighbour mass ``m`` can sit far below
the resolution of ``1``, and distances themselves round; near-ties in the
float sums are settled from exact rational squared distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cmp_to_key
from typing import Iterable

import numpy as np

from .errors import KMMError
from .seqdata import EmbeddingSequence, check

DEFAULT_RATIO = 0.30
DEFAULT_BANDWIDTH = 1.0

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class DensityStats:
    distances: np.ndarray
    density: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    # number of tokens strictly denser than each token; exact ties share a rank
    density_rank: np.ndarray | None = None
    pad_len: int = 0

    @property
    def n_active(self) -> int:
        return len(self.gamma)


@dataclass(frozen=True, eq=False)
class KeyFrameMask:
    selected: tuple[int, ...]
    mask_bits: np.ndarray
    ratio: float
    pad_len: int = 0

    @property
    def n(self) -> int:
        return len(self.mask_bits)

    @property
    def n_active(self) -> int:
        return self.n - self.pad_len


def pairwise_distances(seq: EmbeddingSequence) -> np.ndarray:
    """Euclidean distances between active tokens, shape ``(n_active, n_active)``.

    Rows are accumulated one at a time in a fixed order, so the result is
    exactly symmetric with an exactly zero diagonal.
    """
    x = check(seq).active
    n = len(x)
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = x - x[i]
        out[i] = np.sqrt((diff * diff).sum(axis=1))
    return out


class _ExactDistances:
    """Exact squared distances between float tokens, on demand.

    Every float is an integer multiple of one common power of two ``2**e``, so
    with integer tokens ``X`` we have ``|x_i - x_j|**2 == |X_i - X_j|**2 * 4**e``
    exactly.  Rows are kept sorted, as Python ints.
    """

    def __init__(self, x: np.ndarray, bandwidth: float):
        mant, expo = np.frexp(x)
        ints = (mant * 2.0**53).astype(np.int64)
        expo = expo.astype(np.int64) - 53
        nonzero = ints != 0
        base = int(expo[nonzero].min()) if nonzero.any() else 0
        shifts = np.where(nonzero, expo - base, 0)
        self._ints = ints.astype(object) << shifts.astype(object)
        self._log_scale = 2 * base * math.log(2.0) - 2 * math.log(bandwidth)
        self._rows: dict[int, list[int]] = {}

    def row(self, i: int) -> list[int]:
        if i not in self._rows:
            diff = self._ints - self._ints[i]
            self._rows[i] = sorted((diff * diff).sum(axis=1).tolist())
        return self._rows[i]

    def log_z(self, v: int) -> float:
        """Natural log of the kernel exponent ``v * 4**e / h**2`` (``v > 0``)."""
        return math.log(v) + self._log_scale


def _exact_sign(exact: _ExactDistances, i: int, j: int) -> int:
    """Sign of ``d[j] - d[i]``.

    The two kernel rows are paired in sorted order.  Each pair contributes
    ``exp(-lo) - exp(-hi) = exp(-lo) * -expm1(lo - hi)``, formed in logs from
    the exact exponent gap so nothing overflows, underflows or cancels.
    """
    logs, signs = [], []
    for a, b in zip(exact.row(j), exact.row(i)):
        if a == b:
            continue
        lo, hi = (a, b) if a < b else (b, a)
        log_lo = exact.log_z(lo) if lo else -math.inf
        lo_z = math.exp(log_lo) if log_lo < 700 else math.inf
        log_gap = exact.log_z(hi - lo)
        if log_gap < -30:
            mag = log_gap  # -expm1(-g) == g to double precision
        elif log_gap > 50:
            mag = 0.0
        else:
            mag = math.log(-math.expm1(-math.exp(log_gap)))
        logs.append(mag - lo_z)
        signs.append(1 if a < b else -1)
    top = max(logs, default=-math.inf)
    if top == -math.inf:
        return 0
    total = math.fsum(s * math.exp(v - top) for s, v in zip(signs, logs))
    return (total > 0) - (total < 0)


def _exact_ranks(x: np.ndarray, tokens: np.ndarray, bandwidth: float) -> dict[int, int]:
    """Dense ranks of exact density among ``tokens``; equal density, equal rank."""
    exact = _ExactDistances(x, bandwidth)
    reps: dict[bytes, int] = {}
    for t in tokens.tolist():
        reps.setdefault(x[t].tobytes(), t)
    memo: dict[tuple[int, int], int] = {}

    def cmp(i: int, j: int) -> int:
        if (i, j) not in memo:
            memo[i, j] = -_exact_sign(exact, i, j)
        return memo[i, j]

    order = sorted(reps.values(), key=cmp_to_key(cmp))
    level, rank_of = 0, {}
    for prev, cur in zip([None] + order[:-1], order):
        if prev is not None and cmp(prev, cur) != 0:
            level += 1
        rank_of[cur] = level
    return {t: rank_of[reps[x[t].tobytes()]] for t in tokens.tolist()}


def _denser_matrix(x: np.ndarray, z: np.ndarray, kernel: np.ndarray, mass: np.ndarray, bandwidth: float) -> np.ndarray:
    """Boolean ``H[i, j] = d[j] > d[i]`` with exact tie handling.

    ``z`` holds the scaled squared distances behind ``kernel`` (diagonal zeroed)
    and ``mass`` its row sums.
    """
    n, dim = x.shape
    gap = mass[None, :] - mass[:, None]
    # rounding bound: exp(-z) inherits z's relative error times z, plus summation
    err = 2.0 * _EPS * ((kernel * (z * (dim + 4) + 1)).sum(axis=1) + n * mass)
    tol = err[None, :] + err[:, None]
    higher = gap > tol
    unsure = np.abs(gap) <= tol
    np.fill_diagonal(unsure, False)
    if not unsure.any():
        return higher
    # order the undecided tokens once by exact density instead of pair by pair
    tokens = np.flatnonzero(unsure.any(axis=1))
    ranks = _exact_ranks(x, tokens, bandwidth)
    rank = np.zeros(n, dtype=np.int64)
    rank[tokens] = [ranks[t] for t in tokens.tolist()]
    return np.where(unsure, rank[None, :] > rank[:, None], higher)


def density_stats(seq: EmbeddingSequence, bandwidth: float = DEFAULT_BANDWIDTH) -> DensityStats:
    """Local density, distance to a denser token and their product for each active token."""
    if not bandwidth > 0:
        raise KMMError(f"bandwidth must be positive, got {bandwidth}")
    distances = pairwise_distances(seq)
    n = len(distances)
    z = (distances * distances) / (bandwidth * bandwidth)
    kernel = np.exp(-z)
    np.fill_diagonal(kernel, 0.0)
    # summing sorted rows makes tokens with equal kernel multisets bit-identical
    mass = np.sort(kernel, axis=1).sum(axis=1)
    density = 1.0 + mass

    higher = _denser_matrix(seq.active, z, kernel, mass, bandwidth)
    masked = np.where(higher, distances, np.inf)
    delta = masked.min(axis=1) if n else np.zeros(0)
    peaks = ~higher.any(axis=1)
    delta[peaks] = distances.max() if n > 1 else 0.0
    gamma = density * delta
    return DensityStats(
        distances=distances,
        density=density,
        delta=delta,
        gamma=gamma,
        density_rank=higher.sum(axis=1),
        pad_len=seq.pad_len,
    )


def n_selected(ratio: float, n_active: int) -> int:
    """``ceil(ratio * n_active)``, immune to float noise such as ``0.3 * 10``."""
    if not 0.0 <= ratio <= 1.0:
        raise KMMError(f"ratio must lie in [0, 1], got {ratio}")
    return min(n_active, math.ceil(round(ratio * n_active, 9)))


def select_key_frames(stats: DensityStats, ratio: float = DEFAULT_RATIO) -> KeyFrameMask:
    """Top ``ceil(ratio * n_active)`` tokens by Gamma.

    Ties go to the denser token, then to the lower index.
    """
    gamma = np.asarray(stats.gamma, dtype=np.float64)
    n = len(gamma)
    count = n_selected(ratio, n)
    rank = stats.density_rank
    if rank is None:
        density = np.asarray(stats.density, dtype=np.float64)
        rank = (density[None, :] > density[:, None]).sum(axis=1)
    order = np.lexsort((np.arange(n), np.asarray(rank), -gamma))
    chosen = sorted(int(i) for i in order[:count])
    return build_mask(chosen, n + stats.pad_len, stats.pad_len, ratio=ratio)


def build_mask(
    selected: Iterable[int], n: int, pad_len: int = 0, ratio: float | None = None
) -> KeyFrameMask:
    """Boolean frame mask, true at the selected (key-frame) positions."""
    chosen = tuple(sorted({int(i) for i in selected}))
    n_active = n - pad_len
    if pad_len < 0 or n_active < 0:
        raise KMMError(f"invalid lengths n={n}, pad_len={pad_len}")
    bad = [i for i in chosen if not 0 <= i < n_active]
    if bad:
        raise KMMError(f"indices {bad} outside the active range [0, {n_active})")
    bits = np.zeros(n, dtype=bool)
    bits[list(chosen)] = True
    bits.setflags(write=False)
    if ratio is None:
        ratio = len(chosen) / n_active if n_active else 0.0
    return KeyFrameMask(chosen, bits, float(ratio), pad_len)


def key_frames(
    seq: EmbeddingSequence, ratio: float = DEFAULT_RATIO, bandwidth: float = DEFAULT_BANDWIDTH
) -> tuple[DensityStats, KeyFrameMask]:
    stats = density_stats(seq, bandwidth)
    return stats, select_key_frames(stats, ratio)


def mask_document(stats: DensityStats, mask: KeyFrameMask) -> dict:
    """The mask-output JSON object."""
    return {
        "n": mask.n,
        "pad_len": mask.pad_len,
        "ratio": mask.ratio,
        "selected": list(mask.selected),
        "gamma": stats.gamma.tolist(),
        "density": stats.density.tolist(),
        "delta": stats.delta.tolist(),
    }


def mask_from_document(doc: dict) -> KeyFrameMask:
    return build_mask(doc["selected"], doc["n"], doc.get("pad_len", 0), ratio=doc.get("ratio"))

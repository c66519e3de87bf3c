"""Motion-generation evaluation metrics.

Embedding metrics (FID, Diversity, R-precision, MM-Dist) take user-supplied
feature matrices, one row per sample.  Jerk metrics (PJ, AUJ) take a raw
trajectory.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import KMMError
from .seqdata import MotionTrajectory

EIG_FLOOR = 1e-10
DEFAULT_PAIRS = 300
DEFAULT_POOL = 32
DEFAULT_TOP_K = 3


def _rows(x, name: str, min_rows: int = 1) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise KMMError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if len(arr) < min_rows:
        raise KMMError(f"{name} needs at least {min_rows} rows, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise KMMError(f"{name} contains non-finite values")
    return arr


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.where(vals < EIG_FLOOR, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussian fits (unbiased covariances) of two sets."""
    a = _rows(a, "a", 2)
    b = _rows(b, "b", 2)
    if a.shape[1] != b.shape[1]:
        raise KMMError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    mu = a.mean(axis=0) - b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    cross = np.sqrt(np.where(vals < EIG_FLOOR, 0.0, vals)).sum()
    fid = mu @ mu + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross
    return float(max(fid, 0.0))


def diversity(a, n_pairs: int = DEFAULT_PAIRS, seed: int = 0) -> float:
    """Mean distance over ``n_pairs`` random pairs of distinct rows."""
    a = _rows(a, "embeddings", 2)
    rng = np.random.default_rng(seed)
    first = rng.integers(len(a), size=n_pairs)
    second = (first + rng.integers(1, len(a), size=n_pairs)) % len(a)
    return float(np.linalg.norm(a[first] - a[second], axis=1).mean())


def r_precision(text, motion, pool: int = DEFAULT_POOL, top_k: int = DEFAULT_TOP_K, seed: int = 0) -> float:
    """Fraction of samples whose own motion ranks in the top ``top_k`` of a candidate pool.

    Each pool holds the true motion plus ``pool - 1`` distinct distractors drawn
    from the other samples.  A distractor exactly as close as the true motion
    does not push it down.
    """
    text = _rows(text, "text")
    motion = _rows(motion, "motion")
    if text.shape != motion.shape:
        raise KMMError(f"text and motion shapes differ: {text.shape} vs {motion.shape}")
    m = len(text)
    if m < pool:
        raise KMMError(f"need at least pool={pool} samples, got {m}")
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(m):
        others = rng.choice(m - 1, size=pool - 1, replace=False)
        others = others + (others >= i)
        true_dist = np.linalg.norm(text[i] - motion[i])
        dists = np.linalg.norm(motion[others] - text[i], axis=1)
        hits += int((dists < true_dist).sum() < top_k)
    return hits / m


def mm_dist(text, motion) -> float:
    """Mean distance between paired text and motion rows."""
    text = _rows(text, "text")
    motion = _rows(motion, "motion")
    if text.shape != motion.shape:
        raise KMMError(f"text and motion shapes differ: {text.shape} vs {motion.shape}")
    return float(np.linalg.norm(text - motion, axis=1).mean())


def _third_difference(x: np.ndarray) -> np.ndarray:
    n = len(x)
    out = np.empty_like(x)
    if n >= 5:
        out[2 : n - 2] = (x[4:] - 2 * x[3:-1] + 2 * x[1:-3] - x[:-4]) / 2
    for t in range(n):
        if 2 <= t < n - 2:
            continue
        if t < 2:
            s = min(t, n - 4)
            out[t] = x[s + 3] - 3 * x[s + 2] + 3 * x[s + 1] - x[s]
        else:
            e = max(t, 3)
            out[t] = x[e] - 3 * x[e - 1] + 3 * x[e - 2] - x[e - 3]
    return out


def jerk_profile(traj: MotionTrajectory, joint_dim: int | None = None) -> np.ndarray:
    """Per-frame jerk magnitude, maximised over features (or over joints).

    Interior frames use the central five-point third difference, the first
    and last two frames one-sided four-point differences; all scaled by
    ``fps**3``.  With ``joint_dim`` set, consecutive groups of that many
    columns form one joint whose jerk is the vector norm.
    """
    if traj.n_frames < 4:
        raise KMMError(f"jerk needs at least 4 frames, got {traj.n_frames}")
    jerk = _third_difference(traj.frames) * traj.fps**3
    if joint_dim:
        if traj.feature_dim % joint_dim:
            raise KMMError(f"feature_dim {traj.feature_dim} is not a multiple of joint_dim {joint_dim}")
        mags = np.linalg.norm(jerk.reshape(len(jerk), -1, joint_dim), axis=2)
    else:
        mags = np.abs(jerk)
    return mags.max(axis=1)


def peak_jerk_and_auj(
    traj: MotionTrajectory,
    window: tuple[int, int] | None = None,
    joint_dim: int | None = None,
) -> tuple[float, float]:
    """Peak jerk and the L1 deviation of the jerk profile from its mean.

    ``window`` restricts both to frames ``[start, stop)`` of the profile.
    """
    profile = jerk_profile(traj, joint_dim)
    if window is not None:
        profile = profile[window[0] : window[1]]
        if len(profile) == 0:
            raise KMMError(f"empty frame window {window}")
    return float(profile.max()), float(np.abs(profile - profile.mean()).sum())


@dataclass
class MetricReport:
    fid: float | None = None
    diversity: float | None = None
    r_precision: float | None = None
    mm_dist: float | None = None
    pj: float | None = None
    auj: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    # column order of the usual results table
    TABLE_COLUMNS = ("R-precision", "FID", "Diversity", "MM-Dist", "PJ", "AUJ")

    def table_row(self) -> list:
        return [self.r_precision, self.fid, self.diversity, self.mm_dist, self.pj, self.auj]


def evaluate(
    real=None,
    gen=None,
    text=None,
    traj: MotionTrajectory | None = None,
    n_pairs: int = DEFAULT_PAIRS,
    pool: int = DEFAULT_POOL,
    top_k: int = DEFAULT_TOP_K,
    seed: int = 0,
    window: tuple[int, int] | None = None,
) -> MetricReport:
    """Compute every metric whose inputs are present."""
    report = MetricReport(
        config={
            "n_pairs": n_pairs,
            "pool": pool,
            "top_k": top_k,
            "seed": seed,
            "fps": traj.fps if traj is not None else None,
            "window": list(window) if window else None,
        }
    )
    if real is not None and gen is not None:
        report.fid = frechet_distance(real, gen)
    if gen is not None:
        report.diversity = diversity(gen, n_pairs, seed)
        if text is not None:
            report.r_precision = r_precision(text, gen, pool, top_k, seed)
            report.mm_dist = mm_dist(text, gen)
    if traj is not None:
        report.pj, report.auj = peak_jerk_and_auj(traj, window)
    return report

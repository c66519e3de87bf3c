"""Synthetic sequences with planted structure, for recovery and metric checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import KMMError
from .seqdata import EmbeddingSequence, MotionTrajectory

RETRY_BUDGET = 1000


@dataclass(frozen=True)
class ClusterSpec:
    k: int
    tokens_per_cluster: int
    center_separation: float
    intra_spread: float
    latent_dim: int
    seed: int = 0

    def __post_init__(self):
        if min(self.k, self.tokens_per_cluster, self.latent_dim) < 1:
            raise KMMError("cluster counts and latent_dim must be positive")
        if not self.intra_spread > 0 or self.center_separation / self.intra_spread < 1:
            raise KMMError("need intra_spread > 0 and center_separation / intra_spread >= 1")


class ClusteredSequence(NamedTuple):
    sequence: EmbeddingSequence
    true_centers: tuple[int, ...]  # token index nearest each planted center
    labels: np.ndarray  # cluster id of every token


def _sample_centers(spec: ClusterSpec, rng: np.random.Generator) -> np.ndarray:
    # box wide enough that k centres fit at the requested separation
    half = spec.center_separation * max(1.0, spec.k ** (1.0 / spec.latent_dim))
    centers: list[np.ndarray] = []
    for _ in range(RETRY_BUDGET):
        cand = rng.uniform(-half, half, size=spec.latent_dim)
        if all(np.linalg.norm(cand - c) >= spec.center_separation for c in centers):
            centers.append(cand)
            if len(centers) == spec.k:
                return np.array(centers)
    raise KMMError(
        f"could not place {spec.k} centres {spec.center_separation} apart in "
        f"{spec.latent_dim} dimensions within {RETRY_BUDGET} draws"
    )


def gen_clustered_embeddings(spec: ClusterSpec, shuffle: bool = True) -> ClusteredSequence:
    """Gaussian clusters around well-separated centres.

    With ``shuffle=False`` tokens stay grouped by cluster in temporal order.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _sample_centers(spec, rng)
    labels = np.repeat(np.arange(spec.k), spec.tokens_per_cluster)
    tokens = centers[labels] + rng.normal(0.0, spec.intra_spread, size=(len(labels), spec.latent_dim))
    if shuffle:
        perm = rng.permutation(len(labels))
        tokens, labels = tokens[perm], labels[perm]
    nearest = []
    for c in range(spec.k):
        members = np.flatnonzero(labels == c)
        dist = np.linalg.norm(tokens[members] - centers[c], axis=1)
        nearest.append(int(members[np.argmin(dist)]))
    labels.setflags(write=False)
    return ClusteredSequence(EmbeddingSequence(tokens), tuple(nearest), labels)


def gen_motion_trajectory(
    segments: Sequence[tuple[int, Sequence[float]]],
    fps: float = 20.0,
    seed: int = 0,
    noise: float = 0.0,
) -> MotionTrajectory:
    """Piecewise constant-velocity trajectory; velocities are per second.

    Frame count is the sum of segment durations.  Segment boundaries are the
    planted transitions.
    """
    if not segments:
        raise KMMError("need at least one segment")
    dims = {len(np.atleast_1d(v)) for _, v in segments}
    if len(dims) != 1:
        raise KMMError("all segment velocities must share one dimension")
    pieces, origin = [], np.zeros(dims.pop())
    for duration, velocity in segments:
        if duration < 1:
            raise KMMError(f"segment duration must be positive, got {duration}")
        step = np.atleast_1d(np.asarray(velocity, dtype=np.float64)) / fps
        # origin + k * step rather than a running sum keeps rounding from piling up
        pieces.append(origin + np.arange(duration)[:, None] * step)
        origin = origin + duration * step
    frames = np.vstack(pieces)
    if noise > 0:
        frames = frames + np.random.default_rng(seed).normal(0.0, noise, size=frames.shape)
    return MotionTrajectory(frames, fps)


def segment_boundaries(segments: Sequence[tuple[int, Sequence[float]]]) -> list[int]:
    """First frame of every segment after the first (where the velocity kinks)."""
    return np.cumsum([d for d, _ in segments])[:-1].tolist()

"""Symmetric contrastive loss between paired text and motion latents.

Row ``i`` of the text batch is paired with row ``i`` of the motion batch, so
the labels are ``0 .. b-1``.  Each cross-entropy term is averaged over rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import KMMError

DEFAULT_TEMPERATURE = 0.1
DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True, eq=False)
class LatentBatch:
    text_latents: np.ndarray
    motion_latents: np.ndarray

    def __post_init__(self):
        t = np.array(self.text_latents, dtype=np.float64)
        m = np.array(self.motion_latents, dtype=np.float64)
        if t.ndim != 2 or t.shape != m.shape or len(t) < 1:
            raise KMMError(f"text and motion latents must be matching (b, d) matrices, got {t.shape} and {m.shape}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(m))):
            raise KMMError("latents contain non-finite values")
        t.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "text_latents", t)
        object.__setattr__(self, "motion_latents", m)

    @property
    def b(self) -> int:
        return len(self.text_latents)


@dataclass(frozen=True)
class AlignConfig:
    temperature: float = DEFAULT_TEMPERATURE
    lam: float = DEFAULT_LAMBDA
    normalize: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise KMMError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0:
            raise KMMError(f"lambda must be non-negative, got {self.lam}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def similarity(batch: LatentBatch, tau: float = DEFAULT_TEMPERATURE, normalize: bool = False) -> np.ndarray:
    """``sim[i, j] = <T_i, M_j> / tau``."""
    if not tau > 0:
        raise KMMError(f"temperature must be positive, got {tau}")
    t, m = batch.text_latents, batch.motion_latents
    if len(np.unique(t, axis=0)) < len(t):
        warnings.warn("duplicate text latents in batch; contrastive labels are ambiguous", stacklevel=2)
    if normalize:
        t, m = _unit_rows(t), _unit_rows(m)
    return t @ m.T / tau


def _check_sim(sim) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] < 1:
        raise KMMError(f"similarity must be a non-empty square matrix, got shape {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise KMMError("similarity contains non-finite values")
    return sim


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def cross_entropy(logits: np.ndarray) -> float:
    """Mean over rows of ``-log softmax(row)[row index]``."""
    return float(-np.mean(np.diag(_log_softmax(logits))))


def contrastive_loss(sim, lam: float = DEFAULT_LAMBDA) -> float:
    sim = _check_sim(sim)
    return lam * (cross_entropy(sim) + cross_entropy(sim.T))


def contrastive_grad(sim, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Analytic gradient of :func:`contrastive_loss` with respect to ``sim``."""
    sim = _check_sim(sim)
    b = len(sim)
    eye = np.eye(b)
    p_row = _softmax(sim)
    p_col = _softmax(sim.T)
    return lam * ((p_row - eye) / b + (p_col.T - eye) / b)


def latent_grads(batch: LatentBatch, tau: float = DEFAULT_TEMPERATURE, lam: float = DEFAULT_LAMBDA) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss with respect to the text and motion latents (unnormalized)."""
    g = contrastive_grad(similarity(batch, tau), lam)
    return g @ batch.motion_latents / tau, g.T @ batch.text_latents / tau


def alignment_loss(batch: LatentBatch, config: AlignConfig = AlignConfig()) -> float:
    return contrastive_loss(similarity(batch, config.temperature, config.normalize), config.lam)

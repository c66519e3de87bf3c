"""Residual vector quantization of latent token sequences.

Each layer is a k-means codebook fit on the residual left by the layers
before it.  Encoding is greedy: layer ``i`` picks the code nearest to the
running residual (lowest index on ties).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, KMMError
from .seqdata import EmbeddingSequence, check, read_matrix, write_matrix

DEFAULT_LAYERS = 6
DEFAULT_CODES = 512
DEFAULT_KMEANS_ITERS = 50


@dataclass(frozen=True, eq=False)
class ResidualCodebook:
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.array(c, dtype=np.float64) for c in self.layers)
        if not layers:
            raise KMMError("a codebook needs at least one layer")
        dims = {c.shape[1] if c.ndim == 2 else -1 for c in layers}
        if len(dims) != 1 or -1 in dims:
            raise KMMError("every layer must be a 2-D (codes, latent_dim) matrix of one latent_dim")
        for c in layers:
            if len(c) < 1:
                raise KMMError("every layer needs at least one code")
            if not np.all(np.isfinite(c)):
                raise KMMError("codebook contains non-finite values")
            c.setflags(write=False)
        object.__setattr__(self, "layers", layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def codes_per_layer(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.layers)

    @property
    def latent_dim(self) -> int:
        return self.layers[0].shape[1]

    def truncated(self, n_layers: int) -> "ResidualCodebook":
        return ResidualCodebook(self.layers[:n_layers])


@dataclass(frozen=True, eq=False)
class TokenIndexSequence:
    indices: np.ndarray  # (n_tokens, L) code indices
    pad_len: int = 0


def _sq_dists(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - codes[None, :, :]
    return (diff * diff).sum(axis=2)


def nearest_code(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code for every row of ``x`` (first index on ties)."""
    out = np.empty(len(x), dtype=np.int64)
    # direct differences, not the Gram expansion: exact hits must score exactly 0
    chunk = max(1, (1 << 22) // max(1, codes.size))
    for start in range(0, len(x), chunk):
        out[start : start + chunk] = _sq_dists(x[start : start + chunk], codes).argmin(axis=1)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(len(x), p=closest / total)
        else:
            idx = rng.integers(len(x))
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, iters: int = DEFAULT_KMEANS_ITERS, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns ``(k, dim)`` centres.

    Empty clusters are reseeded to the point farthest from its centre.  The
    returned centres are always the means of the last assignment (reseeded
    empties excepted), so quantizing ``x`` with them never costs more than
    quantizing with zero.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise KMMError(f"k-means needs at least k={k} points, got {len(x)}")
    if iters < 1:
        raise KMMError("kmeans_iters must be >= 1")
    centers = _kmeans_pp(x, k, rng)
    assign = None
    for _ in range(iters):
        new_assign = nearest_code(x, centers)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        filled = counts > 0
        # mean taken relative to one member, so clusters of duplicates stay exact
        anchor = np.zeros_like(centers)
        anchor[assign[::-1]] = x[::-1]
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x - anchor[assign])
        centers[filled] = anchor[filled] + sums[filled] / counts[filled, None]
        if not filled.all():
            err = ((x - centers[assign]) ** 2).sum(axis=1)
            for c in np.flatnonzero(~filled):
                far = int(err.argmax())
                centers[c] = x[far]
                err[far] = -1.0
    return centers


def _stack(data: EmbeddingSequence | np.ndarray | Iterable) -> np.ndarray:
    if isinstance(data, EmbeddingSequence):
        return check(data).active
    if isinstance(data, np.ndarray):
        return np.atleast_2d(np.asarray(data, dtype=np.float64))
    parts = [_stack(d) for d in data]
    if not parts:
        raise KMMError("empty dataset")
    return np.vstack(parts)


def fit_residual_codebooks(
    data,
    n_layers: int = DEFAULT_LAYERS,
    codes: int = DEFAULT_CODES,
    kmeans_iters: int = DEFAULT_KMEANS_ITERS,
    seed: int = 0,
) -> ResidualCodebook:
    """Fit ``n_layers`` k-means codebooks, each on the residual of the previous ones.

    ``data`` is one sequence, a list of sequences or a raw matrix; padding rows
    are ignored.  Layer ``i`` draws from its own generator seeded by
    ``(seed, i)``, so a fit with fewer layers is a prefix of one with more.
    """
    x = _stack(data)
    if x.size == 0 or len(x) == 0:
        raise KMMError("empty dataset")
    if codes > len(x):
        raise KMMError(f"codes per layer ({codes}) exceeds token count ({len(x)})")
    if n_layers < 1 or codes < 1:
        raise KMMError("need at least one layer and one code")
    residual = x.copy()
    layers = []
    for layer in range(n_layers):
        centers = kmeans(residual, codes, kmeans_iters, np.random.default_rng([seed, layer]))
        layers.append(centers)
        residual = residual - centers[nearest_code(residual, centers)]
    return ResidualCodebook(tuple(layers))


def encode_matrix(x: np.ndarray, book: ResidualCodebook) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != book.latent_dim:
        raise KMMError(f"latent_dim mismatch: data {x.shape[1]}, codebook {book.latent_dim}")
    residual = x.copy()
    out = np.empty((len(x), book.n_layers), dtype=np.int64)
    for i, codes in enumerate(book.layers):
        idx = nearest_code(residual, codes)
        out[:, i] = idx
        residual = residual - codes[idx]
    return out


def decode_matrix(indices: np.ndarray, book: ResidualCodebook) -> np.ndarray:
    indices = np.atleast_2d(np.asarray(indices))
    if indices.shape[1] != book.n_layers:
        raise KMMError(f"expected {book.n_layers} index columns, got {indices.shape[1]}")
    recon = np.zeros((len(indices), book.latent_dim))
    for i, codes in enumerate(book.layers):
        col = indices[:, i]
        if col.size and (col.min() < 0 or col.max() >= len(codes)):
            raise KMMError(f"layer {i} index out of range [0, {len(codes)})")
        recon = recon + codes[col]
    return recon


def encode(seq: EmbeddingSequence, book: ResidualCodebook) -> TokenIndexSequence:
    """Greedy residual code assignment for every token (padding rows included)."""
    check(seq)
    return TokenIndexSequence(encode_matrix(seq.tokens, book), seq.pad_len)


def decode(tokens: TokenIndexSequence, book: ResidualCodebook) -> EmbeddingSequence:
    """Sum of the indexed code vectors over all layers."""
    return EmbeddingSequence(decode_matrix(tokens.indices, book), tokens.pad_len)


def reconstruction_mse(seq: EmbeddingSequence, book: ResidualCodebook) -> float:
    x = check(seq).active
    recon = decode_matrix(encode_matrix(x, book), book)
    return float(np.mean((x - recon) ** 2))


def save_codebook(book: ResidualCodebook, directory: str | Path) -> Path:
    """Write one ``.kmm`` matrix per layer plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, codes in enumerate(book.layers):
        name = f"layer_{i:02d}.kmm"
        write_matrix(directory / name, codes)
        names.append(name)
    manifest = {
        "L": book.n_layers,
        "K_c": list(book.codes_per_layer),
        "latent_dim": book.latent_dim,
        "layers": names,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_codebook(path: str | Path) -> ResidualCodebook:
    """Load from a manifest file or the directory holding ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    layers = []
    for name in manifest["layers"]:
        codes, _ = read_matrix(path.parent / name)
        layers.append(codes)
    book = ResidualCodebook(tuple(layers))
    if book.n_layers != manifest["L"] or list(book.codes_per_layer) != list(manifest["K_c"]):
        raise FormatError(f"{path}: manifest does not match layer files")
    return book

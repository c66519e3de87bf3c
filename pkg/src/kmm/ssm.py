"""Masked bidirectional selective scan (forward inference only).

One block runs a diagonal selective state-space recurrence in both temporal
directions::

    dt_t   = softplus(delta_bias + gate_proj @ x_t)       (per state channel)
    Abar_t = exp(dt_t * a_diag)
    h_t    = Abar_t * h_{t-1} + dt_t * (input_proj @ x_t)
    y_t    = readout_proj @ h_t

The backward direction is the forward scan of the time-reversed active rows,
reversed back.  Padding rows never enter a scan and read out as zeros.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import KMMError, ScanError
from .keyframe import KeyFrameMask
from .seqdata import EmbeddingSequence, check, read_matrix, write_matrix

Direction = Literal["forward", "backward"]

DEFAULT_STATE_DIM = 16
DEFAULT_LAYERS = 4


@dataclass(frozen=True, eq=False)
class ScanBlockParams:
    a_diag: np.ndarray  # (state_dim,) strictly negative
    input_proj: np.ndarray  # (state_dim, token_dim)
    readout_proj: np.ndarray  # (token_dim, state_dim)
    gate_proj: np.ndarray  # (state_dim, token_dim)
    delta_bias: float
    mask_token: np.ndarray  # (token_dim,)

    def __post_init__(self):
        fields = {}
        for name in ("a_diag", "input_proj", "readout_proj", "gate_proj", "mask_token"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise KMMError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            fields[name] = arr
        n, d = fields["input_proj"].shape
        expected = {
            "a_diag": (n,),
            "readout_proj": (d, n),
            "gate_proj": (n, d),
            "mask_token": (d,),
        }
        for name, shape in expected.items():
            if fields[name].shape != shape:
                raise KMMError(f"{name} has shape {fields[name].shape}, expected {shape}")
        if not np.all(fields["a_diag"] < 0):
            raise KMMError("a_diag entries must be strictly negative")
        if not (math.isfinite(self.delta_bias) and self.delta_bias > 0):
            raise KMMError(f"delta_bias must be positive, got {self.delta_bias}")
        for name, arr in fields.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "delta_bias", float(self.delta_bias))

    @property
    def state_dim(self) -> int:
        return self.a_diag.shape[0]

    @property
    def token_dim(self) -> int:
        return self.mask_token.shape[0]


@dataclass(frozen=True, eq=False)
class ScanOutput:
    """Scan results; a single-direction scan leaves the other side ``None``.

    ``output`` is only set by :func:`masked_bi_scan` and holds the residual
    stream after the last block.
    """

    forward_out: np.ndarray | None
    backward_out: np.ndarray | None
    hidden_final: np.ndarray
    output: np.ndarray | None = None

    @property
    def combined(self) -> np.ndarray:
        parts = [p for p in (self.forward_out, self.backward_out) if p is not None]
        return parts[0] + parts[1] if len(parts) == 2 else parts[0]


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def discretize(x: np.ndarray, params: ScanBlockParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Step sizes, discrete transitions and discrete inputs for rows of ``x``."""
    dt = _softplus(params.delta_bias + x @ params.gate_proj.T)
    a_bar = np.exp(dt * params.a_diag)
    bx = dt * (x @ params.input_proj.T)
    return dt, a_bar, bx


def _first_bad_step(*arrays: np.ndarray) -> int | None:
    bad = np.zeros(len(arrays[0]), dtype=bool)
    for arr in arrays:
        bad |= ~np.isfinite(arr).reshape(len(arr), -1).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def _scan_rows(x: np.ndarray, params: ScanBlockParams) -> tuple[np.ndarray, np.ndarray]:
    # overflow surfaces as a ScanError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        _, a_bar, bx = discretize(x, params)
        t = _first_bad_step(a_bar, bx)
        if t is not None:
            raise ScanError(f"non-finite discretization at time step {t}")
        h = np.zeros(params.state_dim)
        states = np.empty((len(x), params.state_dim))
        for step in range(len(x)):
            h = a_bar[step] * h + bx[step]
            states[step] = h
        y = states @ params.readout_proj.T
    t = _first_bad_step(states, y)
    if t is not None:
        raise ScanError(f"non-finite state or output at time step {t}")
    return y, h


def _check_dims(seq: EmbeddingSequence, params: ScanBlockParams) -> None:
    if seq.latent_dim != params.token_dim:
        raise KMMError(f"token_dim mismatch: sequence {seq.latent_dim}, params {params.token_dim}")


def _embed(rows: np.ndarray, seq: EmbeddingSequence) -> np.ndarray:
    out = np.zeros_like(seq.tokens)
    out[: len(rows)] = rows
    return out


def selective_scan(seq: EmbeddingSequence, params: ScanBlockParams, direction: Direction = "forward") -> ScanOutput:
    check(seq)
    _check_dims(seq, params)
    x = seq.active
    if direction == "forward":
        y, h = _scan_rows(x, params)
        return ScanOutput(_embed(y, seq), None, h)
    if direction == "backward":
        y, h = _scan_rows(np.ascontiguousarray(x[::-1]), params)
        return ScanOutput(None, _embed(y[::-1], seq), h)
    raise KMMError(f"unknown direction {direction!r}")


def apply_mask_tokens(seq: EmbeddingSequence, mask: KeyFrameMask, mask_token: np.ndarray) -> EmbeddingSequence:
    """Replace the rows at masked positions by ``mask_token``."""
    mask_token = np.asarray(mask_token, dtype=np.float64)
    if mask_token.shape != (seq.latent_dim,):
        raise KMMError(f"mask_token has shape {mask_token.shape}, expected ({seq.latent_dim},)")
    if mask.n != seq.n_tokens or mask.pad_len != seq.pad_len:
        raise KMMError(
            f"mask covers n={mask.n} (pad {mask.pad_len}), sequence has n={seq.n_tokens} (pad {seq.pad_len})"
        )
    tokens = seq.tokens.copy()
    tokens[mask.mask_bits] = mask_token
    return seq.with_tokens(tokens)


def masked_bi_scan(
    seq: EmbeddingSequence,
    mask: KeyFrameMask,
    text_token: np.ndarray,
    params: Sequence[ScanBlockParams],
) -> ScanOutput:
    """Mask-token substitution, text token prepended, then stacked bidirectional blocks.

    Each block adds ``forward + backward`` to its input (residual).  The mask
    token of the first block is used for substitution.  Returned arrays drop
    the text position; ``forward_out``/``backward_out`` come from the last block.
    """
    if not params:
        raise KMMError("need at least one scan block")
    text_token = np.asarray(text_token, dtype=np.float64)
    if text_token.shape != (seq.latent_dim,):
        raise KMMError(f"text_token has shape {text_token.shape}, expected ({seq.latent_dim},)")
    masked = apply_mask_tokens(check(seq), mask, params[0].mask_token)
    stream = EmbeddingSequence(np.vstack([text_token, masked.active]))
    fwd = bwd = h = None
    for block in params:
        _check_dims(stream, block)
        f = selective_scan(stream, block, "forward")
        b = selective_scan(stream, block, "backward")
        fwd, bwd, h = f.forward_out, b.backward_out, f.hidden_final
        stream = stream.with_tokens(stream.tokens + fwd + bwd)
    return ScanOutput(
        forward_out=_embed(fwd[1:], seq),
        backward_out=_embed(bwd[1:], seq),
        hidden_final=h,
        output=_embed(stream.tokens[1:], seq),
    )


def _reference_rows(rows: list[list[float]], params: ScanBlockParams) -> tuple[list[list[float]], list[float]]:
    n_state, dim = params.state_dim, params.token_dim
    a = params.a_diag.tolist()
    b_in = params.input_proj.tolist()
    gate = params.gate_proj.tolist()
    c_out = params.readout_proj.tolist()
    h = [0.0] * n_state
    ys = []
    for x in rows:
        for s in range(n_state):
            z = params.delta_bias + sum(gate[s][k] * x[k] for k in range(dim))
            dt = max(z, 0.0) + math.log1p(math.exp(-abs(z)))
            u = sum(b_in[s][k] * x[k] for k in range(dim))
            h[s] = math.exp(dt * a[s]) * h[s] + dt * u
        ys.append([sum(c_out[k][s] * h[s] for s in range(n_state)) for k in range(dim)])
    return ys, h


def reference_scan(seq: EmbeddingSequence, params: ScanBlockParams, direction: Direction = "forward") -> ScanOutput:
    """Literal per-timestep, per-channel loop of the same recurrence."""
    rows = seq.active.tolist()
    if direction == "backward":
        ys, h = _reference_rows(rows[::-1], params)
        ys = ys[::-1]
    else:
        ys, h = _reference_rows(rows, params)
    out = np.zeros_like(seq.tokens)
    out[: len(ys)] = ys
    if direction == "backward":
        return ScanOutput(None, out, np.array(h))
    return ScanOutput(out, None, np.array(h))


def reference_masked_bi_scan(
    seq: EmbeddingSequence,
    mask: KeyFrameMask,
    text_token: np.ndarray,
    params: Sequence[ScanBlockParams],
) -> np.ndarray:
    """Loop-based oracle for :func:`masked_bi_scan`; returns the final stream."""
    token = params[0].mask_token.tolist()
    rows = [token if mask.mask_bits[i] else list(r) for i, r in enumerate(seq.active.tolist())]
    stream = [list(np.asarray(text_token, dtype=np.float64))] + rows
    for block in params:
        fwd, _ = _reference_rows(stream, block)
        bwd, _ = _reference_rows(stream[::-1], block)
        bwd = bwd[::-1]
        stream = [[s + f + b for s, f, b in zip(sr, fr, br)] for sr, fr, br in zip(stream, fwd, bwd)]
    out = np.zeros_like(seq.tokens)
    out[: seq.n_active] = stream[1:]
    return out


def init_params(
    token_dim: int, state_dim: int = DEFAULT_STATE_DIM, n_layers: int = DEFAULT_LAYERS, seed: int = 0
) -> list[ScanBlockParams]:
    """Random scan blocks with a stable, moderately contractive scale."""
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_layers):
        blocks.append(
            ScanBlockParams(
                a_diag=-rng.uniform(0.5, 2.0, state_dim),
                input_proj=rng.normal(0.0, 1.0 / math.sqrt(token_dim), (state_dim, token_dim)),
                readout_proj=rng.normal(0.0, 0.5 / math.sqrt(state_dim), (token_dim, state_dim)),
                gate_proj=rng.normal(0.0, 0.5 / math.sqrt(token_dim), (state_dim, token_dim)),
                delta_bias=0.5,
                mask_token=rng.normal(0.0, 1.0, token_dim),
            )
        )
    return blocks


_MATRICES = ("a_diag", "input_proj", "readout_proj", "gate_proj", "mask_token")


def save_params(params: Sequence[ScanBlockParams], directory: str | Path) -> Path:
    """One ``.kmm`` file per projection plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, block in enumerate(params):
        entry = {"delta_bias": block.delta_bias}
        for name in _MATRICES:
            fname = f"block{i}_{name}.kmm"
            write_matrix(directory / fname, np.atleast_2d(getattr(block, name)))
            entry[name] = fname
        layers.append(entry)
    path = directory / "manifest.json"
    path.write_text(json.dumps({"layers": layers}, indent=2, sort_keys=True) + "\n")
    return path


def load_params(path: str | Path) -> list[ScanBlockParams]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    blocks = []
    for entry in manifest["layers"]:
        arrays = {}
        for name in _MATRICES:
            mat, _ = read_matrix(path.parent / entry[name])
            arrays[name] = mat[0] if name in ("a_diag", "mask_token") else mat
        blocks.append(ScanBlockParams(delta_bias=entry["delta_bias"], **arrays))
    return blocks

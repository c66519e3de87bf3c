"""``kmm`` command-line entry point.

Every subcommand writes a JSON report holding the tool version, the fully
resolved configuration, SHA-256 digests of the input files and the results.
Exit status: 0 success, 1 invalid input, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import align, keyframe, metrics, quantizer, ssm, synth
from .seqdata import (
    EmbeddingSequence,
    MotionTrajectory,
    load_sequence,
    read_matrix,
    read_sequence,
    save_sequence,
    validate,
    write_matrix,
)


@dataclass(frozen=True)
class RunConfig:
    """Defaults shared by all subcommands."""

    masking_ratio: float = keyframe.DEFAULT_RATIO
    bandwidth: float = keyframe.DEFAULT_BANDWIDTH
    tau: float = align.DEFAULT_TEMPERATURE
    lam: float = align.DEFAULT_LAMBDA
    layers: int = quantizer.DEFAULT_LAYERS
    codes: int = quantizer.DEFAULT_CODES
    kmeans_iters: int = quantizer.DEFAULT_KMEANS_ITERS
    scan_layers: int = ssm.DEFAULT_LAYERS
    state_dim: int = ssm.DEFAULT_STATE_DIM
    fps: float = 20.0
    seed: int = 0


DEFAULTS = RunConfig()


def _default_seed() -> int:
    return int(os.environ.get("KMM_SEED", DEFAULTS.seed))


def _digest(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(path.iterdir()):
            h.update(child.name.encode())
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _resolved(args: argparse.Namespace) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func",):
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, list):
            value = [str(v) if isinstance(v, Path) else v for v in value]
        out[key] = value
    return out


def _report(args: argparse.Namespace, inputs: list, result: dict) -> dict:
    doc = {
        "tool": {"name": "kmm", "version": __version__},
        "command": args.command,
        "config": _resolved(args),
        "inputs": {str(p): _digest(p) for p in inputs if p is not None},
    }
    doc.update(result)
    return doc


def _write_json(path: str | Path | None, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _vector(path: str | Path | None, dim: int) -> np.ndarray:
    if path is None:
        return np.zeros(dim)
    mat, _ = read_matrix(path)
    vec = mat.reshape(-1)
    if vec.shape != (dim,):
        raise ValueError(f"{path}: expected a vector of length {dim}, got shape {mat.shape}")
    return vec


def _window(text: str | None) -> tuple[int, int] | None:
    if not text:
        return None
    start, _, stop = text.partition(":")
    return int(start), int(stop)


def _segments(text: str) -> list[tuple[int, list[float]]]:
    segs = []
    for part in text.split(";"):
        dur, _, vel = part.partition(":")
        segs.append((int(dur), [float(v) for v in vel.split(",")]))
    return segs


# --- subcommands -------------------------------------------------------------


def cmd_keyframes(args) -> int:
    seq = load_sequence(args.input, args.format)
    stats, mask = keyframe.key_frames(seq, args.ratio, args.bandwidth)
    _write_json(args.out, _report(args, [args.input], keyframe.mask_document(stats, mask)))
    return 0


def cmd_mask(args) -> int:
    seq = load_sequence(args.input, args.format)
    if args.mask:
        mask = keyframe.mask_from_document(json.loads(Path(args.mask).read_text()))
    else:
        _, mask = keyframe.key_frames(seq, args.ratio, args.bandwidth)
    masked = ssm.apply_mask_tokens(seq, mask, _vector(args.mask_token, seq.latent_dim))
    save_sequence(masked, args.out)
    result = {"n": mask.n, "pad_len": mask.pad_len, "selected": list(mask.selected), "output": str(args.out)}
    _write_json(args.report, _report(args, [args.input, args.mask, args.mask_token], result))
    return 0


def cmd_quantize_fit(args) -> int:
    data = [load_sequence(p) for p in args.input]
    book = quantizer.fit_residual_codebooks(data, args.layers, args.codes, args.iters, args.seed)
    manifest = quantizer.save_codebook(book, args.out)
    mse = [
        float(np.mean([quantizer.reconstruction_mse(s, book.truncated(k)) for s in data]))
        for k in range(1, book.n_layers + 1)
    ]
    result = {"codebook": str(manifest), "L": book.n_layers, "K_c": args.codes, "mse_by_layers": mse}
    _write_json(args.report, _report(args, args.input, result))
    return 0


def cmd_quantize_encode(args) -> int:
    seq = load_sequence(args.input)
    book = quantizer.load_codebook(args.codebook)
    tokens = quantizer.encode(seq, book)
    doc = {"indices": tokens.indices.tolist(), "pad_len": tokens.pad_len, "L": book.n_layers}
    Path(args.out).write_text(json.dumps(doc) + "\n")
    mse = quantizer.reconstruction_mse(seq, book)
    _write_json(args.report, _report(args, [args.input, args.codebook], {"tokens": str(args.out), "mse": mse}))
    return 0


def cmd_quantize_decode(args) -> int:
    doc = json.loads(Path(args.tokens).read_text())
    book = quantizer.load_codebook(args.codebook)
    tokens = quantizer.TokenIndexSequence(np.asarray(doc["indices"], dtype=np.int64), doc.get("pad_len", 0))
    save_sequence(quantizer.decode(tokens, book), args.out)
    _write_json(args.report, _report(args, [args.tokens, args.codebook], {"output": str(args.out)}))
    return 0


def cmd_scan(args) -> int:
    seq = load_sequence(args.input, args.format)
    if args.params:
        params = ssm.load_params(args.params)
    else:
        params = ssm.init_params(seq.latent_dim, args.state_dim, args.layers, args.seed)
        if args.save_params:
            ssm.save_params(params, args.save_params)
    if args.mask:
        mask = keyframe.mask_from_document(json.loads(Path(args.mask).read_text()))
    else:
        _, mask = keyframe.key_frames(seq, args.ratio, args.bandwidth)
    out = ssm.masked_bi_scan(seq, mask, _vector(args.text, seq.latent_dim), params)
    save_sequence(EmbeddingSequence(out.output, seq.pad_len), args.out)
    result = {
        "output": str(args.out),
        "selected": list(mask.selected),
        "n_blocks": len(params),
        "output_norm": float(np.linalg.norm(out.output)),
    }
    _write_json(args.report, _report(args, [args.input, args.params, args.mask, args.text], result))
    return 0


def cmd_align(args) -> int:
    text, _ = read_matrix(args.text)
    motion, _ = read_matrix(args.motion)
    batch = align.LatentBatch(text, motion)
    sim = align.similarity(batch, args.tau, args.normalize)
    loss = align.contrastive_loss(sim, args.lam)
    if args.grad_out:
        write_matrix(args.grad_out, align.contrastive_grad(sim, args.lam))
    result = {"loss": loss, "grad_path": str(args.grad_out) if args.grad_out else None}
    _write_json(args.report, _report(args, [args.text, args.motion], result))
    return 0


def cmd_eval(args) -> int:
    real = load_sequence(args.real).active if args.real else None
    gen = load_sequence(args.gen).active if args.gen else None
    text = load_sequence(args.text).active if args.text else None
    traj = MotionTrajectory(load_sequence(args.traj).active, args.fps) if args.traj else None
    report = metrics.evaluate(
        real, gen, text, traj, args.pairs, args.pool, args.top_k, args.seed, _window(args.window)
    )
    values = report.to_dict()
    values.pop("config")
    _write_json(args.report, _report(args, [args.real, args.gen, args.text, args.traj], values))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(metrics.MetricReport.TABLE_COLUMNS)
            writer.writerow(["" if v is None else repr(v) for v in report.table_row()])
    return 0


def cmd_synth_clusters(args) -> int:
    spec = synth.ClusterSpec(args.k, args.per, args.sep, args.spread, args.dim, args.seed)
    sample = synth.gen_clustered_embeddings(spec, shuffle=not args.ordered)
    save_sequence(sample.sequence, args.out)
    truth = {"spec": asdict(spec), "true_centers": list(sample.true_centers), "labels": sample.labels.tolist()}
    _write_json(args.truth, _report(args, [], truth))
    return 0


def cmd_synth_motion(args) -> int:
    segments = _segments(args.segments)
    traj = synth.gen_motion_trajectory(segments, args.fps, args.seed, args.noise)
    save_sequence(EmbeddingSequence(traj.frames), args.out)
    truth = {"boundaries": synth.segment_boundaries(segments), "n_frames": traj.n_frames, "fps": traj.fps}
    _write_json(args.truth, _report(args, [], truth))
    return 0


def cmd_validate(args) -> int:
    result = validate(read_sequence(args.input, args.format))
    print(f"{args.input}: {result}")
    return 0 if result else 1


# --- parser ------------------------------------------------------------------


def _add_mask_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=float, default=DEFAULTS.masking_ratio, help="key-frame masking ratio")
    p.add_argument("--bandwidth", type=float, default=DEFAULTS.bandwidth, help="Gaussian density kernel bandwidth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()
    formats = ["binary", "csv", "json"]

    p = sub.add_parser("keyframes", help="density-peaks key-frame selection")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=formats)
    _add_mask_options(p)
    p.add_argument("--out", type=Path, help="mask JSON (stdout if omitted)")
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("mask", help="substitute mask tokens at key frames")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=formats)
    p.add_argument("--mask", type=Path, help="mask JSON from `kmm keyframes`; computed if omitted")
    _add_mask_options(p)
    p.add_argument("--mask-token", type=Path, help="1 x l .kmm vector (zeros if omitted)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_mask)

    q = sub.add_parser("quantize", help="residual vector quantization").add_subparsers(dest="action", required=True)
    p = q.add_parser("fit")
    p.add_argument("--input", type=Path, nargs="+", required=True)
    p.add_argument("--layers", type=int, default=DEFAULTS.layers)
    p.add_argument("--codes", type=int, default=DEFAULTS.codes)
    p.add_argument("--iters", type=int, default=DEFAULTS.kmeans_iters)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, required=True, help="codebook directory")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_quantize_fit)
    p = q.add_parser("encode")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="token index JSON")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_quantize_encode)
    p = q.add_parser("decode")
    p.add_argument("--tokens", type=Path, required=True)
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_quantize_decode)

    p = sub.add_parser("scan", help="masked bidirectional selective scan")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=formats)
    p.add_argument("--mask", type=Path)
    _add_mask_options(p)
    p.add_argument("--text", type=Path, help="1 x l .kmm text token (zeros if omitted)")
    p.add_argument("--params", type=Path, help="parameter manifest; random init if omitted")
    p.add_argument("--save-params", type=Path)
    p.add_argument("--layers", type=int, default=DEFAULTS.scan_layers)
    p.add_argument("--state-dim", type=int, default=DEFAULTS.state_dim)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("align", help="contrastive text-motion loss")
    p.add_argument("--text", type=Path, required=True)
    p.add_argument("--motion", type=Path, required=True)
    p.add_argument("--tau", type=float, default=DEFAULTS.tau)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULTS.lam)
    p.add_argument("--normalize", action="store_true", help="L2-normalize latents first")
    p.add_argument("--grad-out", type=Path)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="FID, Diversity, R-precision, MM-Dist, PJ, AUJ")
    p.add_argument("--real", type=Path)
    p.add_argument("--gen", type=Path)
    p.add_argument("--text", type=Path)
    p.add_argument("--traj", type=Path)
    p.add_argument("--fps", type=float, default=DEFAULTS.fps)
    p.add_argument("--window", help="frame window START:STOP for PJ/AUJ")
    p.add_argument("--pairs", type=int, default=metrics.DEFAULT_PAIRS)
    p.add_argument("--pool", type=int, default=metrics.DEFAULT_POOL)
    p.add_argument("--top-k", type=int, default=metrics.DEFAULT_TOP_K)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--report", type=Path)
    p.add_argument("--csv", type=Path, help="also write a one-row results table")
    p.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="synthetic data").add_subparsers(dest="kind", required=True)
    p = s.add_parser("clusters")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--per", type=int, default=20)
    p.add_argument("--sep", type=float, default=10.0)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--ordered", action="store_true", help="keep tokens grouped by cluster")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path)
    p.set_defaults(func=cmd_synth_clusters)
    p = s.add_parser("motion")
    p.add_argument("--segments", required=True, help='"FRAMES:v1,v2,...;FRAMES:..." velocities per second')
    p.add_argument("--fps", type=float, default=DEFAULTS.fps)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path)
    p.set_defaults(func=cmd_synth_motion)

    p = sub.add_parser("validate", help="check a sequence file")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=formats)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    name = " ".join(filter(None, [args.command, getattr(args, "action", None), getattr(args, "kind", None)]))
    try:
        return args.func(args)
    except OSError as exc:
        print(f"kmm {name}: I/O error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"kmm {name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Key-frame mask modeling toolkit for motion latents.

Density-peaks key-frame selection and masking, residual vector quantization,
a masked bidirectional selective scan, contrastive text-motion alignment and
the standard motion-generation metrics.
"""
from .align import LatentBatch, contrastive_grad, contrastive_loss, similarity
from .keyframe import (
    DensityStats,
    KeyFrameMask,
    build_mask,
    density_stats,
    key_frames,
    pairwise_distances,
    select_key_frames,
)
from .metrics import (
    MetricReport,
    diversity,
    frechet_distance,
    jerk_profile,
    mm_dist,
    peak_jerk_and_auj,
    r_precision,
)
from .quantizer import ResidualCodebook, TokenIndexSequence, decode, encode, fit_residual_codebooks
from .seqdata import EmbeddingSequence, MotionTrajectory, load_sequence, save_sequence, validate
from .ssm import ScanBlockParams, ScanOutput, apply_mask_tokens, masked_bi_scan, reference_scan, selective_scan

__version__ = "0.1.0"

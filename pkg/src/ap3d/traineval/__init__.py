"""Data, objective, optimisation, retrieval metrics and complexity accounting."""

from .analysis import count_flops, count_params, fit_polynomial, mac_breakdown, parse_input_shape
from .losses import batch_hard_triplet, cosine_distance_matrix, loss, reid_loss
from .metrics import (
    RetrievalResult,
    cosine_distances,
    evaluate,
    evaluate_ranking,
    split_query_gallery,
    tracklet_features,
)
from .optim import Adam, step_lr
from .sampling import clip_indices, pk_batches, sample_clip, split_chunks
from .sweep import AXES, SweepConfig, ablation_sweep, rows_to_csv, sweep_spec
from .synth import Jitter, SynthConfig, TrackletSample, export_dataset, generate_synthetic, load_dataset
from .train import TrainConfig, TrainResult, train

__all__ = [
    "AXES",
    "Adam",
    "Jitter",
    "RetrievalResult",
    "SweepConfig",
    "SynthConfig",
    "TrackletSample",
    "TrainConfig",
    "TrainResult",
    "ablation_sweep",
    "batch_hard_triplet",
    "clip_indices",
    "cosine_distance_matrix",
    "cosine_distances",
    "count_flops",
    "count_params",
    "evaluate",
    "evaluate_ranking",
    "export_dataset",
    "fit_polynomial",
    "generate_synthetic",
    "load_dataset",
    "loss",
    "mac_breakdown",
    "parse_input_shape",
    "pk_batches",
    "reid_loss",
    "rows_to_csv",
    "sample_clip",
    "split_chunks",
    "split_query_gallery",
    "step_lr",
    "sweep_spec",
    "tracklet_features",
    "train",
]

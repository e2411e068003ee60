"""Data ingestion, Frechet-proxy evaluation, persistence and run configuration."""

from .checkpoint import decode_checkpoint, encode_checkpoint, entry_size, header_size, load_checkpoint, save_checkpoint
from .config import SCHEMA, RunConfig
from .data import Dataset, load_idx_dataset, read_idx, synth_dataset, write_idx
from .features import FeatureExtractor, extract_features, fid_proxy, projection_matrix, to_proxy_grid
from .frechet import FidWarning, FrechetStats, fit_stats, frechet_distance, merge, stats_from_moments
from .images import load_png, save_png, to_uint8
from .manifest import Manifest, git_blob_sha1, read_manifest
from .train import SweepResult, TrainResult, fid_sweep, load_data, make_model, moving_average, sweep_grid, train

__all__ = [
    "SCHEMA",
    "Dataset",
    "FeatureExtractor",
    "FidWarning",
    "FrechetStats",
    "Manifest",
    "RunConfig",
    "SweepResult",
    "TrainResult",
    "decode_checkpoint",
    "encode_checkpoint",
    "entry_size",
    "extract_features",
    "fid_proxy",
    "fid_sweep",
    "fit_stats",
    "frechet_distance",
    "git_blob_sha1",
    "header_size",
    "load_checkpoint",
    "load_data",
    "load_idx_dataset",
    "load_png",
    "make_model",
    "merge",
    "moving_average",
    "projection_matrix",
    "read_idx",
    "read_manifest",
    "save_checkpoint",
    "save_png",
    "stats_from_moments",
    "sweep_grid",
    "synth_dataset",
    "to_proxy_grid",
    "to_uint8",
    "train",
    "write_idx",
]

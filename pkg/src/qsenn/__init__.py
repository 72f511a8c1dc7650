"""Sparse, ternary, interpretable decision heads on top of a small feature
extractor, plus the metrics and alignment tools to inspect them."""
__version__ = "0.1.0"

from .tensorstore import Dataset, RunConfig, SparseHead, read_tensor, write_tensor
from .glmpath import fit_at, fit_path, select_features
from .quantizer import quantize_multilevel, quantize_ternary
from .divloss import feature_diversity_loss, loc_at_k
from .metrics import MetricsReport, binary_fraction, dependence_gamma, mean_shift_1d
from .clipalign import EmbeddingBundle, align
from .synthgen import PlantedSpec, gen_planted, gen_spurious
from .trainer import DeskModel, evaluate_model, qsenn_fit

__all__ = [
    "Dataset", "RunConfig", "SparseHead", "read_tensor", "write_tensor",
    "fit_at", "fit_path", "select_features", "quantize_multilevel", "quantize_ternary",
    "feature_diversity_loss", "loc_at_k", "MetricsReport", "binary_fraction", "dependence_gamma",
    "mean_shift_1d", "EmbeddingBundle", "align", "PlantedSpec", "gen_planted", "gen_spurious",
    "DeskModel", "evaluate_model", "qsenn_fit",
]

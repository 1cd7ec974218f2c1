"""Supervised brain parcellation.

Voxels are embedded with the top eigenvectors of a group adjacency and then
clustered by a k-means objective plus a penalty on grouping voxel pairs whose
connectivity tracks the outcome. Node-level connectomes feed a
connectome-based predictive model.
"""
from .data_model import (
    AggregationMethod,
    Cohort,
    PreferenceMode,
    SubjectRecord,
    VoxelTimeSeries,
    aggregate_adjacency,
    build_preference_matrix,
    compute_voxel_connectivity,
    load_cohort,
    write_cohort,
)
from .evaluation import DiceReport, dice, match_nodes, reproducibility
from .parcellation import Parcellation
from .prediction import (
    CPMConfig,
    CPMModel,
    CVReport,
    cpm_fit,
    edge_importance_report,
    node_connectomes,
    r_squared,
    tune_lambda,
)
from .solver import FitResult, SBPConfig, multi_restart_fit, objective, sbp_fit
from .spectral import SpectralEmbedding, kmeans_init, spectral_embedding

__version__ = "0.1.0"

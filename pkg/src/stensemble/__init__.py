"""Ensemble graph clustering of spatiotemporal time steps.

Pipeline: gridded or tabular data -> per-algorithm homogeneous ensembles
-> co-association and symmetric NMF consensus -> graph-attention
autoencoder over the merged consensus graph -> k-means on the latent.
"""

from .base_cluster import (ClusterModelConfig, ElbowResult, Partition, agglomerative,
                           elbow_select_k, kmeans, run_algorithm, spectral)
from .cli import PipelineConfig, run_pipeline, run_stability_cmd
from .gat_autoencoder import (GraphInput, TrainConfig, build_graph, cluster_latent, train)
from .hetero_consensus import (ConsensusMatrix, NmfFactors, PostProcessConfig, co_association,
                               nmf_consensus, pad_and_merge, post_process)
from .homo_ensemble import EnsembleRun, HomogeneousConfig, run_homogeneous
from .ingest import (FeatureMatrix, SpatioTemporalGrid, SyntheticSpec, generate_synthetic,
                     load_grid, load_matrix_csv, prepare)
from .kernels import BACKEND
from .metrics import MetricReport, evaluate
from .stability import PerturbationPlan, StabilityReport, apn, fom, ota, run_stability

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ClusterModelConfig", "ConsensusMatrix", "ElbowResult", "EnsembleRun",
    "FeatureMatrix", "GraphInput", "HomogeneousConfig", "MetricReport", "NmfFactors",
    "Partition", "PerturbationPlan", "PipelineConfig", "PostProcessConfig",
    "SpatioTemporalGrid", "StabilityReport", "SyntheticSpec", "TrainConfig",
    "agglomerative", "apn", "build_graph", "cluster_latent", "co_association",
    "elbow_select_k", "evaluate", "fom", "generate_synthetic", "kmeans", "load_grid",
    "load_matrix_csv", "nmf_consensus", "ota", "pad_and_merge", "post_process", "prepare",
    "run_algorithm", "run_homogeneous", "run_pipeline", "run_stability", "run_stability_cmd",
    "spectral", "train",
]

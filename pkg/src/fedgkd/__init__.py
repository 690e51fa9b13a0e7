"""FedGKD: a deterministic simulator of personalized federated graph learning.

Clients train two-layer GCNs on private subgraphs, compress their task into a
tiny distilled graph each round, and a server relates tasks through a
kernelized collaboration network to produce per-client aggregated models.
Everything runs single-process on CPU with seeded, reproducible randomness.
"""

from fedgkd.graphs import Graph, generate_sbm, load_dataset, normalize, save_dataset
from fedgkd.nn import ModelParams, forward, init_params, loss_ce, loss_ce_soft
from fedgkd.partitioning import FederatedSplit, overlapping_split, partition
from fedgkd.runtime import FedConfig, FederationResult, run_federation

__version__ = "0.1.0"

__all__ = [
    "FedConfig",
    "FederatedSplit",
    "FederationResult",
    "Graph",
    "ModelParams",
    "forward",
    "generate_sbm",
    "init_params",
    "load_dataset",
    "loss_ce",
    "loss_ce_soft",
    "normalize",
    "overlapping_split",
    "partition",
    "run_federation",
    "save_dataset",
]

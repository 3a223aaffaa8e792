"""Selective federated multi-task learning simulator.

Clients train personalized dense models with a feature-anchor penalty; the
server links clients by head/anchor similarity, splits them into Louvain
communities, and shares anchors and heads only inside each community.
"""

from .community import Partition, brute_force_best_partition, coarsen, louvain, modularity
from .federation import FederationConfig, FederationState, init_federation, run_round
from .graph import GraphConfig, SimilarityGraph, build_graph
from .model import ClientModel, FeatureAnchorSet, LocalTrainConfig, local_train

__version__ = "0.1.0"

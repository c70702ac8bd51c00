"""Interactive (target-guided) graph convolution for collaborative filtering."""

from .data import InteractionDataset, generate_synthetic, load_dataset
from .evaluation import RankingResult, evaluate, ndcg_at_k, rank_items, recall_at_k
from .graph import ITEM, USER, BipartiteGraph, NodeRef, build_graph, sample_tree
from .model import EmbeddingTable, Hyperparams, LayerWeights, Snapshot, score_pair
from .train import Schedule

__all__ = [
    "ITEM",
    "USER",
    "BipartiteGraph",
    "EmbeddingTable",
    "Hyperparams",
    "InteractionDataset",
    "LayerWeights",
    "NodeRef",
    "RankingResult",
    "Schedule",
    "Snapshot",
    "build_graph",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "ndcg_at_k",
    "rank_items",
    "recall_at_k",
    "sample_tree",
    "score_pair",
]
__version__ = "0.1.0"

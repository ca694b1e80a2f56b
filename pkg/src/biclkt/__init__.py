"""Bi-level contrastive pretraining of exercise embeddings for knowledge tracing.

Stages: interaction logs -> per-concept influence graphs -> contrastive
pretraining (node and graph level) -> DKT / DKVMN heads over frozen
embeddings -> AUC / ACC evaluation.
"""
from .config import RunConfig, load as load_config
from .contrastive import ContrastiveConfig, EmbeddingTable, pretrain
from .dataio import Interaction, generate_synthetic, parse_log, split, to_sequences
from .evaluation import acc, auc, linear_probe
from .graph import build_all, build_influence_graph, pagerank
from .prediction import HeadConfig, fuse, predict, train_head

__version__ = "0.1.0"

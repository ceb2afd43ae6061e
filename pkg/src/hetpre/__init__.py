"""Self-supervised pre-training on heterogeneous information networks
via structural-clustering pseudo-labels."""

from .attlpa import label_churn, propagate
from .encoder import (
    AttentionSnapshot,
    EmbeddingTable,
    ModelParams,
    backward,
    classify,
    cross_entropy,
    forward,
    init_params,
    loss_and_grad,
)
from .errors import HetpreError
from .evaluation import kmeans_eval, linear_probe
from .graph import FeatureSet, HinGraph, HinSchema, build_graph, neighbors
from .lpa import PseudoLabels, frequency_vote, lpa_init
from .synth import planted_hin
from .trainer import TrainConfig, TrainReport, adam_step, pretrain

__version__ = "0.1.0"

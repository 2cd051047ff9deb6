"""Knowledge-graph embedding transfer: path-encoder teachers distilled into target-KG students."""

__version__ = "0.1.0"

from .distill import DistillConfig, retrain
from .encoders import EncoderConfig
from .errors import (CheckpointError, ConfigError, DataError, KGTransferError, NumericError,
                     ParseError)
from .evaluation import MetricsReport, evaluate
from .fixtures import TransferScenario, generate_transfer_scenario, random_kg
from .kg import AlignmentSet, DatasetSplit, KnowledgeGraph, MultiSourceCollection
from .objective import NceConfig
from .paths import PathCorpus, WalkConfig, sample_paths
from .pipeline import Settings, run_joint_lp, run_lp, run_pr4lp
from .pretrain import Checkpoint, TrainConfig, load_checkpoint, pretrain, save_checkpoint
from .rules import mine_rules, rule_report
from .subgraph import LinkedSubgraph, linked_subgraph

__all__ = [
    "AlignmentSet", "Checkpoint", "CheckpointError", "ConfigError", "DataError", "DatasetSplit",
    "DistillConfig", "EncoderConfig", "KGTransferError", "KnowledgeGraph", "LinkedSubgraph",
    "MetricsReport", "MultiSourceCollection", "NceConfig", "NumericError", "ParseError",
    "PathCorpus", "Settings", "TrainConfig", "TransferScenario", "WalkConfig", "evaluate",
    "generate_transfer_scenario", "linked_subgraph", "load_checkpoint", "mine_rules",
    "pretrain", "random_kg", "retrain", "rule_report", "run_joint_lp", "run_lp", "run_pr4lp",
    "sample_paths", "save_checkpoint",
]

"""The three link-prediction settings: target only, joint graph, and pre-train plus distil."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distill import DistillConfig, RetrainResult, retrain
from .encoders import EncoderConfig
from .evaluation import MetricsReport, evaluate
from .kg import (AlignmentSet, DatasetSplit, KnowledgeGraph, MultiSourceCollection,
                 merge_aligned)
from .objective import NceConfig
from .paths import WalkConfig
from .pretrain import Checkpoint, PretrainResult, TrainConfig, pretrain
from .subgraph import LinkedSubgraph, linked_subgraph


@dataclass(frozen=True)
class Settings:
    """Every hyperparameter of one experiment."""

    encoder: EncoderConfig = EncoderConfig()
    walk: WalkConfig = WalkConfig()
    nce: NceConfig = NceConfig()
    pretrain: TrainConfig = TrainConfig()
    retrain: TrainConfig = TrainConfig()
    distill: DistillConfig = DistillConfig()
    teacher_encoder: EncoderConfig | None = None
    budget: int | None = None


@dataclass
class RunResult:
    report: MetricsReport
    student: RetrainResult
    teacher: Checkpoint | None = None
    subgraph: LinkedSubgraph | None = None
    extra: dict = field(default_factory=dict)


def _filter(split: DatasetSplit, filter_all: bool) -> np.ndarray:
    if filter_all:
        return np.concatenate([split.train, split.valid, split.test])
    return split.train


def run_lp(target: KnowledgeGraph, split: DatasetSplit, s: Settings, log=None) -> RunResult:
    """Train on the target KG alone and score the test split."""
    res = retrain(target, split, s.encoder, s.walk, s.nce, s.retrain, s.distill,
                  setting="lp", log=log)
    report = evaluate(res.checkpoint, split.test, _filter(split, s.distill.filter_all), "lp")
    return RunResult(report, res)


def pretrain_teacher(backgrounds: list[KnowledgeGraph], alignments: list[AlignmentSet],
                     s: Settings, log=None) -> PretrainResult:
    collection = MultiSourceCollection(list(backgrounds), list(alignments))
    return pretrain(collection, s.walk, s.nce, s.pretrain, s.teacher_encoder or s.encoder,
                    allow_single=len(backgrounds) == 1, log=log)


def run_pr4lp(target: KnowledgeGraph, split: DatasetSplit, background: KnowledgeGraph,
              alignment: AlignmentSet, s: Settings, teacher: Checkpoint | None = None,
              log=None) -> RunResult:
    """Pre-train a teacher on the background KG (unless given), then distil into a student."""
    if teacher is None:
        teacher = pretrain_teacher([background], [], s, log).checkpoint
    budget = len(split.train) if s.budget is None else s.budget
    sub = linked_subgraph(background, alignment, budget, s.retrain.seed)
    res = retrain(target, split, s.encoder, s.walk, s.nce, s.retrain, s.distill, teacher,
                  background, sub, setting="pr4lp", log=log)
    report = evaluate(res.checkpoint, split.test, _filter(split, s.distill.filter_all), "pr4lp")
    return RunResult(report, res, teacher, sub)


def run_joint_lp(target: KnowledgeGraph, split: DatasetSplit, background: KnowledgeGraph,
                 alignment: AlignmentSet, s: Settings, log=None) -> RunResult:
    """Train on the background merged with the target training triplets."""
    train_kg = target.with_triplets(split.train)
    if alignment.left_kg == target.name:
        alignment = alignment.reversed()
    merged = merge_aligned(MultiSourceCollection([background, train_kg], [alignment]), "joint")
    eo = merged.entity_offsets[target.name]
    ro = merged.relation_offsets[target.name]

    def to_joint(t):
        t = np.asarray(t, dtype=np.int64).reshape(-1, 3)
        return np.stack([merged.entity_class[eo + t[:, 0]], t[:, 1] + ro,
                         merged.entity_class[eo + t[:, 2]]], axis=1).astype(np.int32)

    joint_split = DatasetSplit(merged.kg.triplets, to_joint(split.valid), to_joint(split.test))
    candidates = np.unique(merged.entity_class[eo:eo + target.num_entities])
    res = retrain(merged.kg, joint_split, s.encoder, s.walk, s.nce, s.retrain, s.distill,
                  setting="joint-lp", log=log, candidates=candidates)
    known = to_joint(_filter(split, s.distill.filter_all))
    report = evaluate(res.checkpoint, joint_split.test, known, "joint-lp")
    return RunResult(report, res, extra={"merged": merged})

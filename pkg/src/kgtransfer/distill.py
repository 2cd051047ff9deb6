"""Knowledge distillation from a frozen teacher and local re-training of the student."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import (EMBEDDING_NAMES, EncoderConfig, ParameterSet, bind, compute_gradients,
                       context_representation, forward, forward_transformer, init_parameters)
from .errors import ConfigError, DataError, NumericError
from .evaluation import MetricsReport, evaluate
from .kg import (DatasetSplit, KnowledgeGraph, add_reverse_triplets, disjoint_union)
from .objective import NceConfig
from .paths import RAW, PathCorpus, WalkConfig, build_corpus, symmetric_mapping
from .pretrain import (AdamState, Checkpoint, TrainConfig, adam_step, checkpoint_digest,
                       iterate_batches, kg_step, negative_tables)
from .subgraph import LinkedSubgraph, subgraph_kg

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    """Weights and schedule of the distillation objective.

    The KD loss is ``L_feat + alpha * L_net + beta * L_prob``; a zero weight
    (or ``feature=False``) leaves that term out of the graph entirely.
    ``kd_ratio`` KD batches follow every path-loss batch.
    """

    alpha: float = 0.3
    beta: float = 0.3
    feature: bool = True
    kd_ratio: int = 1
    kd_batch_size: int | None = None
    patience: int = 2
    valid_every: int = 2
    init_from_teacher: bool = False
    filter_all: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.kd_ratio < 0 or self.patience < 0 or self.valid_every < 1:
            raise ConfigError("kd_ratio, patience >= 0 and valid_every >= 1 required")


# -- losses ----------------------------------------------------------------

def mse(a, b) -> Tensor:
    diff = ag.as_tensor(a) - b
    return (diff * diff).mean()


def feature_kd_loss(student, teacher, w_feat, aligned=None) -> Tensor:
    """Embedding-level distillation.

    ``student`` holds ``(n, d_s)`` student embeddings of the subgraph
    entities and ``teacher`` their ``(n, d_t)`` teacher embeddings;
    ``w_feat`` is ``(d_t, d_s)``. ``aligned`` is an optional pair of
    ``(m, d_s)`` embeddings whose rows should coincide. Empty sets add 0.
    """
    student, w_feat = ag.as_tensor(student), ag.as_tensor(w_feat)
    teacher = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)
    if student.shape[0] != teacher.shape[0]:
        raise DataError("every subgraph entity needs a teacher embedding")
    loss = ag.as_tensor(0.0)
    if student.shape[0]:
        loss = loss + mse(student @ w_feat.T, teacher)
    if aligned is not None and aligned[0].shape[0]:
        loss = loss + mse(aligned[0], aligned[1])
    return loss


def matched_parameters(student: dict, teacher: dict) -> list[str]:
    """Encoder parameter names present in both models; embeddings excluded.

    Models of different depth share the layers of the shallower one.
    """
    return [n for n in student if n in teacher and n not in EMBEDDING_NAMES]


def init_transforms(student: dict, teacher: dict) -> ParameterSet:
    """Identity-initialised maps from student to teacher parameter shapes.

    Every matched tensor gets a left map ``(t0, s0)``; matrices whose
    trailing dimensions differ also get a right map ``(s1, t1)``. Scalars
    get a scalar weight of 1.
    """
    out = ParameterSet()
    for name in matched_parameters(student, teacher):
        s, t = np.shape(student[name]), np.shape(teacher[name])
        if len(s) != len(t):
            raise DataError(f"parameter {name} has rank {len(s)} vs {len(t)}")
        if len(s) == 0:
            out[f"kd.net.{name}.left"] = np.ones(())
            continue
        out[f"kd.net.{name}.left"] = np.eye(t[0], s[0])
        if len(s) == 2 and s[1] != t[1]:
            out[f"kd.net.{name}.right"] = np.eye(s[1], t[1])
    return out


def network_kd_loss(student: dict, teacher: dict, transforms: dict) -> Tensor:
    """Mean over matched parameters of ``MSE(W theta, theta_teach)``.

    ``transforms`` maps ``kd.net.<name>.left`` (and ``.right``) to the
    learnable maps from :func:`init_transforms`; a shape mismatch without a
    map is an error.
    """
    names = matched_parameters(student, teacher)
    if not names:
        return ag.as_tensor(0.0)
    total = ag.as_tensor(0.0)
    for name in names:
        theta = ag.as_tensor(student[name])
        target = np.asarray(teacher[name].data if isinstance(teacher[name], Tensor) else teacher[name])
        left = transforms.get(f"kd.net.{name}.left")
        right = transforms.get(f"kd.net.{name}.right")
        if left is None:
            if theta.shape != target.shape:
                raise DataError(f"parameter {name}: shape {theta.shape} vs {target.shape} "
                                "and no transform")
            mapped = theta
        elif theta.ndim == 0:
            mapped = ag.as_tensor(left) * theta
        else:
            mapped = ag.as_tensor(left) @ theta
            if right is not None:
                mapped = mapped @ right
        if mapped.shape != target.shape:
            raise DataError(f"parameter {name}: transformed shape {mapped.shape} "
                            f"vs teacher {target.shape}")
        total = total + mse(mapped, target)
    return total * (1.0 / len(names))


def position_context(params, paths, encoder: EncoderConfig, position: int,
                     training: bool = False, rng=None) -> Tensor:
    """Context vector predicting the element at 1-based ``position`` of each path."""
    if encoder.kind == "transformer":
        h = forward_transformer(params, paths, encoder, position, training, rng)
    else:
        h = forward(params, paths, encoder, training=training, rng=rng)
    return context_representation(h, position)


def normalized_scores(candidates: Tensor, context: Tensor) -> Tensor:
    """Sigmoid scores over the candidate rows, normalised to sum to 1 per context."""
    p = (context @ ag.as_tensor(candidates).T).sigmoid()
    return p / p.sum(axis=-1, keepdims=True)


def teacher_distribution(teacher: Checkpoint, paths, position: int, candidates) -> np.ndarray:
    """Teacher prediction distribution over ``candidates`` (teacher indices); no gradient."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise DataError("empty candidate set")
    ctx = position_context(teacher.params, np.asarray(paths), teacher.encoder, position)
    table = teacher.params["entity_embedding"][candidates]
    return normalized_scores(table, ctx).data


def student_distribution(weights, paths, encoder: EncoderConfig, position: int, candidates,
                         training: bool = False, rng=None) -> Tensor:
    """Student prediction distribution; gradients flow to ``weights``."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise DataError("empty candidate set")
    if not isinstance(next(iter(weights.values())), Tensor):
        weights = bind(weights, requires_grad=False)
    ctx = position_context(weights, np.asarray(paths), encoder, position, training, rng)
    return normalized_scores(ag.take(weights["entity_embedding"], candidates), ctx)


def prediction_kd_loss(teacher_probs, student_probs, eps: float = PROB_FLOOR) -> Tensor:
    """``KL(teacher || student)``, averaged over leading axes.

    Student probabilities below ``eps`` are floored (and logged); teacher
    zeros contribute nothing.
    """
    pt = np.asarray(teacher_probs, dtype=np.float64)
    ps = ag.as_tensor(student_probs)
    low = ps.data < eps
    if np.any(low & (pt > 0)):
        logger.debug("flooring %d student probabilities", int(np.sum(low & (pt > 0))))
    floored = ag.where(low, eps, ps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(pt > 0, pt * np.log(np.where(pt > 0, pt, 1.0)), 0.0)
    per_row = (ent - pt * floored.log()).sum(axis=-1)
    return per_row.mean() if per_row.ndim else per_row


def total_kd_loss(l_feat, l_net, l_prob, alpha: float, beta: float):
    return l_feat + alpha * l_net + beta * l_prob


# -- student space ---------------------------------------------------------

@dataclass
class StudentSpace:
    """Student vocabulary: target entities and relations first, then the subgraph's.

    Target indices therefore coincide with student indices. Arrays named
    ``teacher_*`` translate student indices of subgraph elements to the
    teacher vocabulary (-1 where absent).
    """

    kg: KnowledgeGraph
    num_target_entities: int
    num_target_relations: int
    subgraph_entities: np.ndarray
    aligned: np.ndarray
    teacher_entities: np.ndarray
    teacher_relations: np.ndarray
    entity_tags: np.ndarray
    relation_tags: np.ndarray
    tag_names: list


def build_student_space(target: KnowledgeGraph, split: DatasetSplit,
                        background: KnowledgeGraph | None = None,
                        sub: LinkedSubgraph | None = None,
                        teacher: Checkpoint | None = None) -> StudentSpace:
    if target.reverse_closed:
        raise DataError("pass the target KG before reverse closure")
    parts = [add_reverse_triplets(target.with_triplets(split.train))]
    # an empty sample adds nothing, so b = 0 leaves the target-only vocabulary
    if background is not None and sub is not None and len(sub.sampled):
        if background.name == target.name:
            raise DataError("background and target KGs need distinct names")
        parts.append(add_reverse_triplets(subgraph_kg(background, sub)))
    union, offsets = disjoint_union(parts, "student")
    n_te, n_tr = parts[0].num_entities, parts[0].num_relations
    ent_tags = np.zeros(union.num_entities, dtype=np.uint16)
    ent_tags[n_te:] = 1
    rel_tags = np.zeros(union.num_relations, dtype=np.uint16)
    rel_tags[n_tr:] = 1
    sub_entities = np.arange(n_te, union.num_entities, dtype=np.int64)
    aligned = np.zeros((0, 2), dtype=np.int64)
    if sub is not None and background is not None and len(sub.alignment):
        local = {int(e): i for i, e in enumerate(sub.entities.tolist())}
        aligned = np.array([(t, n_te + local[b]) for t, b in sub.alignment.tolist()],
                           dtype=np.int64)
    t_ent = np.full(union.num_entities, -1, dtype=np.int64)
    t_rel = np.full(union.num_relations, -1, dtype=np.int64)
    if teacher is not None:
        te, tr = teacher.entity_index(), teacher.relation_index()
        for i in sub_entities.tolist():
            t_ent[i] = te.get(union.entities[i], -1)
        for i in range(n_tr, union.num_relations):
            t_rel[i] = tr.get(union.relations[i], -1)
        missing = [union.entities[i] for i in sub_entities.tolist() if t_ent[i] < 0]
        if missing:
            raise DataError(f"teacher has no embedding for {len(missing)} subgraph entities, "
                            f"e.g. {missing[0]!r}")
    return StudentSpace(union, n_te, n_tr, sub_entities, aligned, t_ent, t_rel, ent_tags,
                        rel_tags, [p.name for p in parts])


def student_checkpoint(space: StudentSpace, encoder: EncoderConfig, params: ParameterSet,
                       metadata: dict, extra: ParameterSet | None = None,
                       candidates: np.ndarray | None = None) -> Checkpoint:
    if candidates is None:
        candidates = np.arange(space.num_target_entities)
    return Checkpoint(encoder, params, list(space.kg.entities), list(space.kg.relations),
                      space.kg.inverse.copy(), dict(metadata), np.asarray(candidates),
                      extra or ParameterSet())


def copy_from_teacher(params: ParameterSet, teacher: Checkpoint, space: StudentSpace) -> None:
    """Overwrite student weights with the teacher's wherever both define them."""
    for name, value in teacher.params.items():
        if name in EMBEDDING_NAMES or name not in params:
            continue
        if params[name].shape != value.shape:
            raise DataError(f"cannot copy {name}: shapes differ")
        params[name][...] = value
    ent = space.teacher_entities >= 0
    rel = space.teacher_relations >= 0
    params["entity_embedding"][ent] = teacher.params["entity_embedding"][space.teacher_entities[ent]]
    params["relation_embedding"][rel] = \
        teacher.params["relation_embedding"][space.teacher_relations[rel]]


# -- re-training -----------------------------------------------------------

@dataclass
class RetrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    best_valid: MetricsReport | None
    epochs_run: int
    space: StudentSpace = field(repr=False, default=None)


class _KnowledgeDistiller:
    """Holds the frozen teacher's contribution and computes one KD loss."""

    def __init__(self, teacher: Checkpoint, space: StudentSpace, corpus: PathCorpus,
                 encoder: EncoderConfig, config: DistillConfig):
        self.teacher, self.space, self.encoder, self.config = teacher, space, encoder, config
        sub = space.subgraph_entities
        self.sub_entities = sub
        self.teacher_sub = teacher.params["entity_embedding"][space.teacher_entities[sub]] \
            if len(sub) else np.zeros((0, teacher.encoder.dim))
        # prediction KD runs on raw walks lying entirely inside the subgraph
        self.paths = np.zeros((0, corpus.length), dtype=np.int32)
        self.targets = np.zeros((0, len(sub)))
        if config.beta > 0 and len(sub) and len(corpus):
            tags = space.entity_tags[corpus.elements[:, 0::2]]
            inside = (corpus.provenance == RAW) & np.all(tags == 1, axis=1)
            self.paths = corpus.elements[inside]
        if len(self.paths):
            mapped = self.paths.astype(np.int64).copy()
            mapped[:, 0::2] = space.teacher_entities[mapped[:, 0::2]]
            mapped[:, 1::2] = space.teacher_relations[mapped[:, 1::2]]
            if np.any(mapped < 0):
                raise DataError("teacher vocabulary lacks a relation of the subgraph")
            self.targets = np.concatenate([
                teacher_distribution(teacher, mapped[i:i + 1024], corpus.length,
                                     space.teacher_entities[sub])
                for i in range(0, len(mapped), 1024)])
        self.cursor = 0

    @property
    def active(self) -> bool:
        c = self.config
        return ((c.feature and len(self.sub_entities) > 0) or c.alpha > 0
                or (c.beta > 0 and len(self.paths) > 0))

    def loss(self, weights: dict, kd: dict, batch_size: int, training: bool, rng) -> Tensor:
        c = self.config
        total = ag.as_tensor(0.0)
        if c.feature:
            aligned = None
            if len(self.space.aligned):
                aligned = (ag.take(weights["entity_embedding"], self.space.aligned[:, 0]),
                           ag.take(weights["entity_embedding"], self.space.aligned[:, 1]))
            student = ag.take(weights["entity_embedding"], self.sub_entities)
            total = total + feature_kd_loss(student, self.teacher_sub, kd["kd.feat"], aligned)
        if c.alpha > 0:
            total = total + c.alpha * network_kd_loss(weights, self.teacher.params, kd)
        if c.beta > 0 and len(self.paths):
            n = len(self.paths)
            idx = (self.cursor + np.arange(min(batch_size, n))) % n
            self.cursor = int((self.cursor + len(idx)) % n)
            probs = student_distribution(weights, self.paths[idx], self.encoder,
                                         self.paths.shape[1], self.sub_entities, training, rng)
            total = total + c.beta * prediction_kd_loss(self.targets[idx], probs)
        return total


def retrain(target: KnowledgeGraph, split: DatasetSplit, encoder: EncoderConfig,
            walk: WalkConfig, nce: NceConfig, train: TrainConfig,
            distill: DistillConfig = DistillConfig(), teacher: Checkpoint | None = None,
            background: KnowledgeGraph | None = None, sub: LinkedSubgraph | None = None,
            setting: str = "pr4lp", log: Callable[[dict], None] | None = None,
            candidates: np.ndarray | None = None) -> RetrainResult:
    """Train a student on the target KG, optionally distilling from ``teacher``.

    Path-loss batches over the target and subgraph corpus alternate with KD
    batches. Every ``valid_every`` epochs the filtered validation MRR is
    checked; training stops once it fails to improve ``patience + 1`` times
    in a row, and the best snapshot is returned. Without a teacher (or with
    every KD term switched off and an empty subgraph) this is plain
    target-only training. ``candidates`` restricts ranking to a subset of
    target entities.
    """
    if len(split.valid) == 0:
        raise DataError("re-training needs validation triplets for early stopping")
    space = build_student_space(target, split, background, sub, teacher)
    mapping = symmetric_mapping(space.aligned) if len(space.aligned) else {}
    corpus = build_corpus(space.kg, walk, mapping, train.augmentation_multiplier,
                          space.entity_tags, space.relation_tags, space.tag_names)
    if len(corpus) == 0:
        raise DataError("re-training corpus is empty")
    tables = negative_tables(space.kg)
    params = init_parameters(encoder, space.kg.num_entities, space.kg.num_relations, train.seed)
    distiller = None
    kd = ParameterSet()
    if teacher is not None:
        before = checkpoint_digest(teacher)
        distiller = _KnowledgeDistiller(teacher, space, corpus, encoder, distill)
        if distill.init_from_teacher:
            copy_from_teacher(params, teacher, space)
        if distill.feature:
            kd["kd.feat"] = np.eye(teacher.encoder.dim, encoder.dim)
        if distill.alpha > 0:
            kd.update(init_transforms(params, teacher.params))
        if not distiller.active:
            distiller = None
    filter_triplets = split.train if not distill.filter_all else \
        np.concatenate([split.train, split.valid, split.test])
    state = AdamState()
    rng = np.random.default_rng([train.seed, 2])
    kd_batch = distill.kd_batch_size or train.batch_size
    history: list[dict] = []
    best, best_report, best_epoch, bad, epoch = None, None, 0, 0, 0
    metadata = {"role": "student", "setting": setting, "seed": train.seed,
                "alpha": distill.alpha, "beta": distill.beta}
    if teacher is not None:
        metadata["teacher_sha256"] = before
    if sub is not None:
        metadata.update({"budget": sub.budget, "subgraph_seed": sub.seed,
                         "subgraph_triplets": len(sub.sampled)})
    for epoch in range(1, train.epochs + 1):
        start = time.perf_counter()
        kg_total = kd_total = 0.0
        kd_steps = 0
        for idx in iterate_batches(len(corpus), train.batch_size, rng):
            kg_total += kg_step(params, corpus.elements[idx], encoder, nce, tables, state,
                                train, rng) * len(idx)
            for _ in range(distill.kd_ratio if distiller else 0):
                kd_total += _kd_step(distiller, params, kd, state, train, kd_batch, rng)
                kd_steps += 1
        record = {"epoch": epoch, "mean_loss": kg_total / len(corpus),
                  "kd_loss": kd_total / kd_steps if kd_steps else 0.0,
                  "wall_time": time.perf_counter() - start}
        if not params.all_finite():
            raise NumericError(f"student parameters diverged at epoch {epoch}")
        check = epoch % distill.valid_every == 0 or epoch == train.epochs
        if check:
            report = evaluate(student_checkpoint(space, encoder, params, metadata, None,
                                                 candidates),
                              split.valid, filter_triplets, setting)
            record["valid_mrr"] = report.mrr
            record["valid_hits@1"] = report.hits[1]
            if best_report is None or report.mrr > best_report.mrr:
                best, best_report, best_epoch, bad = params.copy(), report, epoch, 0
            else:
                bad += 1
        history.append(record)
        logger.info("retrain epoch %d loss %.4f", epoch, record["mean_loss"])
        if log:
            log(record)
        if check and bad > distill.patience:
            break
    if teacher is not None and checkpoint_digest(teacher) != before:
        raise NumericError("teacher parameters changed during re-training")
    if best is None:
        best = params.copy()
    metadata.update({"best_epoch": best_epoch, "epochs_run": epoch})
    ckpt = student_checkpoint(space, encoder, best, metadata, kd, candidates)
    return RetrainResult(ckpt, history, best_epoch, best_report, epoch, space)


def _kd_step(distiller: _KnowledgeDistiller, params, kd, state, train, batch_size, rng) -> float:
    bound = bind(params)
    bound_kd = bind(kd)
    loss = distiller.loss(bound, bound_kd, batch_size, True, rng)
    if not loss.requires_grad:
        return loss.item()
    grads = compute_gradients(loss, {**bound, **bound_kd})
    merged = {**params, **kd}
    adam_step(merged, grads, state, train)
    return loss.item()

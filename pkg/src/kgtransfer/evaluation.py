"""Filtered link-prediction ranking, metric reports and 2-D projections."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import query_contexts
from .errors import DataError
from .pretrain import Checkpoint

logger = logging.getLogger(__name__)

SETTINGS = {"lp": "LP", "joint-lp": "JointLP", "pr4lp": "PR4LP"}
HITS_AT = (1, 10)


def score_query(model: Checkpoint, head: int, relation: int, candidate: int) -> float:
    """Dot product of ``candidate``'s embedding with the context of ``(head, relation, ?)``."""
    ents = model.params["entity_embedding"]
    if not (0 <= head < len(ents) and 0 <= candidate < len(ents)):
        raise DataError("entity outside the model vocabulary")
    if not 0 <= relation < len(model.params["relation_embedding"]):
        raise DataError("relation outside the model vocabulary")
    ctx = query_contexts(model.params, [head], [relation], model.encoder)[0]
    return float(ents[candidate] @ ctx)


def filtered_rank(scores: np.ndarray, gold: int, excluded) -> int:
    """Rank of ``gold`` among ``scores`` with ``excluded`` candidate positions removed.

    Ties put the gold entity at the mean tied position, rounded up.
    """
    keep = np.ones(len(scores), dtype=bool)
    if len(excluded):
        keep[np.asarray(list(excluded), dtype=np.int64)] = False
    keep[gold] = True
    g = scores[gold]
    higher = int(np.count_nonzero(scores[keep] > g))
    ties = int(np.count_nonzero(scores[keep] == g)) - 1
    return 1 + higher + math.ceil(ties / 2)


class FilterIndex:
    """Known answers per (subject, relation) and per (relation, object)."""

    def __init__(self, triplets):
        self.tails: dict[tuple[int, int], set[int]] = {}
        self.heads: dict[tuple[int, int], set[int]] = {}
        for s, r, o in np.asarray(triplets).reshape(-1, 3).tolist():
            self.tails.setdefault((s, r), set()).add(o)
            self.heads.setdefault((r, o), set()).add(s)


def rank_query(model: Checkpoint, head: int, relation: int, gold: int, known: set[int]) -> int:
    """Filtered rank of ``gold`` for ``(head, relation, ?)`` over the model's candidates.

    ``known`` holds entities forming an already-known triplet with the query;
    they leave the candidate list, except the gold entity itself.
    """
    cands = model.candidate_entities
    pos = np.searchsorted(cands, gold)
    if pos >= len(cands) or cands[pos] != gold:
        raise DataError(f"gold entity {gold} is not a ranking candidate")
    ctx = query_contexts(model.params, [head], [relation], model.encoder)[0]
    scores = model.params["entity_embedding"][cands] @ ctx
    excluded = np.searchsorted(cands, [e for e in known if e != gold])
    return filtered_rank(scores, int(pos), excluded)


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    ranks: np.ndarray
    count: int
    setting: str = "LP"
    candidates_after_filter: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_ranks(cls, ranks, setting: str = "LP", kept=None) -> "MetricsReport":
        ranks = np.asarray(ranks, dtype=np.int64)
        if len(ranks) == 0:
            raise DataError("no queries to evaluate")
        hits = {k: float(np.mean(ranks <= k)) for k in HITS_AT}
        kept = np.zeros(0) if kept is None else np.asarray(kept)
        return cls(float(np.mean(1.0 / ranks)), hits, ranks, len(ranks), setting, kept)

    def as_dict(self) -> dict:
        return {"setting": self.setting, "queries": self.count, "mrr": self.mrr,
                **{f"hits@{k}": v for k, v in self.hits.items()}}

    def to_text(self) -> str:
        hits = "  ".join(f"H@{k}={v:.4f}" for k, v in self.hits.items())
        return f"setting={self.setting}  queries={self.count}  MRR={self.mrr:.4f}  {hits}"

    def to_tsv(self) -> str:
        d = self.as_dict()
        return "\t".join(d) + "\n" + "\t".join(str(v) for v in d.values()) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _queries(test: np.ndarray, inverse: np.ndarray, both: bool):
    """(head, relation, gold, forward relation, direction) rows; direction 1 marks head queries."""
    rows = [np.column_stack([test[:, 0], test[:, 1], test[:, 2], test[:, 1],
                             np.zeros(len(test), np.int64)])]
    if both:
        inv = inverse[test[:, 1]]
        if np.any(inv < 0):
            raise DataError("head queries need reverse relations; reverse-close the KG first")
        rows.append(np.column_stack([test[:, 2], inv, test[:, 0], test[:, 1],
                                     np.ones(len(test), np.int64)]))
    return np.concatenate(rows).astype(np.int64)


def evaluate(model: Checkpoint, test, filter_triplets=(), setting: str = "LP",
             both_directions: bool = True, batch_size: int = 512) -> MetricsReport:
    """Filtered MRR and Hits@k over ``test`` triplets, all in model indices.

    Every test triplet yields a tail query and, via the reverse relation, a
    head query. ``filter_triplets`` are the known triplets removed from the
    candidate lists (forward orientation).
    """
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    if len(test) == 0:
        raise DataError("empty test split")
    index = FilterIndex(filter_triplets)
    queries = _queries(test, model.inverse, both_directions)
    cands = model.candidate_entities
    cand_pos = {int(e): i for i, e in enumerate(cands.tolist())}
    table = model.params["entity_embedding"][cands]
    ranks = np.empty(len(queries), dtype=np.int64)
    kept = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        ctx = query_contexts(model.params, chunk[:, 0], chunk[:, 1], model.encoder)
        scores = ctx @ table.T
        for j, (h, r, gold, fwd, direction) in enumerate(chunk.tolist()):
            if gold not in cand_pos:
                raise DataError(f"gold entity {gold} is not a ranking candidate")
            if direction == 0:
                known = index.tails.get((h, r), ())
            else:
                known = index.heads.get((fwd, h), ())
            excluded = [cand_pos[e] for e in known if e != gold and e in cand_pos]
            ranks[start + j] = filtered_rank(scores[j], cand_pos[gold], excluded)
            kept[start + j] = len(cands) - len(excluded)
    logger.debug("mean filtered candidate count %.1f", kept.mean())
    return MetricsReport.from_ranks(ranks, SETTINGS.get(setting, setting), kept)


# -- projection ------------------------------------------------------------

def project(matrix, tol: float = 1e-10) -> np.ndarray:
    """Mean-centred rows projected on the top two principal axes.

    Each axis is signed so its largest-magnitude coordinate is positive.
    Axes without variance give zero coordinates.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DataError("projection needs at least two points")
    x = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    coords = np.zeros((len(x), 2))
    scale = s[0] if len(s) else 0.0
    for k in range(min(2, len(s))):
        if s[k] <= tol * max(scale, 1.0):
            continue
        col = u[:, k] * s[k]
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        coords[:, k] = col
    return coords


def project_embeddings(model: Checkpoint, entities, labels=None) -> list[tuple[str, float, float]]:
    """Rows ``(label, x, y)`` for the chosen entity indices."""
    entities = np.asarray(entities, dtype=np.int64)
    coords = project(model.params["entity_embedding"][entities])
    labels = [model.entities[i] for i in entities] if labels is None else list(labels)
    return [(lab, float(a), float(b)) for lab, (a, b) in zip(labels, coords)]


def write_projection(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label\tx\ty\n")
        for lab, a, b in rows:
            fh.write(f"{lab}\t{a:.10g}\t{b:.10g}\n")

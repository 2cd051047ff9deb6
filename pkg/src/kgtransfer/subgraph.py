"""Linked subgraph between a background KG and a target KG, and budgeted sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kg import AlignmentSet, KnowledgeGraph, save_kg, write_alignment


@dataclass
class LinkedSubgraph:
    """Background triplets touching aligned entities, and the budgeted sample.

    All triplet arrays index the background vocabulary. ``alignment`` holds
    (target entity, background entity) pairs restricted to ``entities``.
    """

    full: np.ndarray
    core: np.ndarray
    sampled: np.ndarray
    entities: np.ndarray
    alignment: np.ndarray
    budget: int
    shortfall: int
    seed: int

    def triplet_sets(self):
        return tuple(set(map(tuple, a.tolist())) for a in (self.full, self.core, self.sampled))


def _background_pairs(background: KnowledgeGraph, alignment: AlignmentSet) -> np.ndarray:
    """Alignment as (target, background) pairs, whichever side the background is on."""
    if alignment.right_kg == background.name:
        return alignment.pairs
    if alignment.left_kg == background.name:
        return alignment.pairs[:, ::-1].copy()
    raise DataError(f"alignment {alignment.left_kg}->{alignment.right_kg} "
                    f"does not involve {background.name}")


def build_linked_subgraph(background: KnowledgeGraph, alignment: AlignmentSet):
    """Split background triplets by how many endpoints are aligned.

    Returns ``(full, core)``: triplets with at least one aligned endpoint,
    and those with both.
    """
    pairs = _background_pairs(background, alignment)
    aligned = np.zeros(background.num_entities, dtype=bool)
    if len(pairs):
        aligned[pairs[:, 1]] = True
    t = background.triplets
    s_in, o_in = aligned[t[:, 0]], aligned[t[:, 2]]
    return t[s_in | o_in], t[s_in & o_in]


def popularity(full: np.ndarray, core: np.ndarray, num_entities: int) -> np.ndarray:
    """Per-triplet popularity of ``full``: subject plus object frequency in ``core``."""
    freq = np.zeros(num_entities, dtype=np.int64)
    if len(core):
        freq += np.bincount(core[:, [0, 2]].ravel(), minlength=num_entities)
    if len(full) == 0:
        return np.zeros(0, dtype=np.int64)
    return freq[full[:, 0]] + freq[full[:, 2]]


def weighted_sample_without_replacement(weights, m: int, rng) -> np.ndarray:
    """Indices of ``m`` items drawn sequentially with probability proportional to weight.

    Uses exponential keys ``-log(u) / w``; the ``m`` smallest keys form the
    sample, which matches successive proportional draws.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    if m >= len(weights):
        return np.arange(len(weights))
    keys = -np.log(rng.random(len(weights))) / weights
    return np.sort(np.argpartition(keys, m - 1)[:m])


def _rows_not_in(rows: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    if len(exclude) == 0 or len(rows) == 0:
        return np.ones(len(rows), dtype=bool)
    ex = set(map(tuple, exclude.tolist()))
    return np.array([tuple(r) not in ex for r in rows.tolist()], dtype=bool)


def sample_subgraph(full: np.ndarray, core: np.ndarray, budget: int, seed: int = 0,
                    num_entities: int | None = None) -> np.ndarray:
    """Pick at most ``budget`` triplets, core first.

    A core larger than the budget is subsampled uniformly. Otherwise the
    whole core is kept and the ``budget - |core|`` remaining slots are
    filled by popularity-weighted sampling without replacement from
    ``full`` minus ``core``; zero-popularity triplets weigh 1.
    """
    if budget < 0:
        raise ConfigError("budget must be nonnegative")
    full = np.asarray(full, dtype=np.int32).reshape(-1, 3)
    core = np.asarray(core, dtype=np.int32).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    if len(core) >= budget:
        pick = np.sort(rng.choice(len(core), size=budget, replace=False))
        return core[pick]
    rest = full[_rows_not_in(full, core)]
    if num_entities is None:
        num_entities = int(full[:, [0, 2]].max()) + 1 if len(full) else 0
    weights = np.maximum(popularity(rest, core, num_entities), 1)
    extra = weighted_sample_without_replacement(weights, budget - len(core), rng)
    return np.concatenate([core, rest[extra]])


def linked_subgraph(background: KnowledgeGraph, alignment: AlignmentSet, budget: int,
                    seed: int = 0) -> LinkedSubgraph:
    full, core = build_linked_subgraph(background, alignment)
    sampled = sample_subgraph(full, core, budget, seed, background.num_entities)
    entities = np.unique(sampled[:, [0, 2]]) if len(sampled) else np.zeros(0, dtype=np.int32)
    pairs = _background_pairs(background, alignment)
    keep = np.isin(pairs[:, 1], entities) if len(pairs) else np.zeros(0, dtype=bool)
    return LinkedSubgraph(full, core, sampled, entities.astype(np.int32), pairs[keep],
                          budget, max(0, budget - len(core)), seed)


def subgraph_kg(background: KnowledgeGraph, sub: LinkedSubgraph) -> KnowledgeGraph:
    """The sampled triplets as a compact KG over its own entities."""
    remap = np.full(background.num_entities, -1, dtype=np.int64)
    remap[sub.entities] = np.arange(len(sub.entities))
    t = sub.sampled
    rows = np.stack([remap[t[:, 0]], t[:, 1], remap[t[:, 2]]], axis=1) if len(t) else t
    return KnowledgeGraph(background.name, [background.entities[i] for i in sub.entities],
                          list(background.relations), rows, False, background.inverse.copy())


def save_subgraph(background: KnowledgeGraph, target: KnowledgeGraph, sub: LinkedSubgraph,
                  directory) -> Path:
    """KG directory of the sample plus ``alignment.tsv`` and sampling facts in the manifest."""
    kg = subgraph_kg(background, sub)
    directory = save_kg(kg, directory, {
        "budget": sub.budget, "seed": sub.seed, "linked_triplets": len(sub.full),
        "core_triplets": len(sub.core), "sampled_triplets": len(sub.sampled),
        "shortfall": sub.shortfall, "target": target.name})
    remap = {int(e): i for i, e in enumerate(sub.entities)}
    local = AlignmentSet(target.name, kg.name,
                         [(t, remap[b]) for t, b in sub.alignment.tolist()])
    write_alignment(local, target, kg, Path(directory) / "alignment.tsv")
    return directory

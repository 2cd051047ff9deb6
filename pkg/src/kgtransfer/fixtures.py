"""Synthetic two-KG scenarios with a planted cross-KG composition rule.

Entities fall into latent groups. Relation ``r_a`` links each entity to
members of one other group and ``r_b`` does the same under a different
group map, so ``r_a`` followed by ``r_b`` reaches a predictable group. The
background KG holds both relations completely; the target KG holds a sparse
copy (``t_a``, ``t_b``) plus the composed relation ``t_c`` on most 2-hop
groundings. Test and validation sets are random ``t_c`` facts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .kg import (AlignmentSet, DatasetSplit, KnowledgeGraph, MultiSourceCollection,
                 MergedGraph, merge_aligned, remove_leakage, write_alignment, write_manifest,
                 write_triplets)


@dataclass
class ScenarioAudit:
    derivable: list[tuple[str, str, str]]
    test_count: int
    leakage_count: int

    @property
    def derivable_count(self) -> int:
        return len(self.derivable)


@dataclass
class TransferScenario:
    background: KnowledgeGraph
    target: KnowledgeGraph
    split: DatasetSplit
    alignment: AlignmentSet
    seed: int
    planted_confidence: float
    rule: tuple[str, str, str]
    groundings: int
    audit: ScenarioAudit = field(default=None)

    def collection(self) -> MultiSourceCollection:
        return MultiSourceCollection([self.background], [])

    def joint(self) -> MergedGraph:
        """Background merged with the complete target KG at aligned entities."""
        return merge_aligned(MultiSourceCollection([self.background, self.target],
                                                   [self.alignment.reversed()]))

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_triplets(self.background, directory / "background.tsv")
        for part in ("train", "valid", "test"):
            write_triplets(self.target, directory / f"{part}.tsv", getattr(self.split, part))
        write_alignment(self.alignment, self.target, self.background, directory / "alignment.tsv")
        write_manifest(directory / "audit.txt", {
            "seed": self.seed, "planted_confidence": self.planted_confidence,
            "rule": " <= ".join([self.rule[2], f"{self.rule[0]} . {self.rule[1]}"]),
            "groundings": self.groundings, "test_triplets": self.audit.test_count,
            "derivable_test_triplets": self.audit.derivable_count,
            "leaking_background_triplets": self.audit.leakage_count})
        with open(directory / "derivable.tsv", "w", encoding="utf-8") as fh:
            for row in self.audit.derivable:
                fh.write("\t".join(row) + "\n")
        return directory


def derivable_test_triplets(scenario: TransferScenario) -> list[tuple[str, str, str]]:
    """Test triplets whose endpoints are aligned and joined by a background 2-hop path.

    Plain dictionary join, independent of the generator's latent groups.
    """
    bg = scenario.background
    first_r, second_r = (bg.relation_index()[r] for r in scenario.rule[:2])
    t2b = {int(t): int(b) for t, b in scenario.alignment.pairs.tolist()}
    out_a: dict[int, set[int]] = {}
    out_b: dict[int, set[int]] = {}
    for s, r, o in bg.triplets.tolist():
        if r == first_r:
            out_a.setdefault(s, set()).add(o)
        if r == second_r:
            out_b.setdefault(s, set()).add(o)
    found = []
    for s, r, o in scenario.split.test.tolist():
        if s not in t2b or o not in t2b:
            continue
        mids = out_a.get(t2b[s], set())
        if any(t2b[o] in out_b.get(m, ()) for m in mids):
            t = scenario.target
            found.append((t.entities[s], t.relations[r], t.entities[o]))
    return found


def _derangement(k: int, rng) -> np.ndarray:
    while True:
        perm = rng.permutation(k)
        if k < 2 or np.all(perm != np.arange(k)):
            return perm


def _links(groups, members, group_map, degree, rng):
    rows = []
    for x in range(len(groups)):
        pool = members[group_map[groups[x]]]
        pool = pool[pool != x]
        for y in rng.choice(pool, size=min(degree, len(pool)), replace=False).tolist():
            rows.append((x, y))
    return rows


def generate_transfer_scenario(n_entities: int = 100, n_relations: int = 3,
                               alignment_fraction: float = 1.0, seed: int = 0,
                               planted_confidence: float = 0.9, target_coverage: float = 0.3,
                               test_fraction: float = 0.3, valid_fraction: float = 0.1,
                               group_size: int = 10, degree: int = 2) -> TransferScenario:
    """Deterministic transfer scenario with a planted ``t_c <= r_a . r_b`` rule.

    ``n_relations`` counts background relations: ``r_a``, ``r_b`` and
    ``n_relations - 2`` random distractors. ``t_c`` holds for exactly
    ``ceil(planted_confidence * G)`` of the ``G`` background 2-hop
    groundings. Test and validation triplets are random ``t_c`` facts,
    drawn from derivable ones (both endpoints aligned) whenever any exist.
    """
    if n_entities < 20:
        raise ConfigError("n_entities must be at least 20")
    if n_relations < 2:
        raise ConfigError("n_relations must be at least 2 (r_a and r_b)")
    if not (0.0 <= alignment_fraction <= 1.0 and 0.0 < planted_confidence <= 1.0):
        raise ConfigError("alignment_fraction in [0, 1] and planted_confidence in (0, 1] required")
    if not 0.0 <= target_coverage <= 1.0 or test_fraction + valid_fraction >= 1.0:
        raise ConfigError("infeasible coverage or split fractions")
    n_groups = n_entities // group_size
    if n_groups < 3 or degree < 1 or degree >= group_size:
        raise ConfigError("need at least 3 groups and 1 <= degree < group_size")
    rng = np.random.default_rng(seed)
    groups = rng.permutation(np.arange(n_entities) % n_groups)
    members = [np.nonzero(groups == g)[0] for g in range(n_groups)]
    map_a = _derangement(n_groups, rng)
    map_b = _derangement(n_groups, rng)
    rows_a = _links(groups, members, map_a, degree, rng)
    rows_b = _links(groups, members, map_b, degree, rng)
    out_b: dict[int, list[int]] = {}
    for y, z in rows_b:
        out_b.setdefault(y, []).append(z)
    grand = sorted({(x, z) for x, y in rows_a for z in out_b.get(y, ()) if x != z})

    bg_rel = ["r_a", "r_b"] + [f"noise{k}" for k in range(1, n_relations - 1)]
    bg_rows = [(x, 0, y) for x, y in rows_a] + [(y, 1, z) for y, z in rows_b]
    for k in range(2, n_relations):
        edges = rng.integers(0, n_entities, size=(n_entities, 2))
        bg_rows += [(a, k, b) for a, b in edges.tolist() if a != b]
    background = KnowledgeGraph("background", [f"b{i}" for i in range(n_entities)], bg_rel,
                                np.array(bg_rows, dtype=np.int32))

    n_planted = math.ceil(round(planted_confidence * len(grand), 9))
    planted = [grand[i] for i in np.sort(rng.choice(len(grand), size=n_planted, replace=False))]
    aligned = np.zeros(n_entities, dtype=bool)
    aligned[rng.choice(n_entities, size=int(round(alignment_fraction * n_entities)),
                       replace=False)] = True
    t_rel = ["t_a", "t_b", "t_c"]
    sparse = [(x, 0, y) for x, y in rows_a] + [(y, 1, z) for y, z in rows_b]
    keep = rng.random(len(sparse)) < target_coverage
    train = [row for row, k in zip(sparse, keep) if k]
    head_rows = [(x, 2, z) for x, z in planted]

    # held-out facts must be derivable through the background whenever any are
    derivable = [r for r in head_rows if aligned[r[0]] and aligned[r[2]]]
    pool = derivable if derivable else head_rows
    n_test = int(round(test_fraction * len(head_rows)))
    n_valid = int(round(valid_fraction * len(head_rows)))
    picked = rng.permutation(len(pool))[:min(len(pool), n_test + n_valid)].tolist()
    held = {"test": [pool[i] for i in picked[:n_test]],
            "valid": [pool[i] for i in picked[n_test:]]}
    chosen = set(held["test"]) | set(held["valid"])
    train += [r for r in head_rows if r not in chosen]
    # held-out facts about entities the training data never mentions move to train
    seen_e = {e for s, _, o in train for e in (s, o)}
    for part in ("valid", "test"):
        ok = []
        for row in held[part]:
            if row[0] in seen_e and row[2] in seen_e:
                ok.append(row)
            else:
                train.append(row)
                seen_e.update((row[0], row[2]))
        held[part] = ok

    used = sorted({e for s, _, o in train + held["valid"] + held["test"] for e in (s, o)})
    local = {e: i for i, e in enumerate(used)}

    def encode(rows):
        return np.array([(local[s], r, local[o]) for s, r, o in rows], dtype=np.int32).reshape(-1, 3)

    split = DatasetSplit(encode(train), encode(held["valid"]), encode(held["test"]))
    target = KnowledgeGraph("target", [f"t{e}" for e in used], t_rel,
                            np.concatenate([split.train, split.valid, split.test]))
    split.validate(target)
    alignment = AlignmentSet("target", "background", [(local[e], e) for e in used if aligned[e]])
    alignment.validate(target, background)

    scenario = TransferScenario(background, target, split, alignment, seed, planted_confidence,
                                ("r_a", "r_b", "t_c"), len(grand))
    _, leak = remove_leakage(background, split, alignment, [(0, 0), (1, 1)])
    scenario.audit = ScenarioAudit(derivable_test_triplets(scenario), len(split.test), leak.count)
    return scenario


def random_kg(n_entities: int = 50, n_relations: int = 5, n_triplets: int = 200, seed: int = 0,
              name: str = "random") -> KnowledgeGraph:
    """Uniformly random KG with distinct triplets and no self-loops."""
    if n_entities < 2 or n_relations < 1:
        raise ConfigError("need at least two entities and one relation")
    if n_triplets > n_relations * n_entities * (n_entities - 1):
        raise ConfigError("more triplets requested than distinct ones exist")
    rng = np.random.default_rng(seed)
    seen: dict[tuple[int, int, int], None] = {}
    while len(seen) < n_triplets:
        s, r, o = int(rng.integers(n_entities)), int(rng.integers(n_relations)), \
            int(rng.integers(n_entities))
        if s != o:
            seen.setdefault((s, r, o))
    return KnowledgeGraph(name, [f"e{i}" for i in range(n_entities)],
                          [f"r{i}" for i in range(n_relations)],
                          np.array(list(seen), dtype=np.int32))

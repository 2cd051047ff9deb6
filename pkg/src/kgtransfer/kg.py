"""Knowledge graphs, alignments and dataset splits.

Everything downstream works on dense integer indices. Names are kept only
for I/O and for mapping between vocabularies.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

REVERSE_SUFFIX = "[reverse]"
KG_FORMAT_VERSION = 1


def _as_triplet_array(triplets) -> np.ndarray:
    arr = np.asarray(triplets, dtype=np.int32)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int32)
    return arr.reshape(-1, 3)


def unique_triplets(triplets: np.ndarray) -> np.ndarray:
    """Drop duplicate rows, keeping first occurrences in their original order."""
    triplets = _as_triplet_array(triplets)
    if len(triplets) == 0:
        return triplets
    _, first = np.unique(triplets, axis=0, return_index=True)
    return triplets[np.sort(first)]


@dataclass
class KnowledgeGraph:
    """Entity and relation vocabularies plus a deduplicated triplet array.

    ``inverse[r]`` is the index of the reverse relation of ``r`` (or -1).
    Reverse relations created by :func:`add_reverse_triplets` point back to
    their forward relation.
    """

    name: str
    entities: list[str]
    relations: list[str]
    triplets: np.ndarray
    reverse_closed: bool = False
    inverse: np.ndarray | None = None

    def __post_init__(self):
        self.triplets = unique_triplets(self.triplets)
        if self.inverse is None:
            self.inverse = np.full(len(self.relations), -1, dtype=np.int32)
        self.inverse = np.asarray(self.inverse, dtype=np.int32)
        self.validate()

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triplets)

    def validate(self) -> None:
        t = self.triplets
        if len(self.inverse) != len(self.relations):
            raise DataError("inverse table does not match relation vocabulary")
        if len(t):
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.num_entities:
                raise DataError(f"{self.name}: entity index out of range")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.num_relations:
                raise DataError(f"{self.name}: relation index out of range")

    def entity_index(self) -> dict[str, int]:
        return {e: i for i, e in enumerate(self.entities)}

    def relation_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.relations)}

    def triplet_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.triplets.tolist()))

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.triplets[:, 0], minlength=self.num_entities)

    def with_triplets(self, triplets: np.ndarray, name: str | None = None) -> "KnowledgeGraph":
        """Same vocabularies, different triplets."""
        return KnowledgeGraph(name or self.name, list(self.entities), list(self.relations),
                              triplets, self.reverse_closed, self.inverse.copy())

    def encode(self, rows) -> np.ndarray:
        """Map (subject, relation, object) name triples to index triples."""
        ent, rel = self.entity_index(), self.relation_index()
        try:
            return _as_triplet_array([(ent[s], rel[r], ent[o]) for s, r, o in rows])
        except KeyError as exc:
            raise DataError(f"{self.name}: unknown name {exc.args[0]!r}") from None


@dataclass
class AlignmentSet:
    """Identical-entity pairs between two KGs, as (left index, right index)."""

    left_kg: str
    right_kg: str
    pairs: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int32)
        pairs = pairs.reshape(-1, 2) if pairs.size else np.zeros((0, 2), dtype=np.int32)
        if len(pairs):
            _, first = np.unique(pairs, axis=0, return_index=True)
            pairs = pairs[np.sort(first)]
        self.pairs = pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, left: KnowledgeGraph, right: KnowledgeGraph) -> None:
        if left.name != self.left_kg or right.name != self.right_kg:
            raise DataError(
                f"alignment {self.left_kg}->{self.right_kg} applied to {left.name}->{right.name}")
        if len(self.pairs) == 0:
            return
        if self.pairs[:, 0].min() < 0 or self.pairs[:, 0].max() >= left.num_entities:
            raise DataError(f"alignment references unknown entity in {left.name}")
        if self.pairs[:, 1].min() < 0 or self.pairs[:, 1].max() >= right.num_entities:
            raise DataError(f"alignment references unknown entity in {right.name}")

    def reversed(self) -> "AlignmentSet":
        return AlignmentSet(self.right_kg, self.left_kg, self.pairs[:, ::-1].copy())

    def left_to_right(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for a, b in self.pairs.tolist():
            out.setdefault(a, []).append(b)
        return out


@dataclass
class DatasetSplit:
    """Disjoint train/valid/test triplet arrays over one KG's vocabulary."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = unique_triplets(self.train)
        self.valid = unique_triplets(self.valid)
        self.test = unique_triplets(self.test)

    def validate(self, kg: KnowledgeGraph) -> None:
        parts = {"train": self.train, "valid": self.valid, "test": self.test}
        sets = {k: set(map(tuple, v.tolist())) for k, v in parts.items()}
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            if sets[a] & sets[b]:
                raise DataError(f"split overlap between {a} and {b}")
        allowed = kg.triplet_set()
        for k, s in sets.items():
            if not s <= allowed:
                raise DataError(f"{k} split contains triplets outside {kg.name}")
        seen_e = set(self.train[:, [0, 2]].ravel().tolist())
        seen_r = set(self.train[:, 1].tolist())
        for k in ("valid", "test"):
            v = parts[k]
            if not set(v[:, [0, 2]].ravel().tolist()) <= seen_e:
                raise DataError(f"{k} split uses entities unseen in train")
            if not set(v[:, 1].tolist()) <= seen_r:
                raise DataError(f"{k} split uses relations unseen in train")


@dataclass
class FrequencyTable:
    entity: np.ndarray
    relation: np.ndarray


@dataclass
class MultiSourceCollection:
    """Background KGs linked by entity alignment."""

    kgs: list[KnowledgeGraph]
    alignments: list[AlignmentSet] = field(default_factory=list)

    def kg(self, name: str) -> KnowledgeGraph:
        for kg in self.kgs:
            if kg.name == name:
                return kg
        raise DataError(f"no KG named {name!r} in collection")

    def validate(self, allow_single: bool = False) -> None:
        names = [kg.name for kg in self.kgs]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate KG names: {names}")
        for a in self.alignments:
            a.validate(self.kg(a.left_kg), self.kg(a.right_kg))
        if allow_single and len(self.kgs) == 1:
            return
        linked = set()
        for a in self.alignments:
            if len(a) and a.left_kg != a.right_kg:
                linked.update((a.left_kg, a.right_kg))
        lonely = [n for n in names if n not in linked]
        if lonely:
            raise DataError(
                "every KG must share a nonempty entity alignment with another KG in the "
                f"collection (linked multi-source condition); unlinked: {lonely}")


# -- loading ---------------------------------------------------------------

def _read_tsv(path, width: int):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != width:
                raise ParseError(f"expected {width} tab-separated fields, got {len(fields)}",
                                 lineno, path)
            if any(not f.strip() for f in fields):
                raise ParseError("empty field", lineno, path)
            rows.append(tuple(f.strip() for f in fields))
    return rows


def _vocab_from_rows(rows, entities=None, relations=None):
    ent = {e: i for i, e in enumerate(entities or [])}
    rel = {r: i for i, r in enumerate(relations or [])}
    out = []
    for s, r, o in rows:
        for name in (s, o):
            if name not in ent:
                ent[name] = len(ent)
        if r not in rel:
            rel[r] = len(rel)
        out.append((ent[s], rel[r], ent[o]))
    return list(ent), list(rel), _as_triplet_array(out)


def load_triplets(path, name: str | None = None) -> KnowledgeGraph:
    """Read a ``subject<TAB>relation<TAB>object`` file.

    Vocabularies follow first appearance; repeated lines collapse to one triplet.
    """
    rows = _read_tsv(path, 3)
    entities, relations, triplets = _vocab_from_rows(rows)
    return KnowledgeGraph(name or Path(path).stem, entities, relations, triplets)


def load_split(train, valid, test, name: str = "target") -> tuple[KnowledgeGraph, DatasetSplit]:
    """Load three split files into one KG whose vocabulary starts with the train vocabulary."""
    parts = [_read_tsv(p, 3) for p in (train, valid, test)]
    entities, relations, tr = _vocab_from_rows(parts[0])
    entities, relations, va = _vocab_from_rows(parts[1], entities, relations)
    entities, relations, te = _vocab_from_rows(parts[2], entities, relations)
    kg = KnowledgeGraph(name, entities, relations, np.concatenate([tr, va, te]))
    split = DatasetSplit(tr, va, te)
    split.validate(kg)
    return kg, split


def load_alignment(path, left: KnowledgeGraph, right: KnowledgeGraph) -> AlignmentSet:
    """Read ``left<TAB>right`` entity-name pairs."""
    rows = _read_tsv(path, 2)
    li, ri = left.entity_index(), right.entity_index()
    pairs = []
    for a, b in rows:
        if a not in li or b not in ri:
            raise DataError(f"alignment pair ({a}, {b}) references an unknown entity")
        pairs.append((li[a], ri[b]))
    return AlignmentSet(left.name, right.name, pairs)


def write_triplets(kg: KnowledgeGraph, path, triplets: np.ndarray | None = None) -> None:
    triplets = kg.triplets if triplets is None else triplets
    with open(path, "w", encoding="utf-8") as fh:
        for s, r, o in triplets.tolist():
            fh.write(f"{kg.entities[s]}\t{kg.relations[r]}\t{kg.entities[o]}\n")


def write_alignment(alignment: AlignmentSet, left: KnowledgeGraph, right: KnowledgeGraph,
                    path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in alignment.pairs.tolist():
            fh.write(f"{left.entities[a]}\t{right.entities[b]}\n")


# -- directory format ------------------------------------------------------

def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in _read_lines(path):
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_manifest(path, items: dict) -> None:
    _write_lines(path, [f"{k}={v}" for k, v in items.items()])


def save_kg(kg: KnowledgeGraph, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.txt``, ``entities.txt``, ``relations.txt`` and ``triplets.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = kg.triplets.astype("<i4").tobytes()
    _write_lines(directory / "entities.txt", kg.entities)
    _write_lines(directory / "relations.txt",
                 [f"{r}\t{int(inv)}" for r, inv in zip(kg.relations, kg.inverse)])
    with open(directory / "triplets.bin", "wb") as fh:
        fh.write(payload)
    manifest = {
        "format": "kgtransfer-kg",
        "version": KG_FORMAT_VERSION,
        "name": kg.name,
        "num_entities": kg.num_entities,
        "num_relations": kg.num_relations,
        "num_triplets": len(kg),
        "reverse_closed": int(kg.reverse_closed),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    for k, v in (extra or {}).items():
        manifest[k] = v
    write_manifest(directory / "manifest.txt", manifest)
    return directory


def load_kg(directory) -> KnowledgeGraph:
    directory = Path(directory)
    if not (directory / "manifest.txt").exists():
        raise DataError(f"{directory} is not a KG directory")
    manifest = read_manifest(directory / "manifest.txt")
    if int(manifest.get("version", -1)) != KG_FORMAT_VERSION:
        raise DataError(f"unsupported KG format version {manifest.get('version')}")
    entities = _read_lines(directory / "entities.txt")
    rel_rows = [line.split("\t") for line in _read_lines(directory / "relations.txt")]
    relations = [r[0] for r in rel_rows]
    inverse = np.array([int(r[1]) for r in rel_rows], dtype=np.int32)
    payload = (directory / "triplets.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise DataError(f"{directory}: triplet checksum mismatch")
    triplets = np.frombuffer(payload, dtype="<i4").reshape(-1, 3).astype(np.int32)
    if len(entities) != int(manifest["num_entities"]) or len(triplets) != int(manifest["num_triplets"]):
        raise DataError(f"{directory}: manifest counts disagree with contents")
    return KnowledgeGraph(manifest["name"], entities, relations, triplets,
                          bool(int(manifest["reverse_closed"])), inverse)


# -- transformations -------------------------------------------------------

def add_reverse_triplets(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Append ``r[reverse]`` for every relation and ``(o, r[reverse], s)`` for every triplet."""
    if kg.reverse_closed:
        raise DataError(f"{kg.name} is already reverse-closed")
    n = kg.num_relations
    relations = list(kg.relations) + [r + REVERSE_SUFFIX for r in kg.relations]
    inverse = np.concatenate([np.arange(n, 2 * n), np.arange(n)]).astype(np.int32)
    t = kg.triplets
    rev = np.stack([t[:, 2], t[:, 1] + n, t[:, 0]], axis=1) if len(t) else t
    return KnowledgeGraph(kg.name, list(kg.entities), relations,
                          np.concatenate([t, rev]), True, inverse)


def entity_frequencies(kg: KnowledgeGraph) -> FrequencyTable:
    """Count subject/object slot occurrences per entity and occurrences per relation."""
    t = kg.triplets
    ent = np.bincount(t[:, [0, 2]].ravel(), minlength=kg.num_entities) if len(t) \
        else np.zeros(kg.num_entities, dtype=np.int64)
    rel = np.bincount(t[:, 1], minlength=kg.num_relations) if len(t) \
        else np.zeros(kg.num_relations, dtype=np.int64)
    return FrequencyTable(ent.astype(np.int64), rel.astype(np.int64))


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller index stays representative so output order is stable
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo


@dataclass
class MergedGraph:
    """Result of merging aligned entities: the joint KG plus index maps."""

    kg: KnowledgeGraph
    entity_offsets: dict[str, int]
    relation_offsets: dict[str, int]
    entity_class: np.ndarray
    total_input_triplets: int

    def entity_id(self, kg_name: str, index) -> np.ndarray:
        return self.entity_class[self.entity_offsets[kg_name] + np.asarray(index)]


def disjoint_union(kgs: list[KnowledgeGraph], name: str = "union"):
    """Stack KGs into one namespaced KG without merging anything.

    Returns the union and per-KG (entity offset, relation offset).
    """
    entities, relations, triplets, inverse = [], [], [], []
    offsets = {}
    eo = ro = 0
    for kg in kgs:
        offsets[kg.name] = (eo, ro)
        entities += [f"{kg.name}:{e}" for e in kg.entities]
        relations += [f"{kg.name}:{r}" for r in kg.relations]
        inverse.append(np.where(kg.inverse >= 0, kg.inverse + ro, -1))
        if len(kg):
            triplets.append(kg.triplets + np.array([eo, ro, eo], dtype=np.int32))
        eo += kg.num_entities
        ro += kg.num_relations
    closed = bool(kgs) and all(kg.reverse_closed for kg in kgs)
    t = np.concatenate(triplets) if triplets else np.zeros((0, 3), dtype=np.int32)
    inv = np.concatenate(inverse) if inverse else np.zeros(0, dtype=np.int32)
    return KnowledgeGraph(name, entities, relations, t, closed, inv), offsets


def merge_aligned(collection: MultiSourceCollection, name: str = "joint") -> MergedGraph:
    """Collapse aligned entities (transitively) into single nodes.

    Relations are namespaced ``KG:relation``; a merged node takes the name of
    every member joined by ``|``.
    """
    for a in collection.alignments:
        a.validate(collection.kg(a.left_kg), collection.kg(a.right_kg))
    union, offsets = disjoint_union(collection.kgs, name)
    uf = _UnionFind(union.num_entities)
    for a in collection.alignments:
        lo, ro_ = offsets[a.left_kg][0], offsets[a.right_kg][0]
        for x, y in a.pairs.tolist():
            uf.union(lo + x, ro_ + y)
    roots = np.array([uf.find(i) for i in range(union.num_entities)], dtype=np.int64)
    rep, entity_class = np.unique(roots, return_inverse=True)
    members: dict[int, list[str]] = {}
    for i, c in enumerate(entity_class.tolist()):
        members.setdefault(c, []).append(union.entities[i])
    names = ["|".join(members[c]) for c in range(len(rep))]
    t = union.triplets
    mapped = np.stack([entity_class[t[:, 0]], t[:, 1], entity_class[t[:, 2]]], axis=1) \
        if len(t) else t
    kg = KnowledgeGraph(name, names, list(union.relations), mapped, union.reverse_closed,
                        union.inverse.copy())
    return MergedGraph(kg, {k: v[0] for k, v in offsets.items()},
                       {k: v[1] for k, v in offsets.items()},
                       entity_class.astype(np.int32), len(t))


@dataclass
class LeakageReport:
    deleted: np.ndarray
    kept: int
    relation_pairs: int

    @property
    def count(self) -> int:
        return len(self.deleted)


def remove_leakage(background: KnowledgeGraph, target_split: DatasetSplit,
                   alignment: AlignmentSet, relation_map=None):
    """Delete background triplets that mirror a target valid/test triplet.

    ``alignment`` pairs target entities (left) with background entities
    (right). A background triplet ``(s', r', o')`` is deleted when its aligned
    endpoints form a held-out target triplet ``(s, r, o)`` in either
    orientation and, if ``relation_map`` (pairs of target relation,
    background relation) is given, ``r`` is mapped to ``r'``. Without a
    relation map the entity pair alone decides.

    Returns the filtered KG and a :class:`LeakageReport`.
    """
    held = np.concatenate([target_split.valid, target_split.test])
    b2t = {}
    for t_e, b_e in alignment.pairs.tolist():
        b2t.setdefault(b_e, []).append(t_e)
    held_pairs: dict[tuple[int, int], set[int]] = {}
    for s, r, o in held.tolist():
        held_pairs.setdefault((s, o), set()).add(r)
    rel_ok = None
    if relation_map is not None:
        rel_ok = set(map(tuple, np.asarray(relation_map).reshape(-1, 2).tolist()))

    def leaks(s_list, o_list, rb):
        for s in s_list:
            for o in o_list:
                rs = held_pairs.get((s, o))
                if rs is None:
                    continue
                if rel_ok is None or any((r, rb) in rel_ok for r in rs):
                    return True
        return False

    keep = np.ones(len(background), dtype=bool)
    for i, (s, r, o) in enumerate(background.triplets.tolist()):
        ss, oo = b2t.get(s), b2t.get(o)
        if not ss or not oo:
            continue
        if leaks(ss, oo, r) or leaks(oo, ss, r):
            keep[i] = False
    deleted = background.triplets[~keep]
    filtered = background.with_triplets(background.triplets[keep])
    report = LeakageReport(deleted, int(keep.sum()),
                           0 if relation_map is None else len(rel_ok))
    if len(deleted):
        logger.info("removed %d leaking triplets from %s", len(deleted), background.name)
    return filtered, report


def file_checksum(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(os.fsencode(p.relative_to(path)))
                h.update(p.read_bytes())
        return h.hexdigest()
    h.update(path.read_bytes())
    return h.hexdigest()

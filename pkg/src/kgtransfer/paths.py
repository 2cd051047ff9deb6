"""Random-walk path sampling and cross-KG path augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kg import AlignmentSet, KnowledgeGraph, entity_frequencies

RAW, REPLACED, CONCATENATED = 0, 1, 2
PROVENANCE_NAMES = {RAW: "raw", REPLACED: "entity-replaced", CONCATENATED: "concatenated"}

_MAGIC = b"KGTP"
_CORPUS_VERSION = 1


@dataclass(frozen=True)
class WalkConfig:
    path_length: int = 5
    walks_per_start: int = 2
    seed: int = 0
    neighbor_weighting: str = "uniform"

    def __post_init__(self):
        if self.path_length < 3 or self.path_length % 2 == 0:
            raise ConfigError(f"path_length must be odd and >= 3, got {self.path_length}")
        if self.walks_per_start < 1:
            raise ConfigError("walks_per_start must be positive")
        if self.neighbor_weighting not in ("uniform", "inverse-frequency"):
            raise ConfigError(f"unknown neighbor_weighting {self.neighbor_weighting!r}")

    @property
    def steps(self) -> int:
        return (self.path_length - 3) // 2


@dataclass
class PathCorpus:
    """Fixed-length relational paths stored as an ``(N, length)`` index array.

    Even columns hold entity indices, odd columns relation indices. The
    per-vocabulary tag arrays name the source KG of each entity/relation.
    """

    elements: np.ndarray
    provenance: np.ndarray = None
    entity_tags: np.ndarray | None = None
    relation_tags: np.ndarray | None = None
    tag_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.int32)
        if self.elements.ndim != 2:
            raise DataError("path corpus must be two-dimensional")
        if self.provenance is None:
            self.provenance = np.full(len(self.elements), RAW, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def length(self) -> int:
        return self.elements.shape[1]

    @property
    def tags(self) -> np.ndarray:
        tags = np.zeros(self.elements.shape, dtype=np.uint16)
        if self.entity_tags is not None:
            tags[:, 0::2] = self.entity_tags[self.elements[:, 0::2]]
        if self.relation_tags is not None:
            tags[:, 1::2] = self.relation_tags[self.elements[:, 1::2]]
        return tags

    def subset(self, index) -> "PathCorpus":
        return PathCorpus(self.elements[index], self.provenance[index], self.entity_tags,
                          self.relation_tags, list(self.tag_names))

    def concat(self, *others: "PathCorpus") -> "PathCorpus":
        parts = [self, *[o for o in others if len(o)]]
        if len({p.length for p in parts}) > 1:
            raise DataError("cannot merge corpora of different path lengths")
        return PathCorpus(np.concatenate([p.elements for p in parts]),
                          np.concatenate([p.provenance for p in parts]),
                          self.entity_tags, self.relation_tags, list(self.tag_names))

    def tobytes(self) -> bytes:
        header = _MAGIC + struct.pack("<IIQ", _CORPUS_VERSION, self.length, len(self))
        return (header + self.elements.astype("<i4").tobytes()
                + self.tags.astype("<u2").tobytes() + self.provenance.tobytes())


def _empty(length: int, like: PathCorpus | None = None, provenance=RAW) -> PathCorpus:
    corpus = PathCorpus(np.zeros((0, length), dtype=np.int32),
                        np.zeros(0, dtype=np.uint8))
    if like is not None:
        corpus.entity_tags, corpus.relation_tags = like.entity_tags, like.relation_tags
        corpus.tag_names = list(like.tag_names)
    return corpus


def _outgoing_csr(kg: KnowledgeGraph):
    order = np.argsort(kg.triplets[:, 0], kind="stable")
    edges = kg.triplets[order]
    counts = np.bincount(edges[:, 0], minlength=kg.num_entities)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return edges, starts, counts


def sample_paths(kg: KnowledgeGraph, config: WalkConfig, entity_tags=None,
                 relation_tags=None, tag_names=None) -> PathCorpus:
    """Start ``walks_per_start`` walks at the object of every triplet.

    Row ``i * n + j`` is walk ``j`` seeded by triplet ``i``. Each step
    appends a (relation, entity) pair chosen among the current endpoint's
    outgoing triplets.
    """
    if not kg.reverse_closed:
        raise DataError(f"{kg.name} must be reverse-closed before sampling walks")
    n = config.walks_per_start
    starts_t = np.repeat(kg.triplets, n, axis=0)
    out = np.empty((len(starts_t), config.path_length), dtype=np.int32)
    out[:, :3] = starts_t
    rng = np.random.default_rng(config.seed)
    if config.steps and len(starts_t):
        edges, first, deg = _outgoing_csr(kg)
        if config.neighbor_weighting == "inverse-frequency":
            q = entity_frequencies(kg).entity.astype(np.float64)
            weights = 1.0 / q[edges[:, 2]]
            cum = np.cumsum(weights)
            seg_total = np.bincount(edges[:, 0], weights=weights, minlength=kg.num_entities)
            seg_before = np.concatenate([[0.0], cum])[first]
        current = starts_t[:, 2]
        for step in range(config.steps):
            u = rng.random(len(current))
            if config.neighbor_weighting == "uniform":
                pick = first[current] + np.minimum((u * deg[current]).astype(np.int64),
                                                   deg[current] - 1)
            else:
                goal = seg_before[current] + u * seg_total[current]
                pick = np.searchsorted(cum, goal, side="right")
                pick = np.clip(pick, first[current], first[current] + deg[current] - 1)
            chosen = edges[pick]
            out[:, 3 + 2 * step] = chosen[:, 1]
            out[:, 4 + 2 * step] = chosen[:, 2]
            current = chosen[:, 2]
    return PathCorpus(out, np.full(len(out), RAW, dtype=np.uint8), entity_tags,
                      relation_tags, list(tag_names or []))


def _counterparts(alignment) -> dict[int, list[int]]:
    if isinstance(alignment, AlignmentSet):
        return alignment.left_to_right()
    return alignment


def _cap(candidates: int, cap: int | None, rng) -> np.ndarray:
    if cap is None or candidates <= cap:
        return np.arange(candidates)
    return np.sort(rng.choice(candidates, size=cap, replace=False))


def augment_entity_replacement(corpus: PathCorpus, alignment, cap: int | None = None,
                               seed: int = 0) -> PathCorpus:
    """Copy each path once per aligned entity occurrence, swapping in the counterpart.

    ``alignment`` maps an entity to its counterparts (an :class:`AlignmentSet`
    read left to right, or a dict). Originals come first in the result; when
    ``cap`` is set, a uniform random subset of at most ``cap`` new paths is kept.
    """
    mapping = _counterparts(alignment)
    ents = corpus.elements[:, 0::2]
    has = np.zeros(int(ents.max(initial=-1)) + 1, dtype=bool)
    for e in mapping:
        if e < len(has):
            has[e] = True
    rows, cols = np.nonzero(has[ents]) if len(has) else (np.zeros(0, int), np.zeros(0, int))
    jobs = [(r, 2 * c, alt) for r, c in zip(rows.tolist(), cols.tolist())
            for alt in mapping[int(ents[r, c])]]
    keep = _cap(len(jobs), cap, np.random.default_rng(seed))
    new = np.empty((len(keep), corpus.length), dtype=np.int32)
    for i, j in enumerate(keep.tolist()):
        r, pos, alt = jobs[j]
        new[i] = corpus.elements[r]
        new[i, pos] = alt
    added = PathCorpus(new, np.full(len(new), REPLACED, dtype=np.uint8), corpus.entity_tags,
                       corpus.relation_tags, list(corpus.tag_names))
    return corpus.concat(added)


def augment_concatenation(corpus1: PathCorpus, corpus2: PathCorpus, alignment,
                          cap: int | None = None, seed: int = 0) -> PathCorpus:
    """Join paths of ``corpus1`` ending at ``o`` with paths of ``corpus2`` starting at ``s'``.

    For every aligned ``(o, s')`` two joined paths are produced, one keeping
    ``o`` at the junction and one keeping ``s'``; they collapse to one when
    identical. Only the joined paths are returned.
    """
    mapping = _counterparts(alignment)
    length = corpus1.length + corpus2.length - 1
    if not mapping or not len(corpus1) or not len(corpus2):
        return _empty(length, corpus1, CONCATENATED)
    by_start: dict[int, np.ndarray] = {}
    starts = corpus2.elements[:, 0]
    order = np.argsort(starts, kind="stable")
    uniq, first = np.unique(starts[order], return_index=True)
    bounds = np.append(first, len(order))
    for k, e in enumerate(uniq.tolist()):
        by_start[e] = order[bounds[k]:bounds[k + 1]]
    jobs = []  # (left row, right row block)
    counts = []
    for i, o in enumerate(corpus1.elements[:, -1].tolist()):
        for s2 in mapping.get(o, ()):
            block = by_start.get(s2)
            if block is not None:
                jobs.append((i, block))
                counts.append(len(block))
    if not jobs:
        return _empty(length, corpus1, CONCATENATED)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    keep = _cap(int(offsets[-1]), None if cap is None else max(cap // 2, 1),
                np.random.default_rng(seed))
    job_of = np.searchsorted(offsets, keep, side="right") - 1
    left_rows = np.array([jobs[j][0] for j in job_of.tolist()], dtype=np.int64)
    right_rows = np.array([jobs[j][1][k - offsets[j]] for j, k in
                           zip(job_of.tolist(), keep.tolist())], dtype=np.int64)
    a = corpus1.elements[left_rows]
    b = corpus2.elements[right_rows]
    keep_o = np.concatenate([a, b[:, 1:]], axis=1)
    keep_s = np.concatenate([a[:, :-1], b], axis=1)
    same = np.all(keep_o == keep_s, axis=1)
    out = np.empty((2 * len(a) - same.sum(), length), dtype=np.int32)
    # interleave so each junction's pair stays adjacent
    idx = 0
    for k in range(len(a)):
        out[idx] = keep_o[k]
        idx += 1
        if not same[k]:
            out[idx] = keep_s[k]
            idx += 1
    if cap is not None:
        out = out[:cap]
    return PathCorpus(out, np.full(len(out), CONCATENATED, dtype=np.uint8), corpus1.entity_tags,
                      corpus1.relation_tags, list(corpus1.tag_names))


def symmetric_mapping(pairs: np.ndarray) -> dict[int, list[int]]:
    """Both-direction counterpart lists for pairs already in one index space."""
    out: dict[int, list[int]] = {}
    for a, b in np.asarray(pairs).reshape(-1, 2).tolist():
        if a == b:
            continue
        out.setdefault(a, [])
        out.setdefault(b, [])
        if b not in out[a]:
            out[a].append(b)
        if a not in out[b]:
            out[b].append(a)
    return out


def build_corpus(kg: KnowledgeGraph, config: WalkConfig, mapping: dict[int, list[int]],
                 multiplier: float = 1.0, entity_tags=None, relation_tags=None,
                 tag_names=None) -> PathCorpus:
    """Raw walks plus both augmentations, every path of ``config.path_length``.

    Concatenation joins each triplet ``(s, r, o)`` with a walk prefix of
    length ``l - 2`` starting at an entity aligned with ``o``, so joined paths
    keep the configured length. Each augmentation is capped at
    ``multiplier`` times the raw corpus size.
    """
    raw = sample_paths(kg, config, entity_tags, relation_tags, tag_names)
    if not mapping or not len(raw):
        return raw
    cap = int(round(multiplier * len(raw)))
    replaced = augment_entity_replacement(raw, mapping, cap=cap, seed=config.seed + 1)
    left = PathCorpus(kg.triplets, None, entity_tags, relation_tags)
    right = raw.subset(slice(None))
    right.elements = right.elements[:, :config.path_length - 2]
    joined = augment_concatenation(left, right, mapping, cap=cap, seed=config.seed + 2)
    return replaced.concat(joined)


# -- validation ------------------------------------------------------------

def validate_path(path, kg: KnowledgeGraph, alignment_pairs=None,
                  triplets: set | None = None) -> None:
    """Check the alternating structure and triplet membership of one path.

    A window ``(x, r, y)`` is accepted when it is a triplet of ``kg``, or
    becomes one after replacing one endpoint by an aligned counterpart.
    Raises :class:`DataError` on the first violation.
    """
    path = [int(v) for v in path]
    if len(path) < 3 or len(path) % 2 == 0:
        raise DataError(f"path length {len(path)} is not odd and >= 3")
    for i, v in enumerate(path):
        limit = kg.num_entities if i % 2 == 0 else kg.num_relations
        if not 0 <= v < limit:
            raise DataError(f"element {i} of path out of range")
    triplets = kg.triplet_set() if triplets is None else triplets
    mapping = symmetric_mapping(alignment_pairs) if alignment_pairs is not None else {}
    for i in range(0, len(path) - 2, 2):
        x, r, y = path[i:i + 3]
        if (x, r, y) in triplets:
            continue
        if any((a, r, y) in triplets for a in mapping.get(x, ())):
            continue
        if any((x, r, b) in triplets for b in mapping.get(y, ())):
            continue
        raise DataError(f"window {(x, r, y)} at position {i} is not a triplet or aligned junction")


# -- serialization ---------------------------------------------------------

def save_corpus(corpus: PathCorpus, path) -> None:
    Path(path).write_bytes(corpus.tobytes())


def load_corpus(path) -> PathCorpus:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path} is not a path corpus")
    version, length, count = struct.unpack_from("<IIQ", data, 4)
    if version != _CORPUS_VERSION:
        raise DataError(f"unsupported corpus version {version}")
    off = 4 + struct.calcsize("<IIQ")
    n = length * count
    need = off + 4 * n + 2 * n + count
    if len(data) != need:
        raise DataError(f"{path}: truncated corpus ({len(data)} of {need} bytes)")
    elements = np.frombuffer(data, "<i4", n, off).reshape(count, length).astype(np.int32)
    off += 4 * n
    tags = np.frombuffer(data, "<u2", n, off).reshape(count, length)
    off += 2 * n
    provenance = np.frombuffer(data, np.uint8, count, off).copy()
    corpus = PathCorpus(elements, provenance)
    # keep the on-disk tags readable even without vocab-level tag tables
    ent_tags = np.zeros(int(elements[:, 0::2].max(initial=-1)) + 1, dtype=np.uint16)
    rel_tags = np.zeros(int(elements[:, 1::2].max(initial=-1)) + 1, dtype=np.uint16)
    ent_tags[elements[:, 0::2].ravel()] = tags[:, 0::2].ravel()
    rel_tags[elements[:, 1::2].ravel()] = tags[:, 1::2].ravel()
    corpus.entity_tags, corpus.relation_tags = ent_tags, rel_tags
    return corpus


def dump_corpus_text(corpus: PathCorpus, kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, prov in zip(corpus.elements.tolist(), corpus.provenance.tolist()):
            names = [kg.entities[v] if i % 2 == 0 else kg.relations[v] for i, v in enumerate(row)]
            fh.write(PROVENANCE_NAMES[prov] + "\t" + "\t".join(names) + "\n")

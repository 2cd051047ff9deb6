"""Joint pre-training of the teacher encoder, Adam, and checkpoint persistence."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .encoders import EncoderConfig, ParameterSet, bind, compute_gradients, init_parameters
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .kg import (KnowledgeGraph, MultiSourceCollection, add_reverse_triplets, disjoint_union,
                 entity_frequencies, read_manifest, write_manifest)
from .objective import (NceConfig, NegativeDistribution, NegativeTables, path_loss,
                        sample_negatives)
from .paths import PathCorpus, WalkConfig, build_corpus, symmetric_mapping

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 1e-3
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augmentation_multiplier: float = 1.0
    resample_every: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("batch_size and learning_rate must be positive, epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2, t = config.beta1, config.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    """Frozen model parameters with their vocabularies.

    Entity/relation names are namespaced ``KG:name``. ``candidates`` lists
    the entity indices ranked at evaluation time (all entities when None).
    """

    encoder: EncoderConfig
    params: ParameterSet
    entities: list[str]
    relations: list[str]
    inverse: np.ndarray
    metadata: dict = field(default_factory=dict)
    candidates: np.ndarray | None = None
    extra_params: ParameterSet = field(default_factory=ParameterSet)

    def entity_index(self) -> dict[str, int]:
        return {e: i for i, e in enumerate(self.entities)}

    def relation_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.relations)}

    @property
    def candidate_entities(self) -> np.ndarray:
        if self.candidates is None:
            return np.arange(len(self.entities))
        return self.candidates


TeacherCheckpoint = Checkpoint


def _tensor_blob(params: dict, prefix: str):
    entries, chunks, offset = [], [], 0
    for name in params:
        arr = np.ascontiguousarray(params[name])
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = arr.astype(dt).tobytes()
        shape = "x".join(map(str, arr.shape)) or "scalar"
        entries.append((f"{prefix}{name}", f"{dt};{shape};{offset};{len(raw)}"))
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks, offset


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write a checkpoint directory.

    Tensors are stored little-endian in their own precision, row-major, in
    ``params.bin``; ``manifest.txt`` records names, shapes, offsets and
    SHA-256 checksums of every file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = _tensor_blob(ckpt.params, "tensor.")
    extra_entries, extra_chunks, _ = _tensor_blob(ckpt.extra_params, "extra.")
    # extra tensors follow the main ones
    fixed = []
    for key, spec in extra_entries:
        dt, shape, off, n = spec.split(";")
        fixed.append((key, f"{dt};{shape};{int(off) + offset};{n}"))
    blob = b"".join(chunks + extra_chunks)
    (directory / "params.bin").write_bytes(blob)
    ent_text = "".join(f"{e}\n" for e in ckpt.entities).encode("utf-8")
    rel_text = "".join(f"{r}\t{int(i)}\n" for r, i in zip(ckpt.relations, ckpt.inverse)).encode()
    (directory / "entities.txt").write_bytes(ent_text)
    (directory / "relations.txt").write_bytes(rel_text)
    manifest = {"format": "kgtransfer-checkpoint", "version": CHECKPOINT_VERSION}
    for f in fields(EncoderConfig):
        manifest[f"encoder.{f.name}"] = getattr(ckpt.encoder, f.name)
    for k, v in ckpt.metadata.items():
        manifest[f"meta.{k}"] = v
    if ckpt.candidates is not None:
        manifest["candidates"] = ",".join(map(str, ckpt.candidates.tolist()))
    manifest["sha256.params"] = hashlib.sha256(blob).hexdigest()
    manifest["sha256.entities"] = hashlib.sha256(ent_text).hexdigest()
    manifest["sha256.relations"] = hashlib.sha256(rel_text).hexdigest()
    manifest.update(dict(entries))
    manifest.update(dict(fixed))
    write_manifest(directory / "manifest.txt", manifest)
    return directory


def _parse_value(text: str, kind):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def load_checkpoint(directory) -> Checkpoint:
    """Read and fully verify a checkpoint before returning anything."""
    directory = Path(directory)
    try:
        manifest = read_manifest(directory / "manifest.txt")
    except FileNotFoundError:
        raise CheckpointError(f"{directory}: no manifest") from None
    if manifest.get("format") != "kgtransfer-checkpoint":
        raise CheckpointError(f"{directory}: not a checkpoint")
    if int(manifest.get("version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{directory}: unsupported checkpoint version {manifest.get('version')}")
    files = {}
    for key, fname in (("params", "params.bin"), ("entities", "entities.txt"),
                       ("relations", "relations.txt")):
        try:
            data = (directory / fname).read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"{directory}: missing {fname}") from None
        if hashlib.sha256(data).hexdigest() != manifest.get(f"sha256.{key}"):
            raise CheckpointError(f"{directory}: checksum mismatch in {fname}")
        files[key] = data
    blob = files["params"]
    params, extra = ParameterSet(), ParameterSet()
    for key, spec in manifest.items():
        if not (key.startswith("tensor.") or key.startswith("extra.")):
            continue
        dt, shape, off, n = spec.split(";")
        off, n = int(off), int(n)
        if off + n > len(blob):
            raise CheckpointError(f"{directory}: truncated tensor {key}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        arr = np.frombuffer(blob, dtype=dt, count=n // np.dtype(dt).itemsize, offset=off)
        arr = arr.reshape(dims).astype(np.dtype(dt).newbyteorder("="))
        target = params if key.startswith("tensor.") else extra
        target[key.split(".", 1)[1]] = arr
    enc_kwargs = {}
    for f in fields(EncoderConfig):
        raw = manifest[f"encoder.{f.name}"]
        kind = {"int": int, "float": float, "str": str}.get(f.type, str)
        enc_kwargs[f.name] = _parse_value(raw, kind)
    encoder = EncoderConfig(**enc_kwargs)
    entities = files["entities"].decode("utf-8").splitlines()
    rel_rows = [line.split("\t") for line in files["relations"].decode("utf-8").splitlines()]
    metadata = {k[5:]: v for k, v in manifest.items() if k.startswith("meta.")}
    candidates = None
    if manifest.get("candidates"):
        candidates = np.array([int(x) for x in manifest["candidates"].split(",")], dtype=np.int64)
    return Checkpoint(encoder, params, entities, [r[0] for r in rel_rows],
                      np.array([int(r[1]) for r in rel_rows], dtype=np.int32), metadata,
                      candidates, extra)


def checkpoint_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name]).tobytes())
    return h.hexdigest()


# -- training --------------------------------------------------------------

def negative_tables(kg: KnowledgeGraph) -> NegativeTables:
    freq = entity_frequencies(kg)
    return NegativeTables(NegativeDistribution(freq.entity), NegativeDistribution(freq.relation))


def kg_step(params: ParameterSet, batch: np.ndarray, encoder: EncoderConfig, nce: NceConfig,
            tables: NegativeTables, state: AdamState, train: TrainConfig, rng) -> float:
    """One optimizer step on the path loss of ``batch``; returns the batch loss."""
    negatives = sample_negatives(batch, tables, nce, rng)
    bound = bind(params)
    loss = path_loss(bound, batch, encoder, nce, negatives, training=True, rng=rng)
    grads = compute_gradients(loss, bound)
    adam_step(params, grads, state, train)
    return loss.item()


def iterate_batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    corpus: PathCorpus


def prepare_collection(collection: MultiSourceCollection):
    """Reverse-close every KG and stack them into one namespaced KG.

    Returns the union, a symmetric alignment map in union indices, and
    per-entity / per-relation source tags.
    """
    closed = [kg if kg.reverse_closed else add_reverse_triplets(kg) for kg in collection.kgs]
    union, offsets = disjoint_union(closed, "background")
    pairs = []
    for a in collection.alignments:
        lo, ro = offsets[a.left_kg][0], offsets[a.right_kg][0]
        if len(a):
            pairs.append(a.pairs + np.array([lo, ro], dtype=np.int32))
    mapping = symmetric_mapping(np.concatenate(pairs)) if pairs else {}
    ent_tags = np.zeros(union.num_entities, dtype=np.uint16)
    rel_tags = np.zeros(union.num_relations, dtype=np.uint16)
    for k, kg in enumerate(closed):
        eo, ro = offsets[kg.name]
        ent_tags[eo:eo + kg.num_entities] = k
        rel_tags[ro:ro + kg.num_relations] = k
    return union, mapping, ent_tags, rel_tags, [kg.name for kg in closed]


def pretrain(collection: MultiSourceCollection, walk: WalkConfig, nce: NceConfig,
             train: TrainConfig, encoder: EncoderConfig, allow_single: bool = False,
             log: Callable[[dict], None] | None = None) -> PretrainResult:
    """Sample and augment paths over the collection, then minimise the path loss.

    Training runs for exactly ``train.epochs`` epochs. ``allow_single``
    exempts a one-KG collection from the linkage requirement.
    """
    collection.validate(allow_single=allow_single)
    union, mapping, ent_tags, rel_tags, names = prepare_collection(collection)
    corpus = build_corpus(union, walk, mapping, train.augmentation_multiplier,
                          ent_tags, rel_tags, names)
    if len(corpus) == 0:
        raise DataError("pre-training corpus is empty")
    tables = negative_tables(union)
    params = init_parameters(encoder, union.num_entities, union.num_relations, train.seed)
    state = AdamState()
    rng = np.random.default_rng([train.seed, 1])
    history = []
    for epoch in range(1, train.epochs + 1):
        if train.resample_every and epoch > 1 and (epoch - 1) % train.resample_every == 0:
            walk = WalkConfig(walk.path_length, walk.walks_per_start, walk.seed + epoch,
                              walk.neighbor_weighting)
            corpus = build_corpus(union, walk, mapping, train.augmentation_multiplier,
                                  ent_tags, rel_tags, names)
        start = time.perf_counter()
        total = 0.0
        for idx in iterate_batches(len(corpus), train.batch_size, rng):
            total += kg_step(params, corpus.elements[idx], encoder, nce, tables, state,
                             train, rng) * len(idx)
        record = {"epoch": epoch, "mean_loss": total / len(corpus),
                  "wall_time": time.perf_counter() - start}
        if not np.isfinite(record["mean_loss"]) or not params.all_finite():
            raise NumericError(f"training diverged at epoch {epoch}")
        history.append(record)
        logger.info("pretrain epoch %d mean loss %.4f", epoch, record["mean_loss"])
        if log:
            log(record)
    metadata = {"role": "teacher", "epochs": train.epochs, "seed": train.seed,
                "final_loss": history[-1]["mean_loss"] if history else "nan",
                "sources": ",".join(names)}
    ckpt = Checkpoint(encoder, params, list(union.entities), list(union.relations),
                      union.inverse.copy(), metadata)
    return PretrainResult(ckpt, history, corpus)


def config_dict(cfg) -> dict:
    return asdict(cfg)

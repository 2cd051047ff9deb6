"""Noise-contrastive entity and relation prediction over relational paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import EncoderConfig, all_contexts
from .errors import ConfigError, DataError

NOISE_EXPONENT = 0.75


@dataclass(frozen=True)
class NceConfig:
    """``k`` negatives per prediction drawn from ``q^(3/4)``.

    ``literal`` switches the negative term from ``-log(1 - p)`` to the
    ``1 - log p`` form. ``relation_k`` defaults to ``min(k, R - 1)`` where
    ``R`` counts relations with nonzero frequency.
    """

    k: int = 10
    seed: int = 0
    literal: bool = False
    relation_k: int | None = None
    exponent: float = NOISE_EXPONENT

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("k must be nonnegative")
        if self.exponent != NOISE_EXPONENT:
            raise ConfigError("the noise exponent is fixed at 3/4")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def score(candidate, context) -> float:
    """Probability that ``candidate`` is the element predicted from ``context``."""
    return float(sigmoid(np.dot(np.asarray(candidate, np.float64), np.asarray(context, np.float64))))


class NegativeDistribution:
    """Sampling table with mass proportional to ``count ** 0.75``."""

    def __init__(self, counts, exponent: float = NOISE_EXPONENT):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or len(counts) == 0:
            raise DataError("frequency table is empty")
        if np.any(counts < 0):
            raise DataError("frequencies must be nonnegative")
        mass = counts ** exponent
        total = mass.sum()
        if total <= 0:
            raise DataError("all frequencies are zero")
        self.mass = mass
        self.probs = mass / total
        self.cdf = np.cumsum(self.probs)
        self.cdf[-1] = 1.0
        self.support = int(np.count_nonzero(mass))

    def __len__(self) -> int:
        return len(self.probs)

    def sample(self, targets, k: int, rng) -> np.ndarray:
        """Draw ``k`` negatives per target, with replacement, never equal to the target."""
        targets = np.asarray(targets)
        if k > self.support - 1:
            raise ConfigError(f"k={k} exceeds the {self.support - 1} available negatives")
        out = np.searchsorted(self.cdf, rng.random(targets.shape + (k,)), side="right")
        out = np.minimum(out, len(self.probs) - 1)
        clash = out == targets[..., None]
        while clash.any():
            out[clash] = np.minimum(
                np.searchsorted(self.cdf, rng.random(int(clash.sum())), side="right"),
                len(self.probs) - 1)
            clash = out == targets[..., None]
        return out


def build_negative_distribution(counts, config: NceConfig | None = None) -> NegativeDistribution:
    return NegativeDistribution(counts, NOISE_EXPONENT if config is None else config.exponent)


def nce_loss(target: Tensor, context: Tensor, negatives: Tensor, literal: bool = False) -> Tensor:
    """Per-example NCE loss.

    ``target`` and ``context`` are ``(..., d)``; ``negatives`` is
    ``(..., k, d)``. The positive term is ``-log sigmoid(target . c)``. Each
    negative adds ``-log(1 - sigmoid(n . c))``, or ``1 - log sigmoid(n . c)``
    with ``literal=True``.
    """
    target, context, negatives = ag.as_tensor(target), ag.as_tensor(context), ag.as_tensor(negatives)
    positive = -(target * context).sum(axis=-1).log_sigmoid()
    if negatives.shape[-2] == 0:
        return positive
    neg_scores = (negatives * context.reshape(*context.shape[:-1], 1, context.shape[-1])).sum(axis=-1)
    if literal:
        noise = (1.0 - neg_scores.log_sigmoid()).sum(axis=-1)
    else:
        noise = (-(-neg_scores).log_sigmoid()).sum(axis=-1)
    return positive + noise


@dataclass
class NegativeTables:
    entity: NegativeDistribution
    relation: NegativeDistribution

    def relation_k(self, config: NceConfig) -> int:
        if config.relation_k is not None:
            return config.relation_k
        return max(0, min(config.k, self.relation.support - 1))


def sample_negatives(paths: np.ndarray, tables: NegativeTables, config: NceConfig, rng):
    ent = tables.entity.sample(paths[:, 0::2], config.k, rng)
    rel = tables.relation.sample(paths[:, 1::2], tables.relation_k(config), rng)
    return ent, rel


def path_loss(weights, paths, encoder: EncoderConfig, config: NceConfig, negatives,
              training: bool = False, rng=None, reduce: str = "mean") -> Tensor:
    """Sum of per-position NCE losses for each path.

    Entity positions draw entity negatives, relation positions relation
    negatives. ``negatives`` is the ``(entity, relation)`` pair of index
    arrays from :func:`sample_negatives`. Returns the batch mean (or the
    per-path vector with ``reduce="none"``).
    """
    paths = np.asarray(paths)
    ent_neg, rel_neg = negatives
    ctx = all_contexts(weights, paths, encoder, training, rng)
    ent_table, rel_table = weights["entity_embedding"], weights["relation_embedding"]
    ent_loss = nce_loss(ag.take(ent_table, paths[:, 0::2]), ctx[:, 0::2],
                        ag.take(ent_table, ent_neg), config.literal).sum(axis=1)
    total = ent_loss
    if paths.shape[1] > 1:
        rel_loss = nce_loss(ag.take(rel_table, paths[:, 1::2]), ctx[:, 1::2],
                            ag.take(rel_table, rel_neg), config.literal).sum(axis=1)
        total = total + rel_loss
    if reduce == "none":
        return total
    return total.mean()

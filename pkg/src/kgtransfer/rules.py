"""Cross-KG Horn rule mining over a merged joint graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import REVERSE_SUFFIX, KnowledgeGraph

# body argument patterns for a head r(X, Y); Z is the shared variable
ONE_HOP = {"same": (("X", "Y"),), "inverse": (("Y", "X"),)}
TWO_HOP = {
    "chain": (("X", "Z"), ("Z", "Y")),
    "common-parent": (("Z", "X"), ("Z", "Y")),
    "common-child": (("X", "Z"), ("Y", "Z")),
    "inverse-chain": (("Z", "X"), ("Y", "Z")),
}


@dataclass(frozen=True)
class Atom:
    relation: str
    args: tuple[str, str]

    def __str__(self):
        return f"{self.relation}({self.args[0]}, {self.args[1]})"


@dataclass(frozen=True)
class HornRule:
    head: Atom
    body: tuple[Atom, ...]
    shape: str
    support: int
    body_support: int

    @property
    def confidence(self) -> float:
        return self.support / self.body_support if self.body_support else 0.0

    def body_text(self) -> str:
        return " ∧ ".join(str(a) for a in self.body)


def namespace(relation: str) -> str:
    return relation.split(":", 1)[0] if ":" in relation else ""


def _pair_codes(pairs: np.ndarray, n: int) -> np.ndarray:
    return np.unique(pairs[:, 0].astype(np.int64) * n + pairs[:, 1])


def _two_hop_pairs(first: np.ndarray, second: np.ndarray, n: int) -> np.ndarray:
    """Distinct ``(X, Y)`` codes with ``first = (X, Z)`` and ``second = (Z, Y)``, X != Y."""
    if not len(first) or not len(second):
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(second[:, 0], kind="stable")
    keys = second[order, 0]
    lo = np.searchsorted(keys, first[:, 1], side="left")
    hi = np.searchsorted(keys, first[:, 1], side="right")
    counts = hi - lo
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    xs = np.repeat(first[:, 0], counts)
    starts = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    ys = second[order, 1][np.arange(counts.sum()) + starts]
    keep = xs != ys
    return np.unique(xs[keep].astype(np.int64) * n + ys[keep])


def _oriented(pairs: np.ndarray, args: tuple[str, str], left: str) -> np.ndarray:
    """Orient an atom's (subject, object) pairs as (``left`` variable, other)."""
    return pairs if args[0] == left else pairs[:, ::-1]


def body_groundings(kg: KnowledgeGraph, body: tuple[Atom, ...], by_name: dict) -> np.ndarray:
    """Distinct (X, Y) codes ``X * n + Y`` satisfying ``body``."""
    n = kg.num_entities
    pairs = [by_name[a.relation] for a in body]
    if len(body) == 1:
        return _pair_codes(_oriented(pairs[0], body[0].args, "X"), n) if len(pairs[0]) \
            else np.zeros(0, dtype=np.int64)
    first = _oriented(pairs[0], body[0].args, "X")
    second = _oriented(pairs[1], body[1].args, "Z")
    return _two_hop_pairs(first, second, n)


def _relation_pairs(kg: KnowledgeGraph) -> dict[str, np.ndarray]:
    t = kg.triplets
    order = np.argsort(t[:, 1], kind="stable")
    t = t[order]
    bounds = np.searchsorted(t[:, 1], np.arange(kg.num_relations + 1))
    return {kg.relations[r]: t[bounds[r]:bounds[r + 1]][:, [0, 2]] for r in range(kg.num_relations)}


def mine_rules(joint: KnowledgeGraph, max_body: int = 2, min_confidence: float = 0.5,
               min_support: int = 2, cross_kg: bool = True) -> list[HornRule]:
    """Exhaustively score 1-hop and 2-hop rules by distinct (X, Y) groundings.

    Support counts head-and-body groundings, body support counts body
    groundings, and confidence is their ratio. 2-hop bodies never ground
    with ``X == Y``. With ``cross_kg`` every body atom must come from a
    different KG namespace than the head. Rules are sorted by confidence,
    then support, descending.
    """
    if max_body not in (1, 2):
        raise ValueError("max_body must be 1 or 2")
    n = joint.num_entities
    by_name = _relation_pairs(joint)
    names = [r for r in joint.relations
             if not (r.endswith(REVERSE_SUFFIX) and len(by_name[r]))] \
        if joint.reverse_closed else list(joint.relations)
    names = [r for r in names if len(by_name[r])]
    heads = {r: _pair_codes(by_name[r], n) for r in names}
    bodies = []
    for shape, (args,) in ONE_HOP.items():
        bodies += [(shape, (Atom(r, args),)) for r in names]
    if max_body == 2:
        for shape, (a1, a2) in TWO_HOP.items():
            bodies += [(shape, (Atom(r1, a1), Atom(r2, a2))) for r1 in names for r2 in names]
    rules = []
    for shape, body in bodies:
        spaces = {namespace(a.relation) for a in body}
        codes = None
        for h in names:
            if cross_kg and namespace(h) in spaces:
                continue
            if shape == "same" and body[0].relation == h:
                continue
            if codes is None:
                codes = body_groundings(joint, body, by_name)
            if len(codes) == 0:
                break
            support = int(np.isin(codes, heads[h], assume_unique=True).sum())
            if support < min_support or support / len(codes) < min_confidence:
                continue
            rules.append(HornRule(Atom(h, ("X", "Y")), body, shape, support, len(codes)))
    rules.sort(key=lambda r: (-r.confidence, -r.support, str(r.head), r.body_text()))
    return rules


def rule_report(rules: list[HornRule], fmt: str = "text") -> str:
    """Rule table with head, body, confidence (2 decimals), support and body support."""
    header = ("head", "body", "conf", "support", "body_support")
    rows = [(str(r.head), r.body_text(), f"{r.confidence:.2f}", str(r.support),
             str(r.body_support)) for r in rules]
    if fmt == "tsv":
        return "".join("\t".join(row) + "\n" for row in [header, *rows])
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    return "\n".join(lines) + "\n"

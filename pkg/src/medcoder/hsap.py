"""Hierarchical self-alignment pretraining of term embeddings.

Minibatches group anchor entities from one hierarchy level with their
parents/siblings (the hardest negatives) plus surface terms per entity.
All same-entity pairs in a batch act as anchor/positive; every
other-entity term is a negative whose hinge margin depends on the graph
relation: pi/2 for parent-child pairs, pi/2 + arccos(|cos|) for siblings,
pi for unrelated entities. Margins are computed from the current
embeddings and held fixed inside the loss, so the hinge only moves the
distances.

Distances default to angular (arccos of the clamped dot product of
L2-normalized embeddings) so margin and distance share units; chord
distance is available as an alternative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import preprocess
from .encoder import EncoderConfig, encode_segments
from .errors import InputError, NumericsError, SamplingError, TrainingError
from .ontology import OntologyGraph
from .vocab import CLS, Vocabulary

logger = logging.getLogger(__name__)

__all__ = [
    "SamplerConfig",
    "Triplet",
    "TripletBatch",
    "sample_minibatch",
    "encode_terms",
    "dynamic_margin",
    "build_triplets",
    "triplet_loss",
    "pretrain",
    "mean_relation_distances",
]

_DOT_LIMIT = 1.0 - 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    """i anchors per batch, j entities per anchor group (anchor plus j-1
    parents/siblings), k terms per entity: n = i*j*k terms per batch."""

    anchors_per_batch: int = 2
    group_size: int = 3
    terms_per_entity: int = 4

    def __post_init__(self):
        if min(self.anchors_per_batch, self.group_size, self.terms_per_entity) < 1:
            raise InputError("sampler config values must all be >= 1")

    @property
    def batch_terms(self) -> int:
        return self.anchors_per_batch * self.group_size * self.terms_per_entity


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    relation: str  # parent | sibling | inter
    margin: float


@dataclass
class TripletBatch:
    triplets: list[Triplet]

    @property
    def count(self) -> int:
        return len(self.triplets)


def _codes_with_terms(graph: OntologyGraph, codes) -> list[str]:
    return [c for c in codes if graph.entity(c).terms]


def sample_minibatch(
    graph: OntologyGraph,
    cfg: SamplerConfig,
    level: int,
    rng: np.random.Generator,
) -> list[tuple[str, str]]:
    """Draw (entity, term) pairs: anchors from ``level``, then j-1 distinct
    parents/siblings per anchor (topped up from unrelated entities with a
    warning when the neighborhood is too small), then k terms per entity."""
    level_codes = _codes_with_terms(graph, graph.codes_at_level(level))
    if len(level_codes) < cfg.anchors_per_batch:
        raise SamplingError(
            f"level {level} has {len(level_codes)} usable entities, "
            f"need {cfg.anchors_per_batch} anchors"
        )
    anchors = [
        level_codes[idx]
        for idx in rng.choice(len(level_codes), size=cfg.anchors_per_batch, replace=False)
    ]
    all_usable = _codes_with_terms(graph, sorted(graph.entities))

    batch: list[tuple[str, str]] = []
    for anchor in anchors:
        neighborhood = set()
        parent = graph.parent_of(anchor)
        if parent is not None:
            neighborhood.add(parent)
        neighborhood |= graph.siblings(anchor)
        pool = _codes_with_terms(graph, sorted(neighborhood))
        need = cfg.group_size - 1
        if len(pool) >= need:
            chosen = [pool[idx] for idx in rng.choice(len(pool), size=need, replace=False)]
        else:
            chosen = list(pool)
            backfill = [c for c in all_usable if c != anchor and c not in neighborhood]
            extra = need - len(chosen)
            if extra > 0:
                if len(backfill) < extra:
                    raise SamplingError(f"not enough entities to fill group for {anchor}")
                chosen += [backfill[idx] for idx in rng.choice(len(backfill), size=extra, replace=False)]
                logger.warning(
                    "anchor %s has %d parents/siblings; drew %d from unrelated entities",
                    anchor, len(pool), extra,
                )
        for entity in [anchor] + chosen:
            terms = sorted(graph.entity(entity).terms)
            k = cfg.terms_per_entity
            if len(terms) >= k:
                picks = rng.choice(len(terms), size=k, replace=False)
            else:
                picks = rng.choice(len(terms), size=k, replace=True)
            batch.extend((entity, terms[idx]) for idx in picks)
    return batch


def encode_terms(
    entries: Sequence[tuple[str, str]],
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
) -> Tensor:
    """(entity, term) pairs -> L2-normalized first-row embeddings (n, H).

    Each term is encoded as "[CLS] term" and represented by its first
    hidden vector.
    """
    cls_id = vocab.id_of(CLS)
    segments = []
    for _, term in entries:
        tokens = preprocess(term)
        if not tokens:
            raise InputError(f"term {term!r} is empty after preprocessing")
        segments.append(np.concatenate([[cls_id], vocab.encode(tokens)]))
    return ad.normalize_rows(encode_segments(segments, params, config))


def dynamic_margin(p_a: np.ndarray, p_neg: np.ndarray, relation: str) -> float:
    """Relation-dependent hinge margin in [pi/2, pi]."""
    if relation == "parent":
        return math.pi / 2
    if relation == "inter":
        return math.pi
    if relation != "sibling":
        raise InputError(f"unknown relation {relation!r}")
    p_a = np.asarray(p_a, dtype=np.float64)
    p_neg = np.asarray(p_neg, dtype=np.float64)
    if np.linalg.norm(p_a) < 1e-12 or np.linalg.norm(p_neg) < 1e-12:
        raise NumericsError("dynamic_margin: zero-norm embedding")
    dot = float(np.clip(np.dot(p_a, p_neg), -1.0, 1.0))
    return math.pi / 2 + math.acos(abs(dot))


def build_triplets(
    embeddings: np.ndarray,
    entities: Sequence[str],
    graph: OntologyGraph,
) -> TripletBatch:
    """Enumerate every (anchor, same-entity positive, other-entity negative)
    in the batch, tagging negatives by graph relation and fixing margins
    from the given (detached) embeddings."""
    n = len(entities)
    if embeddings.shape[0] != n:
        raise InputError(f"{embeddings.shape[0]} embeddings for {n} entities")
    triplets: list[Triplet] = []
    relation_cache: dict[tuple[str, str], str] = {}
    for a in range(n):
        positives = [p for p in range(n) if p != a and entities[p] == entities[a]]
        if not positives:
            continue
        for neg in range(n):
            if entities[neg] == entities[a]:
                continue
            pair = (entities[a], entities[neg])
            relation = relation_cache.get(pair)
            if relation is None:
                relation = relation_cache[pair] = graph.relation(*pair)
            margin = dynamic_margin(embeddings[a], embeddings[neg], relation)
            for pos in positives:
                triplets.append(Triplet(a, pos, neg, relation, margin))
    return TripletBatch(triplets)


def _pair_distance(emb: Tensor, idx_a: np.ndarray, idx_b: np.ndarray, distance: str) -> Tensor:
    ea = ad.embedding_lookup(emb, idx_a)
    eb = ad.embedding_lookup(emb, idx_b)
    dots = ad.sum_axis(ad.mul(ea, eb), axis=1)
    if distance == "angular":
        return ad.arccos(ad.clamp(dots, -_DOT_LIMIT, _DOT_LIMIT))
    if distance == "chord":
        # |a-b| = sqrt(2 - 2 a.b) on unit vectors
        gap = ad.add(ad.scale(dots, -2.0), ad.tensor(np.full(len(idx_a), 2.0)))
        return ad.sqrt(ad.clamp(gap, 1e-12, 4.0))
    raise InputError(f"unknown distance {distance!r}")


def triplet_loss(embeddings: Tensor, batch: TripletBatch, distance: str = "angular") -> Tensor:
    """L = sum(max(0, margin - d(a,n) + d(a,p))) / (2 * batch triplet count)."""
    if batch.count == 0:
        raise InputError("triplet_loss: empty triplet batch")
    ia = np.array([t.anchor for t in batch.triplets])
    ip = np.array([t.positive for t in batch.triplets])
    ineg = np.array([t.negative for t in batch.triplets])
    margins = ad.tensor(np.array([t.margin for t in batch.triplets]))
    d_ap = _pair_distance(embeddings, ia, ip, distance)
    d_an = _pair_distance(embeddings, ia, ineg, distance)
    hinge = ad.relu(ad.add(ad.sub(margins, d_an), d_ap))
    return ad.scale(ad.sum_all(hinge), 1.0 / (2.0 * batch.count))


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------


def _batch_loss_value(
    batch: list[tuple[str, str]],
    graph: OntologyGraph,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    distance: str,
) -> float:
    emb = encode_terms(batch, params, config, vocab)
    triplets = build_triplets(emb.values, [e for e, _ in batch], graph)
    if triplets.count == 0:
        return 0.0
    return triplet_loss(emb, triplets, distance).item()


@dataclass
class PretrainResult:
    history: list[tuple[int, float, int]]  # (step, loss, level)
    holdout_loss_start: float
    holdout_loss_end: float


def pretrain(
    graph: OntologyGraph,
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab: Vocabulary,
    sampler: SamplerConfig,
    steps: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    distance: str = "angular",
    max_grad_norm: float = 1.0,
    log_path=None,
) -> PretrainResult:
    """Round-robin over hierarchy levels with enough anchors; one sampled
    batch, one optimizer step each. Mutates ``params`` in place."""
    from .training import RmsProp, clip_grad_norm

    levels = [
        lv
        for lv in graph.levels
        if len(_codes_with_terms(graph, graph.codes_at_level(lv))) >= sampler.anchors_per_batch
    ]
    if not levels:
        raise SamplingError("no hierarchy level has enough entities with terms")

    holdout_rng = np.random.default_rng(rng.integers(2**63))
    holdout = sample_minibatch(graph, sampler, levels[0], holdout_rng)
    holdout_start = _batch_loss_value(holdout, graph, params, config, vocab, distance)

    opt = RmsProp(params, lr=lr)
    history: list[tuple[int, float, int]] = []
    log_lines: list[str] = []
    for step in range(steps):
        level = levels[step % len(levels)]
        batch = sample_minibatch(graph, sampler, level, rng)
        with ad.Tape() as tape:
            emb = encode_terms(batch, params, config, vocab)
            triplets = build_triplets(emb.values, [e for e, _ in batch], graph)
            if triplets.count == 0:
                continue
            loss = triplet_loss(emb, triplets, distance)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite pretraining loss at step {step}")
            tape.backward(loss)
        clip_grad_norm(params, max_grad_norm)
        opt.step()
        opt.zero_grad()
        history.append((step, value, level))
        log_lines.append(f"{step}\t{value:.6f}\t{level}")

    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    holdout_end = _batch_loss_value(holdout, graph, params, config, vocab, distance)
    return PretrainResult(history, holdout_start, holdout_end)


def mean_relation_distances(
    embeddings: np.ndarray,
    entities: Sequence[str],
    graph: OntologyGraph,
) -> dict[str, float]:
    """Mean angular distance of intra-entity, sibling, and inter-class pairs
    (parent-child pairs belong to neither bucket)."""
    emb = np.asarray(embeddings)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / norms
    sums = {"intra": 0.0, "sibling": 0.0, "inter": 0.0}
    counts = {"intra": 0, "sibling": 0, "inter": 0}
    n = len(entities)
    for a in range(n):
        for b in range(a + 1, n):
            if entities[a] == entities[b]:
                bucket = "intra"
            else:
                rel = graph.relation(entities[a], entities[b])
                if rel == "parent":
                    continue
                bucket = "sibling" if rel == "sibling" else "inter"
            d = math.acos(min(1.0, max(-1.0, float(np.dot(emb[a], emb[b])))))
            sums[bucket] += d
            counts[bucket] += 1
    return {k: (sums[k] / counts[k] if counts[k] else float("nan")) for k in sums}

"""Scatter-gather federation: route a query, fan out, merge exact top-k.

Byte accounting models the wire format: every contacted shard receives an
8-byte query id plus d float32 coordinates, and each returned embedding costs
an 8-byte id plus d float32 coordinates. Merging is arrival-order independent,
so concurrent fan-out cannot change results.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import assemble_features
from .router import LabeledExample, RouterModel, predict_batch
from .store import ScoredHit, ShardIndex, ShardStats, search_top_k


class ShardUnavailableError(Exception):
    def __init__(self, shard_id: int):
        super().__init__(f"shard {shard_id} is unavailable")
        self.shard_id = shard_id


@dataclass(frozen=True)
class RoutingDecision:
    query_id: int
    probabilities: np.ndarray  # (n_shards,) aligned with the shard sequence
    selected: np.ndarray       # (n_shards,) bool
    fallback_used: bool        # no shard cleared the threshold; argmax forced


@dataclass(frozen=True)
class FederatedResult:
    query_id: int
    hits: list[ScoredHit]
    shards_queried: int
    embeddings_returned: int
    bytes_moved: int


def decision_from_probabilities(
    query_id: int, probabilities: np.ndarray, threshold: float
) -> RoutingDecision:
    """Threshold the per-shard probabilities; if nothing clears it, fall back
    to the single most probable shard (lowest index on ties)."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    selected = probabilities >= threshold
    fallback = not selected.any()
    if fallback:
        selected = np.zeros(probabilities.shape[0], dtype=bool)
        selected[int(probabilities.argmax())] = True
    return RoutingDecision(query_id, probabilities, selected, fallback)


def route(
    model: RouterModel,
    query_id: int,
    query: np.ndarray,
    shard_stats: Sequence[ShardStats],
    threshold: float | None = None,
) -> RoutingDecision:
    """Select every shard whose predicted relevance clears the threshold.

    At least one shard is always selected (argmax fallback), so m >= 1.
    """
    if not shard_stats:
        raise ValueError("no shards to route over")
    thresh = model.threshold if threshold is None else threshold
    rows = np.stack([assemble_features(query, s) for s in shard_stats])
    probs = predict_batch(model, rows)
    return decision_from_probabilities(query_id, probs, thresh)


def merge_hits(hit_lists: Sequence[list[ScoredHit]], k: int) -> list[ScoredHit]:
    """Global k smallest under (distance, shard_id, vector_id) ascending."""
    merged = [h for hits in hit_lists for h in hits]
    merged.sort(key=lambda h: (h.distance, h.shard_id, h.vector_id))
    return merged[:k]


def result_from_hit_lists(
    decision: RoutingDecision,
    hit_lists: Sequence[list[ScoredHit]],
    dim: int,
    k: int,
) -> FederatedResult:
    """Merge the selected shards' already-fetched lists and account bytes."""
    picked = [hit_lists[i] for i in np.flatnonzero(decision.selected)]
    per_unit = 8 + 4 * dim  # u64 id + f32 coords, both directions
    returned = sum(len(h) for h in picked)
    return FederatedResult(
        query_id=decision.query_id,
        hits=merge_hits(picked, k),
        shards_queried=len(picked),
        embeddings_returned=returned,
        bytes_moved=len(picked) * per_unit + returned * per_unit,
    )


def federated_search(
    decision: RoutingDecision,
    shards: Sequence[ShardIndex | None],
    query: np.ndarray,
    k: int,
    executor: Executor | None = None,
) -> FederatedResult:
    """Query the selected shards (concurrently if an executor is given),
    merge their top-k lists, and account the bytes moved."""
    if decision.selected.shape[0] != len(shards):
        raise ValueError("decision does not align with the shard sequence")
    picked: list[ShardIndex] = []
    for i in np.flatnonzero(decision.selected):
        if shards[i] is None:
            raise ShardUnavailableError(int(i))
        picked.append(shards[i])

    if executor is not None and len(picked) > 1:
        searched = list(executor.map(lambda s: search_top_k(s, query, k), picked))
    else:
        searched = [search_top_k(s, query, k) for s in picked]

    # Re-expand to one list per shard position so the merge helper can align.
    hit_lists: list[list[ScoredHit]] = [[] for _ in shards]
    for idx, hits in zip(np.flatnonzero(decision.selected), searched):
        hit_lists[idx] = hits
    dim = picked[0].dim if picked else len(np.atleast_1d(query))
    return result_from_hit_lists(decision, hit_lists, dim, k)


def naive_search(
    query_id: int,
    shards: Sequence[ShardIndex | None],
    query: np.ndarray,
    k: int,
    executor: Executor | None = None,
) -> FederatedResult:
    """Broadcast to every shard; the recall reference for all routing."""
    decision = RoutingDecision(
        query_id=query_id,
        probabilities=np.ones(len(shards)),
        selected=np.ones(len(shards), dtype=bool),
        fallback_used=False,
    )
    return federated_search(decision, shards, query, k, executor)


def oracle_decision(
    query_id: int, relevant: np.ndarray, n_shards: int
) -> RoutingDecision:
    """Routing straight from ground-truth labels; the floor every learned
    router is measured against."""
    relevant = np.asarray(relevant, dtype=bool)
    if relevant.shape != (n_shards,):
        raise ValueError("label vector does not match shard count")
    if not relevant.any():
        raise ValueError(f"query {query_id}: no relevant shard in ground truth")
    return RoutingDecision(
        query_id=query_id,
        probabilities=relevant.astype(np.float64),
        selected=relevant.copy(),
        fallback_used=False,
    )


def relevant_shards(hits: Sequence[ScoredHit], shards: Sequence[ShardIndex]) -> np.ndarray:
    """Ground-truth labels aligned with `shards`: 1 iff the shard placed a hit."""
    pos = {s.shard_id: i for i, s in enumerate(shards)}
    labels = np.zeros(len(shards), dtype=np.int64)
    for h in hits:
        labels[pos[h.shard_id]] = 1
    return labels


def generate_labels(
    shards: Sequence[ShardIndex],
    queries: Sequence[tuple[int, np.ndarray]],
    k: int,
    executor: Executor | None = None,
) -> list[LabeledExample]:
    """One labeled (query, shard) row per pair: Q queries over n shards
    yield exactly Q*n examples, labels derived from the naive global top-k."""
    examples: list[LabeledExample] = []
    for query_id, query in queries:
        result = naive_search(query_id, shards, query, k, executor)
        labels = relevant_shards(result.hits, shards)
        for shard, label in zip(shards, labels):
            examples.append(
                LabeledExample(
                    features=assemble_features(query, shard.stats),
                    label=int(label),
                    query_id=query_id,
                    shard_id=shard.shard_id,
                )
            )
    return examples

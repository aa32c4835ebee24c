"""Rankers over embedded collections, retrieval metrics, few-shot classification.

All rankers score every collection item from a concept set's descriptors and
sort descending, breaking ties by ascending item id so results are
bit-reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datasynth import Dataset, sample_noisy_concept_set
from .embedding import EmbeddingNet, embed_many
from .gmm import ModelSpec, fit_concept_model, gmm_logpdf_many
from .histloss import RelevanceSets


@dataclass
class RankedList:
    ids: np.ndarray      # item ids, best first
    scores: np.ndarray   # matching scores, non-increasing
    labels: np.ndarray   # 1 for relevant items, aligned with ids


@dataclass
class LinearScorer:
    weights: np.ndarray
    bias: float = 0.0

    def score(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.weights + self.bias


def make_ranked(scores, labels, ids=None) -> RankedList:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return RankedList(ids=ids[order], scores=scores[order], labels=labels[order])


def rank_density(net: EmbeddingNet, concept, collection, labels, spec: ModelSpec, *, ids=None, seed=0) -> RankedList:
    """Fit the requested generative model to the concept set and rank by log-density."""
    D = embed_many(net, concept)
    Z = embed_many(net, collection)
    model, _, _ = fit_concept_model(D, spec, seed=seed)
    return make_ranked(gmm_logpdf_many(model, Z), labels, ids)


def rank_avg(net: EmbeddingNet, concept, collection, labels, *, ids=None) -> RankedList:
    """Score by the scalar product with the mean concept descriptor."""
    D = embed_many(net, concept)
    Z = embed_many(net, collection)
    return make_ranked(Z @ D.mean(axis=0), labels, ids)


def rank_nn(net: EmbeddingNet, concept, collection, labels, *, ids=None) -> RankedList:
    """Score by the best scalar product against any concept descriptor."""
    D = embed_many(net, concept)
    Z = embed_many(net, collection)
    return make_ranked((Z @ D.T).max(axis=1), labels, ids)


def train_linear_svm(positives, negatives, *, reg=1e-2, epochs=500, use_bias=True) -> LinearScorer:
    """Full-batch subgradient descent on the l2-regularized hinge loss."""
    X = np.vstack([positives, negatives])
    y = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    M = len(y)
    u = np.zeros(X.shape[1])
    b = 0.0
    for t in range(1, epochs + 1):
        margins = y * (X @ u + b)
        viol = margins < 1.0
        grad_u = reg * u - (y[viol, None] * X[viol]).sum(axis=0) / M
        lr = 1.0 / (reg * t + 10.0)
        u -= lr * grad_u
        if use_bias:
            b += lr * y[viol].sum() / M
    return LinearScorer(u, b)


def svm_hinge_loss(scorer: LinearScorer, positives, negatives) -> float:
    X = np.vstack([positives, negatives])
    y = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    return float(np.maximum(1.0 - y * scorer.score(X), 0.0).mean())


def rank_svm(
    net: EmbeddingNet,
    concept,
    collection,
    labels,
    negatives_pool,
    rng,
    *,
    ids=None,
    reg=1e-2,
    epochs=500,
    use_bias=True,
) -> RankedList:
    """One-vs-all ranking: hinge classifier on the concept set vs sampled negatives.

    Exactly 2 * |concept| negatives are drawn from the pool, which must be
    disjoint from the concept's class.
    """
    concept = np.asarray(concept, dtype=float)
    pool = np.asarray(negatives_pool, dtype=float)
    need = 2 * len(concept)
    if len(pool) < need:
        raise ValueError(f"negatives pool has {len(pool)} items, need {need}")
    take = rng.choice(len(pool), size=need, replace=False)
    D = embed_many(net, concept)
    N = embed_many(net, pool[take])
    scorer = train_linear_svm(D, N, reg=reg, epochs=epochs, use_bias=use_bias)
    Z = embed_many(net, collection)
    return make_ranked(scorer.score(Z), labels, ids)


def average_precision(ranked: RankedList) -> float:
    """Mean of precision-at-k over the relevant positions of the full ranking."""
    rel = np.asarray(ranked.labels, dtype=float)
    total = rel.sum()
    if total == 0:
        raise ValueError("ranked list contains no relevant items")
    prec_at_k = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((prec_at_k * rel).sum() / total)


def mean_average_precision(aps) -> float:
    aps = np.asarray(list(aps), dtype=float)
    if aps.size == 0:
        raise ValueError("no queries to average over")
    return float(aps.mean())


def classify_few_shot(net: EmbeddingNet, class_sets, probe, spec: ModelSpec, *, seed=0) -> int:
    """Fit one model per class and pick the class whose model ranks the probe highest.

    Ties resolve to the smallest class index.
    """
    if len(class_sets) < 2:
        raise ValueError("need at least two classes")
    z = embed_many(net, np.asarray(probe, dtype=float)[None, :])[0]
    scores = []
    for class_set in class_sets:
        D = embed_many(net, class_set)
        model, _, _ = fit_concept_model(D, spec, seed=seed)
        scores.append(gmm_logpdf_many(model, z[None, :])[0])
    return int(np.argmax(scores))


def relevance_scores(net: EmbeddingNet, concept, plus_items, minus_items, spec: ModelSpec, *, seed=0) -> RelevanceSets:
    """Relevance sets for the ranking loss under a given model kind."""
    D = embed_many(net, concept)
    Zp = embed_many(net, plus_items)
    Zm = embed_many(net, minus_items)
    if spec.family in ModelSpec.GENERATIVE:
        model, _, _ = fit_concept_model(D, spec, seed=seed)
        return RelevanceSets(gmm_logpdf_many(model, Zp), gmm_logpdf_many(model, Zm))
    if spec.family == "avg":
        mean = D.mean(axis=0)
        return RelevanceSets(Zp @ mean, Zm @ mean)
    if spec.family == "nn":
        return RelevanceSets((Zp @ D.T).max(axis=1), (Zm @ D.T).max(axis=1))
    raise ValueError(f"no relevance rule for family {spec.family!r}")


def evaluate_split_map(
    net: EmbeddingNet,
    dataset: Dataset,
    class_ids,
    spec: ModelSpec,
    *,
    concept_size: int,
    noise_fraction: float,
    rng,
    fit_seed: int = 0,
    threads: int = 1,
):
    """One retrieval query per class: a (possibly noisy) concept set against
    the remaining items of the listed classes.  Returns (mAP, per-query APs).

    Queries are sampled sequentially so the result is independent of the
    worker count; ranking runs in parallel and merges by query index.
    """
    class_ids = sorted(int(c) for c in class_ids)
    split_items = np.concatenate([dataset.items_of_class(c) for c in class_ids])
    queries = []
    for c in class_ids:
        concept_idx = sample_noisy_concept_set(dataset, c, concept_size, noise_fraction, rng)
        collection_idx = np.setdiff1d(split_items, concept_idx)
        labels = dataset.class_ids[collection_idx] == c
        if not labels.any():
            raise ValueError(f"class {c} has no relevant items left to retrieve")
        svm_rng = np.random.default_rng(rng.integers(2**63))
        queries.append((c, concept_idx, collection_idx, labels, svm_rng))

    def run(query):
        c, concept_idx, collection_idx, labels, svm_rng = query
        concept = dataset.vectors[concept_idx]
        collection = dataset.vectors[collection_idx]
        if spec.family in ModelSpec.GENERATIVE:
            ranked = rank_density(net, concept, collection, labels, spec, ids=collection_idx, seed=fit_seed)
        elif spec.family == "avg":
            ranked = rank_avg(net, concept, collection, labels, ids=collection_idx)
        elif spec.family == "nn":
            ranked = rank_nn(net, concept, collection, labels, ids=collection_idx)
        elif spec.family == "svm":
            pool_idx = collection_idx[dataset.class_ids[collection_idx] != c]
            ranked = rank_svm(
                net, concept, collection, labels, dataset.vectors[pool_idx], svm_rng, ids=collection_idx
            )
        else:
            raise ValueError(f"unknown ranking family {spec.family!r}")
        return c, average_precision(ranked)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_query = list(pool.map(run, queries))
    else:
        per_query = [run(q) for q in queries]
    return mean_average_precision([ap for _, ap in per_query]), per_query


def run_fewshot_episodes(
    net: EmbeddingNet,
    dataset: Dataset,
    class_ids,
    *,
    ways: int,
    shots: int,
    episodes: int,
    spec: ModelSpec,
    rng,
    fit_seed: int = 0,
) -> float:
    """Episodic c-way classification accuracy by maximal model rank."""
    class_ids = sorted(int(c) for c in class_ids)
    if len(class_ids) < ways:
        raise ValueError(f"need {ways} classes, split has {len(class_ids)}")
    correct = 0
    for _ in range(episodes):
        chosen = rng.choice(class_ids, size=ways, replace=False)
        target = int(rng.integers(ways))
        class_sets = []
        probe = None
        for slot, c in enumerate(chosen):
            items = dataset.items_of_class(int(c))
            if len(items) < shots + 1:
                raise ValueError(f"class {c} too small for {shots}-shot episodes")
            perm = rng.permutation(items)
            class_sets.append(dataset.vectors[perm[:shots]])
            if slot == target:
                probe = dataset.vectors[perm[shots]]
        pred = classify_few_shot(net, class_sets, probe, spec, seed=fit_seed)
        correct += int(pred == target)
    return correct / episodes

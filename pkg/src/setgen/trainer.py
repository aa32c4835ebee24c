"""End-to-end meta-training: embed, fit, score, rank-loss, backprop, ADAM.

Every training task is a tuple (concept set, relevant set, irrelevant set)
drawn from one class of the dataset.  The loss gradient reaches the embedding
weights along three routes: directly through the scored items' descriptors,
through the fitted model parameters, and through the concept descriptors via
differentiation of the fitting step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasynth import Dataset, draw_other_class_items, round_half_up
from .embedding import EmbeddingNet, GradientTape, embed_backward_many, embed_many, init_net
from .gaussian import fit_gaussian, gaussian_fit_grads
from .gmm import (
    GmmModel,
    ModelSpec,
    fit_gmm_em,
    from_gaussian,
    gmm_logpdf_grad_point,
    gmm_logpdf_many,
    gmm_logpdf_param_grads,
)
from .histloss import DEFAULT_BINS, RelevanceSets, loss_and_grads
from .implicit import ImplicitSolveError, backprop_through_fit
from .retrieval import evaluate_split_map

TRAINABLE_FAMILIES = ("gauss", "gmm", "avg", "nn")


class TrainingAborted(RuntimeError):
    """Too many tuples were skipped for the run to be trustworthy."""


@dataclass
class TrainerConfig:
    layer_dims: tuple
    model: ModelSpec
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batches_per_epoch: int = 50
    tuples_per_batch: int = 5
    bins: int = DEFAULT_BINS
    concept_size: int = 10
    relevant_size: int = 15
    irrelevant_size: int = 20
    noise_fraction: float = 0.0
    seed: int = 0
    validation_interval: int = 10
    max_skip_fraction: float = 0.1

    def validate(self) -> None:
        if self.model.family not in TRAINABLE_FAMILIES:
            raise ValueError(f"family {self.model.family!r} cannot be meta-trained")
        if min(self.learning_rate, self.eps) <= 0:
            raise ValueError("learning rate and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("ADAM betas must lie in (0, 1)")
        if min(self.concept_size, self.relevant_size, self.irrelevant_size, self.tuples_per_batch) < 1:
            raise ValueError("set and batch sizes must be positive")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.bins < 2:
            raise ValueError("bad epoch/batch/bin counts")
        if not 0.0 <= self.noise_fraction < 0.5:
            raise ValueError("noise_fraction must lie in [0, 0.5)")


@dataclass
class LearningTuple:
    class_id: int
    concept: np.ndarray        # raw vectors (|X|, input_dim)
    relevant: np.ndarray       # (|Z+|, input_dim)
    irrelevant: np.ndarray     # (|Z-|, input_dim)
    concept_ids: np.ndarray
    relevant_ids: np.ndarray
    irrelevant_ids: np.ndarray


class WarmStartCache:
    """Last fitted mixture per class id, reused as the next EM starting point."""

    def __init__(self):
        self._models: dict[int, GmmModel] = {}

    def get(self, class_id: int, k: int, dim: int) -> GmmModel | None:
        model = self._models.get(int(class_id))
        if model is not None and (model.k != k or model.dim != dim):
            raise ValueError(
                f"cached model for class {class_id} has shape (k={model.k}, n={model.dim}), "
                f"expected (k={k}, n={dim})"
            )
        return model

    def put(self, class_id: int, model: GmmModel) -> None:
        self._models[int(class_id)] = model

    def __contains__(self, class_id: int) -> bool:
        return int(class_id) in self._models

    def __len__(self) -> int:
        return len(self._models)


def sample_tuple(
    dataset: Dataset,
    class_ids,
    sizes,
    rng,
    *,
    noise_fraction: float = 0.0,
) -> LearningTuple:
    """Draw one training task.

    The concept and relevant sets come disjointly from one class; with a
    nonzero ``noise_fraction`` the concept is contaminated with round-half-up
    items from other classes.  The irrelevant set comes uniformly from the
    other classes.
    """
    n_x, n_plus, n_minus = sizes
    eligible = sorted(int(c) for c in class_ids)
    if len(dataset.classes) < 2:
        raise ValueError("dataset needs at least two classes (no negatives exist)")
    c = eligible[int(rng.integers(len(eligible)))]
    n_cont = round_half_up(noise_fraction * n_x)
    items = dataset.items_of_class(c)
    if len(items) < (n_x - n_cont) + n_plus:
        raise ValueError(
            f"class {c} has {len(items)} items; needs {(n_x - n_cont) + n_plus} "
            "for disjoint concept and relevant sets"
        )
    perm = rng.permutation(items)
    concept_ids = perm[: n_x - n_cont]
    relevant_ids = perm[n_x - n_cont : n_x - n_cont + n_plus]
    if n_cont:
        contaminants = draw_other_class_items(dataset, c, n_cont, rng)
        concept_ids = np.concatenate([concept_ids, contaminants])
    irrelevant_ids = draw_other_class_items(dataset, c, n_minus, rng)
    return LearningTuple(
        class_id=c,
        concept=dataset.vectors[concept_ids],
        relevant=dataset.vectors[relevant_ids],
        irrelevant=dataset.vectors[irrelevant_ids],
        concept_ids=np.asarray(concept_ids, dtype=int),
        relevant_ids=np.asarray(relevant_ids, dtype=int),
        irrelevant_ids=np.asarray(irrelevant_ids, dtype=int),
    )


@dataclass
class TupleResult:
    loss: float
    skipped: bool = False
    skip_reason: str = ""
    degenerate: bool = False
    em_iterations: int = 0
    cache_update: tuple | None = None  # (class_id, fitted model)


def _fit_for_tuple(D_x, spec: ModelSpec, cache, class_id, fit_seed):
    if spec.family == "gauss":
        return from_gaussian(fit_gaussian(D_x)), None, 0, None
    warm = cache.get(class_id, spec.k, D_x.shape[1]) if cache is not None else None
    model, resp, trace = fit_gmm_em(D_x, spec.k, seed=fit_seed, warm=warm)
    return model, resp, trace.iterations, (class_id, model)


def tuple_forward(
    net: EmbeddingNet,
    tup: LearningTuple,
    cfg: TrainerConfig,
    cache=None,
    *,
    fit_seed=0,
    return_scores=False,
):
    """Loss of one tuple without any backward work (used by gradient checks)."""
    D_x = embed_many(net, tup.concept)
    D_p = embed_many(net, tup.relevant)
    D_m = embed_many(net, tup.irrelevant)
    spec = cfg.model
    if spec.family in ("gauss", "gmm"):
        model, _, _, _ = _fit_for_tuple(D_x, spec, cache, tup.class_id, fit_seed)
        rel = RelevanceSets(gmm_logpdf_many(model, D_p), gmm_logpdf_many(model, D_m))
    elif spec.family == "avg":
        mean = D_x.mean(axis=0)
        rel = RelevanceSets(D_p @ mean, D_m @ mean)
    else:  # nn
        rel = RelevanceSets((D_p @ D_x.T).max(axis=1), (D_m @ D_x.T).max(axis=1))
    loss, _, _, _ = loss_and_grads(rel, cfg.bins)
    return (loss, rel) if return_scores else loss


def tuple_forward_backward(
    net: EmbeddingNet,
    tup: LearningTuple,
    cfg: TrainerConfig,
    cache: WarmStartCache | None,
    tape: GradientTape,
    *,
    fit_seed: int = 0,
) -> TupleResult:
    """Run one tuple end to end, accumulating d loss / d weights on the tape.

    A failed implicit solve (fit not at a clean stationary point) skips the
    tuple; the fitted model still lands in the warm-start cache.
    """
    spec = cfg.model
    D_x = embed_many(net, tup.concept)
    D_p = embed_many(net, tup.relevant)
    D_m = embed_many(net, tup.irrelevant)

    model = resp = None
    em_iterations = 0
    cache_update = None
    if spec.family in ("gauss", "gmm"):
        model, resp, em_iterations, cache_update = _fit_for_tuple(
            D_x, spec, cache, tup.class_id, fit_seed
        )
        scores_p = gmm_logpdf_many(model, D_p)
        scores_m = gmm_logpdf_many(model, D_m)
    elif spec.family == "avg":
        mean = D_x.mean(axis=0)
        scores_p = D_p @ mean
        scores_m = D_m @ mean
    else:  # nn
        sim_p = D_p @ D_x.T
        sim_m = D_m @ D_x.T
        scores_p = sim_p.max(axis=1)
        scores_m = sim_m.max(axis=1)

    loss, g_plus, g_minus, degenerate = loss_and_grads(
        RelevanceSets(scores_p, scores_m), cfg.bins
    )
    if degenerate:
        return TupleResult(loss=loss, degenerate=True, em_iterations=em_iterations, cache_update=cache_update)

    if spec.family in ("gauss", "gmm"):
        dD_p = g_plus[:, None] * gmm_logpdf_grad_point(model, D_p)
        dD_m = g_minus[:, None] * gmm_logpdf_grad_point(model, D_m)
        dmu_p, dvar_p, dw_p = gmm_logpdf_param_grads(model, D_p, g_plus)
        dmu_m, dvar_m, dw_m = gmm_logpdf_param_grads(model, D_m, g_minus)
        dmu, dvar, dw = dmu_p + dmu_m, dvar_p + dvar_m, dw_p + dw_m
        if spec.family == "gauss":
            fg = gaussian_fit_grads(D_x)
            # Weight pinned at 1 for a single component; no gradient flows through it.
            dD_x = fg.dmu_dd * dmu[0][None, :] + dvar[0][None, :] * fg.dphi_dd
        else:
            try:
                dD_x = backprop_through_fit(model, D_x, resp, dmu, dvar, dw)
            except ImplicitSolveError as err:
                return TupleResult(
                    loss=loss,
                    skipped=True,
                    skip_reason=str(err),
                    em_iterations=em_iterations,
                    cache_update=cache_update,
                )
    elif spec.family == "avg":
        dD_p = g_plus[:, None] * mean[None, :]
        dD_m = g_minus[:, None] * mean[None, :]
        pull = (g_plus[:, None] * D_p).sum(axis=0) + (g_minus[:, None] * D_m).sum(axis=0)
        dD_x = np.tile(pull / len(D_x), (len(D_x), 1))
    else:  # nn: gradient flows to the argmax concept descriptor only
        arg_p = sim_p.argmax(axis=1)
        arg_m = sim_m.argmax(axis=1)
        dD_p = g_plus[:, None] * D_x[arg_p]
        dD_m = g_minus[:, None] * D_x[arg_m]
        dD_x = np.zeros_like(D_x)
        np.add.at(dD_x, arg_p, g_plus[:, None] * D_p)
        np.add.at(dD_x, arg_m, g_minus[:, None] * D_m)

    embed_backward_many(net, tup.concept, dD_x, tape)
    embed_backward_many(net, tup.relevant, dD_p, tape)
    embed_backward_many(net, tup.irrelevant, dD_m, tape)
    return TupleResult(loss=loss, em_iterations=em_iterations, cache_update=cache_update)


class AdamState:
    def __init__(self, net: EmbeddingNet):
        self.m_w = [np.zeros_like(l.weight) for l in net.layers]
        self.v_w = [np.zeros_like(l.weight) for l in net.layers]
        self.m_b = [np.zeros_like(l.bias) for l in net.layers]
        self.v_b = [np.zeros_like(l.bias) for l in net.layers]
        self.step = 0


def adam_step(
    net: EmbeddingNet,
    tape: GradientTape,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected ADAM update of the net parameters, in place."""
    for g, w in zip(tape.weight_grads, (l.weight for l in net.layers)):
        if g.shape != w.shape:
            raise ValueError("tape shape does not match the net")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step

    def update(param, grad, m, v):
        m += (1.0 - beta1) * (grad - m)
        v += (1.0 - beta2) * (grad * grad - v)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    for i, layer in enumerate(net.layers):
        update(layer.weight, tape.weight_grads[i], state.m_w[i], state.v_w[i])
        update(layer.bias, tape.bias_grads[i], state.m_b[i], state.v_b[i])


@dataclass
class TrainResult:
    net: EmbeddingNet            # best-validation snapshot
    log: list = field(default_factory=list)
    initial_map: float = float("nan")
    best_map: float = float("nan")


def _validation_map(net, dataset, val_classes, cfg: TrainerConfig) -> float:
    # A fixed seed keeps the validation queries identical across events, so
    # snapshots are compared on the same episodes.
    rng = np.random.default_rng([cfg.seed, 9_001])
    vmap, _ = evaluate_split_map(
        net,
        dataset,
        val_classes,
        cfg.model,
        concept_size=cfg.concept_size,
        noise_fraction=cfg.noise_fraction,
        rng=rng,
        fit_seed=cfg.seed,
    )
    return vmap


def train(
    dataset: Dataset,
    cfg: TrainerConfig,
    *,
    train_classes=None,
    val_classes=None,
) -> TrainResult:
    """Meta-train the embedding; returns the best-validation snapshot and a log.

    Deterministic given the config: one seeded generator drives tuple
    sampling, validation episodes are re-seeded per event, and warm-start
    cache updates apply in tuple order after each batch.
    """
    cfg.validate()
    train_classes = dataset.split_classes("train") if train_classes is None else list(train_classes)
    val_classes = dataset.split_classes("val") if val_classes is None else list(val_classes)
    if set(train_classes) & set(val_classes):
        raise ValueError("train and validation class splits overlap")

    net = init_net(cfg.layer_dims, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    cache = WarmStartCache()
    adam = AdamState(net)
    sizes = (cfg.concept_size, cfg.relevant_size, cfg.irrelevant_size)

    log: list[dict] = []
    initial_map = _validation_map(net, dataset, val_classes, cfg) if val_classes else float("nan")
    log.append({"type": "validation", "batch": 0, "map": initial_map})
    best_net, best_map = net.copy(), initial_map

    global_batch = 0
    for epoch in range(cfg.epochs):
        epoch_skipped = 0
        epoch_total = 0
        for _ in range(cfg.batches_per_epoch):
            batch_tape = GradientTape(net)
            tuple_tape = GradientTape(net)
            losses = []
            skipped = 0
            updates = []
            for _t in range(cfg.tuples_per_batch):
                tup = sample_tuple(
                    dataset, train_classes, sizes, rng, noise_fraction=cfg.noise_fraction
                )
                tuple_tape.zero()
                res = tuple_forward_backward(
                    net, tup, cfg, cache, tuple_tape, fit_seed=cfg.seed
                )
                if res.cache_update is not None:
                    updates.append(res.cache_update)
                if res.skipped:
                    skipped += 1
                    continue
                losses.append(res.loss)
                batch_tape.add(tuple_tape)
            # Cache updates land after the batch, in tuple order, so parallel
            # tuple evaluation cannot change the trajectory.
            for class_id, model in updates:
                cache.put(class_id, model)
            processed = len(losses)
            if processed:
                batch_tape.scale(1.0 / processed)
                adam_step(net, batch_tape, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            global_batch += 1
            epoch_skipped += skipped
            epoch_total += cfg.tuples_per_batch
            log.append(
                {
                    "type": "batch",
                    "epoch": epoch,
                    "batch": global_batch,
                    "loss": float(np.mean(losses)) if losses else None,
                    "processed": processed,
                    "skipped": skipped,
                }
            )
            if val_classes and cfg.validation_interval and global_batch % cfg.validation_interval == 0:
                vmap = _validation_map(net, dataset, val_classes, cfg)
                log.append({"type": "validation", "batch": global_batch, "map": vmap})
                if vmap > best_map:
                    best_map = vmap
                    best_net = net.copy()
        if epoch_total and epoch_skipped / epoch_total > cfg.max_skip_fraction:
            raise TrainingAborted(
                f"{epoch_skipped}/{epoch_total} tuples skipped in epoch {epoch}; "
                "fits are not reaching clean stationary points"
            )
    if cfg.epochs and val_classes and (not cfg.validation_interval or global_batch % cfg.validation_interval):
        vmap = _validation_map(net, dataset, val_classes, cfg)
        log.append({"type": "validation", "batch": global_batch, "map": vmap})
        if vmap > best_map:
            best_map = vmap
            best_net = net.copy()
    return TrainResult(net=best_net, log=log, initial_map=initial_map, best_map=best_map)

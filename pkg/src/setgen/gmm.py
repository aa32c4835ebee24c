"""Diagonal-covariance Gaussian mixtures: EM fitting, densities, model choice."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .gaussian import (
    LOG_2PI,
    VAR_FLOOR,
    GaussianModel,
    _as_descriptor_set,
    fit_gaussian,
)

WEIGHT_FLOOR = 1e-3
EM_REL_TOL = 1e-8
EM_MAX_ITERS = 200

MODEL_FORMAT_VERSION = 1


@dataclass
class GmmModel:
    """Mixture of diagonal Gaussians: weights, means and variance diagonals."""

    weights: np.ndarray  # (k,), sums to 1
    means: np.ndarray    # (k, n)
    vars: np.ndarray     # (k, n), entries >= VAR_FLOOR

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def validate(self) -> None:
        if self.means.shape != (self.k, self.dim) or self.vars.shape != self.means.shape:
            raise ValueError("inconsistent mixture parameter shapes")
        if not (
            np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.means))
            and np.all(np.isfinite(self.vars))
        ):
            raise ValueError("mixture parameters contain non-finite values")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.vars <= 0.0):
            raise ValueError("mixture variances must be positive")

    def copy(self) -> "GmmModel":
        return GmmModel(self.weights.copy(), self.means.copy(), self.vars.copy())


@dataclass
class EmTrace:
    """Per-iteration log-likelihoods of an EM run."""

    loglik: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def from_gaussian(model: GaussianModel) -> GmmModel:
    """Wrap a single Gaussian as a one-component mixture."""
    return GmmModel(
        weights=np.ones(1),
        means=model.mean[None, :].copy(),
        vars=model.var[None, :].copy(),
    )


def _check_points(model: GmmModel, Z: np.ndarray) -> None:
    if Z.shape[-1] != model.dim:
        raise ValueError(
            f"point dimension {Z.shape[-1]} != model dimension {model.dim}"
        )


def component_log_densities(model: GmmModel, Z) -> np.ndarray:
    """log(v_i) + log N(z; mu_i, diag var_i) for every point/component pair.

    Shape (M, k).  All mixture math goes through this in log space.
    """
    Z = np.asarray(Z, dtype=float)
    _check_points(model, Z)
    diff = Z[:, None, :] - model.means[None, :, :]          # (M, k, n)
    quad = (diff * diff / model.vars[None, :, :]).sum(axis=2)
    logdet = np.log(model.vars).sum(axis=1)                  # (k,)
    return np.log(model.weights)[None, :] - 0.5 * (
        model.dim * LOG_2PI + logdet[None, :] + quad
    )


def gmm_logpdf(model: GmmModel, z) -> float:
    """Mixture log-density of a single point (log-sum-exp over components)."""
    z = np.asarray(z, dtype=float)
    return float(gmm_logpdf_many(model, z[None, :])[0])


def gmm_logpdf_many(model: GmmModel, Z) -> np.ndarray:
    return logsumexp(component_log_densities(model, Z), axis=1)


def responsibilities(model: GmmModel, D) -> np.ndarray:
    """Posterior component membership for every observation, shape (N, k).

    Rows sum to one; computed in log space for stability.
    """
    logdens = component_log_densities(model, D)
    return np.exp(logdens - logsumexp(logdens, axis=1, keepdims=True))


def loglik(model: GmmModel, D) -> float:
    """Total set log-likelihood sum_j log p(d^j)."""
    return float(gmm_logpdf_many(model, D).sum())


def gmm_logpdf_grad_point(model: GmmModel, Z) -> np.ndarray:
    """d log p(z) / dz for a batch of points, shape (M, n)."""
    Z = np.asarray(Z, dtype=float)
    resp = responsibilities(model, Z)                        # (M, k)
    pulls = (model.means[None, :, :] - Z[:, None, :]) / model.vars[None, :, :]
    return (resp[:, :, None] * pulls).sum(axis=1)


def gmm_logpdf_param_grads(model: GmmModel, Z, score_weights=None):
    """Accumulated derivatives of weighted log-densities w.r.t. the parameters.

    Returns ``(dmu, dvar, dweights)`` of shapes (k, n), (k, n), (k,) equal to
    sum_z w_z * d log p(z) / d(theta) with theta the raw mixture parameters
    (weights treated as free coordinates; constraint handling happens at the
    implicit-differentiation stage).
    """
    Z = np.asarray(Z, dtype=float)
    if score_weights is None:
        score_weights = np.ones(Z.shape[0])
    w = np.asarray(score_weights, dtype=float)
    resp = responsibilities(model, Z)                        # (M, k)
    wr = resp * w[:, None]                                   # (M, k)
    diff = Z[:, None, :] - model.means[None, :, :]           # (M, k, n)
    inv_var = 1.0 / model.vars[None, :, :]
    dmu = (wr[:, :, None] * diff * inv_var).sum(axis=0)
    dvar = (wr[:, :, None] * 0.5 * (diff * diff * inv_var - 1.0) * inv_var).sum(axis=0)
    dweights = (wr / model.weights[None, :]).sum(axis=0)
    return dmu, dvar, dweights


def _cold_start(D: np.ndarray, k: int, seed) -> GmmModel:
    """Deterministic cold initialization: farthest-point means, shared variance."""
    N, n = D.shape
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(N))]
    dist = ((D - D[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((D - D[nxt]) ** 2).sum(axis=1))
    var = np.maximum(D.var(axis=0), VAR_FLOOR)
    return GmmModel(
        weights=np.full(k, 1.0 / k),
        means=D[chosen].copy(),
        vars=np.tile(var, (k, 1)),
    )


def _m_step(D: np.ndarray, resp: np.ndarray, prev: GmmModel) -> GmmModel:
    N = D.shape[0]
    counts = resp.sum(axis=0)                                # (k,)
    weights = np.maximum(counts / N, WEIGHT_FLOOR)
    weights = weights / weights.sum()
    means = prev.means.copy()
    vars_ = prev.vars.copy()
    for i in range(prev.k):
        if counts[i] < 1e-12:
            continue  # dead component keeps its previous location
        means[i] = resp[:, i] @ D / counts[i]
        diff = D - means[i]
        vars_[i] = resp[:, i] @ (diff * diff) / counts[i]
    return GmmModel(weights=weights, means=means, vars=np.maximum(vars_, VAR_FLOOR))


def fit_gmm_em(
    D,
    k: int,
    *,
    seed=0,
    warm: GmmModel | None = None,
    rel_tol: float = EM_REL_TOL,
    max_iters: int = EM_MAX_ITERS,
):
    """EM fit of a k-component mixture.

    Starts either cold (farthest-point seeding from ``seed``) or warm from a
    previously fitted model of matching shape.  Returns
    ``(model, responsibilities, trace)`` where the responsibilities correspond
    to the returned model.  Weights and variances are floored then
    renormalized after every M-step.
    """
    D = _as_descriptor_set(D)
    N, n = D.shape
    if k < 1:
        raise ValueError("component count must be >= 1")
    if warm is not None:
        warm.validate()
        if warm.k != k or warm.dim != n:
            raise ValueError(
                f"warm-start model shape (k={warm.k}, n={warm.dim}) does not "
                f"match request (k={k}, n={n})"
            )
        model = warm.copy()
    else:
        if N < k:
            raise ValueError(f"cold start needs at least k={k} observations, got {N}")
        model = _cold_start(D, k, seed)

    trace = EmTrace()
    prev_ll = -np.inf
    resp = None
    for _ in range(max_iters):
        logdens = component_log_densities(model, D)
        lse = logsumexp(logdens, axis=1)
        resp = np.exp(logdens - lse[:, None])
        ll = float(lse.sum())
        trace.loglik.append(ll)
        trace.iterations += 1
        if ll - prev_ll < rel_tol * max(1.0, abs(prev_ll)):
            trace.converged = True
            break
        prev_ll = ll
        model = _m_step(D, resp, model)
    return model, resp, trace


def bic_score(k: int, n: int, num_points: int, loglik_value: float) -> float:
    """Penalized likelihood score; smaller is better.

    The penalty counts the 2kn mean/variance parameters (mixture weights are
    not counted).
    """
    return 2.0 * k * n * np.log(num_points) - 2.0 * loglik_value


def select_by_bic(D, candidate_ks, *, seed=0, warm_models=None):
    """Fit every candidate component count and keep the smallest-score model.

    ``warm_models`` optionally maps k to a warm-start model.  Ties break
    toward the smaller k.  Returns ``(model, chosen_k, scores)`` with
    ``scores`` a dict k -> score.
    """
    ks = list(candidate_ks)
    if not ks:
        raise ValueError("candidate component counts must be nonempty")
    D = _as_descriptor_set(D)
    N, n = D.shape
    scores: dict[int, float] = {}
    fits: dict[int, GmmModel] = {}
    for k in ks:
        if k > N:
            raise ValueError(f"candidate k={k} exceeds set size N={N}")
        warm = None if warm_models is None else warm_models.get(k)
        model, _, _ = fit_gmm_em(D, k, seed=seed, warm=warm)
        fits[k] = model
        scores[k] = bic_score(k, n, N, loglik(model, D))
    best_k = None
    for k in sorted(scores):
        if best_k is None or scores[k] < scores[best_k]:
            best_k = k
    return fits[best_k], best_k, scores


# ---------------------------------------------------------------------------
# Model kinds shared by the trainer, the rankers and the CLI.


@dataclass(frozen=True)
class ModelSpec:
    """Which set model to fit / which relevance to rank with.

    family: "gauss" (closed-form single Gaussian), "gmm" (EM with fixed k),
    "bic" (scan candidate ks), or the baseline relevances "avg" / "nn".
    """

    family: str
    k: int = 1
    candidates: tuple = ()

    GENERATIVE = ("gauss", "gmm", "bic")
    FAMILIES = GENERATIVE + ("avg", "nn")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "gmm" and self.k < 1:
            raise ValueError("gmm family needs k >= 1")
        if self.family == "bic" and not self.candidates:
            raise ValueError("bic family needs candidate component counts")

    @property
    def label(self) -> str:
        if self.family == "gmm":
            return f"gmm{self.k}"
        if self.family == "bic":
            return "bic" + "-".join(str(k) for k in self.candidates)
        return self.family


def fit_concept_model(D, spec: ModelSpec, *, seed=0, warm: GmmModel | None = None):
    """Fit the generative model a spec asks for.

    Returns ``(model, resp, trace)``; resp/trace are None for the closed-form
    and BIC paths.  Baseline relevance specs ("avg"/"nn") have no generative
    model and are rejected here.
    """
    if spec.family == "gauss":
        return from_gaussian(fit_gaussian(D)), None, None
    if spec.family == "gmm":
        return fit_gmm_em(D, spec.k, seed=seed, warm=warm)
    if spec.family == "bic":
        model, _, _ = select_by_bic(D, spec.candidates, seed=seed)
        return model, None, None
    raise ValueError(f"{spec.family!r} is a ranking baseline, not a generative model")


# ---------------------------------------------------------------------------
# Serialization: one JSON format for Gaussians (stored as k=1) and mixtures.


def save_model(model, path) -> None:
    if isinstance(model, GaussianModel):
        model = from_gaussian(model)
    model.validate()
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "dim": model.dim,
        "k": model.k,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "vars": model.vars.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> GmmModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')}")
    model = GmmModel(
        weights=np.asarray(doc["weights"], dtype=float),
        means=np.asarray(doc["means"], dtype=float),
        vars=np.asarray(doc["vars"], dtype=float),
    )
    if model.k != doc["k"] or model.dim != doc["dim"]:
        raise ValueError("model file header does not match its arrays")
    model.validate()
    return model

"""Backpropagation through maximum-likelihood mixture fitting.

The fitted parameters are a constrained stationary point of the set
log-likelihood (the weights sum to one).  Differentiating the stationarity
conditions w.r.t. the input descriptors yields a bordered linear system

    [ H   c ] [ dtheta*/dd ]   [ -B ]
    [ c^T 0 ] [ dlambda/dd ] = [  0 ]

where H is the log-likelihood Hessian, c the constraint gradient (ones on
the weight coordinates) and B the mixed parameter/descriptor second
derivatives.  At observations whose component responsibilities saturate at
0/1 all cross-component and cross-coordinate Hessian entries vanish, which
very often leaves H block-diagonal and the solve cheap.

Second derivatives are taken w.r.t. (mean, standard deviation, weight)
coordinates; results are converted to the stored variance parametrization at
the module boundary.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .gaussian import VAR_FLOOR, _as_descriptor_set
from .gmm import WEIGHT_FLOOR, GmmModel, responsibilities

SAT_TOL = 1e-12
STATIONARITY_TOL = 1e-5
COND_LIMIT = 1e12
RESP_CONSISTENCY_TOL = 1e-9


class ImplicitSolveError(RuntimeError):
    """The implicit-differentiation premise or solve failed."""


class StationarityError(ImplicitSolveError):
    """The model is not a clean stationary point (unconverged fit or active floor)."""


class SingularSystemError(ImplicitSolveError):
    """The bordered Hessian system is singular or too ill-conditioned."""


@dataclass(frozen=True)
class ParamLayout:
    """Index bookkeeping for the stacked parameter vector.

    Order: all means (component-major), all variances, then weights;
    m = k * (2n + 1).
    """

    k: int
    n: int

    @property
    def m(self) -> int:
        return self.k * (2 * self.n + 1)

    def mu(self, i: int, j: int) -> int:
        return i * self.n + j

    def sig(self, i: int, j: int) -> int:
        return self.k * self.n + i * self.n + j

    def weight(self, i: int) -> int:
        return 2 * self.k * self.n + i

    @property
    def mu_slice(self) -> slice:
        return slice(0, self.k * self.n)

    @property
    def sig_slice(self) -> slice:
        return slice(self.k * self.n, 2 * self.k * self.n)

    @property
    def weight_slice(self) -> slice:
        return slice(2 * self.k * self.n, self.m)

    def describe(self, index: int) -> str:
        kn = self.k * self.n
        if index < kn:
            return f"mean block, component {index // self.n}, coordinate {index % self.n}"
        if index < 2 * kn:
            index -= kn
            return f"variance block, component {index // self.n}, coordinate {index % self.n}"
        return f"weight of component {index - 2 * kn}"


CoordDerivs = namedtuple(
    "CoordDerivs", ["g", "dmu", "dsig", "dmumu", "dsigsig", "dsigmu"]
)


def coordinate_derivatives(mu, sigma, d) -> CoordDerivs:
    """Single-coordinate Gaussian factor and its parameter derivatives.

    ``g`` is the factor value; the remaining fields are the first and second
    derivatives w.r.t. (mean, standard deviation) expressed as ratios to g,
    which is how they enter every downstream formula and stays finite far
    from the mean.  Broadcasts over array inputs.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise ValueError("standard deviation must be positive")
    mu = np.asarray(mu, dtype=float)
    d = np.asarray(d, dtype=float)
    e = d - mu
    s2 = sigma * sigma
    t = e / sigma
    t2 = t * t
    g = np.exp(-0.5 * t2) / (np.sqrt(2.0 * np.pi) * sigma)
    dmu = e / s2
    dsig = (t2 - 1.0) / sigma
    dmumu = (t2 - 1.0) / s2
    dsigsig = (2.0 - 5.0 * t2 + t2 * t2) / s2
    dsigmu = (e / (s2 * sigma)) * (t2 - 3.0)
    return CoordDerivs(g, dmu, dsig, dmumu, dsigsig, dsigmu)


def _tables(model: GmmModel, D: np.ndarray) -> CoordDerivs:
    """Coordinate derivative ratios for every (observation, component, coordinate)."""
    sigma = np.sqrt(model.vars)
    return coordinate_derivatives(model.means[None, :, :], sigma[None, :, :], D[:, None, :])


def _prepare(model: GmmModel, D, resp):
    # Weights are treated as free positive coordinates here (the constraint
    # enters through the bordered system), so full model validation is not
    # appropriate: derivative checks evaluate off the constraint surface.
    D = _as_descriptor_set(D)
    if np.any(model.weights <= 0.0) or np.any(model.vars <= 0.0):
        raise ValueError("mixture weights and variances must be positive")
    if D.shape[1] != model.dim:
        raise ValueError("descriptor dimension does not match the model")
    expected = responsibilities(model, D)
    if resp is None:
        resp = expected
    else:
        resp = np.asarray(resp, dtype=float)
        if resp.shape != expected.shape:
            raise ValueError("responsibility matrix shape does not match model/data")
        if np.abs(resp - expected).max() > RESP_CONSISTENCY_TOL:
            raise ValueError("responsibility matrix is inconsistent with the model and data")
    return D, resp


def loglik_grad(model: GmmModel, D, resp=None) -> np.ndarray:
    """Gradient of the set log-likelihood in (mean, stddev, weight) coordinates."""
    D, resp = _prepare(model, D, resp)
    layout = ParamLayout(model.k, model.dim)
    tab = _tables(model, D)
    grad = np.empty(layout.m)
    grad[layout.mu_slice] = np.einsum("ok,okj->kj", resp, tab.dmu).ravel()
    grad[layout.sig_slice] = np.einsum("ok,okj->kj", resp, tab.dsig).ravel()
    grad[layout.weight_slice] = resp.sum(axis=0) / model.weights
    return grad


@dataclass
class HessianBlocks:
    """Log-likelihood Hessian split into its always-present diagonal structure.

    ``diag_blocks[i, j]`` is the accumulated 2x2 (mean, stddev) block of
    component i, coordinate j; ``weight_block`` the dense weight rows/columns.
    ``off_rest`` carries every remaining entry (cross-coordinate,
    cross-component and weight-parameter coupling) and is None when all
    observations saturated, in which case the matrix is exactly
    block-diagonal and the bordered solve factors tiny blocks independently.
    """

    layout: ParamLayout
    diag_blocks: np.ndarray        # (k, n, 2, 2)
    weight_block: np.ndarray       # (k, k)
    off_rest: np.ndarray | None    # (m, m) or None
    saturated_fraction: float

    @property
    def is_block_diagonal(self) -> bool:
        return self.off_rest is None

    def to_dense(self) -> np.ndarray:
        lay = self.layout
        H = np.zeros((lay.m, lay.m)) if self.off_rest is None else self.off_rest.copy()
        for i in range(lay.k):
            for j in range(lay.n):
                a, b = lay.mu(i, j), lay.sig(i, j)
                H[a, a] += self.diag_blocks[i, j, 0, 0]
                H[a, b] += self.diag_blocks[i, j, 0, 1]
                H[b, a] += self.diag_blocks[i, j, 1, 0]
                H[b, b] += self.diag_blocks[i, j, 1, 1]
        H[lay.weight_slice, lay.weight_slice] += self.weight_block
        return H


def _saturation_mask(resp: np.ndarray, sat_tol: float) -> np.ndarray:
    """Observations where one component holds all responsibility."""
    return resp.max(axis=1) >= 1.0 - sat_tol


def loglik_hessian(
    model: GmmModel,
    D,
    resp=None,
    *,
    use_saturation: bool = True,
    sat_tol: float = SAT_TOL,
) -> HessianBlocks:
    """Second derivatives of the set log-likelihood in (mean, stddev, weight) terms.

    Accumulates, over observations, the three coupling cases (same component
    and coordinate; same component, different coordinates; different
    components) plus the analytically extended weight rows.  With
    ``use_saturation`` the off-block entries of saturated observations are
    skipped as exactly zero.
    """
    D, resp = _prepare(model, D, resp)
    lay = ParamLayout(model.k, model.dim)
    tab = _tables(model, D)
    k, n = lay.k, lay.n

    # Same-(component, coordinate) 2x2 blocks and the weight block hold the
    # exact values for saturated and unsaturated observations alike.
    r = resp
    r2 = r * r
    diag = np.empty((k, n, 2, 2))
    diag[:, :, 0, 0] = np.einsum("ok,okj->kj", r, tab.dmumu) - np.einsum(
        "ok,okj->kj", r2, tab.dmu * tab.dmu
    )
    cross = np.einsum("ok,okj->kj", r, tab.dsigmu) - np.einsum(
        "ok,okj->kj", r2, tab.dmu * tab.dsig
    )
    diag[:, :, 0, 1] = cross
    diag[:, :, 1, 0] = cross
    diag[:, :, 1, 1] = np.einsum("ok,okj->kj", r, tab.dsigsig) - np.einsum(
        "ok,okj->kj", r2, tab.dsig * tab.dsig
    )
    inv_w = 1.0 / model.weights
    weight_block = -(r.T @ r) * np.outer(inv_w, inv_w)

    mask = _saturation_mask(resp, sat_tol) if use_saturation else np.zeros(D.shape[0], bool)
    unsat = np.flatnonzero(~mask)
    saturated_fraction = float(mask.mean())
    if unsat.size == 0:
        return HessianBlocks(lay, diag, weight_block, None, saturated_fraction)

    # Off-block couplings from the non-saturated observations.
    ru = r[unsat]                       # (U, k)
    dmu_u = tab.dmu[unsat]
    dsig_u = tab.dsig[unsat]
    S = np.empty((unsat.size, lay.m))
    S[:, lay.mu_slice] = (ru[:, :, None] * dmu_u).reshape(unsat.size, k * n)
    S[:, lay.sig_slice] = (ru[:, :, None] * dsig_u).reshape(unsat.size, k * n)
    S[:, lay.weight_slice] = ru * inv_w[None, :]
    off = -(S.T @ S)
    for i in range(k):
        idx = np.concatenate(
            [
                np.arange(i * n, (i + 1) * n),
                np.arange(k * n + i * n, k * n + (i + 1) * n),
                [lay.weight(i)],
            ]
        )
        b = np.empty((unsat.size, 2 * n + 1))
        b[:, :n] = dmu_u[:, i, :]
        b[:, n : 2 * n] = dsig_u[:, i, :]
        b[:, 2 * n] = inv_w[i]
        off[np.ix_(idx, idx)] += np.einsum("o,oa,ob->ab", ru[:, i], b, b)
    # Entries owned by the diagonal/weight accumulators are removed here.
    mu_idx = np.arange(k * n)
    sig_idx = k * n + mu_idx
    off[mu_idx, mu_idx] = 0.0
    off[sig_idx, sig_idx] = 0.0
    off[mu_idx, sig_idx] = 0.0
    off[sig_idx, mu_idx] = 0.0
    off[lay.weight_slice, lay.weight_slice] = 0.0
    return HessianBlocks(lay, diag, weight_block, off, saturated_fraction)


def cross_hessian_data(
    model: GmmModel,
    D,
    resp=None,
    *,
    use_saturation: bool = True,
    sat_tol: float = SAT_TOL,
) -> np.ndarray:
    """Mixed second derivatives w.r.t. (parameters, one observation's coordinates).

    Returns shape (N, m, n); only observation i contributes to its own block.
    Obtained by the chain rule through the coordinate table using
    d g / d d = -(d g / d mean).
    """
    D, resp = _prepare(model, D, resp)
    lay = ParamLayout(model.k, model.dim)
    tab = _tables(model, D)
    N, k, n = D.shape[0], lay.k, lay.n

    a = -tab.dmu                                        # (N, k, n) data-derivative ratio
    abar = np.einsum("ok,okj->oj", resp, a)             # (N, n)
    centered = a - abar[:, None, :]                     # (N, k, n)
    t_mu = -tab.dmumu + tab.dmu * tab.dmu               # d/dd of the dmu ratio
    t_sig = -tab.dsigmu + tab.dsig * tab.dmu            # d/dd of the dsig ratio

    B = np.zeros((N, lay.m, n))
    mask = _saturation_mask(resp, sat_tol) if use_saturation else np.zeros(N, bool)
    unsat = np.flatnonzero(~mask)
    sat = np.flatnonzero(mask)
    diag_j = np.arange(n)

    if unsat.size:
        ru = resp[unsat]                                # (U, k)
        mu_blocks = (
            ru[:, :, None, None] * tab.dmu[unsat][:, :, :, None] * centered[unsat][:, :, None, :]
        )                                               # (U, k, n, n)
        sig_blocks = (
            ru[:, :, None, None] * tab.dsig[unsat][:, :, :, None] * centered[unsat][:, :, None, :]
        )
        # Same-coordinate additions from differentiating the ratio itself.
        mu_blocks[:, :, diag_j, diag_j] += ru[:, :, None] * t_mu[unsat]
        sig_blocks[:, :, diag_j, diag_j] += ru[:, :, None] * t_sig[unsat]
        B[unsat, lay.mu_slice, :] = mu_blocks.reshape(unsat.size, k * n, n)
        B[unsat, lay.sig_slice, :] = sig_blocks.reshape(unsat.size, k * n, n)
        B[unsat, lay.weight_slice, :] = (
            ru[:, :, None] / model.weights[None, :, None]
        ) * centered[unsat]

    if sat.size:
        win = resp[sat].argmax(axis=1)
        r_win = resp[sat, win]
        for o, i, rw in zip(sat, win, r_win):
            rows_mu = i * n + diag_j
            rows_sig = k * n + i * n + diag_j
            B[o, rows_mu, diag_j] = rw * t_mu[o, i]
            B[o, rows_sig, diag_j] = rw * t_sig[o, i]
    return B


def _check_premises(model: GmmModel, D, resp, stat_tol: float):
    """Floors must be inactive and the gradient residual small at the fit."""
    if np.any(model.vars <= VAR_FLOOR):
        i, j = np.argwhere(model.vars <= VAR_FLOOR)[0]
        raise StationarityError(
            f"variance floor active at component {i}, coordinate {j}; "
            "the fit is not an interior stationary point"
        )
    if np.any(model.weights <= WEIGHT_FLOOR):
        i = int(np.argmax(model.weights <= WEIGHT_FLOOR))
        raise StationarityError(
            f"weight floor active at component {i}; "
            "the fit is not an interior stationary point"
        )
    N = D.shape[0]
    lay = ParamLayout(model.k, model.dim)
    grad = loglik_grad(model, D, resp)
    sigma = np.sqrt(model.vars)
    resid_mu = np.abs(grad[lay.mu_slice].reshape(model.k, -1)) * sigma / N
    resid_sig = np.abs(grad[lay.sig_slice].reshape(model.k, -1)) * sigma / N
    resid_w = np.abs(grad[lay.weight_slice] - N) / N
    worst = max(resid_mu.max(), resid_sig.max(), resid_w.max())
    if worst > stat_tol:
        raise StationarityError(
            f"normalized gradient residual {worst:.3e} exceeds {stat_tol:.1e}; "
            "refit to tighter tolerance before differentiating"
        )


def _solve_bordered(hblocks: HessianBlocks, rhs: np.ndarray, cond_limit: float) -> np.ndarray:
    """Solve the bordered system for a stack of right-hand sides (m+1, R)."""
    lay = hblocks.layout
    k, n, m = lay.k, lay.n, lay.m
    if hblocks.is_block_diagonal:
        sol = np.empty_like(rhs)
        blocks = hblocks.diag_blocks.reshape(k * n, 2, 2)
        conds = np.linalg.cond(blocks)
        if np.any(conds > cond_limit):
            worst = int(np.argmax(conds))
            raise SingularSystemError(
                f"degenerate 2x2 block for component {worst // n}, coordinate "
                f"{worst % n} (condition {conds[worst]:.2e})"
            )
        mu_rows = np.arange(k * n)
        pair_rows = np.stack([mu_rows, k * n + mu_rows], axis=1)  # (kn, 2)
        block_rhs = rhs[pair_rows, :]                              # (kn, 2, R)
        block_sol = np.linalg.solve(blocks, block_rhs)
        sol[pair_rows, :] = block_sol
        Kw = np.zeros((k + 1, k + 1))
        Kw[:k, :k] = hblocks.weight_block
        Kw[:k, k] = 1.0
        Kw[k, :k] = 1.0
        cond_w = np.linalg.cond(Kw)
        if cond_w > cond_limit:
            raise SingularSystemError(
                f"degenerate weight/constraint system (condition {cond_w:.2e})"
            )
        w_rows = np.arange(2 * k * n, m + 1)
        sol[w_rows, :] = np.linalg.solve(Kw, rhs[w_rows, :])
        return sol
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = hblocks.to_dense()
    K[lay.weight_slice, m] = 1.0
    K[m, lay.weight_slice] = 1.0
    cond = np.linalg.cond(K)
    if cond > cond_limit:
        _, _, vh = np.linalg.svd(K)
        null = np.abs(vh[-1][:m])
        culprit = lay.describe(int(np.argmax(null))) if null.max() > 0 else "system"
        raise SingularSystemError(
            f"bordered Hessian system is ill-conditioned (condition {cond:.2e}); "
            f"dominant degenerate direction: {culprit}"
        )
    return np.linalg.solve(K, rhs)


@dataclass
class FitGradients:
    """Derivatives of the fitted parameters w.r.t. every descriptor coordinate.

    ``dtheta_dd[a, i, j]`` is the derivative of stacked parameter a (means,
    then variances, then weights) w.r.t. descriptor i's coordinate j;
    ``dlambda_dd`` the multiplier's derivatives.
    """

    layout: ParamLayout
    dtheta_dd: np.ndarray   # (m, N, n), variance rows in the variance parametrization
    dlambda_dd: np.ndarray  # (N, n)

    @property
    def matrix(self) -> np.ndarray:
        m, N, n = self.dtheta_dd.shape
        return self.dtheta_dd.reshape(m, N * n)


def solve_implicit(
    model: GmmModel,
    D,
    resp=None,
    *,
    use_saturation: bool = True,
    sat_tol: float = SAT_TOL,
    stat_tol: float = STATIONARITY_TOL,
    cond_limit: float = COND_LIMIT,
) -> FitGradients:
    """Full derivative matrix of the fitted parameters w.r.t. the descriptors.

    Solves the bordered stationarity system for all N*n right-hand sides,
    using independent small-block factorization whenever saturation makes the
    Hessian block-diagonal.  Errors if the model is not a clean interior
    stationary point or the system is near-singular.
    """
    D, resp = _prepare(model, D, resp)
    _check_premises(model, D, resp, stat_tol)
    lay = ParamLayout(model.k, model.dim)
    N, n = D.shape[0], lay.n
    H = loglik_hessian(model, D, resp, use_saturation=use_saturation, sat_tol=sat_tol)
    B = cross_hessian_data(model, D, resp, use_saturation=use_saturation, sat_tol=sat_tol)
    rhs = np.zeros((lay.m + 1, N * n))
    rhs[: lay.m] = -np.moveaxis(B, 1, 0).reshape(lay.m, N * n)
    sol = _solve_bordered(H, rhs, cond_limit)
    dtheta = sol[: lay.m].reshape(lay.m, N, n)
    sigma = np.sqrt(model.vars)                     # convert stddev rows to variance rows
    dtheta[lay.sig_slice] *= 2.0 * sigma.reshape(-1)[:, None, None]
    return FitGradients(lay, dtheta, sol[lay.m].reshape(N, n))


def backprop_through_fit(
    model: GmmModel,
    D,
    resp,
    dl_dmu,
    dl_dvar,
    dl_dweights,
    *,
    use_saturation: bool = True,
    sat_tol: float = SAT_TOL,
    stat_tol: float = STATIONARITY_TOL,
    cond_limit: float = COND_LIMIT,
) -> np.ndarray:
    """Pull a loss gradient at the fitted parameters back to the descriptors.

    Computes (dL/dtheta)^T (dtheta*/dd) with a single bordered solve, never
    materializing the full derivative matrix.  Same premises as
    ``solve_implicit``.
    """
    D, resp = _prepare(model, D, resp)
    _check_premises(model, D, resp, stat_tol)
    lay = ParamLayout(model.k, model.dim)
    sigma = np.sqrt(model.vars)
    g = np.zeros(lay.m + 1)
    g[lay.mu_slice] = np.asarray(dl_dmu, dtype=float).ravel()
    g[lay.sig_slice] = (2.0 * sigma * np.asarray(dl_dvar, dtype=float)).ravel()
    g[lay.weight_slice] = np.asarray(dl_dweights, dtype=float).ravel()
    H = loglik_hessian(model, D, resp, use_saturation=use_saturation, sat_tol=sat_tol)
    B = cross_hessian_data(model, D, resp, use_saturation=use_saturation, sat_tol=sat_tol)
    w = _solve_bordered(H, g[:, None], cond_limit)[: lay.m, 0]
    return -np.einsum("a,oas->os", w, B)

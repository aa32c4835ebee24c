"""Finite-difference oracles for every analytic gradient path.

Each check builds seeded random instances, compares an analytic quantity
against central finite differences of an independently evaluated objective,
and reports the worst normalized error.  Errors are measured as
max|a - b| / max(max|b|, tiny) over the compared arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import GradientTape, embed_backward_many, embed_many, init_net
from .gaussian import fit_gaussian, gaussian_fit_grads
from .gmm import GmmModel, ModelSpec, fit_gmm_em, loglik
from .histloss import RelevanceSets, histogram_loss_backward, loss_and_grads
from .implicit import (
    ParamLayout,
    cross_hessian_data,
    loglik_grad,
    loglik_hessian,
    solve_implicit,
)
from .trainer import TrainerConfig, LearningTuple, WarmStartCache, tuple_forward, tuple_forward_backward

TINY = 1e-12


@dataclass
class CheckResult:
    name: str
    worst_error: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.worst_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst error {self.worst_error:.3e} (tol {self.tolerance:.1e})"


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(float(np.abs(b).max(initial=0.0)), TINY)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def central_diff(f, x0: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of a scalar function, one entry at a time."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    xf = x0.reshape(-1)
    for idx in range(xf.size):
        step = np.zeros_like(xf)
        step[idx] = h
        flat[idx] = (f((xf + step).reshape(x0.shape)) - f((xf - step).reshape(x0.shape))) / (2 * h)
    return grad


def _random_clustered_set(rng, n, N, k, spread=4.0):
    """Descriptor set with k loose clusters; variances stay well off the floor."""
    centers = rng.normal(0.0, spread, size=(k, n))
    assign = rng.integers(k, size=N)
    return centers[assign] + rng.normal(0.0, 1.0, size=(N, n))


def _fit_tight(D, k, seed=0, warm=None):
    """EM pushed to machine-precision stationarity for differentiation checks."""
    return fit_gmm_em(D, k, seed=seed, warm=warm, rel_tol=1e-15, max_iters=3000)


def check_embedding_gradients(seed=0, trials=10, h=1e-4, tol=1e-4) -> CheckResult:
    """Backprop through the net (normalization included) vs finite differences.

    The probe objective is a fixed random linear functional of the batch of
    descriptors, so every weight and bias participates.
    """
    worst = 0.0
    rng = np.random.default_rng(seed)
    done = 0
    while done < trials:
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 17, size=depth + 1)]
        net = init_net(dims, seed=int(rng.integers(2**32)))
        X = rng.normal(0.0, 1.0, size=(int(rng.integers(1, 5)), dims[0]))
        probe = rng.normal(0.0, 1.0, size=(X.shape[0], dims[-1]))

        tape = GradientTape(net)
        try:
            embed_backward_many(net, X, probe, tape)
        except ValueError:
            continue  # all-relu-dead sample in a tiny net; redraw
        done += 1

        for li, layer in enumerate(net.layers):
            for param, analytic in ((layer.weight, tape.weight_grads[li]), (layer.bias, tape.bias_grads[li])):
                def objective(values, param=param):
                    saved = param.copy()
                    param[...] = values
                    out = float((embed_many(net, X) * probe).sum())
                    param[...] = saved
                    return out

                fd = central_diff(objective, param, h)
                worst = max(worst, rel_error(analytic, fd))
    return CheckResult("embedding backprop vs finite differences", worst, tol)


def check_gaussian_fit_grads(seed=0, trials=20, h=1e-6, tol=1e-6) -> CheckResult:
    """Closed-form Gaussian fit derivatives vs finite differences of the fit."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        N = int(rng.integers(2, 20))
        n = int(rng.integers(1, 8))
        D = rng.normal(0.0, 1.0, size=(N, n))
        grads = gaussian_fit_grads(D)
        fd_mu = np.empty((N, n))
        fd_phi = np.empty((N, n))
        for i in range(N):
            for j in range(n):
                Dp, Dm = D.copy(), D.copy()
                Dp[i, j] += h
                Dm[i, j] -= h
                mp, mm = fit_gaussian(Dp), fit_gaussian(Dm)
                fd_mu[i, j] = (mp.mean[j] - mm.mean[j]) / (2 * h)
                fd_phi[i, j] = (mp.var[j] - mm.var[j]) / (2 * h)
        worst = max(worst, rel_error(np.full((N, n), grads.dmu_dd), fd_mu))
        worst = max(worst, rel_error(grads.dphi_dd, fd_phi))
    return CheckResult("gaussian fit gradients vs finite differences", worst, tol)


def _instances(rng, ks, n_max=6, N_max=15):
    """Random fitted instance whose optimum is interior (no active floors)."""
    from .implicit import _check_premises

    while True:
        k = int(ks[int(rng.integers(len(ks)))])
        n = int(rng.integers(2, n_max + 1))
        N = int(rng.integers(max(k + 2, 5), N_max + 1))
        D = _random_clustered_set(rng, n, N, k)
        model, resp, _ = _fit_tight(D, k, seed=int(rng.integers(2**32)))
        try:
            _check_premises(model, D, resp, 1e-5)
        except Exception:
            continue
        return D, model, resp


def check_loglik_gradient(seed=0, trials=20, ks=(1, 2, 3), h=1e-6, tol=1e-6) -> CheckResult:
    """Analytic likelihood gradient vs finite differences of the likelihood value."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        D, model, resp = _instances(rng, ks)
        lay = ParamLayout(model.k, model.dim)
        grad = loglik_grad(model, D, resp)
        sigma = np.sqrt(model.vars)

        def value(theta):
            means = theta[lay.mu_slice].reshape(model.k, model.dim)
            sig = theta[lay.sig_slice].reshape(model.k, model.dim)
            weights = theta[lay.weight_slice]
            return loglik(GmmModel(weights, means, sig * sig), D)

        theta0 = np.concatenate([model.means.ravel(), sigma.ravel(), model.weights])
        fd = central_diff(value, theta0, h)
        worst = max(worst, rel_error(grad, fd))
    return CheckResult("likelihood gradient vs finite differences", worst, tol)


def check_hessian_blocks(seed=0, trials=50, ks=(1, 2, 3), h=1e-5, tol=1e-5) -> CheckResult:
    """Dense Hessian assembly (no saturation shortcut) vs differences of the gradient."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        D, model, resp = _instances(rng, ks)
        lay = ParamLayout(model.k, model.dim)
        H = loglik_hessian(model, D, resp, use_saturation=False).to_dense()
        sigma = np.sqrt(model.vars)
        theta0 = np.concatenate([model.means.ravel(), sigma.ravel(), model.weights])

        def grad_at(theta):
            means = theta[lay.mu_slice].reshape(model.k, model.dim)
            sig = theta[lay.sig_slice].reshape(model.k, model.dim)
            return loglik_grad(GmmModel(theta[lay.weight_slice], means, sig * sig), D)

        fd = np.empty((lay.m, lay.m))
        for idx in range(lay.m):
            step = np.zeros(lay.m)
            step[idx] = h
            fd[:, idx] = (grad_at(theta0 + step) - grad_at(theta0 - step)) / (2 * h)
        worst = max(worst, rel_error(H, fd))
    return CheckResult("likelihood Hessian vs finite differences", worst, tol)


def check_cross_blocks(seed=0, trials=50, ks=(1, 2, 3), h=1e-5, tol=1e-5) -> CheckResult:
    """Mixed parameter/data second derivatives vs differences of the gradient."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        D, model, resp = _instances(rng, ks)
        B = cross_hessian_data(model, D, resp, use_saturation=False)
        N, n = D.shape
        fd = np.zeros_like(B)
        for i in range(N):
            for j in range(n):
                Dp, Dm = D.copy(), D.copy()
                Dp[i, j] += h
                Dm[i, j] -= h
                fd[i, :, j] = (loglik_grad(model, Dp) - loglik_grad(model, Dm)) / (2 * h)
        worst = max(worst, rel_error(B, fd))
    return CheckResult("cross parameter/data blocks vs finite differences", worst, tol)


def check_implicit_closed_form(seed=0, trials=100, tol=1e-8) -> CheckResult:
    """Single-component implicit solve vs the closed-form Gaussian derivatives.

    Absolute comparison; tolerance per the exit criteria.
    """
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        N = int(rng.integers(2, 21))
        D = rng.normal(0.0, 1.0, size=(N, n))
        model, resp, _ = _fit_tight(D, 1)
        fits = solve_implicit(model, D, resp)
        closed = gaussian_fit_grads(D)
        lay = fits.layout
        mu_rows = fits.dtheta_dd[lay.mu_slice]      # (n, N, n)
        var_rows = fits.dtheta_dd[lay.sig_slice]
        expect_mu = np.zeros_like(mu_rows)
        expect_var = np.zeros_like(var_rows)
        for j in range(n):
            expect_mu[j, :, j] = closed.dmu_dd
            expect_var[j, :, j] = closed.dphi_dd[:, j]
        worst = max(worst, float(np.abs(mu_rows - expect_mu).max()))
        worst = max(worst, float(np.abs(var_rows - expect_var).max()))
        worst = max(worst, float(np.abs(fits.dtheta_dd[lay.weight_slice]).max()))
    return CheckResult("implicit solve vs closed-form Gaussian gradients", worst, tol)


def check_implicit_refit(seed=0, trials=50, ks=(1, 2, 3), eps=1e-5, tol=1e-4) -> CheckResult:
    """Implicit parameter derivatives vs finite differences of warm-started refits."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        D, model, resp = _instances(rng, ks)
        fits = solve_implicit(model, D, resp)
        N, n = D.shape

        def refit_params(Dmod):
            refit, _, _ = _fit_tight(Dmod, model.k, warm=model)
            return np.concatenate([refit.means.ravel(), refit.vars.ravel(), refit.weights])

        fd = np.empty_like(fits.dtheta_dd)
        for i in range(N):
            for j in range(n):
                Dp, Dm = D.copy(), D.copy()
                Dp[i, j] += eps
                Dm[i, j] -= eps
                fd[:, i, j] = (refit_params(Dp) - refit_params(Dm)) / (2 * eps)
        worst = max(worst, rel_error(fits.dtheta_dd, fd))
    return CheckResult("implicit gradients vs warm-started refit differences", worst, tol)


def _random_relevances(rng, m_plus=200, m_minus=200):
    shift = rng.uniform(-2.0, 2.0)
    return RelevanceSets(
        rng.normal(shift, 1.0, size=m_plus), rng.normal(0.0, 1.0, size=m_minus)
    )


def _smooth_mask(scores: np.ndarray, lo: float, hi: float, step: float, margin: float):
    """Scores at which the composed loss is differentiable with margin to spare.

    Interior scores must stay away from the kernel nodes; the unique range
    extremes are differentiable (they ride with the grid) and are kept as
    long as no other score is within margin of taking over the extreme role.
    """
    pos = (scores - lo) / step
    off_node = np.abs(pos - np.round(pos)) * step > margin
    is_min = scores == lo
    is_max = scores == hi
    return (off_node & ~is_min & ~is_max) | is_min | is_max


def check_histogram_gradients(seed=0, trials=100, bins=64, h=1e-7, tol=1e-6) -> CheckResult:
    """Ranking-loss gradients vs finite differences, away from kernel kinks."""
    worst = 0.0
    rng = np.random.default_rng(seed)
    done = 0
    while done < trials:
        rel = _random_relevances(rng, m_plus=25, m_minus=30)
        merged = np.sort(np.concatenate([rel.r_plus, rel.r_minus]))
        if merged[1] - merged[0] < 10 * h or merged[-1] - merged[-2] < 10 * h:
            continue  # near-tied extremes flip the grid holder under differencing
        done += 1
        gp, gm, _ = histogram_loss_backward(rel, bins)
        lo, hi = float(merged[0]), float(merged[-1])
        step = (hi - lo) / (bins - 1)
        keep_p = _smooth_mask(rel.r_plus, lo, hi, step, 10 * h)
        keep_m = _smooth_mask(rel.r_minus, lo, hi, step, 10 * h)

        def loss_of(plus=None, minus=None):
            r = RelevanceSets(
                rel.r_plus if plus is None else plus,
                rel.r_minus if minus is None else minus,
            )
            return loss_and_grads(r, bins)[0]

        fd_p = central_diff(lambda v: loss_of(plus=v), rel.r_plus, h)
        fd_m = central_diff(lambda v: loss_of(minus=v), rel.r_minus, h)
        if keep_p.any():
            worst = max(worst, rel_error(gp[keep_p], fd_p[keep_p]))
        if keep_m.any():
            worst = max(worst, rel_error(gm[keep_m], fd_m[keep_m]))
    return CheckResult("histogram loss gradients vs finite differences", worst, tol)


def _small_instance(rng, n=4, k=2, input_dim=5):
    """A tiny synthetic tuple plus config for end-to-end weight checks."""
    spec = ModelSpec("gmm", k=k) if k > 1 else ModelSpec("gauss")
    cfg = TrainerConfig(
        layer_dims=(input_dim, 6, n),
        model=spec,
        bins=16,
        concept_size=6,
        relevant_size=8,
        irrelevant_size=8,
        seed=int(rng.integers(2**32)),
    )
    centers = rng.normal(0.0, 2.0, size=(2, input_dim))
    def draw(count, which):
        return centers[which] + rng.normal(0.0, 0.7, size=(count, input_dim))
    tup = LearningTuple(
        class_id=0,
        concept=draw(cfg.concept_size, 0),
        relevant=draw(cfg.relevant_size, 0),
        irrelevant=draw(cfg.irrelevant_size, 1),
        concept_ids=np.arange(cfg.concept_size),
        relevant_ids=np.arange(cfg.relevant_size),
        irrelevant_ids=np.arange(cfg.irrelevant_size),
    )
    net = init_net(cfg.layer_dims, seed=int(rng.integers(2**32)))
    return net, tup, cfg


def _kink_safe(rel: RelevanceSets, bins: int, margin: float) -> bool:
    """True when no score sits within margin of a histogram node and the
    range extremes are clearly separated from their runners-up.

    Weight perturbations slide every score, so configurations with a score
    close to a node (or nearly tied extremes) put a kink inside the
    finite-difference window.
    """
    merged = np.sort(np.concatenate([rel.r_plus, rel.r_minus]))
    lo, hi = merged[0], merged[-1]
    if hi - lo <= 0 or merged[1] - lo < margin or hi - merged[-2] < margin:
        return False
    step = (hi - lo) / (bins - 1)
    pos = (merged[1:-1] - lo) / step
    return bool((np.abs(pos - np.round(pos)) * step > margin).all())


def check_end_to_end(seed=0, trials=20, h=1e-4, tol=1e-3) -> CheckResult:
    """Tuple loss gradient w.r.t. every embedding weight vs finite differences.

    Mixture fits inside the finite-difference evaluations restart from the
    base fit, pushed to tight stationarity, so the refit noise stays far
    below the differencing step.  Instances whose score layout puts a
    histogram kink inside the differencing window are redrawn.
    """
    worst = 0.0
    rng = np.random.default_rng(seed)
    done = 0
    while done < trials:
        net, tup, cfg = _small_instance(rng, k=2 if done % 2 else 1)
        cache = WarmStartCache()
        tape = GradientTape(net)
        try:
            res = tuple_forward_backward(net, tup, cfg, cache, tape, fit_seed=cfg.seed)
            _, rel = tuple_forward(net, tup, cfg, cache, fit_seed=cfg.seed, return_scores=True)
        except ValueError:
            continue  # degenerate tiny net (all-relu-dead sample); redraw
        if res.skipped or res.degenerate or tape.max_abs() == 0.0:
            continue
        if not _kink_safe(rel, cfg.bins, margin=500 * h):
            continue

        def eval_with(param, values):
            # Refits inside the differencing warm-start from the base fit.
            saved = param.copy()
            param[...] = values
            cache_fd = WarmStartCache()
            if res.cache_update is not None:
                cache_fd.put(*res.cache_update)
            try:
                return tuple_forward(
                    net, tup, cfg, cache_fd, fit_seed=cfg.seed, return_scores=True
                )
            finally:
                param[...] = saved

        def bin_signature(scores: RelevanceSets):
            merged = np.concatenate([scores.r_plus, scores.r_minus])
            lo, hi = merged.min(), merged.max()
            step = (hi - lo) / (cfg.bins - 1)
            t = np.clip(np.floor((merged - lo) / step), 0, cfg.bins - 2).astype(int)
            return (tuple(t), int(np.argmin(merged)), int(np.argmax(merged)))

        base_sig = bin_signature(rel)
        instance_worst = 0.0
        excluded = 0
        total = 0
        for li, layer in enumerate(net.layers):
            for param, analytic in (
                (layer.weight, tape.weight_grads[li]),
                (layer.bias, tape.bias_grads[li]),
            ):
                flat = param.reshape(-1)
                fd = np.zeros(flat.size)
                keep = np.ones(flat.size, dtype=bool)
                for idx in range(flat.size):
                    bump = np.zeros_like(flat)
                    bump[idx] = h
                    loss_hi, rel_hi = eval_with(param, (flat + bump).reshape(param.shape))
                    loss_lo, rel_lo = eval_with(param, (flat - bump).reshape(param.shape))
                    fd[idx] = (loss_hi - loss_lo) / (2 * h)
                    # The loss is piecewise smooth in (bin index, extreme
                    # holder) cells; a cell change inside the window means
                    # the difference quotient straddles a kink.
                    if bin_signature(rel_hi) != base_sig or bin_signature(rel_lo) != base_sig:
                        keep[idx] = False
                total += flat.size
                excluded += int((~keep).sum())
                if keep.any():
                    instance_worst = max(
                        instance_worst, rel_error(analytic.reshape(-1)[keep], fd[keep])
                    )
        if excluded > 0.2 * total:
            continue  # kink-riddled configuration; redraw
        worst = max(worst, instance_worst)
        done += 1
    return CheckResult("end-to-end tuple loss gradient vs finite differences", worst, tol)


def run_all(seed=0) -> list[CheckResult]:
    """Every finite-difference oracle at its exit tolerance."""
    return [
        check_embedding_gradients(seed),
        check_gaussian_fit_grads(seed),
        check_loglik_gradient(seed),
        check_hessian_blocks(seed),
        check_cross_blocks(seed),
        check_implicit_closed_form(seed),
        check_implicit_refit(seed),
        check_histogram_gradients(seed),
        check_end_to_end(seed),
    ]

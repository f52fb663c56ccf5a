"""Maximum likelihood and Gibbs-sampling inference for the interference model."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm, rankdata

from .errors import InputError, OptimizationError, ParameterError, SamplerError
from .model import (Dataset, ModelParams, ParamLayout, _binom_logpmf_vec, _loglik_impl,
                    _Workspace, score_and_information, simulate_outcomes, treated_counts)
from .networks import sample_interference_network

__all__ = [
    "PriorConfig",
    "McmcConfig",
    "FitResult",
    "PosteriorSamples",
    "fit_mle",
    "multistart_ambiguity",
    "fit_gibbs",
    "posterior_summary",
    "bvm_diagnostic",
    "coverage_study",
    "CoverageResult",
    "write_posterior_csv",
    "write_fit_result",
]

_LOGIT_PI_BOUNDS = (np.log(1e-6) - np.log1p(-1e-6), np.log(0.999) - np.log1p(-0.999))
_LOG_SIGMA_BOUNDS = (np.log(1e-8), np.log(1e6))


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Multi-start MLE output.

    ``std_errors`` and ``param_cov`` are in natural space and aligned with
    ``layout.names``; ``info_matrix`` is the finite-difference observed
    information of the per-observation average log-likelihood in the
    unconstrained parameterization.
    """

    params: ModelParams
    loglik: float
    layout: ParamLayout
    n: int
    n_k: np.ndarray
    community_sizes: np.ndarray
    convergence: dict
    starts: list
    std_errors: np.ndarray | None = None
    info_matrix: np.ndarray | None = None
    param_cov: np.ndarray | None = None

    @property
    def theta_hat(self) -> np.ndarray:
        return self.params.pack()


def _grad_to_vec(g: dict, layout: ParamLayout) -> np.ndarray:
    parts = [np.array([g["beta0"], g["gamma"]]), g["beta"].ravel(), g["pi"].ravel(),
             np.array([g["sigma_eps"]])]
    if layout.n_cov:
        parts.append(g["beta_x"])
    return np.concatenate(parts)


def _ols_start(data: Dataset):
    cols = [np.ones(data.n), data.z.astype(float)]
    if data.x is not None:
        cols.extend(data.x.T)
    W = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(W, data.y, rcond=None)
    resid = data.y - W @ coef
    sigma = float(np.sqrt(max(resid @ resid / max(data.n - W.shape[1], 1), 1e-12)))
    return coef, sigma


def fit_mle(data: Dataset, K: int, *, n_starts: int = 8, seed: int = 0,
            init_block_density: np.ndarray | None = None, jitter_sd: float = 0.5,
            maxiter: int = 300, gtol: float = 1e-9, compute_se: bool = True,
            tail: float = 1e-12) -> FitResult:
    """Maximize the marginal likelihood by seeded multi-start quasi-Newton.

    Optimization runs in the unconstrained transform (log sigma_eps, logit
    pi, raw coefficients) with analytic gradients. Each start initializes the
    regression coefficients from OLS of y on (1, z[, x]), perturbs the
    interference coefficients with start-specific jitter, and initializes pi
    from ``init_block_density`` (for example the observed network's block
    densities) shrunk halfway toward 0.05, or at 0.05 flat. The best local
    optimum wins; ties go to the smallest parameter norm.

    Standard errors are ``sqrt(diag(info^-1) / n)`` mapped back to natural
    space; they are omitted (with a note in ``convergence``) when the
    information estimate is singular.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    ws = _Workspace(data, K)
    layout = ParamLayout(K, data.n_cov)
    coef0, sigma0 = _ols_start(data)

    if init_block_density is not None:
        dens = np.clip(np.asarray(init_block_density, dtype=float), 1e-4, 0.999)
        pi0 = 0.05 + 0.5 * (dens - 0.05)
    else:
        pi0 = np.full((K, K), 0.05)
    pi0 = np.clip(pi0, 1e-4, 0.95)

    lb = np.full(layout.dim, -np.inf)
    ub = np.full(layout.dim, np.inf)
    lb[layout.sl_pi], ub[layout.sl_pi] = _LOGIT_PI_BOUNDS
    lb[layout.i_sigma], ub[layout.i_sigma] = _LOG_SIGMA_BOUNDS
    bounds = list(zip(lb, ub))

    def objective(eta):
        params = layout.params(layout.to_natural(eta))
        ll, g = _loglik_impl(ws, params, tail, 1.0, want_grad=True)
        if not np.isfinite(ll):
            return 1e15, np.zeros(layout.dim)
        gvec = _grad_to_vec(g, layout) * layout.jacobian_diag(eta)
        return -ll / ws.n, -gvec / ws.n

    starts = []
    for s in range(n_starts):
        rng = np.random.default_rng([seed, s])
        nat = np.empty(layout.dim)
        nat[0], nat[1] = coef0[0], coef0[1]
        nat[layout.sl_beta] = rng.normal(0.0, jitter_sd, K * K)
        nat[layout.sl_pi] = pi0.ravel()
        nat[layout.i_sigma] = sigma0
        if layout.n_cov:
            nat[layout.sl_x] = coef0[2:2 + layout.n_cov]
        starts.append(layout.to_unconstrained(nat))

    records = []
    for s, eta0 in enumerate(starts):
        res = minimize(objective, eta0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter, "ftol": 1e-13, "gtol": gtol,
                                "maxls": 60})
        records.append({
            "start": s,
            "loglik": -res.fun * ws.n if np.isfinite(res.fun) else -np.inf,
            "eta": res.x,
            "status": int(res.status),
            "n_iter": int(res.nit),
            "grad_norm": float(np.max(np.abs(res.jac))) if np.all(np.isfinite(res.jac)) else np.inf,
            "message": str(res.message),
        })

    usable = [r for r in records if np.isfinite(r["loglik"])]
    if not usable:
        raise OptimizationError("all optimizer starts failed", traces=records)
    best_ll = max(r["loglik"] for r in usable)
    near = [r for r in usable if r["loglik"] >= best_ll - 1e-9 * (1.0 + abs(best_ll))]
    best = min(near, key=lambda r: float(np.linalg.norm(r["eta"])))
    params_hat = layout.params(layout.to_natural(best["eta"]))

    labels = data.labels
    sizes = np.bincount(labels - 1, minlength=K)[:K]
    convergence = {
        "status": "converged" if best["status"] == 0 else f"status_{best['status']}",
        "grad_norm": best["grad_norm"],
        "n_iter": best["n_iter"],
        "best_start": best["start"],
    }
    fit = FitResult(params=params_hat, loglik=best["loglik"], layout=layout, n=ws.n,
                    n_k=ws.n_k.copy(), community_sizes=sizes, convergence=convergence,
                    starts=records)
    if compute_se:
        grad_fd, info = score_and_information(data, params_hat, tail=tail)
        fit.info_matrix = info
        convergence["fd_grad_norm"] = float(np.max(np.abs(grad_fd)))
        eigvals = np.linalg.eigvalsh(info)
        if eigvals.min() <= 1e-10 * max(1.0, eigvals.max()):
            convergence["se_status"] = "singular_information"
        else:
            cov_eta = np.linalg.inv(info) / ws.n
            jac = fit.layout.jacobian_diag(best["eta"])
            fit.param_cov = cov_eta * np.outer(jac, jac)
            fit.std_errors = np.sqrt(np.diag(fit.param_cov))
            convergence["se_status"] = "ok"
    return fit


def _permuted_vector(beta, lam, perm):
    idx = np.asarray(perm)
    return np.concatenate([beta[np.ix_(idx, idx)].ravel(), lam[np.ix_(idx, idx)].ravel()])


def multistart_ambiguity(fit: FitResult, *, rel_ll_tol: float = 5e-3,
                         dist_tol: float = 0.5) -> list[dict]:
    """Detect distinct near-optimal multi-start solutions.

    Flags starts whose average log-likelihood is within ``rel_ll_tol`` of the
    best but whose parameters sit further than ``dist_tol`` away (max abs
    difference over beta, lambda = n_k * pi, beta0, gamma, sigma), minimized
    over community-label permutations. A non-empty result is the
    operational non-identifiability warning: the surface has near-equal
    optima at distant parameters, as happens when interference effect rows
    are homogeneous.
    """
    from itertools import permutations

    layout = fit.layout
    best_eta = None
    out = []
    best_ll = fit.loglik / fit.n
    ref = layout.to_natural(layout.to_unconstrained(fit.params.pack()))
    ref_p = layout.params(ref)
    ref_lam = ref_p.lam(fit.n_k)
    ref_head = np.array([ref_p.beta0, ref_p.gamma, ref_p.sigma_eps])
    perms = list(permutations(range(layout.K)))
    for rec in fit.starts:
        if not np.isfinite(rec["loglik"]):
            continue
        if best_ll - rec["loglik"] / fit.n > rel_ll_tol:
            continue
        cand = layout.params(layout.to_natural(rec["eta"]))
        cand_lam = cand.lam(fit.n_k)
        head_dist = np.max(np.abs(np.array([cand.beta0, cand.gamma, cand.sigma_eps]) - ref_head))
        block_dist = min(
            np.max(np.abs(_permuted_vector(cand.beta, cand_lam, perm)
                          - _permuted_vector(ref_p.beta, ref_lam, range(layout.K))))
            for perm in perms
        )
        dist = max(head_dist, block_dist)
        if dist > dist_tol:
            out.append({"start": rec["start"], "distance": float(dist),
                        "loglik_gap": float(best_ll - rec["loglik"] / fit.n)})
    return out


# ---------------------------------------------------------------------------
# Gibbs sampler with latent exposure counts
# ---------------------------------------------------------------------------


@dataclass
class PriorConfig:
    """Conjugate priors: Normal coefficients, Inverse-Gamma sigma^2, Beta pi."""

    s_coef: float = 10.0
    a0: float = 2.0
    b0: float = 2.0
    a_pi: float = 1.0
    b_pi: float = 1.0

    def __post_init__(self):
        for name in ("s_coef", "a0", "b0", "a_pi", "b_pi"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"prior hyperparameter {name} must be positive")


@dataclass
class McmcConfig:
    n_iter: int = 4000
    n_burnin: int | None = None  # defaults to n_iter // 2
    n_chains: int = 2
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_burnin is None:
            self.n_burnin = self.n_iter // 2
        if not (self.n_iter > self.n_burnin >= 0):
            raise ParameterError("need n_iter > n_burnin >= 0")
        if self.n_chains < 1 or self.thin < 1:
            raise ParameterError("need n_chains >= 1 and thin >= 1")


@dataclass
class PosteriorSamples:
    """MCMC draws in natural space, shaped (n_chains, kept, dim)."""

    draws: np.ndarray
    names: list
    layout: ParamLayout
    n: int
    n_k: np.ndarray
    community_sizes: np.ndarray
    config: McmcConfig
    priors: PriorConfig
    warnings: list = field(default_factory=list)
    latent_q: np.ndarray | None = None
    log_joint: np.ndarray | None = None

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]


def _draw_coefficients(rng, W, y, sigma2, s_coef):
    """Gaussian draw from the conjugate linear-model posterior.

    Returns (draw, mean, cov): posterior N(mean, cov) with
    precision W'W/sigma2 + I/s_coef^2.
    """
    d = W.shape[1]
    prec = W.T @ W / sigma2 + np.eye(d) / (s_coef ** 2)
    chol_u = cholesky(prec)  # upper triangular
    mean = cho_solve((chol_u, False), W.T @ y / sigma2)
    noise = solve_triangular(chol_u, rng.standard_normal(d), lower=False)
    cov = cho_solve((chol_u, False), np.eye(d))
    return mean + noise, mean, cov


def _draw_sigma2(rng, resid, a0, b0):
    """Inverse-Gamma(a0 + n/2, b0 + RSS/2) draw; returns (draw, shape, rate)."""
    shape = a0 + resid.size / 2.0
    rate = b0 + float(resid @ resid) / 2.0
    return rate / rng.gamma(shape), shape, rate


def _draw_pi(rng, Q, labels, m_totals, a_pi, b_pi):
    """Beta draw per (sender, receiver) block given the exposure counts.

    successes S[k, c] = sum_{i: C_i = c+1} Q[k, i]; trials are the summed
    per-unit support bounds ``m_totals``. Blocks with zero trials fall back
    to the prior.
    """
    K = Q.shape[0]
    onehot = np.zeros((labels.size, K))
    onehot[np.arange(labels.size), labels - 1] = 1.0
    S = Q @ onehot
    return rng.beta(a_pi + S, b_pi + np.maximum(m_totals - S, 0.0)), S


def _q_update(rng, Q, k, data, beta_cols, base, sigma2, logpmf_tab, m_row, spill):
    """Vectorized draw of Q[k, :] from its full conditional (Gumbel argmax)."""
    e = data.y - base - spill + beta_cols * Q[k]
    qgrid = np.arange(logpmf_tab.shape[-1])
    mu = beta_cols[:, None] * qgrid[None, :]
    logits = logpmf_tab - 0.5 * (e[:, None] - mu) ** 2 / sigma2
    logits = np.where(qgrid[None, :] <= m_row[:, None], logits, -np.inf)
    draw = np.argmax(logits + rng.gumbel(size=logits.shape), axis=1)
    if not np.all(np.isfinite(np.take_along_axis(logits, draw[:, None], axis=1))):
        bad = int(np.nonzero(~np.isfinite(
            np.take_along_axis(logits, draw[:, None], axis=1).ravel()))[0][0])
        raise SamplerError("non-finite conditional mass in exposure update", unit=bad)
    return draw


def fit_gibbs(data: Dataset, K: int, priors: PriorConfig | None = None,
              mcmc: McmcConfig | None = None, *, fixed_q: np.ndarray | None = None,
              keep_q: bool = False, track_log_joint: bool = False,
              init_params: ModelParams | None = None) -> PosteriorSamples:
    """Gibbs sampler treating the exposure counts Q as latent variables.

    Sweep order per iteration: (a) for each sender community k, draw
    Q[k, i] for every unit from the discrete full conditional (units are
    conditionally independent, so the sweep is vectorized across i);
    (b) joint Gaussian draw of all regression coefficients; (c) conjugate
    Inverse-Gamma draw of sigma^2; (d) conjugate Beta draws of each pi
    block. One RNG stream per chain keyed by (seed, chain), so runs are
    reproducible draw for draw.

    ``fixed_q`` freezes the latent counts (debug mode for conjugate-step
    verification); ``init_params`` starts every chain at the given
    parameters (used for stationarity checks).
    """
    priors = priors or PriorConfig()
    mcmc = mcmc or McmcConfig()
    labels = data.labels
    if int(labels.max()) > K:
        raise InputError(f"labels exceed K={K}")
    n = data.n
    n_k = treated_counts(data.z, labels, K)
    sizes = np.bincount(labels - 1, minlength=K)[:K]
    layout = ParamLayout(K, data.n_cov)
    warn_list = []
    if np.any(sizes == 0):
        empty = [k + 1 for k in range(K) if sizes[k] == 0]
        warn_list.append(f"empty receiver communities {empty}: their pi entries follow the prior")
        warnings.warn(warn_list[-1], stacklevel=2)

    delta = np.zeros((K, n), dtype=np.int64)
    for k in range(K):
        delta[k] = ((labels == k + 1) & (data.z == 1)).astype(np.int64)
    m_bounds = n_k[:, None] - delta  # (K, n) per-unit support bounds
    onehot_r = np.zeros((n, K))
    onehot_r[np.arange(n), labels - 1] = 1.0
    m_totals = m_bounds @ onehot_r  # (K, K) Beta trial totals, fixed given z

    fixed_cols = [np.ones(n), data.z.astype(float)]
    if data.x is not None:
        fixed_cols.extend(data.x.T)
    n_coef = 2 + K * K + data.n_cov

    kept = (mcmc.n_iter - mcmc.n_burnin + mcmc.thin - 1) // mcmc.thin
    all_draws = np.empty((mcmc.n_chains, kept, layout.dim))
    all_q = np.empty((mcmc.n_chains, kept, K, n), dtype=np.int64) if keep_q else None
    all_lj = np.empty((mcmc.n_chains, mcmc.n_iter)) if track_log_joint else None

    coef0, sigma0 = _ols_start(data)
    beta_mat_idx = labels - 1

    for chain in range(mcmc.n_chains):
        rng = np.random.default_rng([mcmc.seed, chain])
        if init_params is not None:
            beta0, gamma = init_params.beta0, init_params.gamma
            beta = init_params.beta.copy()
            pi = init_params.pi.copy()
            sigma2 = init_params.sigma_eps ** 2
            beta_x = (init_params.beta_x.copy() if init_params.beta_x is not None
                      else np.zeros(data.n_cov))
        else:
            beta0, gamma = coef0[0], coef0[1]
            beta = np.zeros((K, K))
            pi = rng.uniform(0.02, 0.2, size=(K, K))
            sigma2 = sigma0 ** 2
            beta_x = coef0[2:2 + data.n_cov] if data.n_cov else np.zeros(0)
        Q = fixed_q.copy() if fixed_q is not None else np.zeros((K, n), dtype=np.int64)

        base = beta0 + gamma * data.z
        if data.n_cov:
            base = base + data.x @ beta_x
        keep_idx = 0
        for it in range(mcmc.n_iter):
            spill = np.einsum("ki,ki->i", beta[:, beta_mat_idx], Q)
            if fixed_q is None:
                for k in range(K):
                    tab = np.full((K, 2, n_k[k] + 1), -np.inf)
                    for c in range(K):
                        tab[c, 0, :] = _binom_logpmf_vec(int(n_k[k]), pi[k, c])
                        m1 = max(int(n_k[k]) - 1, 0)
                        tab[c, 1, :m1 + 1] = _binom_logpmf_vec(m1, pi[k, c])
                    logpmf_rows = tab[labels - 1, delta[k]]
                    beta_cols = beta[k, beta_mat_idx]
                    new_qk = _q_update(rng, Q, k, data, beta_cols, base, sigma2,
                                       logpmf_rows, m_bounds[k], spill)
                    spill = spill + beta_cols * (new_qk - Q[k])
                    Q[k] = new_qk

            # (b) coefficients: design is [1, z, Q masked by receiver community, x]
            qcols = (Q[:, None, :] * onehot_r.T[None, :, :]).reshape(K * K, n)
            W = np.column_stack([fixed_cols[0], fixed_cols[1], *qcols, *fixed_cols[2:]])
            coef, _, _ = _draw_coefficients(rng, W, data.y, sigma2, priors.s_coef)
            beta0, gamma = coef[0], coef[1]
            beta = coef[2:2 + K * K].reshape(K, K)
            if data.n_cov:
                beta_x = coef[2 + K * K:]
            base = beta0 + gamma * data.z
            if data.n_cov:
                base = base + data.x @ beta_x

            # (c) residual variance
            resid = data.y - W @ coef
            sigma2, _, _ = _draw_sigma2(rng, resid, priors.a0, priors.b0)

            # (d) interference probabilities
            pi, _ = _draw_pi(rng, Q, labels, m_totals, priors.a_pi, priors.b_pi)
            pi = np.clip(pi, 1e-12, 1.0 - 1e-12)

            if track_log_joint:
                all_lj[chain, it] = _log_joint(data, labels, Q, beta0, gamma, beta, pi,
                                               sigma2, beta_x, m_bounds, priors)
            if it >= mcmc.n_burnin and (it - mcmc.n_burnin) % mcmc.thin == 0:
                vec = np.concatenate([[beta0, gamma], beta.ravel(), pi.ravel(),
                                      [np.sqrt(sigma2)], beta_x])
                all_draws[chain, keep_idx] = vec
                if keep_q:
                    all_q[chain, keep_idx] = Q
                keep_idx += 1

    return PosteriorSamples(draws=all_draws, names=layout.names, layout=layout, n=n,
                            n_k=n_k, community_sizes=sizes, config=mcmc, priors=priors,
                            warnings=warn_list, latent_q=all_q, log_joint=all_lj)


def _log_joint(data, labels, Q, beta0, gamma, beta, pi, sigma2, beta_x, m_bounds, priors):
    """Unnormalized log p(Y, Q | theta) + log p(theta) at the current state."""
    n = data.n
    idx = labels - 1
    mu = beta0 + gamma * data.z + np.einsum("ki,ki->i", beta[:, idx], Q)
    if data.n_cov:
        mu = mu + data.x @ beta_x
    resid = data.y - mu
    ll = -0.5 * n * np.log(2 * np.pi * sigma2) - 0.5 * float(resid @ resid) / sigma2
    from scipy.special import gammaln as _gl

    p_cols = pi[:, idx]
    m = m_bounds
    with np.errstate(divide="ignore"):
        ll += float(np.sum(_gl(m + 1) - _gl(Q + 1) - _gl(m - Q + 1)
                           + Q * np.log(p_cols) + (m - Q) * np.log1p(-p_cols)))
    coefs = np.concatenate([[beta0, gamma], beta.ravel(), beta_x])
    lp = float(norm.logpdf(coefs, 0.0, priors.s_coef).sum())
    lp += float((-priors.a0 - 1) * np.log(sigma2) - priors.b0 / sigma2)
    lp += float(((priors.a_pi - 1) * np.log(pi) + (priors.b_pi - 1) * np.log1p(-pi)).sum())
    return ll + lp


# ---------------------------------------------------------------------------
# Posterior summaries and diagnostics
# ---------------------------------------------------------------------------


def _split_chains(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2*chains, draws//2), dropping an odd last draw."""
    c, m = x.shape
    half = m // 2
    return x[:, :2 * half].reshape(c * 2, half)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = rankdata(x, method="average").reshape(x.shape)
    return norm.ppf((flat - 0.375) / (x.size + 0.25))


def _rhat(x: np.ndarray) -> float:
    """Split-chain rank-normalized potential scale reduction factor."""
    z = _rank_normalize(_split_chains(x))
    c, m = z.shape
    if m < 3 or c < 2:
        return np.nan
    means = z.mean(axis=1)
    w = z.var(axis=1, ddof=1).mean()
    b = m * means.var(ddof=1)
    var_plus = (m - 1) / m * w + b / m
    return float(np.sqrt(var_plus / w))


def _ess(x: np.ndarray) -> float:
    """Bulk effective sample size via Geyer's initial monotone sequence."""
    z = _rank_normalize(_split_chains(x))
    c, m = z.shape
    if m < 3:
        return np.nan
    acov = np.empty((c, m))
    for i in range(c):
        d = z[i] - z[i].mean()
        fft = np.fft.rfft(d, 2 * m)
        ac = np.fft.irfft(fft * np.conj(fft))[:m].real
        acov[i] = ac / m
    w = z.var(axis=1, ddof=1).mean()
    var_plus = (m - 1) / m * w + m * z.mean(axis=1).var(ddof=1) / m
    if var_plus <= 0:
        return np.nan
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    # pair up lags; stop at the first negative pair, enforce monotonicity
    tau = 1.0
    prev = np.inf
    t = 1
    while t + 1 < m:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
        t += 2
    return float(c * m / tau)


def posterior_summary(samples: PosteriorSamples, params: list | None = None) -> pd.DataFrame:
    """Pooled posterior summaries plus split-chain R-hat and ESS per parameter.

    R-hat follows the rank-normalized split-chain convention and is reported
    as NaN when fewer than two chains are available.
    """
    draws = samples.draws
    if draws.size == 0:
        raise InputError("no posterior draws to summarize")
    names = samples.names
    sel = range(len(names)) if params is None else [names.index(p) for p in params]
    rows = []
    for j in sel:
        x = draws[:, :, j]
        pooled = x.ravel()
        rows.append({
            "parameter": names[j],
            "mean": pooled.mean(),
            "sd": pooled.std(ddof=1) if pooled.size > 1 else 0.0,
            "q2.5": np.quantile(pooled, 0.025),
            "q50": np.quantile(pooled, 0.5),
            "q97.5": np.quantile(pooled, 0.975),
            "rhat": _rhat(x) if samples.n_chains >= 2 and np.ptp(pooled) > 0 else
                    (np.nan if samples.n_chains < 2 else 1.0),
            "ess": _ess(x) if np.ptp(pooled) > 0 else np.nan,
        })
    return pd.DataFrame(rows).set_index("parameter")


def bvm_diagnostic(samples: PosteriorSamples, fit: FitResult, *,
                   grid_size: int = 512) -> pd.DataFrame:
    """Per-parameter total variation between the posterior and its Gaussian limit.

    For each parameter j the pooled draws are mapped to the unconstrained
    space, centered at the MLE and scaled by sqrt(n); the kernel-smoothed
    marginal is compared on a grid against Normal(0, [J^-1]_jj) built from
    the fit's information matrix. Returns one row per parameter with ``tv``,
    ``mean_diff`` (standardized) and ``sd_ratio``; singular information
    coordinates come back as NaN.
    """
    if fit.info_matrix is None:
        raise InputError("fit carries no information matrix; rerun with compute_se=True")
    layout = fit.layout
    pooled = samples.pooled()
    eta_draws = np.apply_along_axis(layout.to_unconstrained, 1, pooled)
    eta_hat = layout.to_unconstrained(fit.params.pack())
    u = np.sqrt(fit.n) * (eta_draws - eta_hat)
    try:
        cov_ref = np.linalg.inv(fit.info_matrix)
    except np.linalg.LinAlgError:
        cov_ref = np.full((layout.dim, layout.dim), np.nan)
    rows = []
    for j, name in enumerate(layout.names):
        v = cov_ref[j, j]
        uj = u[:, j]
        if not np.isfinite(v) or v <= 0:
            rows.append({"parameter": name, "tv": np.nan, "mean_diff": np.nan,
                         "sd_ratio": np.nan})
            continue
        sref = np.sqrt(v)
        sd = uj.std(ddof=1)
        iqr = np.subtract(*np.quantile(uj, [0.75, 0.25]))
        scale = min(sd, iqr / 1.34) if iqr > 0 else sd
        bw = max(0.9 * scale * uj.size ** (-0.2), 1e-12 * sref + 1e-300)
        lo = min(uj.min(), -6.0 * sref) - 4 * bw
        hi = max(uj.max(), 6.0 * sref) + 4 * bw
        grid = np.linspace(lo, hi, grid_size)
        kde = np.exp(-0.5 * ((grid[:, None] - uj[None, :]) / bw) ** 2).sum(axis=1)
        kde /= uj.size * bw * np.sqrt(2 * np.pi)
        ref = norm.pdf(grid, 0.0, sref)
        tv = 0.5 * np.trapezoid(np.abs(kde - ref), grid)
        rows.append({"parameter": name, "tv": float(tv),
                     "mean_diff": float(uj.mean() / sref),
                     "sd_ratio": float(sd / sref)})
    return pd.DataFrame(rows).set_index("parameter")


# ---------------------------------------------------------------------------
# Wald coverage study
# ---------------------------------------------------------------------------


@dataclass
class CoverageResult:
    estimates: np.ndarray
    std_errors: np.ndarray
    truth: np.ndarray
    names: list
    failures: list

    def table(self, z: float = 1.959963984540054, se_scale: float = 1.0) -> pd.DataFrame:
        half = z * se_scale * self.std_errors
        covered = (self.estimates - half <= self.truth) & (self.truth <= self.estimates + half)
        ok = np.all(np.isfinite(self.std_errors), axis=1)
        return pd.DataFrame({
            "parameter": self.names,
            "coverage": covered[ok].mean(axis=0),
            "mean_estimate": self.estimates[ok].mean(axis=0),
            "mean_se": self.std_errors[ok].mean(axis=0),
        }).set_index("parameter")


def coverage_study(true_params: ModelParams, n_nodes: int, *, n_replicates: int = 100,
                   label_weights: np.ndarray | None = None, treat_prob: float = 0.5,
                   seed: int = 0, n_starts: int = 4, maxiter: int = 300) -> CoverageResult:
    """Empirical Wald coverage of the MLE under the generative model.

    Each replicate draws labels, the interference network, treatments and
    outcomes at ``true_params``, fits the MLE conditional on the true
    labels, and records estimates and standard errors per parameter.
    """
    K = true_params.K
    weights = np.full(K, 1.0 / K) if label_weights is None else np.asarray(label_weights)
    layout = ParamLayout(K, true_params.n_cov)
    truth = true_params.pack()
    ests, ses, failures = [], [], []
    for rep in range(n_replicates):
        rng = np.random.default_rng([seed, rep])
        while True:
            labels = rng.choice(K, size=n_nodes, p=weights) + 1
            if len(np.unique(labels)) == K:
                break
        G = sample_interference_network(labels, true_params.pi, seed=rng.integers(2 ** 31))
        z = (rng.random(n_nodes) < treat_prob).astype(np.int64)
        y = simulate_outcomes(G, z, labels, true_params, seed=rng.integers(2 ** 31))
        data = Dataset(y=y, z=z, labels=labels)
        try:
            fit = fit_mle(data, K, n_starts=n_starts, seed=int(rng.integers(2 ** 31)),
                          maxiter=maxiter)
        except OptimizationError as exc:
            failures.append({"replicate": rep, "error": str(exc)})
            continue
        if fit.std_errors is None:
            failures.append({"replicate": rep, "error": "singular information"})
            continue
        ests.append(fit.params.pack())
        ses.append(fit.std_errors)
    return CoverageResult(estimates=np.array(ests), std_errors=np.array(ses),
                          truth=truth, names=layout.names, failures=failures)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_posterior_csv(samples: PosteriorSamples, path):
    """One row per kept iteration: chain, iteration, then named parameters."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", *samples.names])
        for chain in range(samples.n_chains):
            for it, row in enumerate(samples.draws[chain]):
                writer.writerow([chain, it, *(repr(float(v)) for v in row)])


def write_fit_result(fit: FitResult, path, cov_path=None):
    """Key-value dump of the fit plus an optional covariance CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"K = {fit.layout.K}\n")
        fh.write(f"n = {fit.n}\n")
        fh.write(f"loglik = {fit.loglik!r}\n")
        for key, val in fit.convergence.items():
            fh.write(f"convergence.{key} = {val}\n")
        vec = fit.params.pack()
        for j, name in enumerate(fit.layout.names):
            fh.write(f"{name} = {vec[j]!r}\n")
            if fit.std_errors is not None:
                fh.write(f"se.{name} = {fit.std_errors[j]!r}\n")
    if cov_path is not None and fit.param_cov is not None:
        with open(cov_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(fit.layout.names)
            for row in fit.param_cov:
                writer.writerow([repr(float(v)) for v in row])

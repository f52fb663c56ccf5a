"""Linear outcome model with latent block-structured interference.

For receiver ``i`` in community ``c`` the outcome is

    Y_i = beta0 + sum_k beta[k, c] * Q[k, i] + gamma * Z_i (+ X_i beta_x) + eps_i

where ``Q[k, i]`` counts treated senders in community ``k`` with an
interference edge into ``i`` and ``eps_i ~ Normal(0, sigma_eps^2)``. When the
interference network is latent, ``Q[k, i]`` is Binomial given treatments and
labels, and the observed-data likelihood marginalizes the joint exposure
vector per unit over a truncated product-Binomial support.

Index conventions: ``beta[k, k2]`` and ``pi[k, k2]`` are sender community
``k+1`` acting on receiver community ``k2+1``; labels are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import poisson

from .errors import EvaluationError, InputError, ParameterError
from .networks import validate_adjacency, validate_labels

try:  # optional jit acceleration; the numpy path is the reference implementation
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

__all__ = [
    "ModelParams",
    "LimitParams",
    "Dataset",
    "ParamLayout",
    "treated_counts",
    "exposure_counts",
    "simulate_outcomes",
    "log_likelihood",
    "poisson_limit_log_density",
    "score_and_information",
    "write_params",
    "read_params",
    "write_dataset_csv",
    "read_dataset_csv",
]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_PRUNE_WINDOW = 37.0  # joint atoms more than 37 nats below the mode carry < 1e-16 mass
_RESID_WINDOW = 13.0  # per-unit atom window, in sigmas; see _group_eval


@dataclass
class ModelParams:
    """Full parameter vector of the interference outcome model.

    ``beta`` and ``pi`` are K x K, sender community first. The expected
    treated-sender count ``lambda[k, k2] = n_k * pi[k, k2]`` is exposed via
    :meth:`lam` and never stored, so the two views cannot drift apart.
    """

    beta0: float
    gamma: float
    beta: np.ndarray
    pi: np.ndarray
    sigma_eps: float
    beta_x: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        if self.beta.shape != self.pi.shape or self.beta.shape[0] != self.beta.shape[1]:
            raise ParameterError("beta and pi must be square matrices of matching size")
        if not np.all((self.pi > 0.0) & (self.pi < 1.0)):
            raise ParameterError("pi entries must lie strictly in (0, 1)")
        if not self.sigma_eps > 0.0:
            raise ParameterError("sigma_eps must be positive")
        if self.beta_x is not None:
            self.beta_x = np.atleast_1d(np.asarray(self.beta_x, dtype=float))

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def n_cov(self) -> int:
        return 0 if self.beta_x is None else self.beta_x.size

    def lam(self, n_k) -> np.ndarray:
        """Expected treated senders lambda[k, k2] = n_k * pi[k, k2]."""
        n_k = np.asarray(n_k, dtype=float)
        if n_k.shape != (self.K,):
            raise InputError(f"n_k must have shape ({self.K},)")
        return n_k[:, None] * self.pi

    def pack(self) -> np.ndarray:
        """Flatten to the canonical natural-space vector (see ParamLayout)."""
        parts = [np.array([self.beta0, self.gamma]), self.beta.ravel(), self.pi.ravel(),
                 np.array([self.sigma_eps])]
        if self.beta_x is not None:
            parts.append(self.beta_x)
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, vec, K: int, n_cov: int = 0) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != 2 + 2 * K * K + 1 + n_cov:
            raise InputError(f"parameter vector has length {vec.size}, expected {2 + 2 * K * K + 1 + n_cov}")
        o = 2
        beta = vec[o:o + K * K].reshape(K, K)
        o += K * K
        pi = vec[o:o + K * K].reshape(K, K)
        o += K * K
        sigma = vec[o]
        bx = vec[o + 1:] if n_cov else None
        return cls(beta0=vec[0], gamma=vec[1], beta=beta, pi=pi, sigma_eps=sigma, beta_x=bx)


@dataclass
class LimitParams:
    """Limiting parameterization carrying lambda[k, k2] directly."""

    beta0: float
    gamma: float
    beta: np.ndarray
    lam: np.ndarray
    sigma_eps: float

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if self.beta.shape != self.lam.shape:
            raise ParameterError("beta and lam must have matching shapes")
        if np.any(self.lam < 0.0):
            raise ParameterError("lambda entries must be nonnegative")
        if not self.sigma_eps > 0.0:
            raise ParameterError("sigma_eps must be positive")

    @property
    def K(self) -> int:
        return self.beta.shape[0]


@dataclass
class Dataset:
    """Observed outcomes, treatments, community labels and optional covariates."""

    y: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.z = np.asarray(self.z)
        self.labels = np.asarray(self.labels)
        n = self.y.size
        if self.y.ndim != 1 or np.any(~np.isfinite(self.y)):
            raise InputError("y must be a 1-d array without missing values")
        if self.z.shape != (n,) or not np.isin(self.z, (0, 1)).all():
            raise InputError("z must be a length-n 0/1 vector")
        self.z = self.z.astype(np.int64)
        self.labels = validate_labels(self.labels, allow_empty=True)
        if self.labels.shape != (n,):
            raise InputError("labels must have the same length as y")
        if self.x is not None:
            self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
            if self.x.shape[0] != n:
                raise InputError("x must have one row per unit")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_cov(self) -> int:
        return 0 if self.x is None else self.x.shape[1]


class ParamLayout:
    """Canonical flattening of ModelParams and its unconstrained transform.

    Natural order: beta0, gamma, beta (row-major, sender-major), pi
    (row-major), sigma_eps, covariate coefficients. The unconstrained space
    maps pi through logit and sigma_eps through log; coefficients pass
    through unchanged.
    """

    def __init__(self, K: int, n_cov: int = 0):
        self.K = K
        self.n_cov = n_cov
        kk = K * K
        self.sl_beta = slice(2, 2 + kk)
        self.sl_pi = slice(2 + kk, 2 + 2 * kk)
        self.i_sigma = 2 + 2 * kk
        self.sl_x = slice(self.i_sigma + 1, self.i_sigma + 1 + n_cov)
        self.dim = 2 + 2 * kk + 1 + n_cov

    @property
    def names(self) -> list[str]:
        K = self.K
        names = ["beta0", "gamma"]
        names += [f"beta_{k + 1}_{k2 + 1}" for k in range(K) for k2 in range(K)]
        names += [f"pi_{k + 1}_{k2 + 1}" for k in range(K) for k2 in range(K)]
        names += ["sigma_eps"]
        names += [f"beta_x_{j + 1}" for j in range(self.n_cov)]
        return names

    def to_unconstrained(self, natural: np.ndarray) -> np.ndarray:
        eta = np.array(natural, dtype=float)
        p = eta[self.sl_pi]
        eta[self.sl_pi] = np.log(p) - np.log1p(-p)
        eta[self.i_sigma] = np.log(eta[self.i_sigma])
        return eta

    def to_natural(self, eta: np.ndarray) -> np.ndarray:
        nat = np.array(eta, dtype=float)
        nat[self.sl_pi] = 1.0 / (1.0 + np.exp(-nat[self.sl_pi]))
        nat[self.i_sigma] = np.exp(nat[self.i_sigma])
        return nat

    def jacobian_diag(self, eta: np.ndarray) -> np.ndarray:
        """d(natural)/d(eta), a diagonal, evaluated at unconstrained eta."""
        jac = np.ones(self.dim)
        p = 1.0 / (1.0 + np.exp(-np.asarray(eta)[self.sl_pi]))
        jac[self.sl_pi] = p * (1.0 - p)
        jac[self.i_sigma] = np.exp(eta[self.i_sigma])
        return jac

    def params(self, natural: np.ndarray) -> ModelParams:
        return ModelParams.unpack(natural, self.K, self.n_cov)


def treated_counts(z, labels, K: int | None = None) -> np.ndarray:
    """Number of treated units per community, n_k = sum_{j: C_j=k} Z_j."""
    z = np.asarray(z)
    labels = validate_labels(labels, K, allow_empty=True)
    if K is None:
        K = int(labels.max())
    return np.bincount(labels - 1, weights=z, minlength=K).astype(np.int64)


def exposure_counts(G, z, labels, K: int | None = None) -> np.ndarray:
    """Treated-sender exposure counts Q[k, i] = sum_{j != i, C_j=k+1} G[j, i] Z_j."""
    G = validate_adjacency(G)
    z = np.asarray(z)
    labels = validate_labels(labels, K, allow_empty=True)
    if K is None:
        K = int(labels.max())
    n = G.shape[0]
    if z.shape != (n,) or labels.shape != (n,):
        raise InputError("G, z and labels must agree on the number of nodes")
    sent = G * z[:, None]
    onehot = np.zeros((n, K))
    onehot[np.arange(n), labels - 1] = 1.0
    return (onehot.T @ sent).astype(np.int64)


def simulate_outcomes(G, z, labels, params: ModelParams, x=None, seed=0) -> np.ndarray:
    """Draw outcomes from the structural model given a realized network."""
    labels = validate_labels(labels, params.K, allow_empty=True)
    Q = exposure_counts(G, z, labels, params.K)
    rng = np.random.default_rng(seed)
    idx = labels - 1
    spill = np.einsum("ki,ki->i", params.beta[:, idx], Q)
    y = params.beta0 + spill + params.gamma * np.asarray(z)
    if params.beta_x is not None:
        if x is None:
            raise InputError("params carry covariate coefficients but x is missing")
        y = y + np.atleast_2d(x) @ params.beta_x
    y = y + rng.normal(0.0, params.sigma_eps, size=labels.size)
    return y


# ---------------------------------------------------------------------------
# Marginal likelihood over the latent exposure counts
# ---------------------------------------------------------------------------


def _binom_logpmf_vec(m: int, p: float) -> np.ndarray:
    """log Binomial(q; m, p) on the full support q = 0..m."""
    q = np.arange(m + 1)
    if p <= 0.0:
        out = np.full(m + 1, -np.inf)
        out[0] = 0.0
        return out
    if p >= 1.0:
        out = np.full(m + 1, -np.inf)
        out[m] = 0.0
        return out
    return (gammaln(m + 1) - gammaln(q + 1) - gammaln(m - q + 1)
            + q * np.log(p) + (m - q) * np.log1p(-p))


def _binom_support(m: int, p: float, tail: float, cap_scale: float) -> np.ndarray:
    """Log pmf truncated at the smallest q whose upper tail mass is < tail."""
    logpmf = _binom_logpmf_vec(m, p)
    pmf = np.exp(logpmf)
    sf = np.concatenate([pmf[::-1].cumsum()[::-1][1:], [0.0]])  # P(Q > q)
    below = np.nonzero(sf < tail)[0]
    qmax = int(below[0]) if below.size else m
    if cap_scale != 1.0:
        qmax = int(min(m, np.ceil(cap_scale * (qmax + 1)) - 1))
    return logpmf[:qmax + 1]


def _product_grid(sizes: tuple[int, ...]) -> np.ndarray:
    """All joint count vectors for per-component supports 0..sizes[k]-1, row-major."""
    K = len(sizes)
    J = int(np.prod(sizes))
    qmat = np.empty((J, K))
    for k, sz in enumerate(sizes):
        inner = int(np.prod(sizes[k + 1:])) if k + 1 < K else 1
        outer = int(np.prod(sizes[:k])) if k > 0 else 1
        qmat[:, k] = np.tile(np.repeat(np.arange(sz), inner), outer)
    return qmat


def _joint_atoms(logpmfs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Product support of independent count components.

    Returns (logw, qmat): joint log-weights (J,) and integer counts (J, K),
    pruned of atoms more than ``_PRUNE_WINDOW`` nats below the joint mode
    (a relative mass below 1e-16).
    """
    logw = logpmfs[0]
    for lp in logpmfs[1:]:
        logw = np.add.outer(logw, lp).ravel()
    qmat = _product_grid(tuple(lp.size for lp in logpmfs))
    keep = logw >= logw.max() - _PRUNE_WINDOW
    return logw[keep], qmat[keep]


def _group_eval_numpy(u, svals, logw, qmat, sigma, want_grad):
    """Mixture log-density and responsibility aggregates for one unit group.

    Returns ``(ll, t1, t2, a0q, a1q)`` where, with responsibilities ``r_ij``
    over atoms and residuals ``R_ij = u_i - s_j``: ``t1_i = sum_j r R``,
    ``t2 = sum_ij r R^2``, ``a0q_k = sum_ij r q_jk`` and
    ``a1q_k = sum_ij r R q_jk``.
    """
    resid = u[:, None] - svals[None, :]
    logits = logw[None, :] - 0.5 * (resid / sigma) ** 2
    mx = logits.max(axis=1)
    ex = np.exp(logits - mx[:, None])
    tot = ex.sum(axis=1)
    ll = float((mx + np.log(tot)).sum())
    if not want_grad:
        return ll, None, 0.0, None, None
    r = ex / tot[:, None]
    rR = r * resid
    t1 = rR.sum(axis=1)
    t2 = float((rR * resid).sum())
    a0q = r.sum(axis=0) @ qmat
    a1q = rR.sum(axis=0) @ qmat
    return ll, t1, t2, a0q, a1q


if _HAVE_NUMBA:

    @_njit(cache=True, fastmath=True)
    def _group_eval_jit(u, svals, logw, sigma, want_grad):  # pragma: no cover
        m = u.size
        J = svals.size
        inv2s2 = 0.5 / (sigma * sigma)
        pad = 14.0 * sigma
        ll = 0.0
        t1 = np.zeros(m)
        t2 = 0.0
        a0 = np.zeros(J)
        a1 = np.zeros(J)
        scratch = np.empty(J)
        for i in range(m):
            ui = u[i]
            # atoms beyond the nearest one plus 14 sigma sit > 60 nats below
            # the leading term (given the 37-nat weight prune) and are skipped
            pos = np.searchsorted(svals, ui)
            d_near = 1e300
            if pos < J:
                d_near = abs(svals[pos] - ui)
            if pos > 0 and abs(svals[pos - 1] - ui) < d_near:
                d_near = abs(svals[pos - 1] - ui)
            halfwin = d_near + pad
            lo = np.searchsorted(svals, ui - halfwin)
            hi = np.searchsorted(svals, ui + halfwin)
            # the window always contains the nearest atom, so hi > lo
            mx = -1e300
            for j in range(lo, hi):
                d = ui - svals[j]
                v = logw[j] - d * d * inv2s2
                scratch[j] = v
                if v > mx:
                    mx = v
            tot = 0.0
            for j in range(lo, hi):
                e = np.exp(scratch[j] - mx)
                scratch[j] = e
                tot += e
            ll += mx + np.log(tot)
            if want_grad:
                inv_tot = 1.0 / tot
                acc1 = 0.0
                for j in range(lo, hi):
                    r = scratch[j] * inv_tot
                    d = ui - svals[j]
                    rr = r * d
                    acc1 += rr
                    t2 += rr * d
                    a0[j] += r
                    a1[j] += rr
                t1[i] = acc1
        return ll, t1, t2, a0, a1

    def _group_eval(u, svals, logw, qmat, sigma, want_grad):
        order = np.argsort(svals)
        ll, t1, t2, a0, a1 = _group_eval_jit(u, svals[order], logw[order], sigma, want_grad)
        if not want_grad:
            return ll, None, 0.0, None, None
        qs = qmat[order]
        return ll, t1, t2, a0 @ qs, a1 @ qs

else:  # pragma: no cover

    def _group_eval(u, svals, logw, qmat, sigma, want_grad):
        return _group_eval_numpy(u, svals, logw, qmat, sigma, want_grad)


class _Workspace:
    """Per-dataset grouping of units by (receiver community, treatment)."""

    def __init__(self, data: Dataset, K: int):
        labels = validate_labels(data.labels, K, allow_empty=True)
        self.K = K
        self.n = data.n
        self.n_cov = data.n_cov
        self.n_k = treated_counts(data.z, labels, K)
        self._qmat_cache = {}
        self.groups = []
        for c in range(1, K + 1):
            for z in (0, 1):
                mask = (labels == c) & (data.z == z)
                if not mask.any():
                    continue
                m_vec = self.n_k.copy()
                if z == 1:
                    m_vec[c - 1] -= 1
                self.groups.append({
                    "c": c,
                    "z": z,
                    "m_vec": m_vec,
                    "y": data.y[mask],
                    "x": data.x[mask] if data.x is not None else None,
                })


def _validate_likelihood_params(params: ModelParams, ws: _Workspace):
    if params.K != ws.K:
        raise ParameterError(f"params have K={params.K}, labels imply K={ws.K}")
    if params.n_cov != ws.n_cov:
        raise ParameterError("covariate coefficient count does not match data")


def _loglik_impl(ws: _Workspace, params: ModelParams, tail: float, cap_scale: float,
                 want_grad: bool):
    K = ws.K
    sigma = params.sigma_eps
    sig2 = sigma * sigma
    total = 0.0
    if want_grad:
        g = {"beta0": 0.0, "gamma": 0.0, "beta": np.zeros((K, K)),
             "pi": np.zeros((K, K)), "sigma_eps": 0.0,
             "beta_x": np.zeros(ws.n_cov) if ws.n_cov else None}
    for gi, grp in enumerate(ws.groups):
        c = grp["c"] - 1
        m_vec = grp["m_vec"]
        p_col = params.pi[:, c]
        logpmfs = [_binom_support(int(m_vec[k]), p_col[k], tail, cap_scale)
                   for k in range(K)]
        sizes = tuple(lp.size for lp in logpmfs)
        qmat_full = ws._qmat_cache.get((gi, sizes))
        if qmat_full is None:
            qmat_full = _product_grid(sizes)
            ws._qmat_cache[(gi, sizes)] = qmat_full
        logw = logpmfs[0]
        for lp in logpmfs[1:]:
            logw = np.add.outer(logw, lp).ravel()
        keep = logw >= logw.max() - _PRUNE_WINDOW
        logw = logw[keep]
        qmat = qmat_full[keep]
        svals = qmat @ params.beta[:, c]
        base = params.beta0 + params.gamma * grp["z"]
        if params.beta_x is not None:
            base = base + grp["x"] @ params.beta_x
        u = np.ascontiguousarray(grp["y"] - base, dtype=float)
        ll, t1, t2, a0q, a1q = _group_eval(u, svals, logw, qmat, sigma, want_grad)
        total += ll - u.size * (np.log(sigma) + _HALF_LOG_2PI)
        if not want_grad:
            continue
        g["beta0"] += t1.sum() / sig2
        g["gamma"] += grp["z"] * t1.sum() / sig2
        g["beta"][:, c] += a1q / sig2
        if ws.n_cov:
            g["beta_x"] += grp["x"].T @ t1 / sig2
        g["sigma_eps"] += (t2 / sig2 - u.size) / sigma
        denom = p_col * (1.0 - p_col)
        g["pi"][:, c] += (a0q - u.size * m_vec * p_col) / denom
    if want_grad:
        return total, g
    return total


def log_likelihood(data: Dataset, params: ModelParams, *, tail: float = 1e-12,
                   cap_scale: float = 1.0) -> float:
    """Marginal log-likelihood of the outcomes given labels and treatments.

    Each unit's contribution marginalizes the joint exposure vector
    ``(q_1..q_K)`` over a product-Binomial support truncated where the
    per-component tail mass drops below ``tail``. Computed in log space with
    max-shift stabilization; finite for all valid parameters.
    """
    ws = _Workspace(data, params.K)
    _validate_likelihood_params(params, ws)
    return _loglik_impl(ws, params, tail, cap_scale, want_grad=False)


def log_likelihood_grad(data: Dataset, params: ModelParams, *, tail: float = 1e-12,
                        cap_scale: float = 1.0):
    """Log-likelihood and its analytic natural-space gradient.

    Returns ``(loglik, grad)`` where grad is a dict with entries ``beta0``,
    ``gamma``, ``beta`` (K x K), ``pi`` (K x K), ``sigma_eps`` and optionally
    ``beta_x``, holding derivatives of the total log-likelihood.
    """
    ws = _Workspace(data, params.K)
    _validate_likelihood_params(params, ws)
    return _loglik_impl(ws, params, tail, cap_scale, want_grad=True)


def poisson_limit_log_density(y, z, c, params: LimitParams, *, tail: float = 1e-12):
    """Log density of one outcome under the Poisson-exposure limit.

    ``y`` may be a scalar or an array; ``z`` and ``c`` are the unit's
    treatment and (1-based) receiver community. Exposure counts are Poisson
    with mean ``lam[k, c-1]`` and the support is tail-truncated like the
    Binomial case.
    """
    lam_col = params.lam[:, c - 1]
    logpmfs = []
    for k in range(params.K):
        lam = lam_col[k]
        qmax = 0 if lam <= 0 else int(poisson.isf(tail, lam))
        logpmfs.append(poisson.logpmf(np.arange(qmax + 1), lam) if lam > 0 else np.zeros(1))
    logw, qmat = _joint_atoms(logpmfs)
    svals = qmat @ params.beta[:, c - 1]
    base = params.beta0 + params.gamma * z
    y = np.asarray(y, dtype=float)
    resid = np.subtract.outer(y - base, svals)
    out = logsumexp(logw - 0.5 * (resid / params.sigma_eps) ** 2, axis=-1)
    out = out - np.log(params.sigma_eps) - _HALF_LOG_2PI
    return float(out) if out.ndim == 0 else out


def _avg_loglik_unconstrained(data: Dataset, layout: ParamLayout, tail: float, cap_scale: float):
    ws = _Workspace(data, layout.K)

    def f(eta):
        params = layout.params(layout.to_natural(eta))
        return _loglik_impl(ws, params, tail, cap_scale, want_grad=False) / ws.n

    return f


def score_and_information(data: Dataset, params: ModelParams, *, rel_step: float = 1e-5,
                          tail: float = 1e-12):
    """Finite-difference score and observed information of the average log-likelihood.

    Both are computed in the unconstrained parameterization (log sigma_eps,
    logit pi, raw coefficients) by central differences with coordinate steps
    ``rel_step * (1 + |eta_j|)``. The information is the symmetrized negative
    Hessian. Raises :class:`EvaluationError` naming the offending coordinate
    if the likelihood is non-finite at a perturbed point.
    """
    layout = ParamLayout(params.K, params.n_cov)
    f = _avg_loglik_unconstrained(data, layout, tail, 1.0)
    eta0 = layout.to_unconstrained(params.pack())
    d = layout.dim
    names = layout.names
    h = rel_step * (1.0 + np.abs(eta0))

    def f_at(delta, j_hint):
        val = f(eta0 + delta)
        if not np.isfinite(val):
            raise EvaluationError("non-finite log-likelihood at perturbed point",
                                  coordinate=names[j_hint])
        return val

    f0 = f_at(np.zeros(d), 0)
    grad = np.zeros(d)
    fplus = np.zeros(d)
    fminus = np.zeros(d)
    eye = np.eye(d)
    for j in range(d):
        fplus[j] = f_at(h[j] * eye[j], j)
        fminus[j] = f_at(-h[j] * eye[j], j)
        grad[j] = (fplus[j] - fminus[j]) / (2.0 * h[j])
    hess = np.zeros((d, d))
    for j in range(d):
        hess[j, j] = (fplus[j] - 2.0 * f0 + fminus[j]) / (h[j] * h[j])
        for l in range(j + 1, d):
            fpp = f_at(h[j] * eye[j] + h[l] * eye[l], j)
            fpm = f_at(h[j] * eye[j] - h[l] * eye[l], j)
            fmp = f_at(-h[j] * eye[j] + h[l] * eye[l], j)
            fmm = f_at(-h[j] * eye[j] - h[l] * eye[l], j)
            hess[j, l] = hess[l, j] = (fpp - fpm - fmp + fmm) / (4.0 * h[j] * h[l])
    info = -0.5 * (hess + hess.T)
    return grad, info


def fd_gradient(data: Dataset, params: ModelParams, *, step: float = 1e-6,
                scheme: str = "central", tail: float = 1e-12) -> np.ndarray:
    """Finite-difference gradient of the average log-likelihood (unconstrained).

    ``scheme`` is ``central`` or ``forward``; used for independent-step
    cross-checks of :func:`score_and_information`.
    """
    layout = ParamLayout(params.K, params.n_cov)
    f = _avg_loglik_unconstrained(data, layout, tail, 1.0)
    eta0 = layout.to_unconstrained(params.pack())
    d = layout.dim
    h = step * (1.0 + np.abs(eta0))
    grad = np.zeros(d)
    eye = np.eye(d)
    if scheme == "central":
        for j in range(d):
            grad[j] = (f(eta0 + h[j] * eye[j]) - f(eta0 - h[j] * eye[j])) / (2.0 * h[j])
    elif scheme == "forward":
        f0 = f(eta0)
        for j in range(d):
            grad[j] = (f(eta0 + h[j] * eye[j]) - f0) / h[j]
    else:
        raise InputError(f"unknown finite-difference scheme {scheme!r}")
    return grad


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------


def write_params(params: ModelParams, path):
    """Serialize parameters as `key = value` lines.

    Matrix entries are keyed ``beta_k_k2`` / ``pi_k_k2`` with the sender
    community k first; this matches the canonical vector order.
    """
    layout = ParamLayout(params.K, params.n_cov)
    vec = params.pack()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"K = {params.K}\n")
        fh.write(f"n_cov = {params.n_cov}\n")
        for name, val in zip(layout.names, vec):
            fh.write(f"{name} = {val!r}\n")


def read_params(path) -> ModelParams:
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", line_no=line_no)
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    try:
        K = int(kv.pop("K"))
        n_cov = int(kv.pop("n_cov", "0"))
        layout = ParamLayout(K, n_cov)
        vec = np.array([float(kv[name]) for name in layout.names])
    except KeyError as exc:
        raise InputError(f"params file is missing key {exc}") from None
    return ModelParams.unpack(vec, K, n_cov)


def write_dataset_csv(data: Dataset, path, node_ids=None):
    """Write outcomes as `node_id,y,z[,x1..xp]` (labels are exported separately)."""
    import csv as _csv

    if node_ids is None:
        node_ids = list(range(data.n))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        header = ["node_id", "y", "z"] + [f"x{j + 1}" for j in range(data.n_cov)]
        writer.writerow(header)
        for i, node in enumerate(node_ids):
            row = [node, repr(float(data.y[i])), int(data.z[i])]
            if data.x is not None:
                row += [repr(float(v)) for v in data.x[i]]
            writer.writerow(row)


def read_dataset_csv(path, labels_path) -> tuple[Dataset, list]:
    """Load a `node_id,y,z[,x..]` CSV joined to a labels CSV by node_id.

    Raises :class:`ReconciliationError` listing orphan ids when the two
    files disagree on the node set.
    """
    import csv as _csv

    from .errors import ReconciliationError
    from .networks import read_labels_csv

    rows = {}
    n_x = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty outcomes file")
        header = [h.strip().lower() for h in header]
        if header[:3] != ["node_id", "y", "z"]:
            raise ParseError(f"expected header 'node_id,y,z[,x..]', got {header}", line_no=1)
        n_x = len(header) - 3
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                node = row[0].strip()
                y = float(row[1])
                z = int(row[2])
                xs = [float(v) for v in row[3:3 + n_x]] if n_x else None
            except (IndexError, ValueError):
                raise ParseError(f"unparseable outcome row {row!r}", line_no=line_no) from None
            rows[node] = (y, z, xs)
    if not rows:
        raise InputError(f"{path}: no outcome rows found")
    node_ids, labels = read_labels_csv(labels_path)
    missing_outcome = set(node_ids) - set(rows)
    missing_label = set(rows) - set(node_ids)
    if missing_outcome or missing_label:
        raise ReconciliationError("node ids do not reconcile between outcomes and labels",
                                  orphans=missing_outcome | missing_label)
    y = np.array([rows[v][0] for v in node_ids])
    z = np.array([rows[v][1] for v in node_ids])
    x = np.array([rows[v][2] for v in node_ids]) if n_x else None
    return Dataset(y=y, z=z, labels=labels, x=x), node_ids

"""Causal effect summaries derived from fitted parameters.

Direct effect: under the linear outcome model, a unit's own-treatment effect
is exactly the coefficient ``gamma``; holding everyone else's assignment
fixed, all interference terms cancel in the contrast. Group-level indirect
effects integrate the latent network out of the sender-receiver contrast:
switching the treatment of one sender in community k shifts each receiver in
community k2 by ``beta[k, k2]`` along each realized edge, so the expected
group-level effect has the closed forms implemented here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .estimation import FitResult, PosteriorSamples
from .model import ModelParams
from .networks import validate_adjacency, validate_labels

__all__ = [
    "EffectEstimate",
    "direct_effect",
    "group_ide",
    "population_average_indirect",
    "ide_brute_force_oracle",
    "effects_to_csv",
]

_Z95 = 1.959963984540054


@dataclass
class EffectEstimate:
    """A point estimate with uncertainty and its estimand descriptor."""

    estimand: str
    value: float
    sender: int | None = None
    receiver: int | None = None
    se: float | None = None
    lo: float | None = None
    hi: float | None = None
    method: str = "point"

    def __post_init__(self):
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise InputError("interval endpoints are out of order")


def _delta_interval(value, grad, cov):
    if cov is None:
        return None, None, None
    var = float(grad @ cov @ grad)
    if var < 0:
        return None, None, None
    se = np.sqrt(var)
    return se, value - _Z95 * se, value + _Z95 * se


def _posterior_interval(vals):
    return (float(np.std(vals, ddof=1)), float(np.quantile(vals, 0.025)),
            float(np.quantile(vals, 0.975)))


def direct_effect(source) -> EffectEstimate:
    """Average direct effect of a unit's own treatment; equals gamma."""
    if isinstance(source, FitResult):
        value = float(source.params.gamma)
        se = None if source.std_errors is None else float(source.std_errors[1])
        lo = hi = None
        if se is not None:
            lo, hi = value - _Z95 * se, value + _Z95 * se
        return EffectEstimate("direct", value, se=se, lo=lo, hi=hi, method="mle")
    if isinstance(source, PosteriorSamples):
        vals = source.pooled()[:, 1]
        se, lo, hi = _posterior_interval(vals)
        return EffectEstimate("direct", float(vals.mean()), se=se, lo=lo, hi=hi,
                              method="posterior")
    if isinstance(source, ModelParams):
        return EffectEstimate("direct", float(source.gamma))
    raise InputError(f"unsupported source type {type(source).__name__}")


def _check_communities(K, *ks):
    for k in ks:
        if not 1 <= k <= K:
            raise InputError(f"community index {k} outside 1..{K}")


def group_ide(source, sender: int, receiver: int,
              community_sizes: np.ndarray | None = None) -> EffectEstimate:
    """Expected group-level indirect effect of community ``sender`` on ``receiver``.

    Closed form ``beta[s, r] * pi[s, r] * (N_s - 1{s == r})``: every sender in
    the group contributes its edge probability times the per-edge effect to
    each receiver, excluding self-pairs. With ``N_s = 1`` and distinct
    communities this reduces to the expected pairwise indirect effect
    ``beta * pi``. Uncertainty: delta method for an MLE source, transformed
    draws for a posterior source.
    """
    if isinstance(source, ModelParams):
        if community_sizes is None:
            raise InputError("community_sizes is required with raw parameters")
        params, cov, layout, draws = source, None, None, None
    elif isinstance(source, FitResult):
        params, cov, layout, draws = source.params, source.param_cov, source.layout, None
        community_sizes = source.community_sizes if community_sizes is None else community_sizes
    elif isinstance(source, PosteriorSamples):
        params, cov, layout, draws = None, None, source.layout, source.pooled()
        community_sizes = source.community_sizes if community_sizes is None else community_sizes
    else:
        raise InputError(f"unsupported source type {type(source).__name__}")
    K = layout.K if layout is not None else params.K
    _check_communities(K, sender, receiver)
    sizes = np.asarray(community_sizes)
    mult = float(sizes[sender - 1] - (1 if sender == receiver else 0))
    s, r = sender - 1, receiver - 1

    if draws is not None:
        kk = K * K
        b = draws[:, 2 + s * K + r]
        p = draws[:, 2 + kk + s * K + r]
        vals = b * p * mult
        se, lo, hi = _posterior_interval(vals)
        return EffectEstimate("group_ide", float(vals.mean()), sender=sender,
                              receiver=receiver, se=se, lo=lo, hi=hi, method="posterior")

    value = float(params.beta[s, r] * params.pi[s, r] * mult)
    se = lo = hi = None
    if cov is not None:
        grad = np.zeros(layout.dim)
        grad[2 + s * K + r] = params.pi[s, r] * mult
        grad[2 + K * K + s * K + r] = params.beta[s, r] * mult
        se, lo, hi = _delta_interval(value, grad, cov)
    method = "mle" if isinstance(source, FitResult) else "point"
    return EffectEstimate("group_ide", value, sender=sender, receiver=receiver,
                          se=se, lo=lo, hi=hi, method=method)


def population_average_indirect(source, receiver: int,
                                n_treated: np.ndarray | None = None) -> EffectEstimate:
    """Total expected spillover onto receiver community ``receiver``.

    Computes ``sum_k beta[k, r] * n_k * pi[k, r]`` with ``n_k`` the treated
    counts per sender community. This is the population-average comparison
    quantity; it uses treated counts, unlike :func:`group_ide` which uses
    community sizes.
    """
    if isinstance(source, ModelParams):
        if n_treated is None:
            raise InputError("n_treated is required with raw parameters")
        params, cov, layout, draws = source, None, None, None
    elif isinstance(source, FitResult):
        params, cov, layout, draws = source.params, source.param_cov, source.layout, None
        n_treated = source.n_k if n_treated is None else n_treated
    elif isinstance(source, PosteriorSamples):
        params, cov, layout, draws = None, None, source.layout, source.pooled()
        n_treated = source.n_k if n_treated is None else n_treated
    else:
        raise InputError(f"unsupported source type {type(source).__name__}")
    K = layout.K if layout is not None else params.K
    _check_communities(K, receiver)
    n_k = np.asarray(n_treated, dtype=float)
    r = receiver - 1

    if draws is not None:
        kk = K * K
        b = draws[:, 2 + r:2 + kk:K]
        p = draws[:, 2 + kk + r:2 + 2 * kk:K]
        vals = (b * p * n_k[None, :]).sum(axis=1)
        se, lo, hi = _posterior_interval(vals)
        return EffectEstimate("population_indirect", float(vals.mean()), receiver=receiver,
                              se=se, lo=lo, hi=hi, method="posterior")

    value = float((params.beta[:, r] * n_k * params.pi[:, r]).sum())
    se = lo = hi = None
    if cov is not None:
        grad = np.zeros(layout.dim)
        for k in range(K):
            grad[2 + k * K + r] = n_k[k] * params.pi[k, r]
            grad[2 + K * K + k * K + r] = n_k[k] * params.beta[k, r]
        se, lo, hi = _delta_interval(value, grad, cov)
    method = "mle" if isinstance(source, FitResult) else "point"
    return EffectEstimate("population_indirect", value, receiver=receiver, se=se,
                          lo=lo, hi=hi, method=method)


def ide_brute_force_oracle(G, labels, params: ModelParams, senders, receivers,
                           seed: int = 0, z_base: np.ndarray | None = None) -> float:
    """Potential-outcome evaluation of the group-level indirect effect.

    For every receiver i and sender j (j != i) the outcome is evaluated under
    z_j = 1 and z_j = 0 with all other assignments held at ``z_base`` and a
    common noise draw, and the contrasts are averaged over receivers. The
    noise cancels in each contrast, so the value is deterministic given G:
    it equals ``mean_i sum_j beta[C_j, C_i] * G[j, i]``. Intended for small
    instances as an independent check of the closed forms.
    """
    G = validate_adjacency(G)
    labels = validate_labels(labels, params.K, allow_empty=True)
    n = labels.size
    senders = np.asarray(list(senders), dtype=np.int64)
    receivers = np.asarray(list(receivers), dtype=np.int64)
    if senders.size == 0 or receivers.size == 0:
        raise InputError("sender and receiver sets must be non-empty")
    if senders.min() < 0 or senders.max() >= n or receivers.min() < 0 or receivers.max() >= n:
        raise InputError("sender/receiver indices outside 0..n-1")
    z = np.zeros(n, dtype=np.int64) if z_base is None else np.asarray(z_base, dtype=np.int64).copy()
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, params.sigma_eps, n)

    def outcome(i, zvec):
        c = labels[i] - 1
        spill = sum(params.beta[labels[j] - 1, c] * G[j, i] * zvec[j]
                    for j in range(n) if j != i)
        return params.beta0 + spill + params.gamma * zvec[i] + eps[i]

    total = 0.0
    for i in receivers:
        for j in senders:
            if j == i:
                continue
            z1 = z.copy()
            z1[j] = 1
            z0 = z.copy()
            z0[j] = 0
            total += outcome(i, z1) - outcome(i, z0)
    return float(total / receivers.size)


def effects_to_csv(estimates, path):
    """Write effect rows as `estimand,sender,receiver,value,lo,hi,method`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimand", "sender", "receiver", "value", "lo", "hi", "method"])
        for est in estimates:
            writer.writerow([
                est.estimand,
                "" if est.sender is None else est.sender,
                "" if est.receiver is None else est.receiver,
                repr(float(est.value)),
                "" if est.lo is None else repr(float(est.lo)),
                "" if est.hi is None else repr(float(est.hi)),
                est.method,
            ])

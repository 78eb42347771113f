"""Contrastive objectives.

- info_nce: softmax cross-entropy over (anchor, positive) pairs with the
  positive included in the denominator, computed through logsumexp.
- loss_geo: regional-mean anchors contrasted against same-region point
  features of the other view (positives) and other selected regions
  (negatives), symmetrized over view directions.
- soft_topk: differentiable top-k as entropic optimal transport between the
  score distribution and a two-bin target (k selected, n-k rejected), solved
  by unrolled log-domain Sinkhorn iterations.
- match_and_loss_fea: regional anchors matched by cosine similarity against
  every row of the other view; soft-top-k weights pick the positives,
  foreground-background draws supply the negatives.
- loss_sum: the weighted joint objective.

All feature rows are l2-normalized before any dot product, so similarities
are cosines and tau = 0.1 stays overflow-safe through the logsumexp route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fgcontrast.autodiff import (
    Tensor,
    add,
    concat,
    cosine_similarity,
    div,
    exp,
    gather,
    l2_normalize,
    logsumexp,
    logsumexp2,
    matmul,
    mul,
    reshape,
    sub,
    tmean,
    transpose,
    tsum,
)
from fgcontrast.errors import ArgumentError, ContractError
from fgcontrast.model import FeatureMap
from fgcontrast.rng import rng_for


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    k: int | None = None
    total_pair_budget: int = 4096
    alpha: float = 1.0
    beta: float = 1.0
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 50

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ArgumentError("alpha and beta must be >= 0")
        if self.k is not None and self.k < 1:
            raise ArgumentError("k must be >= 1")
        if self.sinkhorn_epsilon <= 0 or self.sinkhorn_iters < 1:
            raise ArgumentError("sinkhorn parameters must be positive")

    def resolve_k(self, h: int) -> int:
        """Pairs per anchor: explicit k, else floor(budget / (2 views * H * 2))."""
        if self.k is not None:
            return self.k
        return max(1, self.total_pair_budget // (2 * h * 2))


@dataclass(frozen=True)
class ContrastBatch:
    """Anchors (A, f), positives (A, k_pos, f), negatives (A, k_neg, f);
    rows l2-normalized. k_pos and k_neg are equal in the pipeline but may
    differ for standalone use."""

    anchors: Tensor
    positives: Tensor
    negatives: Tensor

    def __post_init__(self):
        a, p, n = self.anchors.shape, self.positives.shape, self.negatives.shape
        if (
            len(a) != 2
            or len(p) != 3
            or len(n) != 3
            or p[0] != a[0]
            or n[0] != a[0]
            or p[2] != a[1]
            or n[2] != a[1]
        ):
            raise ArgumentError(f"inconsistent batch shapes {a}, {p}, {n}")


def _values(x) -> Tensor:
    return x.values if isinstance(x, FeatureMap) else x


def regional_mean(d, indices) -> Tensor:
    """l2-normalized arithmetic mean of the region's feature rows, shape (1, f)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ArgumentError("regional_mean of an empty region")
    rows = gather(_values(d), idx)
    return l2_normalize(reshape(tmean(rows, axis=0), (1, -1)))


def info_nce(batch: ContrastBatch, tau: float) -> Tensor:
    """Mean over all (anchor, positive) pairs of
    -log exp(a.p/tau) / (exp(a.p/tau) + sum_neg exp(a.n/tau))."""
    if tau <= 0:
        raise ArgumentError("tau must be > 0")
    a_count, k_pos, f = batch.positives.shape
    k_neg = batch.negatives.shape[1]
    pos = reshape(batch.positives, (a_count * k_pos, f))
    neg = reshape(batch.negatives, (a_count * k_neg, f))
    sim_pos = cosine_similarity(gather(batch.anchors, np.repeat(np.arange(a_count), k_pos)), pos)
    sim_neg = cosine_similarity(gather(batch.anchors, np.repeat(np.arange(a_count), k_neg)), neg)
    # row (i, j) of the logit matrix: [pos_ij, neg_i1 .. neg_ik]
    neg_rows = (
        np.repeat(np.arange(a_count) * k_neg, k_pos)[:, None] + np.arange(k_neg)[None, :]
    )
    logits = concat([reshape(sim_pos, (a_count * k_pos, 1)), gather(sim_neg, neg_rows)], axis=1)
    lse = logsumexp(div(logits, Tensor(tau)))
    return tmean(sub(lse, div(sim_pos, Tensor(tau))))


@dataclass
class GeoInfo:
    skipped_regions: int = 0
    with_replacement: bool = False
    draws: list = field(default_factory=list)


def _draw(rng, pool: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    replace = len(pool) < k
    return rng.choice(pool, size=k, replace=replace), replace


def _geo_direction(d_anchor, d_key, members_anchor, members_key, k, tau, rng, info):
    key_nonempty = [len(m) > 0 for m in members_key]
    usable = [
        i
        for i in range(len(members_anchor))
        if len(members_anchor[i]) > 0
        and key_nonempty[i]
        and any(key_nonempty[j] for j in range(len(members_key)) if j != i)
    ]
    info.skipped_regions += len(members_anchor) - len(usable)
    if not usable:
        return None
    anchors = concat([regional_mean(d_anchor, members_anchor[i]) for i in usable], axis=0)
    pos_idx = np.empty((len(usable), k), dtype=np.int64)
    neg_idx = np.empty((len(usable), k), dtype=np.int64)
    for row, i in enumerate(usable):
        pos, rep = _draw(rng, np.asarray(members_key[i]), k)
        info.with_replacement |= rep
        neg_pool = np.concatenate(
            [np.asarray(members_key[j]) for j in range(len(members_key)) if j != i and key_nonempty[j]]
        )
        neg, rep = _draw(rng, neg_pool, k)
        info.with_replacement |= rep
        pos_idx[row] = pos
        neg_idx[row] = neg
    info.draws.append({"usable": usable, "pos_idx": pos_idx.copy(), "neg_idx": neg_idx.copy()})
    f = anchors.shape[1]
    positives = reshape(gather(_values(d_key), pos_idx.reshape(-1)), (len(usable), k, f))
    negatives = reshape(gather(_values(d_key), neg_idx.reshape(-1)), (len(usable), k, f))
    return info_nce(ContrastBatch(anchors, positives, negatives), tau)


def loss_geo(d_a, d_b, members_a, members_b, cfg: LossConfig, k: int, seed: int = 0):
    """Symmetrized regional geometry contrast.

    members_a/members_b hold, per selected region, the point indices of that
    region inside view a / view b. Regions missing from one view are skipped
    (counted); if every region is skipped in both directions the contract is
    violated. Fewer than two selected regions cannot form negatives.
    """
    if len(members_a) != len(members_b):
        raise ArgumentError("per-view membership lists must align")
    if len(members_a) < 2:
        raise ArgumentError("need >= 2 selected regions to form negatives")
    info = GeoInfo()
    rng = rng_for(seed, 0x6E0)
    ab = _geo_direction(d_a, d_b, members_a, members_b, k, cfg.tau, rng, info)
    ba = _geo_direction(d_b, d_a, members_b, members_a, k, cfg.tau, rng, info)
    if ab is None and ba is None:
        raise ContractError("all selected regions were skipped in both directions")
    if ab is None:
        return ba, info
    if ba is None:
        return ab, info
    return mul(add(ab, ba), Tensor(0.5)), info


def soft_topk(scores: Tensor, k: int, epsilon: float, iters: int) -> Tensor:
    """Differentiable top-k weights in [0, 1] summing to k (per row).

    Entropic OT between the scores (mass 1/n each) and two bins with masses
    ((n-k)/n, k/n); transport costs are squared distances to the detached
    min/max score anchors. Log-domain Sinkhorn, unrolled, ending on the bin
    marginal step so the weights sum to k up to roundoff; iteration stops
    early once the scaled potentials stall.
    """
    single = len(scores.shape) == 1
    s = reshape(scores, (1, -1)) if single else scores
    if len(s.shape) != 2:
        raise ArgumentError("scores must be 1-d or 2-d")
    n = s.shape[1]
    if not 1 <= k < n:
        raise ArgumentError(f"need 1 <= k < n, got k={k}, n={n}")
    if epsilon <= 0 or iters < 1:
        raise ArgumentError("epsilon and iters must be positive")

    st = transpose(s)  # (n, A)
    lo = Tensor(st.data.min(axis=0))  # detached anchors, (A,)
    hi = Tensor(st.data.max(axis=0))
    d0 = sub(st, lo)
    d1 = sub(st, hi)
    inv_eps = Tensor(1.0 / epsilon)
    c0 = mul(mul(d0, d0), inv_eps)
    c1 = mul(mul(d1, d1), inv_eps)

    log_mu = Tensor(-math.log(n))
    log_nu0 = Tensor(math.log((n - k) / n))
    log_nu1 = Tensor(math.log(k / n))
    a_width = s.shape[0]
    g0 = Tensor(np.zeros(a_width))
    g1 = Tensor(np.zeros(a_width))
    f = None
    for it in range(iters):
        f = sub(log_mu, logsumexp2(sub(g0, c0), sub(g1, c1)))  # (n, A)
        new_g0 = sub(log_nu0, logsumexp(transpose(sub(f, c0))))  # (A,)
        new_g1 = sub(log_nu1, logsumexp(transpose(sub(f, c1))))
        delta = max(
            float(np.max(np.abs(new_g0.data - g0.data))),
            float(np.max(np.abs(new_g1.data - g1.data))),
        )
        g0, g1 = new_g0, new_g1
        scale = max(1.0, float(np.max(np.abs(g0.data))), float(np.max(np.abs(g1.data))))
        if it > 0 and delta <= 1e-11 * scale:
            break
    w = transpose(mul(exp(add(sub(f, c1), g1)), Tensor(float(n))))  # (A, n)
    return reshape(w, (n,)) if single else w


@dataclass
class FeaInfo:
    with_replacement: bool = False
    skipped_regions: int = 0
    draws: list = field(default_factory=list)


def _fea_direction(f_anchor, f_key, members_anchor, bg_key, k, cfg, rng, info):
    usable = [i for i in range(len(members_anchor)) if len(members_anchor[i]) > 0]
    info.skipped_regions += len(members_anchor) - len(usable)
    if not usable:
        return None
    bg_key = np.asarray(bg_key, dtype=np.int64)
    if bg_key.size == 0:
        raise ArgumentError("background pool is empty; cannot draw negatives")
    key_norm = l2_normalize(_values(f_key))
    anchors = concat([regional_mean(f_anchor, members_anchor[i]) for i in usable], axis=0)
    a_count = len(usable)
    sims = matmul(anchors, transpose(key_norm))  # (A, n) cosine: rows are unit
    weights = soft_topk(sims, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)  # (A, n)

    neg_idx = np.empty((a_count, k), dtype=np.int64)
    for row in range(a_count):
        neg, rep = _draw(rng, bg_key, k)
        info.with_replacement |= rep
        neg_idx[row] = neg
    info.draws.append({"usable": usable, "neg_idx": neg_idx.copy()})

    rep_rows = np.repeat(np.arange(a_count), k)
    neg_sims = cosine_similarity(gather(anchors, rep_rows), gather(key_norm, neg_idx.reshape(-1)))
    neg_lse = logsumexp(div(reshape(neg_sims, (a_count, k)), Tensor(cfg.tau)))  # (A,)

    st = transpose(div(sims, Tensor(cfg.tau)))  # (n, A)
    pair_loss = sub(logsumexp2(st, neg_lse), st)  # (n, A)
    wt = transpose(weights)  # (n, A)
    wn = div(wt, tsum(wt, axis=0))  # convex weights per anchor
    per_anchor = tsum(mul(wn, pair_loss), axis=0)  # (A,)
    return tmean(per_anchor)


def match_and_loss_fea(f_a, f_b, members_a, members_b, bg_a, bg_b, cfg: LossConfig, k: int, seed: int = 0):
    """Symmetrized feature contrast with soft-top-k matched positives and
    foreground-background negatives. Returns (loss, FeaInfo)."""
    info = FeaInfo()
    rng = rng_for(seed, 0xFEA)
    ab = _fea_direction(f_a, f_b, members_a, bg_b, k, cfg, rng, info)
    ba = _fea_direction(f_b, f_a, members_b, bg_a, k, cfg, rng, info)
    if ab is None and ba is None:
        raise ContractError("no usable anchors in either direction")
    if ab is None:
        return ba, info
    if ba is None:
        return ab, info
    return mul(add(ab, ba), Tensor(0.5)), info


def loss_sum(l_geo: Tensor, l_fea: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * L_geo + beta * L_fea; gradient is the same weighted sum."""
    if not (math.isfinite(l_geo.item()) and math.isfinite(l_fea.item())):
        raise ArgumentError("loss components must be finite")
    return add(mul(l_geo, Tensor(alpha)), mul(l_fea, Tensor(beta)))

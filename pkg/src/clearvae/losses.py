"""Objective terms: reconstruction, split KL, contrastive and anti-contrastive
soft-nearest-neighbor losses, and the composite objective.

The contrastive losses share one body.  For each anchor the exponentiated
similarities to same-label and different-label partners are reduced with
log-sum-exp, and the per-anchor loss is

    snn:          softplus(lse_neg - lse_pos)   =  -log(pos / (pos + neg))
    pair-switch:  softplus(lse_pos - lse_neg)   =  -log(neg / (pos + neg))

which is exactly the negative log-ratio form but non-negative by construction
and immune to overflow/underflow at any temperature or similarity scale.
Anchors that have no partner on the side being rewarded (no positives for the
plain loss, no negatives for the switched loss) are dropped from the mean;
anchors whose other side is empty contribute exactly zero.

Similarity is pluggable: cosine or negative squared L2 on latent samples, or
negative Jeffrey divergence / negative symmetrized squared Mahalanobis
distance on the encoded diagonal Gaussians.  Distances are negated so larger
always means more similar.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import mi as mi_mod
from .autodiff import ContractViolation, Tensor

METRICS = ("cosine", "l2", "jeffrey", "mahalanobis")
VARIANTS = ("ps", "tc", "l1out", "club_s", "none")

_EPS = 1e-7


@dataclass
class ClearConfig:
    """Hyperparameters of the composite objective.

    Defaults are the cosine-metric configuration reported for 28x28 grayscale
    data: d_z = 16, alpha = 100, beta = 1/8, tau = 0.3, with alpha1 = alpha2.
    """
    beta: float = 0.125
    alpha1: float = 100.0
    alpha2: float = 100.0
    tau: float = 0.3
    metric: str = "cosine"
    variant: str = "ps"
    d_c: int = 8
    d_s: int = 8

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractViolation("tau must be positive")
        if self.beta <= 0:
            raise ContractViolation("beta must be positive")
        if self.metric not in METRICS:
            raise ContractViolation(f"unknown metric {self.metric!r}")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.d_c < 1 or self.d_s < 1:
            raise ContractViolation("latent partitions must be non-empty")

    @property
    def d_z(self) -> int:
        return self.d_c + self.d_s

    @classmethod
    def for_metric(cls, metric: str, **overrides) -> "ClearConfig":
        """Metric-appropriate (alpha, tau) defaults: distributional metrics
        run at tau = 10 with a 10x smaller contrastive weight."""
        base = {"metric": metric}
        if metric in ("jeffrey", "mahalanobis"):
            base.update(alpha1=10.0, alpha2=10.0, tau=10.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClearConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    """Scalar components of one objective evaluation."""
    recon: float
    kl_c: float
    kl_s: float
    snn_c: float
    style_term: float
    total: float

    def total_from_parts(self, config: ClearConfig) -> float:
        return (self.recon + config.beta * (self.kl_c + self.kl_s)
                + config.alpha1 * self.snn_c + config.alpha2 * self.style_term)

    def to_dict(self) -> dict:
        return asdict(self)


# -- elementary terms --------------------------------------------------------


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean pixelwise binary cross-entropy, intensities as Bernoulli means."""
    if x.shape != x_hat.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {x_hat.shape}")
    xh = ad.clip(x_hat, _EPS, 1.0 - _EPS)
    bce = -(x * ad.log(xh) + (1.0 - x) * ad.log(1.0 - xh))
    return ad.tmean(bce)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dims, batch-averaged."""
    if mu.shape != logvar.shape:
        raise ContractViolation("mu/logvar shape mismatch")
    inner = ad.exp(logvar) + mu * mu - 1.0 - logvar
    return ad.tsum(inner, axis=tuple(range(1, mu.data.ndim))).mean() * 0.5


# -- similarity metrics -------------------------------------------------------


def normalize_rows(z: Tensor) -> Tensor:
    norms = ad.sqrt(ad.tsum(z * z, axis=1, keepdims=True))
    if np.any(norms.data < 1e-12):
        raise ContractViolation("zero-norm vector under cosine similarity")
    return z / norms


def similarity_matrix(z, metric: str) -> Tensor:
    """Pairwise similarity; larger = more similar for every metric.

    `z` is a (n, d) tensor of latent points for cosine / l2, or a
    (mu, logvar) pair of (n, d) tensors for the distributional metrics.
    """
    if metric in ("cosine", "l2"):
        if isinstance(z, tuple):
            z = z[0]
        if metric == "cosine":
            zh = normalize_rows(z)
            return zh @ zh.T
        sq = ad.tsum(z * z, axis=1, keepdims=True)
        return -(sq + sq.T - 2.0 * (z @ z.T))
    if metric in ("jeffrey", "mahalanobis"):
        if not isinstance(z, tuple):
            raise ContractViolation(f"metric {metric!r} needs (mu, logvar)")
        mu, logvar = z
        n, d = mu.shape
        mu_i = ad.reshape(mu, (n, 1, d))
        mu_j = ad.reshape(mu, (1, n, d))
        inv_i = ad.reshape(ad.exp(-logvar), (n, 1, d))
        inv_j = ad.reshape(ad.exp(-logvar), (1, n, d))
        sq = (mu_i - mu_j) * (mu_i - mu_j)
        maha = 0.5 * ad.tsum(sq * (inv_i + inv_j), axis=2)
        if metric == "mahalanobis":
            return -maha
        var_i = ad.reshape(ad.exp(logvar), (n, 1, d))
        var_j = ad.reshape(ad.exp(logvar), (1, n, d))
        ratios = 0.5 * ad.tsum(var_i * inv_j + var_j * inv_i - 2.0, axis=2)
        return -(ratios + maha)
    raise ContractViolation(f"unknown metric {metric!r}")


def pair_similarity(code_i, code_j, metric: str, which: str = "c") -> float:
    """Similarity between two encoded samples on one latent partition.

    Vector metrics compare the variational means; distributional metrics use
    the full diagonal Gaussians.
    """
    if which not in ("c", "s"):
        raise ContractViolation("which must be 'c' or 's'")
    mu_a = np.asarray(getattr(code_i, f"mu_{which}").data, dtype=np.float64).reshape(-1)
    mu_b = np.asarray(getattr(code_j, f"mu_{which}").data, dtype=np.float64).reshape(-1)
    lv_a = np.asarray(getattr(code_i, f"logvar_{which}").data, dtype=np.float64).reshape(-1)
    lv_b = np.asarray(getattr(code_j, f"logvar_{which}").data, dtype=np.float64).reshape(-1)
    mu = Tensor(np.stack([mu_a, mu_b]))
    lv = Tensor(np.stack([lv_a, lv_b]))
    arg = (mu, lv) if metric in ("jeffrey", "mahalanobis") else mu
    return float(similarity_matrix(arg, metric).data[0, 1])


# -- contrastive losses -------------------------------------------------------


def _needs_grad(z) -> bool:
    if isinstance(z, tuple):
        return any(isinstance(t, Tensor) and t.requires_grad for t in z)
    return isinstance(z, Tensor) and z.requires_grad


def _as_array(z):
    if isinstance(z, tuple):
        return tuple(t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
                     for t in z)
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def _similarity_np(z, metric: str, scale: float = 1.0) -> np.ndarray:
    """Value-only twin of `similarity_matrix` (tested against it and against
    the naive oracles); used when no gradient is required.

    For the vector metrics a `scale` factor is folded into the latents before
    the matrix product, which multiplies the result by scale^2 without an
    extra pass over the n x n output.
    """
    if metric in ("cosine", "l2"):
        if isinstance(z, tuple):
            z = z[0]
        if metric == "cosine":
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            if np.any(norms < 1e-12):
                raise ContractViolation("zero-norm vector under cosine similarity")
            zh = z * (scale / norms)
            return zh @ zh.T
        zs = z * scale if scale != 1.0 else z
        sq = (zs * zs).sum(axis=1, keepdims=True)
        return -(sq + sq.T - 2.0 * (zs @ zs.T))
    if scale != 1.0:
        raise ContractViolation("similarity pre-scaling applies to vector metrics only")
    if not isinstance(z, tuple):
        raise ContractViolation(f"metric {metric!r} needs (mu, logvar)")
    mu, logvar = z
    inv = np.exp(-logvar)
    sq = (mu[:, None, :] - mu[None, :, :]) ** 2
    maha = 0.5 * (sq * (inv[:, None, :] + inv[None, :, :])).sum(axis=2)
    if metric == "mahalanobis":
        return -maha
    var = np.exp(logvar)
    ratios = 0.5 * (var[:, None, :] * inv[None, :, :]
                    + var[None, :, :] * inv[:, None, :] - 2.0).sum(axis=2)
    return -(ratios + maha)


def _softplus_np(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _masks(y, n: int):
    y = np.asarray(y).reshape(-1)
    if n < 2 or y.size != n:
        raise ContractViolation("need a batch of >= 2 labeled samples")
    eye = np.eye(n, dtype=bool)
    pos_mask = (y[:, None] == y[None, :]) & ~eye
    neg_mask = y[:, None] != y[None, :]
    return pos_mask, neg_mask


def _core_value_np(sim: np.ndarray, y, tau: float, switched: bool,
                   span_bound: float | None = None) -> float:
    """Loss value without a graph; identical math to the tensor path.

    `sim` is consumed (scaled, shifted and exponentiated in place).  Column
    sums per class replace explicit pair masks, so the hot path touches the
    n x n matrix a constant number of times.  `span_bound`, when known by the
    caller (cosine similarity spans at most 2), skips the underflow-risk scan.
    """
    n = sim.shape[0]
    y = np.asarray(y).reshape(-1)
    if n < 2 or y.size != n:
        raise ContractViolation("need a batch of >= 2 labeled samples")
    classes, codes = np.unique(y, return_inverse=True)
    counts = np.bincount(codes, minlength=classes.size)
    n_yi = counts[codes]
    pos_count = n_yi - 1
    neg_count = n - n_yi
    anchors = neg_count > 0 if switched else pos_count > 0
    if not anchors.any():
        raise ContractViolation("no negatives available" if switched
                                else "no contrastable anchors")
    contrib = anchors & (pos_count > 0) & (neg_count > 0)
    if not contrib.any():
        return 0.0

    a = sim
    if tau != 1.0:
        a /= tau
    # keep a copy when the similarity spread could underflow a whole side
    if span_bound is not None and span_bound / tau <= 700.0:
        backup = None
    else:
        backup = a.copy() if float(a.max() - a.min()) > 700.0 else None
    np.fill_diagonal(a, -np.inf)
    shift = a.max(axis=1)
    a -= shift[:, None]
    np.exp(a, out=a)  # diagonal exp(-inf) -> exactly 0
    onehot = np.zeros((n, classes.size))
    onehot[np.arange(n), codes] = 1.0
    class_sum = a @ onehot
    pos_sum = class_sum[np.arange(n), codes]
    # sum the other-class columns directly: subtracting pos_sum from the row
    # total would cancel catastrophically when one side dominates
    other = class_sum.copy()
    other[np.arange(n), codes] = 0.0
    neg_sum = other.sum(axis=1)

    idx = np.flatnonzero(contrib)
    ps, ns = pos_sum[idx], neg_sum[idx]
    if np.any(ps == 0.0) or np.any(ns == 0.0):
        # one side underflowed entirely: redo each side with its own shift
        rows = backup[idx]
        pos_mask, neg_mask = _masks(y, n)
        lses = []
        for mask in (pos_mask[idx], neg_mask[idx]):
            side_shift = np.max(np.where(mask, rows, -np.inf), axis=1, keepdims=True)
            e = np.exp(np.where(mask, rows - side_shift, -np.inf))
            lses.append(np.log(e.sum(axis=1)) + side_shift[:, 0])
        lse_pos, lse_neg = lses
        gap = lse_pos - lse_neg if switched else lse_neg - lse_pos
    else:
        gap = np.log(ps) - np.log(ns) if switched else np.log(ns) - np.log(ps)
    return float(_softplus_np(gap).sum() / anchors.sum())


def _contrastive_core(sim: Tensor, y, tau: float, switched: bool) -> Tensor:
    n = sim.shape[0]
    pos_mask, neg_mask = _masks(y, n)
    pos_count = pos_mask.sum(axis=1)
    neg_count = neg_mask.sum(axis=1)

    anchors = neg_count > 0 if switched else pos_count > 0
    if not anchors.any():
        raise ContractViolation("no negatives available" if switched
                                else "no contrastable anchors")
    contrib = np.flatnonzero(anchors & (pos_count > 0) & (neg_count > 0))
    if contrib.size == 0:
        return Tensor(0.0)

    scaled = sim * (1.0 / tau)
    rows = ad.take_rows(scaled, contrib)
    lse_pos = ad.masked_logsumexp_rows(rows, pos_mask[contrib])
    lse_neg = ad.masked_logsumexp_rows(rows, neg_mask[contrib])
    gap = lse_pos - lse_neg if switched else lse_neg - lse_pos
    return ad.tsum(ad.softplus(gap)) * (1.0 / int(anchors.sum()))


def snn_loss(z, y, tau: float = 0.3, metric: str = "cosine") -> Tensor:
    """Multi-positive contrastive loss: pull same-label latents together.

    Per anchor, -log(pos / (pos + neg)) with exponentiated similarities summed
    over same-label (pos) and different-label (neg) partners; mean over anchors
    that have at least one positive.
    """
    if tau <= 0:
        raise ContractViolation("tau must be positive")
    if not _needs_grad(z):
        return Tensor(_fast_contrastive(z, y, tau, metric, switched=False))
    return _contrastive_core(similarity_matrix(z, metric), y, tau, switched=False)


def ps_snn_loss(z, y, tau: float = 0.3, metric: str = "cosine") -> Tensor:
    """Pair-switched (anti-contrastive) loss: -log(neg / (pos + neg)).

    Positive and negative roles are exchanged relative to `snn_loss`, so
    minimizing it pushes same-label latents to be no closer than different-
    label ones.  Non-negative, and an upper bound for the label/latent mutual
    information minus log(batch size).
    """
    if tau <= 0:
        raise ContractViolation("tau must be positive")
    if not _needs_grad(z):
        value = _core_value_np(_similarity_np(_as_array(z), metric), y, tau, True,
                               span_bound=2.0 if metric == "cosine" else None)
        return Tensor(value)
    return _contrastive_core(similarity_matrix(z, metric), y, tau, switched=True)


# -- class-embedding reference forms ------------------------------------------


def class_embeddings(z: np.ndarray, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class mean of row-normalized latents: (classes, embeddings, counts)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ContractViolation("zero-norm vector under cosine similarity")
    zh = z / norms
    classes, codes = np.unique(np.asarray(y), return_inverse=True)
    emb = np.zeros((classes.size, z.shape[1]))
    counts = np.zeros(classes.size, dtype=int)
    for k in range(classes.size):
        members = codes == k
        counts[k] = members.sum()
        emb[k] = zh[members].mean(axis=0)
    return classes, emb, counts


def infonce_reference(z, y, tau: float = 0.3) -> float:
    """Single-positive contrastive form with in-batch class embeddings.

    The critic is h(k, z) = exp(<e_k, z_hat>/tau) with e_k the mean normalized
    latent of class k; the denominator sums h over every sample's class.
    Reference implementation used for bound checks, not for training.
    """
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    _, emb, counts = class_embeddings(z, y)
    _, codes = np.unique(y, return_inverse=True)
    zh = z / np.linalg.norm(z, axis=1, keepdims=True)
    logits = zh @ emb.T / tau
    shift = logits.max(axis=1, keepdims=True)
    h = np.exp(logits - shift)
    denom = (h * counts[None, :]).sum(axis=1)
    picked = h[np.arange(z.shape[0]), codes]
    return float(np.mean(-np.log(picked / denom)))


def ps_infonce_reference(z, y, tau: float = 0.3) -> float:
    """Pair-switched twin of `infonce_reference`: rewards the other classes."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    classes, emb, counts = class_embeddings(z, y)
    if classes.size < 2:
        raise ContractViolation("no negatives available")
    _, codes = np.unique(y, return_inverse=True)
    zh = z / np.linalg.norm(z, axis=1, keepdims=True)
    logits = zh @ emb.T / tau
    shift = logits.max(axis=1, keepdims=True)
    h = np.exp(logits - shift) * counts[None, :]
    denom = h.sum(axis=1)
    own = h[np.arange(z.shape[0]), codes]
    return float(np.mean(-np.log((denom - own) / denom)))


# -- composite objective -------------------------------------------------------


def clear_objective(x: Tensor, y, x_hat: Tensor, code, z_c: Tensor, z_s: Tensor,
                    config: ClearConfig, aux_net=None, discriminator=None,
                    rng=None) -> tuple[Tensor, LossBreakdown]:
    """Assemble the full objective for one batch.

    Returns the differentiable total and a float breakdown.  The style term is
    the pair-switched loss for the "ps" variant, an MI estimate for the
    auxiliary-network variants, and zero for "none" (plain beta-VAE).
    """
    recon = recon_loss(x, x_hat)
    kl_c = kl_diag_gaussian(code.mu_c, code.logvar_c)
    kl_s = kl_diag_gaussian(code.mu_s, code.logvar_s)

    if config.metric in ("jeffrey", "mahalanobis"):
        content_arg = (code.mu_c, code.logvar_c)
        style_arg = (code.mu_s, code.logvar_s)
    else:
        content_arg = z_c
        style_arg = z_s

    snn_c = snn_loss(content_arg, y, tau=config.tau, metric=config.metric)

    if config.variant == "ps":
        style = ps_snn_loss(style_arg, y, tau=config.tau, metric=config.metric)
    elif config.variant == "none":
        style = Tensor(0.0)
    elif config.variant == "l1out":
        if aux_net is None:
            raise ContractViolation("l1out variant needs an auxiliary net")
        style = mi_mod.l1out_ub(z_s, z_c, aux_net)
    elif config.variant == "club_s":
        if aux_net is None or rng is None:
            raise ContractViolation("club_s variant needs an auxiliary net and rng")
        style = mi_mod.club_s(z_s, z_c, aux_net, rng)
    else:  # tc
        if discriminator is None:
            raise ContractViolation("tc variant needs a discriminator")
        style = mi_mod.tc_estimate(z_c, z_s, discriminator)

    total = (recon + config.beta * (kl_c + kl_s)
             + config.alpha1 * snn_c + config.alpha2 * style)
    breakdown = LossBreakdown(
        recon=recon.item(), kl_c=kl_c.item(), kl_s=kl_s.item(),
        snn_c=snn_c.item(), style_term=style.item(), total=total.item())
    return total, breakdown

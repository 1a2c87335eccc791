"""Mutual-information estimation and disentanglement metrics.

Three families live here:

* a nonparametric KNN estimator for MI between a discrete label and a
  continuous vector (nearest-neighbor radii within the label class, counts in
  the pooled sample, digamma correction), used for the simulation study and
  for the group mutual-information-gap metrics;
* variational bounds (leave-one-out upper bound and the sampled contrastive
  log-ratio bound) computed through an auxiliary conditional Gaussian network,
  differentiable so they can serve as training penalties;
* a total-correlation estimate read off an adversarial discriminator's density
  ratio.

KNN distances are Chebyshev (max-coordinate).  Estimates are clipped below at
zero; the unclipped value is retained in the report since the estimator can go
slightly negative on small samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

_LOG_2PI = float(np.log(2.0 * np.pi))


def digamma(x) -> np.ndarray:
    """Digamma via upward recurrence into the asymptotic series (|err| < 1e-10)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ContractViolation("digamma defined here for positive arguments only")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    out = np.zeros_like(x)
    while True:
        small = x < 8.0
        if not small.any():
            break
        out[small] -= 1.0 / x[small]
        x[small] += 1.0
    u = 1.0 / (x * x)
    tail = u * (1 / 12 - u * (1 / 120 - u * (1 / 252 - u * (1 / 240 - u * (1 / 132)))))
    out += np.log(x) - 0.5 / x - tail
    return out[0] if scalar else out


def label_entropy(y) -> float:
    """Empirical entropy of a discrete label array, in nats."""
    y = np.asarray(y)
    _, counts = np.unique(y, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def chebyshev_pairwise(z: np.ndarray) -> np.ndarray:
    """Dense max-coordinate distance matrix; O(n^2 d) but desk-scale fast."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    d = np.empty((n, n))
    np.subtract(z[:, None, 0], z[None, :, 0], out=d)
    np.abs(d, out=d)
    if z.shape[1] > 1:
        tmp = np.empty((n, n))
        for j in range(1, z.shape[1]):
            np.subtract(z[:, None, j], z[None, :, j], out=tmp)
            np.abs(tmp, out=tmp)
            np.maximum(d, tmp, out=d)
    return d


@dataclass
class MiEstimate:
    """One mutual-information estimate, in nats."""
    value: float
    method: str
    n: int
    k: int | None = None
    raw_value: float | None = None


def knn_mi(z, y, k: int = 3) -> MiEstimate:
    """Discrete-continuous MI via same-class k-th-neighbor radii.

    For each point, the Chebyshev distance to its k-th nearest neighbor inside
    its own class sets a radius; `m_i` counts pooled-sample neighbors within
    that radius.  The estimate is

        psi(n) - <psi(n_y)> + <psi(k_i)> - <psi(m_i)>

    with k reduced per-point (with a warning) when a class is too small.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    y = np.asarray(y)
    n = z.shape[0]
    if y.shape[0] != n:
        raise ContractViolation("z and y length mismatch")
    if n < 3 * k:
        raise ContractViolation(f"need n >= 3k samples, got n={n}, k={k}")
    classes, y_codes = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ContractViolation("need at least 2 classes")

    radii = np.full(n, np.nan)
    k_local = np.zeros(n, dtype=int)
    class_size = np.zeros(n, dtype=int)
    for c in range(classes.size):
        idx = np.flatnonzero(y_codes == c)
        class_size[idx] = idx.size
        if idx.size < 2:
            continue
        kc = min(k, idx.size - 1)
        tree = cKDTree(z[idx])
        dist, _ = tree.query(z[idx], k=kc + 1, p=np.inf)
        radii[idx] = dist[:, kc]
        k_local[idx] = kc

    keep = k_local > 0
    if not keep.all():
        warnings.warn("singleton classes dropped from the KNN MI estimate")
    if (k_local[keep] < k).any():
        warnings.warn("neighbor count reduced for classes smaller than k+1")

    pooled = cKDTree(z)
    m = pooled.query_ball_point(z[keep], r=radii[keep], p=np.inf,
                                return_length=True) - 1
    raw = float(digamma(n)
                - digamma(class_size[keep]).mean()
                + digamma(k_local[keep]).mean()
                - digamma(m).mean())
    return MiEstimate(value=max(0.0, raw), method="knn", n=n, k=k, raw_value=raw)


def mig(z, y, k: int = 3) -> float:
    """Normalized gap between the two most label-informative latent dimensions."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractViolation("mig needs at least two latent dimensions")
    per_dim = np.array([knn_mi(z[:, j], y, k=k).value for j in range(z.shape[1])])
    top_two = np.sort(per_dim)[-2:]
    return float((top_two[1] - top_two[0]) / label_entropy(y))


@dataclass
class GmigReport:
    """Group mutual-information gap between content and style partitions."""
    gmig: float
    h_y: float
    mi_c: list = field(default_factory=list)
    mi_s: list = field(default_factory=list)
    method: str = "knn"
    k: int = 3
    n: int = 0

    def to_dict(self) -> dict:
        return {"gmig": self.gmig, "h_y": self.h_y, "mi_c": list(self.mi_c),
                "mi_s": list(self.mi_s), "method": self.method, "k": self.k,
                "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "GmigReport":
        return cls(gmig=d["gmig"], h_y=d["h_y"], mi_c=list(d["mi_c"]),
                   mi_s=list(d["mi_s"]), method=d["method"], k=d["k"], n=d["n"])


def gmig(z_c, z_s, y, k: int = 3) -> GmigReport:
    """Difference of group-mean per-dimension MI with the label, over H(y)."""
    z_c = np.asarray(z_c, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_c.ndim == 1:
        z_c = z_c[:, None]
    if z_s.ndim == 1:
        z_s = z_s[:, None]
    if z_c.shape[1] == 0 or z_s.shape[1] == 0:
        raise ContractViolation("both latent groups must be non-empty")
    h = label_entropy(y)
    if h == 0.0:
        raise ContractViolation("gMIG undefined for a single-class label")
    mi_c = [knn_mi(z_c[:, j], y, k=k).value for j in range(z_c.shape[1])]
    mi_s = [knn_mi(z_s[:, j], y, k=k).value for j in range(z_s.shape[1])]
    value = (float(np.mean(mi_c)) - float(np.mean(mi_s))) / h
    return GmigReport(gmig=value, h_y=h, mi_c=mi_c, mi_s=mi_s, k=k,
                      n=z_c.shape[0])


# -- variational bounds through an auxiliary conditional Gaussian ------------


def conditional_logpdf_matrix(z_s: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """L[i, j] = log density of style code i under the net's prediction from
    content code j (diagonal Gaussian)."""
    n, d = z_s.shape
    zi = ad.reshape(z_s, (n, 1, d))
    mj = ad.reshape(mu, (1, n, d))
    lvj = ad.reshape(logvar, (1, n, d))
    diff = zi - mj
    quad = diff * diff * ad.exp(-lvj)
    return ad.tsum(quad + lvj + Tensor(_LOG_2PI), axis=2) * Tensor(-0.5)


def l1out_ub(z_s: Tensor, z_c: Tensor, aux_net) -> Tensor:
    """Leave-one-out variational MI upper bound (differentiable scalar).

    mean_i [ log q(z_s_i | z_c_i) - log( (1/(N-1)) sum_{j != i} q(z_s_i | z_c_j) ) ]
    """
    n = z_s.shape[0]
    if n < 2:
        raise ContractViolation("leave-one-out bound needs at least 2 samples")
    mu, logvar = aux_net(z_c)
    L = conditional_logpdf_matrix(z_s, mu, logvar)
    diag = ad.getitem(L, (np.arange(n), np.arange(n)))
    off = ~np.eye(n, dtype=bool)
    lse = ad.masked_logsumexp_rows(L, off)
    return ad.tmean(diag - lse + Tensor(np.log(n - 1.0)))


def club_s(z_s: Tensor, z_c: Tensor, aux_net, rng) -> Tensor:
    """Sampled contrastive log-ratio bound: positive minus one resampled negative."""
    n = z_s.shape[0]
    mu, logvar = aux_net(z_c)
    neg_idx = np.asarray(rng.integers(0, n, (n,)), dtype=np.intp)
    z_neg = Tensor(z_s.data[neg_idx])
    quad_pos = (z_s - mu) * (z_s - mu) * ad.exp(-logvar)
    quad_neg = (z_neg - mu) * (z_neg - mu) * ad.exp(-logvar)
    ll_pos = ad.tsum(quad_pos + logvar + Tensor(_LOG_2PI), axis=1) * Tensor(-0.5)
    ll_neg = ad.tsum(quad_neg + logvar + Tensor(_LOG_2PI), axis=1) * Tensor(-0.5)
    return ad.tmean(ll_pos - ll_neg)


def aux_nll(z_s: Tensor, z_c: Tensor, aux_net) -> Tensor:
    """Negative conditional log-likelihood used to fit the auxiliary net."""
    mu, logvar = aux_net(z_c)
    quad = (z_s - mu) * (z_s - mu) * ad.exp(-logvar)
    ll = ad.tsum(quad + logvar + Tensor(_LOG_2PI), axis=1) * Tensor(-0.5)
    return -ad.tmean(ll)


def tc_estimate(z_c: Tensor, z_s: Tensor, discriminator) -> Tensor:
    """Total-correlation surrogate: mean ReLU of the discriminator's log-ratio.

    The log density ratio log(D/(1-D)) is read from the discriminator's
    pre-sigmoid output, which is the same quantity without saturation.
    """
    logits = discriminator.logits(ad.concat([z_c, z_s], axis=1))
    with np.errstate(over="ignore"):
        probs = 1.0 / (1.0 + np.exp(-logits.data))
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise ad.NumericFault("discriminator probability left the open interval (0,1)")
    return ad.tmean(ad.relu(logits))


def shuffle_decouple(z):
    """Cyclic shift along the batch axis: keeps marginals, breaks the joint."""
    if isinstance(z, Tensor):
        if z.shape[0] < 2:
            raise ContractViolation("need at least 2 rows to decouple")
        return ad.roll(z, 1, axis=0)
    z = np.asarray(z)
    if z.shape[0] < 2:
        raise ContractViolation("need at least 2 rows to decouple")
    return np.roll(z, 1, axis=0)


# -- rank statistics ----------------------------------------------------------


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.arange(1, x.size + 1, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = ranks[order[i:j + 1]].mean()
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < 3:
        raise ContractViolation("spearman_rho needs two equal-length series, n >= 3")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)

"""Training objectives: cross-entropy, pairwise posterior-alignment (KL),
and the two feature-alignment baselines (RBF-kernel MMD and same-class
cross-domain distance).

All functions accept plain arrays or graph-attached tensors; losses built
on attached tensors are differentiable through the recording graph. The
posterior-alignment loss works on log-space posteriors throughout, so no
probability clamping is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

__all__ = [
    "BatchLabels",
    "LossBreakdown",
    "cross_entropy",
    "hir_kl",
    "combined_loss",
    "mmd_rbf",
    "class_conditional_align",
    "domain_mmd_penalty",
    "median_bandwidth",
    "same_class_pairs",
]


@dataclass
class BatchLabels:
    """Per-sample class labels, source-domain indices and optional pair ids.

    ``pair_id`` marks paired provenance: rows sharing a pair id are the same
    base point observed under different domains. ``None`` means unpaired.
    """

    labels: np.ndarray
    domains: np.ndarray | None = None
    pair_id: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
            if self.domains.shape != self.labels.shape:
                raise ContractError("domains and labels must have the same length")
        if self.pair_id is not None:
            self.pair_id = np.asarray(self.pair_id, dtype=np.int64).reshape(-1)
            if self.pair_id.shape != self.labels.shape:
                raise ContractError("pair_id and labels must have the same length")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def paired(self) -> bool:
        return self.pair_id is not None


@dataclass
class LossBreakdown:
    """One objective evaluation: L = classification + alpha * hir.

    ``hir`` is None when the alignment term was never constructed
    (alpha == 0), in which case ``combined`` is the classification tensor
    itself. ``pair_count`` is the number of KL terms summed.
    """

    classification: Tensor
    hir: Tensor | None
    combined: Tensor
    alpha: float
    pair_count: int

    @property
    def classification_value(self) -> float:
        return self.classification.item()

    @property
    def hir_value(self) -> float:
        return 0.0 if self.hir is None else self.hir.item()

    @property
    def combined_value(self) -> float:
        return self.combined.item()


def _label_info(labels) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(labels, BatchLabels):
        return labels.labels, labels.domains
    return np.asarray(labels, dtype=np.int64).reshape(-1), None


def cross_entropy(log_probs, labels) -> Tensor:
    """Mean negative log-probability of the true class.

    ``log_probs`` rows are log-space posteriors (as from ``log_softmax``);
    the one-hot form of the usual sum reduces to picking one entry per row.
    """
    log_probs = ad.as_tensor(log_probs)
    y, _ = _label_info(labels)
    n, m = log_probs.shape
    if y.size != n:
        raise ContractError(f"{y.size} labels for {n} rows")
    if n < 1:
        raise ContractError("cross_entropy needs at least one sample")
    if y.min() < 0 or y.max() >= m:
        raise ContractError(f"label out of range [0, {m})")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), y] = 1.0
    return ad.sum_all(log_probs * ad.tensor(onehot)) * (-1.0 / n)


def same_class_pairs(labels, domains: np.ndarray | None = None,
                     cross_domain_only: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j), i < j in batch order, with equal class labels.

    With ``cross_domain_only`` the pair must also span two different
    domains. Classes with fewer than two samples contribute no pairs.
    """
    y, doms = _label_info(labels)
    if domains is not None:
        doms = np.asarray(domains, dtype=np.int64).reshape(-1)
    if cross_domain_only and doms is None:
        raise ContractError("cross_domain_only needs domain indices")
    firsts, seconds = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < 2:
            continue
        iu, ju = np.triu_indices(idx.size, k=1)
        firsts.append(idx[iu])
        seconds.append(idx[ju])
    if not firsts:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    i_idx = np.concatenate(firsts)
    j_idx = np.concatenate(seconds)
    if cross_domain_only:
        keep = doms[i_idx] != doms[j_idx]
        i_idx, j_idx = i_idx[keep], j_idx[keep]
    return i_idx, j_idx


def hir_kl(log_probs, labels, cross_domain_only: bool = False,
           normalize: bool = False, symmetric: bool = False) -> tuple[Tensor, int]:
    """Posterior-alignment loss: summed KL divergence over same-class pairs.

    For every same-class ordered pair (i, j) with i earlier in the batch,
    adds KL(p_i || p_j) = sum_k p_i[k] * (log p_i[k] - log p_j[k]) with
    p = exp(log_probs), one direction per pair. Each class is handled
    separately and the per-class sums are added. Returns the loss and the
    number of KL terms.

    ``symmetric`` additionally sums the reverse direction of every pair
    (doubling the term count); ``normalize`` divides by the term count so
    the scale is decoupled from batch size; ``cross_domain_only`` drops
    pairs drawn from a single domain.
    """
    log_probs = ad.as_tensor(log_probs)
    i_idx, j_idx = same_class_pairs(labels, cross_domain_only=cross_domain_only)
    if symmetric:
        i_idx, j_idx = np.concatenate([i_idx, j_idx]), np.concatenate([j_idx, i_idx])
    pair_count = int(i_idx.size)
    if pair_count == 0:
        return ad.tensor(0.0), 0
    lp_i = ad.gather_rows(log_probs, i_idx)
    lp_j = ad.gather_rows(log_probs, j_idx)
    total = ad.sum_all(ad.exp(lp_i) * (lp_i - lp_j))
    if normalize:
        total = total * (1.0 / pair_count)
    return total, pair_count


def pairwise_kl(log_probs, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Detached per-pair KL values for every same-class pair (i < j).

    Returns (i_idx, j_idx, kl) as plain arrays; their sum equals the
    default ``hir_kl`` loss value.
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    i_idx, j_idx = same_class_pairs(labels)
    if i_idx.size == 0:
        return i_idx, j_idx, np.empty(0)
    lp_i, lp_j = lp[i_idx], lp[j_idx]
    kl = np.sum(np.exp(lp_i) * (lp_i - lp_j), axis=1)
    return i_idx, j_idx, kl


def combined_loss(log_probs, labels, alpha: float, cross_domain_only: bool = False,
                  normalize_hir: bool = False) -> LossBreakdown:
    """Classification loss plus ``alpha`` times the posterior-alignment loss.

    alpha == 0 skips the alignment term entirely: the combined tensor IS
    the classification tensor, so the recorded graph is identical to one
    that never knew about alignment.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    classification = cross_entropy(log_probs, labels)
    if alpha == 0:
        return LossBreakdown(classification, None, classification, 0.0, 0)
    hir, pair_count = hir_kl(log_probs, labels, cross_domain_only=cross_domain_only,
                             normalize=normalize_hir)
    combined = classification + hir * alpha
    return LossBreakdown(classification, hir, combined, alpha, pair_count)


def mmd_rbf(z_a, z_b, bandwidth: float) -> Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    mean k(a, a') + mean k(b, b') - 2 mean k(a, b), where
    k(u, v) = exp(-||u - v||^2 / (2 * bandwidth^2)).
    """
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    z_a, z_b = ad.as_tensor(z_a), ad.as_tensor(z_b)
    gamma = -1.0 / (2.0 * bandwidth * bandwidth)

    def block_mean(u: Tensor, v: Tensor) -> Tensor:
        p, q = u.shape[0], v.shape[0]
        rows = ad.gather_rows(u, np.repeat(np.arange(p), q))
        cols = ad.gather_rows(v, np.tile(np.arange(q), p))
        diff = rows - cols
        sq_dist = ad.row_sum(diff * diff)
        return ad.sum_all(ad.exp(sq_dist * gamma)) * (1.0 / (p * q))

    return block_mean(z_a, z_a) + block_mean(z_b, z_b) + block_mean(z_a, z_b) * (-2.0)


def median_bandwidth(z, fallback: float = 1.0) -> float:
    """Median pairwise Euclidean distance; ``fallback`` if it degenerates."""
    arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    n = arr.shape[0]
    if n < 2:
        return fallback
    sq = np.sum(arr * arr, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (arr @ arr.T), 0.0)
    med = float(np.median(np.sqrt(d2[np.triu_indices(n, k=1)])))
    return med if med > 0 else fallback


def class_conditional_align(z, labels, domains=None) -> Tensor:
    """Mean squared distance between same-class rows from different domains.

    Zero when the batch has no cross-domain same-class pair.
    """
    z = ad.as_tensor(z)
    i_idx, j_idx = same_class_pairs(labels, domains=domains, cross_domain_only=True)
    if i_idx.size == 0:
        return ad.tensor(0.0)
    diff = ad.gather_rows(z, i_idx) - ad.gather_rows(z, j_idx)
    return ad.sum_all(diff * diff) * (1.0 / i_idx.size)


def domain_mmd_penalty(z, domains, bandwidth: float | None = None) -> Tensor:
    """Mean RBF MMD between the z-rows of every pair of domains in the batch.

    Bandwidth defaults to the median pairwise-distance heuristic over the
    whole batch, computed on detached values (it is a constant of the loss,
    not differentiated).
    """
    z = ad.as_tensor(z)
    doms = np.asarray(domains, dtype=np.int64).reshape(-1)
    if doms.size != z.shape[0]:
        raise ContractError("one domain index per z row required")
    if bandwidth is None:
        bandwidth = median_bandwidth(z.data)
    present = np.unique(doms)
    terms = []
    for a_pos, a in enumerate(present):
        for b in present[a_pos + 1:]:
            terms.append(mmd_rbf(ad.gather_rows(z, np.flatnonzero(doms == a)),
                                 ad.gather_rows(z, np.flatnonzero(doms == b)),
                                 bandwidth))
    if not terms:
        return ad.tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))

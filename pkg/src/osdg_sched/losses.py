"""Loss terms: branch-discrepancy regularizer, evidential loss, weighted
classification losses, follower regression, and confidence scoring.

The discrepancy regularizer is a Gaussian-kernel two-sample statistic in its
biased (full Gram, diagonal included) form, which keeps it non-negative. The
evidential loss treats per-class evidence `e >= 0` as Dirichlet parameters
`alpha = e + 1` with total strength `S = sum(alpha)` and penalizes
`log S - log alpha_true`, minus the discrepancy term (so minimizing the loss
maximizes branch discrepancy).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "median_bandwidth",
    "rebias_discrepancy",
    "evidential_nll",
    "evidential_loss",
    "conf",
    "conf_evidential",
    "follower_loss",
    "classification_loss",
]


_triu_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def median_bandwidth(f1: np.ndarray, f2: np.ndarray) -> float:
    """Median pairwise distance of the concatenated batch; 1.0 if degenerate.

    Computed on plain values (never differentiated).
    """
    z = np.concatenate([np.asarray(f1, dtype=np.float64), np.asarray(f2, dtype=np.float64)])
    sq = (z * z).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    n = z.shape[0]
    if n not in _triu_cache:
        _triu_cache[n] = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[_triu_cache[n]], 0.0))))
    return med if med > 0.0 else 1.0


def rebias_discrepancy(f1: Tensor, f2: Tensor, bandwidth: float) -> Tensor:
    """mean K(f1,f1) + mean K(f2,f2) - 2 mean K(f1,f2) with a Gaussian kernel.

    Full-Gram (biased) estimate, hence always >= 0 up to rounding.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"rebias_discrepancy: shapes {f1.shape} and {f2.shape} differ")
    if f1.shape[0] < 2:
        raise ValueError("rebias_discrepancy: need at least 2 rows per batch")
    k11 = ad.gaussian_gram(f1, f1, bandwidth).mean()
    k22 = ad.gaussian_gram(f2, f2, bandwidth).mean()
    k12 = ad.gaussian_gram(f1, f2, bandwidth).mean()
    return k11 + k22 - 2.0 * k12


def _check_evidence(evidence: Tensor, y_onehot: np.ndarray) -> None:
    if np.any(evidence.data < 0):
        idx = tuple(int(i) for i in np.argwhere(evidence.data < 0)[0])
        raise ValueError(f"evidence must be non-negative; negative entry at {idx}")
    if evidence.shape != y_onehot.shape:
        raise ShapeError(f"evidence shape {evidence.shape} != labels shape {y_onehot.shape}")


def _dirichlet_nll_rows(evidence: Tensor, y: np.ndarray) -> Tensor:
    """Per-sample sum_c y_c (log S - log alpha_c) with alpha = evidence + 1.

    Fused kernel: gradient w.r.t. evidence is y.sum(1)/S - y/alpha.
    """
    alpha = evidence.data + 1.0
    s = alpha.sum(axis=1, keepdims=True)
    rows = (y * (np.log(s) - np.log(alpha))).sum(axis=1)

    def backward_fn(g):
        return ((y.sum(axis=1, keepdims=True) / s - y / alpha) * np.asarray(g)[:, None],)

    return ad.apply_op("dirichlet_nll", (evidence,), rows, backward_fn)


def evidential_nll(evidence1: Tensor, evidence2: Tensor, y_onehot: np.ndarray) -> Tensor:
    """Batch mean of sum_i [log S_i - log(e_true,i + 1)] over both branches."""
    y = np.asarray(y_onehot, dtype=np.float64)
    _check_evidence(evidence1, y)
    _check_evidence(evidence2, y)
    return (_dirichlet_nll_rows(evidence1, y) + _dirichlet_nll_rows(evidence2, y)).mean()


def evidential_loss(
    evidence1: Tensor,
    evidence2: Tensor,
    y_onehot: np.ndarray,
    f1: Tensor,
    f2: Tensor,
    bandwidth: float,
) -> Tensor:
    """Evidential term minus the branch discrepancy (the discrepancy is maximized)."""
    return evidential_nll(evidence1, evidence2, y_onehot) - rebias_discrepancy(f1, f2, bandwidth)


def conf(cls_logits: np.ndarray | Tensor) -> np.ndarray:
    """Maximum softmax probability per row, shape (n, 1). Not differentiated;
    used only as detached supervision and probe scores."""
    z = cls_logits.data if isinstance(cls_logits, Tensor) else np.asarray(cls_logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"conf: expected (n, C>=2) logits, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p.max(axis=1, keepdims=True)


def conf_evidential(evidence: np.ndarray | Tensor) -> np.ndarray:
    """Dirichlet certainty 1 - C/S per row, shape (n, 1)."""
    e = evidence.data if isinstance(evidence, Tensor) else np.asarray(evidence, dtype=np.float64)
    c = e.shape[1]
    s = (e + 1.0).sum(axis=1, keepdims=True)
    return 1.0 - c / s


def follower_loss(follower_out: Tensor, conf_target: np.ndarray) -> Tensor:
    """MSE against a detached confidence target; gradients reach only the follower."""
    target = np.asarray(conf_target, dtype=np.float64)
    if follower_out.shape != target.shape:
        raise ShapeError(
            f"follower_loss: output shape {follower_out.shape} != target shape {target.shape}")
    return (follower_out - Tensor(target)).square().mean()


def _cross_entropy_rows(logits: Tensor, y: np.ndarray) -> Tensor:
    """Per-sample softmax cross entropy against (possibly soft) targets.

    Fused kernel: gradient w.r.t. logits is p - y (times the row weight).
    """
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    rows = (m + np.log(se)).reshape(-1) * y.sum(axis=1) - (z * y).sum(axis=1)
    p = e / se

    def backward_fn(g):
        return ((p * y.sum(axis=1, keepdims=True) - y) * np.asarray(g)[:, None],)

    return ad.apply_op("cross_entropy", (logits,), rows, backward_fn)


def _binary_cross_entropy_rows(logits: Tensor, y: np.ndarray) -> Tensor:
    """Per-sample one-vs-all sigmoid BCE, averaged over classes.

    Fused kernel: gradient w.r.t. logits is (sigmoid(z) - y) / C.
    """
    z = logits.data
    c = z.shape[1]
    sp_pos = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))  # softplus(z)
    rows = (y * (sp_pos - z) + (1.0 - y) * sp_pos).mean(axis=1)  # softplus(-z) = softplus(z) - z
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)

    def backward_fn(g):
        return ((sig - y) / c * np.asarray(g)[:, None],)

    return ad.apply_op("binary_cross_entropy", (logits,), rows, backward_fn)


def _weighted_mean(per_sample: Tensor, weights: np.ndarray, wsum: float) -> Tensor:
    return ad.mul(per_sample, Tensor(weights)).sum() * (1.0 / wsum)


def classification_loss(
    cls_logits1: Tensor,
    cls_logits2: Tensor,
    bcls_logits1: Tensor,
    bcls_logits2: Tensor,
    y_onehot: np.ndarray,
    weights: np.ndarray,
) -> Tensor:
    """Per-branch weighted cross entropy plus one-vs-all sigmoid BCE.

    Per-sample weights are normalized by their sum, so duplicating a sample
    equals doubling its weight. The BCE term is averaged over classes.
    """
    y = np.asarray(y_onehot, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    if w.shape[0] != n:
        raise ShapeError(f"classification_loss: {w.shape[0]} weights for {n} samples")
    if np.any(w <= 0):
        raise ValueError(f"classification_loss: non-positive weight at index "
                         f"{int(np.argmax(w <= 0))}")
    wsum = float(w.sum())
    total = None
    for cls_logits, bcls_logits in ((cls_logits1, bcls_logits1), (cls_logits2, bcls_logits2)):
        if cls_logits.shape != y.shape or bcls_logits.shape != y.shape:
            raise ShapeError(
                f"classification_loss: logits shapes {cls_logits.shape}/{bcls_logits.shape} "
                f"!= labels shape {y.shape}")
        branch = (_weighted_mean(_cross_entropy_rows(cls_logits, y), w, wsum)
                  + _weighted_mean(_binary_cross_entropy_rows(bcls_logits, y), w, wsum))
        total = branch if total is None else total + branch
    return total

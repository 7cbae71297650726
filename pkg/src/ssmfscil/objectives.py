"""Fixed-prototype classifier and the class-sensitive training objectives.

The classifier is a simplex equiangular tight frame: K unit prototypes with
every pairwise inner product equal to -1/(K-1).  It is constructed once for
the full class count and never trained; sessions reveal prototypes
progressively as their classes appear.

Training pulls l2-normalized representations onto their prototype with a
dot-regression loss.  During incremental sessions two regularizers act on
the incremental branch: a norm term that suppresses its gate stream on
old-class inputs and rewards it on new-class inputs, and a separation term
that pushes the group-averaged scan parameters of the two class groups
toward orthogonality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .branch import BranchAux
from .tensor import Tensor, l2_norm, zeros

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


class ZeroNormError(ValueError):
    """A representation with zero norm cannot be projected onto a prototype."""


@dataclass(frozen=True)
class EtfClassifier:
    """K_total fixed unit prototypes with maximal equiangular separation."""

    prototypes: np.ndarray  # [K_total, D']

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def build_etf(k_total: int, d_prime: int, seed: int, dtype=np.float64) -> EtfClassifier:
    """Simplex frame of k_total prototypes embedded in d_prime dimensions.

    Needs d_prime >= k_total - 1 (the simplex spans k_total - 1 dims).  The
    rotation into feature space is drawn from `seed`, so frames are
    reproducible.
    """
    if k_total < 2:
        raise ValueError("need at least two classes")
    if d_prime < k_total - 1:
        raise ValueError(f"d_prime={d_prime} too small for {k_total} prototypes "
                         f"(needs >= {k_total - 1})")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(k_total / (k_total - 1.0))
    if d_prime >= k_total:
        u, _ = np.linalg.qr(rng.standard_normal((d_prime, k_total)))
        centering = np.eye(k_total) - np.ones((k_total, k_total)) / k_total
        w = scale * (u @ centering).T  # rows are prototypes
    else:
        # d_prime == k_total - 1: orthonormal basis of the all-ones complement
        # gives the simplex directly, then a random rotation embeds it.
        ones = np.full((k_total, 1), 1.0 / np.sqrt(k_total))
        q, _ = np.linalg.qr(np.concatenate([ones, rng.standard_normal((k_total, k_total - 1))], axis=1))
        v = q[:, 1:]  # [K, K-1], rows v_i with v_i . v_j = delta_ij - 1/K
        r, _ = np.linalg.qr(rng.standard_normal((d_prime, k_total - 1)))
        w = scale * (v @ r.T)
    return EtfClassifier(prototypes=np.ascontiguousarray(w.astype(dtype)))


@dataclass(frozen=True)
class LossWeights:
    """Weights for the suppression (lambda1, lambda2) and separation
    (lambda3) terms.  Paper-faithful runs keep lambda1 in [50, 200],
    lambda2 in [0.001, 1] and lambda3 in [0.05, 0.5]; ablations may use 0."""

    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")

    def in_reference_range(self) -> bool:
        return (50 <= self.lambda1 <= 200 and 0.001 <= self.lambda2 <= 1
                and 0.05 <= self.lambda3 <= 0.5)


def dr_loss(mu: Tensor, labels: np.ndarray, etf: EtfClassifier) -> Tensor:
    """Mean over the batch of 0.5 * (w_y . mu_hat - 1)^2.

    mu is normalized per sample first, so the loss is invariant to positive
    rescaling.  Zero-norm rows and out-of-range labels are errors.
    """
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= etf.num_classes:
        raise ValueError("label outside classifier range")
    norms = l2_norm(mu, axis=1, keepdims=True)
    if (norms.data < NORM_EPS).any():
        raise ZeroNormError("zero-norm representation in dr_loss")
    mu_hat = mu / norms
    w = etf.prototypes[labels].astype(mu.data.dtype)  # [N, D'], constant
    scores = (mu_hat * Tensor(w)).sum(axis=1)
    return (0.5 * (scores - 1.0) ** 2).mean()


def _mean_square(z: Tensor) -> Tensor:
    return (z * z).mean()


def suppression_loss(z_base: Tensor | None, z_novel: Tensor | None,
                     lambda1: float, lambda2: float, dtype=np.float64) -> Tensor:
    """lambda1 * mean-square(gate | base) - lambda2 * mean-square(gate | novel).

    The mean runs over every entry (samples x positions x channels), which
    matches the 1/(count*L*D') normalization of the squared norms.  An
    empty group contributes zero.
    """
    total = zeros((), dtype=dtype)
    if z_base is not None and z_base.size:
        total = total + lambda1 * _mean_square(z_base)
    if z_novel is not None and z_novel.size:
        total = total - lambda2 * _mean_square(z_novel)
    return total


def average_scan_params(seq: Tensor, base_mask: np.ndarray):
    """Group means of a per-position parameter sequence.

    seq: [N, K, L, F] (sample, direction, position, feature); the mean runs
    over samples in the group, all K directions and all L positions, leaving
    the feature axis.  A group with no samples yields None, which signals
    callers to skip the separation term for that step.
    """
    base_mask = np.asarray(base_mask, dtype=bool)
    if base_mask.shape[0] != seq.shape[0]:
        raise ValueError("mask length does not match sample count")

    def group(mask):
        if not mask.any():
            return None
        return seq[np.nonzero(mask)[0]].mean(axis=(0, 1, 2))

    return group(base_mask), group(~base_mask)


def separation_loss(avg_base: tuple, avg_novel: tuple, dtype=np.float64) -> Tensor:
    """Sum of |cos| between base and novel group averages of (b, c, delta).

    Ranges over [0, 3].  A zero-norm average makes the cosine undefined;
    that pair is skipped with a warning rather than raised.
    """
    total = zeros((), dtype=dtype)
    for name, pb, pn in zip(("b", "c", "delta"), avg_base, avg_novel):
        if pb is None or pn is None:
            raise ValueError("separation loss needs both group averages")
        nb = l2_norm(pb)
        nn = l2_norm(pn)
        if nb.data < NORM_EPS or nn.data < NORM_EPS:
            log.warning("separation term for %s skipped: zero-norm group average", name)
            continue
        total = total + ((pb * pn).sum() / (nb * nn)).abs()
    return total


def base_objective(batch, model, etf: EtfClassifier) -> Tensor:
    """Classification loss of the base phase over one mini-batch."""
    mu = model.forward_base(batch)
    return dr_loss(mu, batch.labels, etf)


def incremental_objective(batch, model, etf: EtfClassifier,
                          weights: LossWeights) -> Tensor:
    """Classification plus suppression plus separation for one mini-batch.

    The batch must carry base/novel group tags.  Suppression terms for an
    absent group are skipped, as is separation when either group is absent.
    Each lambda weight is applied exactly once, here.
    """
    if batch.base_mask is None:
        raise ValueError("incremental batch is missing group tags")
    mu, aux = model.forward_incremental(batch)
    loss = dr_loss(mu, batch.labels, etf)
    loss = loss + _class_sensitive_terms(aux, batch.base_mask, weights, mu.data.dtype)
    return loss


def _class_sensitive_terms(aux: BranchAux, base_mask: np.ndarray,
                           weights: LossWeights, dtype) -> Tensor:
    base_mask = np.asarray(base_mask, dtype=bool)
    base_idx = np.nonzero(base_mask)[0]
    novel_idx = np.nonzero(~base_mask)[0]
    z_base = aux.z_gate[base_idx] if base_idx.size else None
    z_novel = aux.z_gate[novel_idx] if novel_idx.size else None
    total = suppression_loss(z_base, z_novel, weights.lambda1, weights.lambda2,
                             dtype=dtype)
    if weights.lambda3 > 0 and base_idx.size and novel_idx.size:
        groups = [average_scan_params(seq, base_mask)
                  for seq in (aux.b_seq, aux.c_seq, aux.dt_seq)]
        sep = separation_loss(tuple(g[0] for g in groups),
                              tuple(g[1] for g in groups), dtype=dtype)
        total = total + weights.lambda3 * sep
    return total

"""Slot-level contrastive learning over projected token embeddings.

Non-O tokens of a mini-batch are projected through a ReLU head; every
ordered pair (i, j), i != j, across the whole batch becomes a positive pair
when both tokens carry the same slot type and a negative pair otherwise.
All four similarity metrics are oriented so that higher means more similar,
which lets one objective consume any of them:

    L = logsumexp(d_all / tau) - logsumexp(d_pos / tau)

one global value over the batch's pair set. A `per_anchor` switch replaces
it with the mean of the same expression computed per anchor token. The two
differ by a gradient-free constant when every anchor has the same pair
profile; both are kept because published descriptions of this objective
disagree on the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import TAG_O
from .errors import UsageError

METRICS = ("cosine", "mse", "smooth-l1", "kl")

_skipped_batches = 0


def skipped_batch_count() -> int:
    """How many loss calls had no positive pair and returned 0."""
    return _skipped_batches


def reset_skipped_batch_count() -> None:
    global _skipped_batches
    _skipped_batches = 0


@dataclass
class ContrastiveConfig:
    metric: str = "cosine"
    tau: float = 0.5
    projection_dim: int = 32
    per_anchor: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise UsageError(f"unknown contrastive metric {self.metric!r}")
        if not self.tau > 0.0:
            raise UsageError("temperature must be positive")
        if self.projection_dim < 1:
            raise UsageError("projection_dim must be >= 1")


class ContrastiveHead:
    def __init__(self, d_model: int, projection_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w, self.b = nn.init_linear(rng, d_model, projection_dim)

    def named_params(self) -> dict[str, Tensor]:
        return {"proj.w": self.w, "proj.b": self.b}

    def project(self, r_utter: Tensor) -> Tensor:
        """s = ReLU(linear(r_utter)), computed for every token."""
        return ad.relu(nn.linear(r_utter, self.w, self.b))


@dataclass
class SlotPairSet:
    """Ordered in-batch pairs over non-O tokens.

    `pos` and `neg` are (2, n) index arrays into `s` / `labels`; row 0 is
    the anchor, row 1 the partner. Both orders of every unordered pair are
    present and the two sets are disjoint by construction.
    """

    s: Tensor              # (m, p) projected vectors of the batch's slot tokens
    labels: np.ndarray     # (m,)
    pos: np.ndarray        # (2, n_pos)
    neg: np.ndarray        # (2, n_neg)

    @property
    def empty(self) -> bool:
        return self.pos.shape[1] == 0 and self.neg.shape[1] == 0


def collect_slot_pairs(s: Tensor, y_sl: np.ndarray, y_bd: np.ndarray,
                       utt_mask: np.ndarray) -> SlotPairSet:
    """Gather slot-token vectors and enumerate all ordered cross-utterance
    pairs. Fewer than two slot tokens in the batch yields an empty set."""
    B, n, p = s.shape
    valid = (np.asarray(y_bd) != TAG_O) & (np.asarray(utt_mask) > 0)
    flat_idx = np.flatnonzero(valid.ravel())
    labels = np.asarray(y_sl).ravel()[flat_idx]
    m = flat_idx.size
    s_tokens = ad.embedding(ad.reshape(s, (B * n, p)), flat_idx)
    if m < 2:
        empty = np.zeros((2, 0), dtype=np.int64)
        return SlotPairSet(s_tokens, labels, empty, empty)
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    off = ii != jj
    same = labels[ii] == labels[jj]
    pos = np.stack([ii[off & same], jj[off & same]])
    neg = np.stack([ii[off & ~same], jj[off & ~same]])
    return SlotPairSet(s_tokens, labels, pos, neg)


def pair_similarities(si: Tensor, sj: Tensor, metric: str) -> Tensor:
    """(M,) similarity per row pair; differentiable; higher = more similar."""
    if metric == "cosine":
        return ad.tsum(ad.mul(ad.l2_normalize(si), ad.l2_normalize(sj)), axis=1)
    if metric == "mse":
        d = ad.sub(si, sj)
        return ad.neg(ad.tmean(ad.mul(d, d), axis=1))
    if metric == "smooth-l1":
        z = ad.sub(si, sj)
        absz = ad.mul(z, np.sign(z.data))          # |z| with subgradient 0 at 0
        small = (np.abs(z.data) < 1.0).astype(float)
        huber = ad.add(ad.mul(ad.mul(ad.mul(z, z), 0.5), small),
                       ad.mul(ad.sub(absz, 0.5), 1.0 - small))
        return ad.neg(ad.tmean(huber, axis=1))
    if metric == "kl":
        lp, lq = ad.log_softmax(si, axis=1), ad.log_softmax(sj, axis=1)
        p, q = ad.softmax(si, axis=1), ad.softmax(sj, axis=1)
        diff = ad.sub(lp, lq)
        kl_pq = ad.tsum(ad.mul(p, diff), axis=1)
        kl_qp = ad.tsum(ad.mul(q, ad.neg(diff)), axis=1)
        return ad.neg(ad.mul(ad.add(kl_pq, kl_qp), 0.5))
    raise UsageError(f"unknown contrastive metric {metric!r}")


def metric_distance(s_i, s_j, metric: str) -> float:
    """Scalar similarity of two vectors; cosine delegates to the shared
    cosine_similarity so the two agree bit-for-bit."""
    if metric == "cosine":
        return ad.cosine_similarity(np.asarray(s_i, float), np.asarray(s_j, float))
    with ad.no_grad():
        a = Tensor(np.asarray(s_i, dtype=np.float64)[None, :])
        b = Tensor(np.asarray(s_j, dtype=np.float64)[None, :])
        return float(pair_similarities(a, b, metric).data[0])


def _gather(vec: Tensor, idx: np.ndarray) -> Tensor:
    return ad.embedding(vec, idx)


def contrastive_loss(pairs: SlotPairSet, config: ContrastiveConfig) -> Tensor:
    """Adapted NT-Xent over the batch's pair set; 0 when P+ is empty."""
    global _skipped_batches
    if pairs.pos.shape[1] == 0:
        _skipped_batches += 1
        return Tensor(0.0)
    inv_tau = 1.0 / config.tau
    si_pos = _gather(pairs.s, pairs.pos[0])
    sj_pos = _gather(pairs.s, pairs.pos[1])
    d_pos = pair_similarities(si_pos, sj_pos, config.metric)
    if pairs.neg.shape[1] > 0:
        si_neg = _gather(pairs.s, pairs.neg[0])
        sj_neg = _gather(pairs.s, pairs.neg[1])
        d_neg = pair_similarities(si_neg, sj_neg, config.metric)
    else:
        d_neg = None

    if not config.per_anchor:
        z_pos = ad.mul(d_pos, inv_tau)
        z_all = z_pos if d_neg is None else ad.concat([z_pos, ad.mul(d_neg, inv_tau)], axis=0)
        return ad.sub(ad.logsumexp(z_all, axis=0), ad.logsumexp(z_pos, axis=0))

    terms = []
    for a in np.unique(pairs.pos[0]):
        p_idx = np.flatnonzero(pairs.pos[0] == a)
        z_pos = ad.mul(_gather(d_pos, p_idx), inv_tau)
        z_all = z_pos
        if d_neg is not None:
            n_idx = np.flatnonzero(pairs.neg[0] == a)
            if n_idx.size:
                z_all = ad.concat([z_pos, ad.mul(_gather(d_neg, n_idx), inv_tau)], axis=0)
        terms.append(ad.sub(ad.logsumexp(z_all, axis=0), ad.logsumexp(z_pos, axis=0)))
    return ad.tmean(ad.stack(terms, axis=0))

"""Slot-boundary detection: BiLSTM contextualization, emissions, and a CRF.

Tag indices are fixed as B=0, I=1, O=2 everywhere. The chain score of a tag
sequence y over emissions e is

    score(y) = start[y_0] + sum_t e_t[y_t] + sum_{t>=1} trans[y_{t-1}, y_t]

with a learned 3-vector for the start transition and no end transition. The
CRF is unconstrained: nothing forbids an I-after-O transition at this level;
consumers repair stray leading-I tags when extracting spans.

Sequences are right-padded; the forward recursion and the gold score carry
the previous state through padded steps, so padding never contributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import NUM_TAGS
from .errors import DataError, NumericError

DEFAULT_HIDDEN = 64


@dataclass
class BoundaryOutput:
    h_utter: Tensor   # (B, n, 2h)
    e: Tensor         # (B, n, 3)


class BoundaryHead:
    """Single-layer BiLSTM over r_utter plus a 2h -> 3 emission projection.

    Gate layout inside the fused weight matrices is [input, forget, cell,
    output]; the forget-gate bias starts at +1.
    """

    def __init__(self, d_in: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0):
        self.hidden = hidden
        rng = np.random.default_rng(seed)

        def lstm_params():
            wx, _ = nn.init_linear(rng, d_in, 4 * hidden)
            wh, _ = nn.init_linear(rng, hidden, 4 * hidden)
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0
            return wx, wh, Tensor(b, requires_grad=True)

        self.fwd = lstm_params()
        self.bwd = lstm_params()
        self.w_e, self.b_e = nn.init_linear(rng, 2 * hidden, NUM_TAGS)
        self.trans = Tensor(np.zeros((NUM_TAGS, NUM_TAGS)), requires_grad=True)
        self.start = Tensor(np.zeros(NUM_TAGS), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for tag, (wx, wh, b) in (("fwd", self.fwd), ("bwd", self.bwd)):
            out[f"lstm.{tag}.wx"] = wx
            out[f"lstm.{tag}.wh"] = wh
            out[f"lstm.{tag}.b"] = b
        out["emit.w"] = self.w_e
        out["emit.b"] = self.b_e
        out["crf.trans"] = self.trans
        out["crf.start"] = self.start
        return out

    def _direction(self, x: Tensor, mask: np.ndarray, params, reverse: bool):
        """Run one direction; returns per-step hidden states in input order.

        The mask gates the state carry: at padded steps the previous h and c
        pass through unchanged, so right-padding cannot reach real steps.
        """
        wx, wh, b = params
        B, n, _ = x.shape
        h = self.hidden
        xg = ad.add(ad.matmul(x, wx), b)           # (B, n, 4h), precomputed
        h_t = Tensor(np.zeros((B, h)))
        c_t = Tensor(np.zeros((B, h)))
        steps: list[Tensor | None] = [None] * n
        order = range(n - 1, -1, -1) if reverse else range(n)
        for t in order:
            g = ad.add(ad.reshape(ad.take_range(xg, 1, t, t + 1), (B, 4 * h)),
                       ad.matmul(h_t, wh))
            i_g = ad.sigmoid(ad.take_range(g, 1, 0, h))
            f_g = ad.sigmoid(ad.take_range(g, 1, h, 2 * h))
            c_g = ad.ttanh(ad.take_range(g, 1, 2 * h, 3 * h))
            o_g = ad.sigmoid(ad.take_range(g, 1, 3 * h, 4 * h))
            c_new = ad.add(ad.mul(f_g, c_t), ad.mul(i_g, c_g))
            h_new = ad.mul(o_g, ad.ttanh(c_new))
            m = mask[:, t:t + 1]
            c_t = ad.add(ad.mul(c_new, m), ad.mul(c_t, 1.0 - m))
            h_t = ad.add(ad.mul(h_new, m), ad.mul(h_t, 1.0 - m))
            steps[t] = h_t
        return ad.stack(steps, axis=1)             # (B, n, h)

    def forward(self, r_utter: Tensor, utt_mask: np.ndarray) -> BoundaryOutput:
        if r_utter.shape[1] == 0:
            raise DataError("boundary head requires at least one token")
        f = self._direction(r_utter, utt_mask, self.fwd, reverse=False)
        bk = self._direction(r_utter, utt_mask, self.bwd, reverse=True)
        h_utter = ad.concat([f, bk], axis=2)
        e = nn.linear(h_utter, self.w_e, self.b_e)
        if not np.all(np.isfinite(e.data)):
            raise NumericError("non-finite boundary emissions")
        return BoundaryOutput(h_utter, e)


def _check_lengths(e_shape, mask: np.ndarray) -> None:
    if e_shape[1] == 0:
        raise DataError("zero-length sequence")
    if (mask.sum(axis=1) < 1).any():
        raise DataError("every sequence needs at least one real token")
    if not (mask[:, 0] > 0).all():
        raise DataError("sequences must be right-padded")


def crf_nll(e: Tensor, trans: Tensor, start: Tensor, y_bd: np.ndarray,
            mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch.

    Per sequence: -score(gold) + log Z, the partition computed by the
    forward algorithm over the masked length.
    """
    B, n, K = e.shape
    _check_lengths(e.shape, mask)
    y = np.asarray(y_bd)

    # gold path score
    onehot = np.zeros((B, n, K))
    np.put_along_axis(onehot, np.clip(y, 0, K - 1)[:, :, None], 1.0, axis=2)
    onehot *= mask[:, :, None]
    score = ad.tsum(ad.mul(e, onehot), axis=(1, 2))                    # (B,)
    start_onehot = np.eye(K)[y[:, 0]]
    score = ad.add(score, ad.tsum(ad.mul(start, start_onehot), axis=1))
    if n > 1:
        pair = (y[:, :-1] * K + y[:, 1:])                              # (B, n-1)
        pair_onehot = np.zeros((B, n - 1, K * K))
        np.put_along_axis(pair_onehot, np.clip(pair, 0, K * K - 1)[:, :, None], 1.0, axis=2)
        pair_onehot *= mask[:, 1:, None]
        flat_trans = ad.reshape(trans, (1, 1, K * K))
        score = ad.add(score, ad.tsum(ad.mul(flat_trans, pair_onehot), axis=(1, 2)))

    # partition by the forward algorithm with masked carry
    alpha = ad.add(start, ad.reshape(ad.take_range(e, 1, 0, 1), (B, K)))
    for t in range(1, n):
        prev = ad.reshape(alpha, (B, K, 1))
        scores_t = ad.add(prev, ad.reshape(trans, (1, K, K)))
        alpha_new = ad.add(ad.logsumexp(scores_t, axis=1),
                           ad.reshape(ad.take_range(e, 1, t, t + 1), (B, K)))
        m = mask[:, t:t + 1]
        alpha = ad.add(ad.mul(alpha_new, m), ad.mul(alpha, 1.0 - m))
    log_z = ad.logsumexp(alpha, axis=1)                                # (B,)

    nll = ad.sub(log_z, score)
    loss = ad.tmean(nll)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite CRF loss")
    return loss


def viterbi_decode(e: np.ndarray, trans: np.ndarray, start: np.ndarray,
                   mask: np.ndarray) -> list[list[int]]:
    """Best-scoring tag sequence per batch row; ties resolve to the lowest
    tag index at every backtrack step (argmax first occurrence)."""
    e = np.asarray(e)
    if e.ndim == 2:
        e = e[None]
        mask = np.asarray(mask)[None]
    B, n, K = e.shape
    _check_lengths(e.shape, mask)
    out = []
    for b in range(B):
        length = int(mask[b].sum())
        delta = start + e[b, 0]
        back = np.zeros((length, K), dtype=np.int64)
        for t in range(1, length):
            cand = delta[:, None] + trans                 # (K prev, K cur)
            back[t] = cand.argmax(axis=0)
            delta = cand.max(axis=0) + e[b, t]
        path = [int(delta.argmax())]
        for t in range(length - 1, 0, -1):
            path.append(int(back[t, path[-1]]))
        out.append(path[::-1])
    return out


def path_score(e: np.ndarray, trans: np.ndarray, start: np.ndarray,
               tags) -> float:
    """Chain score of one explicit tag sequence (unpadded)."""
    tags = list(tags)
    s = start[tags[0]] + e[0, tags[0]]
    for t in range(1, len(tags)):
        s += trans[tags[t - 1], tags[t]] + e[t, tags[t]]
    return float(s)

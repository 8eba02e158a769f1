"""Similarity-based slot typing.

Token representations are enriched with a soft mixture of three boundary
embeddings (weights = softmax of the boundary emissions), fused back to
d_model, and compared against adapted label embeddings by cosine similarity.
The training loss is a two-term cross-entropy over those cosine logits with
stop-gradients arranged so each term trains exactly one side: the token path
learns to approach the labels it is compared with, and the label path learns
to approach the tokens, never both at once.

No temperature is applied to the typing logits.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import NUM_TAGS, TAG_O
from .errors import DataError

DEFAULT_BOUNDARY_DIM = 10

_skipped_batches = 0


def skipped_batch_count() -> int:
    """How many typing-loss calls saw zero non-O tokens and returned 0."""
    return _skipped_batches


def reset_skipped_batch_count() -> None:
    global _skipped_batches
    _skipped_batches = 0


class TypingHead:
    """Boundary-embedding fusion plus the bottleneck label adapter."""

    def __init__(self, d_model: int, d_b: int = DEFAULT_BOUNDARY_DIM,
                 bottleneck: int | None = None, adapter_residual: bool = True,
                 seed: int = 0):
        if bottleneck is None:
            bottleneck = max(1, d_model // 2)
        self.adapter_residual = adapter_residual
        rng = np.random.default_rng(seed)
        self.e_b = Tensor(rng.normal(0.0, 0.1, size=(NUM_TAGS, d_b)), requires_grad=True)
        self.fusion_w, self.fusion_b = nn.init_linear(rng, d_model + d_b, d_model)
        self.down_w, self.down_b = nn.init_linear(rng, d_model, bottleneck)
        self.up_w, self.up_b = nn.init_linear(rng, bottleneck, d_model)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "boundary_emb": self.e_b,
            "fusion.w": self.fusion_w, "fusion.b": self.fusion_b,
            "adapter.down.w": self.down_w, "adapter.down.b": self.down_b,
            "adapter.up.w": self.up_w, "adapter.up.b": self.up_b,
        }

    def fusion_params(self) -> list[Tensor]:
        """The utterance-path parameters of this head (u producer)."""
        return [self.e_b, self.fusion_w, self.fusion_b]

    def adapter_params(self) -> list[Tensor]:
        """The label-path parameters of this head (v producer)."""
        return [self.down_w, self.down_b, self.up_w, self.up_b]

    def boundary_enhanced_repr(self, r_utter: Tensor, e: Tensor) -> Tensor:
        """u = linear([r_utter; softmax(e) @ E_b]); same leading shape as r_utter."""
        if r_utter.shape[:-1] != e.shape[:-1]:
            raise DataError("r_utter and emissions must align per token")
        r_bound = ad.matmul(ad.softmax(e, axis=-1), self.e_b)
        return nn.linear(ad.concat([r_utter, r_bound], axis=-1),
                         self.fusion_w, self.fusion_b)

    def adapt_labels(self, label_matrix: Tensor) -> Tensor:
        """v = up(GELU(down(x))) (+ x when the residual connection is on)."""
        mid = ad.gelu(nn.linear(label_matrix, self.down_w, self.down_b))
        out = nn.linear(mid, self.up_w, self.up_b)
        if self.adapter_residual:
            out = ad.add(out, label_matrix)
        return out


def typing_loss(u: Tensor, v: Tensor, y_sl: np.ndarray, y_bd: np.ndarray,
                utt_mask: np.ndarray, term: str = "both",
                frozen_targets: tuple | None = None) -> Tensor:
    """Cross-entropy over cosine logits at gold non-O positions.

    Two terms: "u" compares u against stop-gradient(v) (trains the token
    path), "v" compares stop-gradient(u) against v (trains the label path);
    "both" sums them. Tokens are summed per sequence and averaged over the
    batch. A batch with no non-O tokens contributes 0 and is counted.

    Because both terms share one forward value, a finite-difference probe of
    the raw loss would see each path twice. `frozen_targets=(un0, vn0)`
    substitutes fixed arrays (the normalized u and v captured at the probe
    point) for the stop-gradient branches, turning the loss into an ordinary
    function whose gradient equals the stop-gradient one at that point.
    """
    global _skipped_batches
    if term not in ("both", "u", "v"):
        raise DataError(f"unknown typing-loss term {term!r}")
    B = u.shape[0]
    valid = (np.asarray(y_bd) != TAG_O) & (np.asarray(utt_mask) > 0)
    if not valid.any():
        _skipped_batches += 1
        return Tensor(0.0)
    K = v.shape[1]
    onehot = np.zeros((B, valid.shape[1], K))
    np.put_along_axis(onehot, np.clip(y_sl, 0, K - 1)[:, :, None], 1.0, axis=2)
    onehot *= valid[:, :, None]

    un = ad.l2_normalize(u)
    vn = ad.l2_normalize(v)
    if frozen_targets is None:
        un_fixed, vn_fixed = ad.stop_gradient(un), ad.stop_gradient(vn)
    else:
        un_fixed, vn_fixed = Tensor(frozen_targets[0]), Tensor(frozen_targets[1])

    def ce(tok, lab):
        logits = ad.matmul(tok, ad.transpose(lab, (0, 2, 1)))    # (B, n, K)
        return ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits, axis=-1), onehot)))

    parts = []
    if term in ("both", "u"):
        parts.append(ce(un, vn_fixed))
    if term in ("both", "v"):
        parts.append(ce(un_fixed, vn))
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return ad.mul(total, 1.0 / B)


def token_label_scores(u, v) -> np.ndarray:
    """(n, K) cosine scores between token vectors and label vectors."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    v = v.data if isinstance(v, Tensor) else np.asarray(v)

    def unit(x):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        return np.where(norm > 0, x / np.where(norm == 0, 1.0, norm), 0.0)

    return unit(u) @ unit(v).T


def assign_span_types(u, v, decoded_path, per_first_token: bool = False) -> list[int]:
    """Label index per decoded span, aligned with extract_spans order.

    Each span averages its tokens' cosine scores against every label (or
    takes the first token's scores in per-first-token mode); the argmax
    wins, ties going to the lowest label index.
    """
    from .evaluation import extract_spans

    v_arr = v.data if isinstance(v, Tensor) else np.asarray(v)
    if v_arr.shape[0] == 0:
        raise DataError("cannot assign types with an empty label set")
    scores = token_label_scores(u, v_arr)
    out = []
    for s, e, _ in extract_spans(decoded_path):
        span_scores = scores[s:s + 1] if per_first_token else scores[s:e + 1]
        out.append(int(span_scores.mean(axis=0).argmax()))
    return out

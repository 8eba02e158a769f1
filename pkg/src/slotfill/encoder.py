"""Transformer encoder fusing a slot-label prefix with the utterance.

The input sequence is [start marker; label tokens; utterance tokens] with one
continuous position index space and two segment embeddings (prefix vs
utterance) replacing the removed separator token. Pre-norm residual blocks,
exact-erf GELU feed-forward, and masked multi-head attention whose masked
cells carry exactly zero post-softmax weight.

Attention between the label region and the utterance region is governed by an
interaction policy. For the two directional policies the severed direction's
source rows are also blocked from the start-marker column: the start marker
attends everywhere, so leaving it readable would leak the blocked region back
in after two layers. `no-label-to-label` blocks exactly the other labels'
columns and nothing else.

Label embeddings come in two modes: `context-aware` encodes prefix and
utterance jointly in one pass; `decoupled` runs [start; labels] and
[start; utterance] as two independent passes (fresh position indices each),
so labels never see utterance context and the interaction policy has nothing
to act on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Batch, ModelInput, collate
from .errors import DataError, NumericError, UsageError

POLICIES = ("full", "no-label-to-utterance", "no-utterance-to-label",
            "no-bidirectional", "no-label-to-label")
LABEL_MODES = ("context-aware", "decoupled")


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1
    max_positions: int = 128
    interaction_policy: str = "full"
    label_mode: str = "context-aware"
    freeze_labels: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise UsageError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")
        if self.interaction_policy not in POLICIES:
            raise UsageError(f"unknown interaction policy {self.interaction_policy!r}")
        if self.label_mode not in LABEL_MODES:
            raise UsageError(f"unknown label mode {self.label_mode!r}")


@dataclass
class EncoderOutput:
    r_label: Tensor        # (B, prefix_len - 1, d) prefix tokens, start excluded
    r_utter: Tensor        # (B, n_max, d)
    label_matrix: Tensor   # (B, K, d) per-label span means
    attention: list = field(default_factory=list)  # per layer, (B, H, T, T) arrays


def _check_regions(n_total: int, label_spans, utter_range) -> None:
    seen = [0] * n_total
    seen[0] += 1
    for s, e in list(label_spans) + [utter_range]:
        if not (0 < s <= e < n_total):
            raise DataError(f"span ({s},{e}) out of bounds for length {n_total}")
        for i in range(s, e + 1):
            seen[i] += 1
    if any(c != 1 for c in seen):
        raise DataError("label spans and utterance range must partition the sequence")


def policy_mask(n_total: int, label_spans, utter_range, policy: str) -> np.ndarray:
    """(T, T) boolean; True where attention from row i to column j is allowed."""
    if policy not in POLICIES:
        raise UsageError(f"unknown interaction policy {policy!r}")
    _check_regions(n_total, label_spans, utter_range)
    keep = np.ones((n_total, n_total), dtype=bool)
    label_idx = np.concatenate([np.arange(s, e + 1) for s, e in label_spans])
    us, ue = utter_range
    utter_idx = np.arange(us, ue + 1)
    blocked_for_labels = np.concatenate(([0], utter_idx))   # utterance + start column
    blocked_for_utter = np.concatenate(([0], label_idx))
    if policy in ("no-label-to-utterance", "no-bidirectional"):
        keep[np.ix_(label_idx, blocked_for_labels)] = False
    if policy in ("no-utterance-to-label", "no-bidirectional"):
        keep[np.ix_(utter_idx, blocked_for_utter)] = False
    if policy == "no-label-to-label":
        for s, e in label_spans:
            rows = np.arange(s, e + 1)
            others = label_idx[(label_idx < s) | (label_idx > e)]
            keep[np.ix_(rows, others)] = False
    return keep


def build_attention_mask(model_input: ModelInput, policy: str) -> np.ndarray:
    """Per-instance (T, T) mask; with a batch, padding columns are blocked too."""
    return policy_mask(model_input.ids.size, model_input.label_spans,
                       model_input.utterance_range, policy)


def pool_label_embeddings(r_label: Tensor, label_spans) -> Tensor:
    """Mean of each label's token rows. Spans use sequence coordinates
    (start marker at 0), so row k of r_label is position k + 1."""
    pooled = []
    for s, e in label_spans:
        if e < s:
            raise DataError(f"empty label span ({s},{e})")
        rows = ad.take_range(r_label, 1, s - 1, e)
        pooled.append(ad.tmean(rows, axis=1))
    return ad.stack(pooled, axis=1)


class Encoder:
    """Token/position/segment embeddings plus L pre-norm attention blocks."""

    def __init__(self, config: EncoderConfig, vocab_size: int, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.d_ff
        self.tok_emb = Tensor(rng.normal(0.0, 0.1, size=(vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(config.max_positions, d)),
                              requires_grad=True)
        self.seg_emb = Tensor(rng.normal(0.0, 0.02, size=(2, d)), requires_grad=True)
        self.blocks = []
        for _ in range(config.layers):
            blk = {
                "ln1": nn.init_layer_norm(d), "ln2": nn.init_layer_norm(d),
                "wq": nn.init_linear(rng, d, d), "wk": nn.init_linear(rng, d, d),
                "wv": nn.init_linear(rng, d, d), "wo": nn.init_linear(rng, d, d),
                "ff1": nn.init_linear(rng, d, ff), "ff2": nn.init_linear(rng, ff, d),
            }
            self.blocks.append(blk)

    def named_params(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb, "seg_emb": self.seg_emb}
        for i, blk in enumerate(self.blocks):
            for key, pair in blk.items():
                names = ("gamma", "beta") if key.startswith("ln") else ("w", "b")
                out[f"layer{i}.{key}.{names[0]}"] = pair[0]
                out[f"layer{i}.{key}.{names[1]}"] = pair[1]
        return out

    # ----- core stack -----

    def _embed(self, ids: np.ndarray, segments: np.ndarray) -> Tensor:
        B, T = ids.shape
        if T > self.config.max_positions:
            raise DataError(f"sequence length {T} exceeds max positions "
                            f"{self.config.max_positions}")
        tok = ad.embedding(self.tok_emb, ids)
        pos = ad.embedding(self.pos_emb, np.broadcast_to(np.arange(T), (B, T)))
        seg = ad.embedding(self.seg_emb, segments)
        return ad.add(ad.add(tok, pos), seg)

    def _attention(self, blk, x: Tensor, keep: np.ndarray, train, rng):
        cfg = self.config
        B, T, d = x.shape
        H, dh = cfg.heads, d // cfg.heads

        def split_heads(t):
            return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = split_heads(nn.linear(x, *blk["wq"]))
        k = split_heads(nn.linear(x, *blk["wk"]))
        v = split_heads(nn.linear(x, *blk["wv"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = ad.mask_fill(scores, keep[:, None, :, :])
        probs = ad.softmax(scores, axis=-1)
        if train and cfg.dropout > 0.0:
            probs = ad.dropout(probs, cfg.dropout, rng)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        return nn.linear(ctx, *blk["wo"]), probs

    def _run_stack(self, ids, segments, keep, train=False, rng=None):
        """keep: (B, T, T) allowed-attention mask. Returns hidden states and
        the per-layer post-softmax attention maps (detached)."""
        cfg = self.config
        x = self._embed(ids, segments)
        if train and cfg.dropout > 0.0:
            x = ad.dropout(x, cfg.dropout, rng)
        maps = []
        for li, blk in enumerate(self.blocks):
            attn_out, probs = self._attention(blk, nn.layer_norm(x, *blk["ln1"]), keep,
                                              train, rng)
            maps.append(probs.data)
            if train and cfg.dropout > 0.0:
                attn_out = ad.dropout(attn_out, cfg.dropout, rng)
            x = ad.add(x, attn_out)
            h = nn.linear(ad.gelu(nn.linear(nn.layer_norm(x, *blk["ln2"]), *blk["ff1"])),
                          *blk["ff2"])
            if train and cfg.dropout > 0.0:
                h = ad.dropout(h, cfg.dropout, rng)
            x = ad.add(x, h)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activations in encoder layer {li}")
        return x, maps

    # ----- public forward -----

    def forward(self, batch: Batch, train: bool = False,
                rng: np.random.Generator | None = None) -> EncoderOutput:
        if train and self.config.dropout > 0.0 and rng is None:
            raise UsageError("training with dropout requires an RNG")
        if self.config.label_mode == "decoupled":
            return self._forward_decoupled(batch, train, rng)
        return self._forward_joint(batch, train, rng)

    def _forward_joint(self, batch: Batch, train, rng) -> EncoderOutput:
        B, T = batch.ids.shape
        P = batch.prefix_len
        base = policy_mask(T, batch.label_spans, (P, T - 1), self.config.interaction_policy)
        keep = base[None, :, :] & (batch.mask[:, None, :] > 0)
        segments = np.zeros((B, T), dtype=np.int64)
        segments[:, P:] = 1
        hidden, maps = self._run_stack(batch.ids, segments, keep, train, rng)
        r_label = ad.take_range(hidden, 1, 1, P)
        r_utter = ad.take_range(hidden, 1, P, T)
        label_matrix = pool_label_embeddings(r_label, batch.label_spans)
        if self.config.freeze_labels:
            r_label = ad.stop_gradient(r_label)
            label_matrix = ad.stop_gradient(label_matrix)
        return EncoderOutput(r_label, r_utter, label_matrix, maps)

    def _forward_decoupled(self, batch: Batch, train, rng) -> EncoderOutput:
        B, T = batch.ids.shape
        P = batch.prefix_len

        # pass A: [start; labels], identical for every row of the batch
        ids_a = batch.ids[:, :P]
        seg_a = np.zeros((B, P), dtype=np.int64)
        keep_a = np.ones((B, P, P), dtype=bool)
        hid_a, maps_a = self._run_stack(ids_a, seg_a, keep_a, train, rng)
        r_label = ad.take_range(hid_a, 1, 1, P)
        label_matrix = pool_label_embeddings(r_label, batch.label_spans)

        # pass B: [start; utterance], fresh position indices
        ids_b = np.concatenate([batch.ids[:, :1], batch.ids[:, P:]], axis=1)
        seg_b = np.ones((B, T - P + 1), dtype=np.int64)
        seg_b[:, 0] = 0
        mask_b = np.concatenate([batch.mask[:, :1], batch.mask[:, P:]], axis=1)
        keep_b = np.ones((B, T - P + 1, 1), dtype=bool) & (mask_b[:, None, :] > 0)
        hid_b, maps_b = self._run_stack(ids_b, seg_b, keep_b, train, rng)
        r_utter = ad.take_range(hid_b, 1, 1, T - P + 1)

        if self.config.freeze_labels:
            r_label = ad.stop_gradient(r_label)
            label_matrix = ad.stop_gradient(label_matrix)
        return EncoderOutput(r_label, r_utter, label_matrix, maps_a + maps_b)

    def encode_one(self, model_input: ModelInput) -> EncoderOutput:
        """Single-instance convenience wrapper around the batched forward."""
        return self.forward(collate([model_input]))

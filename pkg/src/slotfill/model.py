"""End-to-end slot filler tying the encoder to its three heads.

One forward pass produces boundary emissions (CRF loss), boundary-enhanced
token vectors u against adapted label vectors v (typing loss), and projected
slot-token embeddings (contrastive loss). Decoding runs Viterbi over the
emissions and types each span by mean cosine against v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boundary import BoundaryHead, crf_nll, viterbi_decode
from .contrastive import (ContrastiveConfig, ContrastiveHead,
                          collect_slot_pairs, contrastive_loss)
from .data import Batch, LabelVocabulary, Vocabulary, make_batches
from .encoder import Encoder, EncoderConfig
from .errors import DataError, NumericError, UsageError
from .evaluation import SlotSpan, extract_spans
from .typing_head import TypingHead, assign_span_types, typing_loss


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    boundary_hidden: int = 64
    boundary_dim: int = 10           # width of the soft boundary embedding
    bottleneck: int | None = None    # adapter width, d_model // 2 when unset
    adapter_residual: bool = True
    per_first_token: bool = False    # type spans by their first token only
    max_len: int = 128

    def __post_init__(self):
        if self.boundary_hidden < 1:
            raise UsageError("boundary_hidden must be >= 1")
        if self.boundary_dim < 1:
            raise UsageError("boundary_dim must be >= 1")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise UsageError("bottleneck must be >= 1 when given")
        if self.max_len < 2:
            raise UsageError("max_len must leave room for the start marker")


@dataclass
class LossBundle:
    total: Tensor
    boundary: Tensor
    typing: Tensor
    contrastive: Tensor

    def as_floats(self) -> tuple[float, float, float, float]:
        return (self.total.item(), self.boundary.item(),
                self.typing.item(), self.contrastive.item())


class SlotFillModel:
    """Encoder plus boundary, typing, and contrastive heads.

    Submodules draw from consecutive seeds so the whole model is a pure
    function of (config, vocabulary, seed).
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        d = config.encoder.d_model
        self.encoder = Encoder(config.encoder, len(vocab), seed=seed)
        self.boundary = BoundaryHead(d, config.boundary_hidden, seed=seed + 1)
        self.typing = TypingHead(d, config.boundary_dim, config.bottleneck,
                                 config.adapter_residual, seed=seed + 2)
        self.contrastive = ContrastiveHead(d, config.contrastive.projection_dim,
                                           seed=seed + 3)

    # -- parameter access ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, module in (("encoder", self.encoder),
                               ("boundary", self.boundary),
                               ("typing", self.typing),
                               ("contrastive", self.contrastive)):
            for key, t in module.named_params().items():
                out[f"{prefix}.{key}"] = t
        return out

    def encoder_params(self) -> list[Tensor]:
        return list(self.encoder.named_params().values())

    def head_params(self) -> list[Tensor]:
        out = []
        for module in (self.boundary, self.typing, self.contrastive):
            out.extend(module.named_params().values())
        return out

    def zero_grads(self) -> None:
        for t in self.named_params().values():
            t.zero_grad()

    # -- losses ----------------------------------------------------------

    def losses(self, batch: Batch, train: bool = False, rng=None,
               with_contrastive: bool = True,
               typing_frozen: tuple | None = None) -> LossBundle:
        """The three training losses and their sum for one batch.

        `typing_frozen` passes fixed stop-gradient targets through to the
        typing loss so the total becomes an ordinary function suitable for
        finite-difference probing.
        """
        enc = self.encoder.forward(batch, train=train, rng=rng)
        bnd = self.boundary.forward(enc.r_utter, batch.utt_mask)
        l_bdy = crf_nll(bnd.e, self.boundary.trans, self.boundary.start,
                        batch.y_bd, batch.utt_mask)
        u = self.typing.boundary_enhanced_repr(enc.r_utter, bnd.e)
        v = self.typing.adapt_labels(enc.label_matrix)
        l_typ = typing_loss(u, v, batch.y_sl, batch.y_bd, batch.utt_mask,
                            frozen_targets=typing_frozen)
        if with_contrastive:
            s = self.contrastive.project(enc.r_utter)
            pairs = collect_slot_pairs(s, batch.y_sl, batch.y_bd, batch.utt_mask)
            l_ctr = contrastive_loss(pairs, self.config.contrastive)
        else:
            l_ctr = Tensor(0.0)
        total = ad.add(ad.add(l_bdy, l_typ), l_ctr)
        for name, t in (("boundary", l_bdy), ("typing", l_typ),
                        ("contrastive", l_ctr), ("total", total)):
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite {name} loss")
        return LossBundle(total, l_bdy, l_typ, l_ctr)

    def frozen_typing_targets(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Normalized u and v at the current parameters, as plain arrays."""
        with ad.no_grad():
            enc = self.encoder.forward(batch)
            bnd = self.boundary.forward(enc.r_utter, batch.utt_mask)
            un = ad.l2_normalize(self.typing.boundary_enhanced_repr(enc.r_utter, bnd.e))
            vn = ad.l2_normalize(self.typing.adapt_labels(enc.label_matrix))
        return un.data.copy(), vn.data.copy()

    # -- decoding --------------------------------------------------------

    def decode_batch(self, batch: Batch) -> list[list[SlotSpan]]:
        """Spans with integer label indices, one list per batch row."""
        with ad.no_grad():
            enc = self.encoder.forward(batch)
            bnd = self.boundary.forward(enc.r_utter, batch.utt_mask)
            u = self.typing.boundary_enhanced_repr(enc.r_utter, bnd.e)
            v = self.typing.adapt_labels(enc.label_matrix)
        paths = viterbi_decode(bnd.e.data, self.boundary.trans.data,
                               self.boundary.start.data, batch.utt_mask)
        out = []
        for b, path in enumerate(paths):
            types = assign_span_types(u.data[b, :len(path)], v.data[b], path,
                                      self.config.per_first_token)
            out.append(extract_spans(path, types))
        return out

    def decode_batch_spans(self, batch: Batch,
                           label_vocab: LabelVocabulary) -> list[list[SlotSpan]]:
        """Spans with label names from the given vocabulary attached."""
        names = [l.name for l in label_vocab.labels]
        result = []
        for spans in self.decode_batch(batch):
            for s in spans:
                if s.label >= len(names):
                    raise DataError("decoded label index outside vocabulary")
            result.append([SlotSpan(s.start, s.end, names[s.label]) for s in spans])
        return result

    def predict_spans(self, utterances, label_vocab: LabelVocabulary,
                      batch_size: int = 32) -> list[list[SlotSpan]]:
        """Named spans for a dataset, in dataset order."""
        batches = make_batches(utterances, batch_size, 0, label_vocab,
                               self.vocab, max_len=self.config.max_len,
                               shuffle=False)
        out: list[list[SlotSpan]] = []
        for batch in batches:
            out.extend(self.decode_batch_spans(batch, label_vocab))
        return out

    def token_vectors(self, batch: Batch) -> np.ndarray:
        """Boundary-enhanced token vectors u, (B, n_max, d_model)."""
        with ad.no_grad():
            enc = self.encoder.forward(batch)
            bnd = self.boundary.forward(enc.r_utter, batch.utt_mask)
            u = self.typing.boundary_enhanced_repr(enc.r_utter, bnd.e)
        return u.data

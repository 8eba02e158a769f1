"""Span-level scoring, zero-shot evaluation, latency timing, and export.

A span is (start, end, label) with inclusive indices. Scoring is exact-match
and type-sensitive: a prediction is a true positive only when all three
fields equal those of a distinct gold span of the same utterance. The
seen/unseen split partitions target-domain gold labels by membership in the
source label set; a whole-utterance variant (an utterance is "unseen" when
it contains at least one unseen gold span) is reported alongside.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import (TAG_B, TAG_I, TAG_O, AnnotatedUtterance, DomainSplit,
                   LabelVocabulary, Vocabulary, make_batches)
from .errors import DataError


class SlotSpan(NamedTuple):
    start: int
    end: int            # inclusive
    label: object = None  # label index or name; compared by equality


def extract_spans(boundary_path, span_types=None) -> list[SlotSpan]:
    """Maximal B I* runs as spans; a leading I (invalid BIO) is treated as B.

    With `span_types`, the k-th span gets the k-th entry as its label.
    """
    spans: list[SlotSpan] = []
    start = None
    for i, tag in enumerate(boundary_path):
        if tag == TAG_B:
            if start is not None:
                spans.append(SlotSpan(start, i - 1))
            start = i
        elif tag == TAG_I:
            if start is None:
                start = i          # repair: I with no open span acts as B
        else:
            if start is not None:
                spans.append(SlotSpan(start, i - 1))
                start = None
    if start is not None:
        spans.append(SlotSpan(start, len(boundary_path) - 1))
    if span_types is not None:
        if len(span_types) != len(spans):
            raise DataError(f"{len(spans)} spans but {len(span_types)} types")
        spans = [SlotSpan(s.start, s.end, t) for s, t in zip(spans, span_types)]
    return spans


def gold_spans(utt: AnnotatedUtterance, label_vocab: LabelVocabulary) -> list[SlotSpan]:
    """Gold spans with label names attached."""
    spans = extract_spans(utt.y_bd)
    return [SlotSpan(s.start, s.end, label_vocab.labels[utt.y_sl[s.start]].name)
            for s in spans]


def _counts(pred_lists, gold_lists):
    if len(pred_lists) != len(gold_lists):
        raise DataError("prediction and gold lists must align per utterance")
    tp = n_pred = n_gold = 0
    for pred, gold in zip(pred_lists, gold_lists):
        n_pred += len(pred)
        n_gold += len(gold)
        overlap = Counter(pred) & Counter(gold)
        tp += sum(overlap.values())
    return tp, n_pred, n_gold


def _prf(tp: int, n_pred: int, n_gold: int):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def span_f1(pred_lists, gold_lists):
    """Micro precision/recall/F1 over per-utterance span lists."""
    return _prf(*_counts(pred_lists, gold_lists))


@dataclass
class GroupScores:
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gold: int


def _group_scores(pred_lists, gold_lists, labels: set) -> GroupScores:
    pred = [[s for s in utt if s.label in labels] for utt in pred_lists]
    gold = [[s for s in utt if s.label in labels] for utt in gold_lists]
    tp, n_pred, n_gold = _counts(pred, gold)
    return GroupScores(*_prf(tp, n_pred, n_gold), n_pred, n_gold)


def _uttr_group_scores(pred_lists, gold_lists, unseen_labels: set, want_unseen: bool):
    keep = [any(s.label in unseen_labels for s in gold) == want_unseen
            for gold in gold_lists]
    pred = [p for p, k in zip(pred_lists, keep) if k]
    gold = [g for g, k in zip(gold_lists, keep) if k]
    tp, n_pred, n_gold = _counts(pred, gold)
    return GroupScores(*_prf(tp, n_pred, n_gold), n_pred, n_gold)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    per_label: dict[str, GroupScores] = field(default_factory=dict)
    seen: GroupScores | None = None
    unseen: GroupScores | None = None
    seen_uttr: GroupScores | None = None
    unseen_uttr: GroupScores | None = None
    decode_seconds: float = 0.0
    n_utterances: int = 0

    def rows(self):
        """Tab-separated rows: group, precision, recall, f1, n_pred, n_gold."""
        out = [("overall", self.precision, self.recall, self.f1, "", "")]
        for name, g in (("seen", self.seen), ("unseen", self.unseen),
                        ("seen_uttr", self.seen_uttr), ("unseen_uttr", self.unseen_uttr)):
            if g is not None:
                out.append((name, g.precision, g.recall, g.f1, g.n_pred, g.n_gold))
        for label in sorted(self.per_label):
            g = self.per_label[label]
            out.append((f"label:{label}", g.precision, g.recall, g.f1, g.n_pred, g.n_gold))
        return out

    def to_tsv(self) -> str:
        lines = ["group\tprecision\trecall\tf1\tn_pred\tn_gold"]
        for row in self.rows():
            lines.append("\t".join(f"{x:.6f}" if isinstance(x, float) else str(x)
                                   for x in row))
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"precision = {self.precision:.6f}",
                 f"recall = {self.recall:.6f}",
                 f"f1 = {self.f1:.6f}",
                 f"n_utterances = {self.n_utterances}",
                 f"decode_seconds = {self.decode_seconds:.6f}"]
        for name, g in (("seen", self.seen), ("unseen", self.unseen),
                        ("seen_uttr", self.seen_uttr), ("unseen_uttr", self.unseen_uttr)):
            if g is not None:
                lines.append(f"{name}.f1 = {g.f1:.6f}")
        return "\n".join(lines) + "\n"


def build_report(pred_lists, gold_lists, seen_labels, unseen_labels,
                 decode_seconds: float = 0.0) -> EvalReport:
    tp, n_pred, n_gold = _counts(pred_lists, gold_lists)
    p, r, f1 = _prf(tp, n_pred, n_gold)
    seen_labels, unseen_labels = set(seen_labels), set(unseen_labels)
    all_labels = {s.label for utt in gold_lists for s in utt}
    all_labels |= {s.label for utt in pred_lists for s in utt}
    report = EvalReport(p, r, f1, decode_seconds=decode_seconds,
                        n_utterances=len(gold_lists))
    report.per_label = {lab: _group_scores(pred_lists, gold_lists, {lab})
                        for lab in sorted(all_labels, key=str)}
    report.seen = _group_scores(pred_lists, gold_lists, seen_labels)
    report.unseen = _group_scores(pred_lists, gold_lists, unseen_labels)
    report.seen_uttr = _uttr_group_scores(pred_lists, gold_lists, unseen_labels, False)
    report.unseen_uttr = _uttr_group_scores(pred_lists, gold_lists, unseen_labels, True)
    return report


def evaluate_zero_shot(model, split: DomainSplit, batch_size: int = 32) -> EvalReport:
    """Decode every target utterance with the target-label prefix and score.

    Seen = gold label also present in the source label set; unseen = absent.
    The model must never have touched split.target during training; this
    function only reads it.
    """
    target_names = split.target_label_names
    if not target_names:
        raise DataError("target label set is empty")
    tgt_vocab = split.label_vocab.restrict(target_names)
    t0 = time.perf_counter()
    pred_lists = model.predict_spans(split.target, tgt_vocab, batch_size)
    decode_seconds = time.perf_counter() - t0
    gold_lists = [gold_spans(u, split.label_vocab) for u in split.target]
    source = set(split.source_label_names)
    seen = [n for n in target_names if n in source]
    unseen = [n for n in target_names if n not in source]
    return build_report(pred_lists, gold_lists, seen, unseen, decode_seconds)


def benchmark_latency(model, dataset, label_vocab: LabelVocabulary,
                      vocab: Vocabulary, batch_size: int, mode: str,
                      runs: int = 3, warmup: int = 1,
                      max_len: int = 128) -> float:
    """Median wall-clock seconds to decode the whole dataset.

    Only the decode phase is timed (encoder forward, Viterbi, matching);
    batch assembly happens up front. `batched` decodes `batch_size`
    utterances per forward pass, `instance-wise` loops one at a time.
    """
    if mode not in ("batched", "instance-wise"):
        raise DataError(f"unknown latency mode {mode!r}")
    size = batch_size if mode == "batched" else 1
    batches = make_batches(dataset, size, 0, label_vocab, vocab,
                           max_len=max_len, shuffle=False)
    times = []
    for r in range(warmup + runs):
        t0 = time.perf_counter()
        for batch in batches:
            model.decode_batch_spans(batch, label_vocab)
        elapsed = time.perf_counter() - t0
        if r >= warmup:
            times.append(elapsed)
    return float(np.median(times))


def export_entity_embeddings(model, dataset, label_vocab: LabelVocabulary,
                             vocab: Vocabulary, path, batch_size: int = 32,
                             max_len: int = 128) -> int:
    """One TSV row per gold slot-entity token: utterance id, token index,
    gold label name, then the unit-normalized u-vector. Returns row count."""
    batches = make_batches(dataset, batch_size, 0, label_vocab, vocab,
                           max_len=max_len, shuffle=False)
    rows = []
    utt_id = 0
    for batch in batches:
        u = model.token_vectors(batch)          # (B, n_max, d) array
        for b, mi in enumerate(batch.inputs):
            utt = mi.utterance
            for t in range(mi.n_tokens):
                if utt.y_bd[t] == TAG_O:
                    continue
                vec = u[b, t]
                norm = np.sqrt((vec * vec).sum())
                unit = vec / norm if norm > 0 else vec
                label = label_vocab.labels[utt.y_sl[t]].name
                rows.append("\t".join([str(utt_id), str(t), label]
                                      + [f"{x:.8g}" for x in unit]))
            utt_id += 1
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return len(rows)

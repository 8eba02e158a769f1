"""Span extraction, exact-match micro F1, grouped reports, latency timing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotfill import evaluation as E
from slotfill.data import (TAG_B, TAG_I, TAG_O, AnnotatedUtterance,
                           DomainSplit, LabelVocabulary, Vocabulary,
                           build_vocabulary)
from slotfill.errors import DataError
from slotfill.evaluation import SlotSpan


class TestExtractSpans:
    def test_two_spans(self):
        # [TRIVIAL] B I O B -> (0,1), (3,3)
        assert E.extract_spans([TAG_B, TAG_I, TAG_O, TAG_B]) == [
            SlotSpan(0, 1), SlotSpan(3, 3)]

    def test_leading_i_repaired(self):
        # [TRIVIAL] O I I -> single span (1,2); dangling I opens a span
        assert E.extract_spans([TAG_O, TAG_I, TAG_I]) == [SlotSpan(1, 2)]

    def test_all_outside(self):
        assert E.extract_spans([TAG_O, TAG_O]) == []

    def test_empty(self):
        assert E.extract_spans([]) == []

    def test_adjacent_b_b_splits(self):
        assert E.extract_spans([TAG_B, TAG_B]) == [SlotSpan(0, 0), SlotSpan(1, 1)]

    def test_span_runs_to_end(self):
        assert E.extract_spans([TAG_O, TAG_B, TAG_I]) == [SlotSpan(1, 2)]

    def test_i_after_gap_starts_new(self):
        # B O I: the I cannot continue across the O
        assert E.extract_spans([TAG_B, TAG_O, TAG_I]) == [
            SlotSpan(0, 0), SlotSpan(2, 2)]

    def test_types_attached_in_order(self):
        spans = E.extract_spans([TAG_B, TAG_O, TAG_B, TAG_I], span_types=[4, 7])
        assert spans == [SlotSpan(0, 0, 4), SlotSpan(2, 3, 7)]

    def test_type_count_mismatch_rejected(self):
        with pytest.raises(DataError):
            E.extract_spans([TAG_B, TAG_O], span_types=[1, 2])

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 3)),
                    min_size=0, max_size=6))
    @settings(max_examples=100)
    def test_roundtrip_from_disjoint_spans(self, raw):
        # Lay spans [start, start+len) left to right with a gap between
        # them, tag them B I*, and require extraction to return exactly
        # that list.
        tags = []
        expected = []
        for gap, length in raw:
            tags.extend([TAG_O] * (gap + 1))
            start = len(tags)
            tags.append(TAG_B)
            tags.extend([TAG_I] * (length - 1))
            expected.append(SlotSpan(start, start + length - 1))
        assert E.extract_spans(tags) == expected


class TestSpanF1:
    def test_perfect(self):
        lists = [[SlotSpan(0, 1, "a")], [SlotSpan(2, 2, "b")]]
        assert E.span_f1(lists, lists) == (1.0, 1.0, 1.0)

    def test_wrong_label_scores_zero(self):
        pred = [[SlotSpan(0, 1, "a")]]
        gold = [[SlotSpan(0, 1, "b")]]
        assert E.span_f1(pred, gold) == (0.0, 0.0, 0.0)

    def test_wrong_end_scores_zero(self):
        pred = [[SlotSpan(0, 2, "a")]]
        gold = [[SlotSpan(0, 1, "a")]]
        assert E.span_f1(pred, gold) == (0.0, 0.0, 0.0)

    def test_partial_recall(self):
        # [DERIVED] 1 correct of 2 gold, 1 pred: P=1, R=1/2, F1=2/3
        pred = [[SlotSpan(0, 0, "a")]]
        gold = [[SlotSpan(0, 0, "a"), SlotSpan(2, 3, "b")]]
        p, r, f1 = E.span_f1(pred, gold)
        assert (p, r) == (1.0, 0.5)
        assert f1 == pytest.approx(2 / 3)

    def test_empty_everything_is_zero(self):
        # 0/0 counts as 0, not NaN
        assert E.span_f1([[]], [[]]) == (0.0, 0.0, 0.0)

    def test_duplicates_match_as_multiset(self):
        # two identical predictions can only consume two identical golds
        dup = SlotSpan(0, 0, "a")
        p, r, _ = E.span_f1([[dup, dup]], [[dup]])
        assert (p, r) == (0.5, 1.0)

    def test_swap_transposes_precision_recall(self):
        pred = [[SlotSpan(0, 0, "a"), SlotSpan(1, 1, "b")], []]
        gold = [[SlotSpan(0, 0, "a")], [SlotSpan(4, 5, "c")]]
        p1, r1, f1a = E.span_f1(pred, gold)
        p2, r2, f1b = E.span_f1(gold, pred)
        assert (p1, r1) == (r2, p2) and f1a == pytest.approx(f1b)

    def test_matching_is_per_utterance(self):
        # same span in a different utterance must not match
        pred = [[SlotSpan(0, 0, "a")], []]
        gold = [[], [SlotSpan(0, 0, "a")]]
        assert E.span_f1(pred, gold) == (0.0, 0.0, 0.0)

    def test_misaligned_lists_rejected(self):
        with pytest.raises(DataError):
            E.span_f1([[]], [[], []])


def utt(tokens, y_bd, y_sl, domain="d"):
    return AnnotatedUtterance(list(tokens), list(y_bd), list(y_sl), domain)


class TestGoldSpans:
    def test_names_attached(self):
        lv = LabelVocabulary.from_names(["city", "date"], ["city"])
        u = utt("fly to rome".split(), [TAG_O, TAG_O, TAG_B], [None, None, 0])
        assert E.gold_spans(u, lv) == [SlotSpan(2, 2, "city")]

    def test_multi_token_span_uses_start_label(self):
        lv = LabelVocabulary.from_names(["city"], [])
        u = utt("new york city".split(), [TAG_B, TAG_I, TAG_I], [0, 0, 0])
        assert E.gold_spans(u, lv) == [SlotSpan(0, 2, "city")]


PRED = [
    [SlotSpan(0, 0, "city"), SlotSpan(2, 2, "date")],
    [SlotSpan(1, 1, "artist")],
    [],
]
GOLD = [
    [SlotSpan(0, 0, "city"), SlotSpan(2, 2, "date")],
    [SlotSpan(1, 1, "genre")],
    [SlotSpan(0, 1, "city")],
]


class TestBuildReport:
    def report(self):
        return E.build_report(PRED, GOLD, seen_labels={"city", "date"},
                              unseen_labels={"artist", "genre"},
                              decode_seconds=0.25)

    def test_overall(self):
        # [DERIVED] tp=2, n_pred=3, n_gold=4 -> P=2/3, R=1/2, F1=4/7
        rep = self.report()
        assert rep.precision == pytest.approx(2 / 3)
        assert rep.recall == pytest.approx(0.5)
        assert rep.f1 == pytest.approx(4 / 7)
        assert rep.n_utterances == 3 and rep.decode_seconds == 0.25

    def test_seen_group(self):
        # seen spans: pred city+date vs gold city+date+city -> tp=2
        g = self.report().seen
        assert (g.n_pred, g.n_gold) == (2, 3)
        assert g.precision == 1.0 and g.recall == pytest.approx(2 / 3)

    def test_unseen_group(self):
        # artist vs genre: no overlap
        g = self.report().unseen
        assert (g.n_pred, g.n_gold) == (1, 1)
        assert g.f1 == 0.0

    def test_group_counts_partition_totals(self):
        rep = self.report()
        assert rep.seen.n_gold + rep.unseen.n_gold == 4
        assert rep.seen.n_pred + rep.unseen.n_pred == 3

    def test_uttr_grouping_partitions_utterances(self):
        # utterance 2 has only seen gold but also only-gold spans; 1 is
        # unseen because one gold span is unseen
        rep = self.report()
        assert rep.seen_uttr.n_gold == 3         # utterances 0 and 2
        assert rep.unseen_uttr.n_gold == 1       # utterance 1
        assert rep.seen_uttr.n_gold + rep.unseen_uttr.n_gold == 4

    def test_uttr_unseen_keeps_whole_utterance(self):
        # a mixed utterance lands entirely in the unseen group
        pred = [[SlotSpan(0, 0, "city")]]
        gold = [[SlotSpan(0, 0, "city"), SlotSpan(1, 1, "artist")]]
        rep = E.build_report(pred, gold, {"city"}, {"artist"})
        assert rep.unseen_uttr.n_gold == 2
        assert rep.seen_uttr.n_gold == 0

    def test_per_label_covers_all_labels(self):
        rep = self.report()
        assert set(rep.per_label) == {"city", "date", "artist", "genre"}
        assert rep.per_label["city"].f1 == pytest.approx(2 / 3)
        assert rep.per_label["date"].f1 == 1.0

    def test_tsv_shape(self):
        text = self.report().to_tsv()
        lines = text.strip().split("\n")
        assert lines[0] == "group\tprecision\trecall\tf1\tn_pred\tn_gold"
        # overall + 4 groups + 4 labels
        assert len(lines) == 1 + 1 + 4 + 4
        assert lines[1].startswith("overall\t")
        for line in lines[2:]:
            cells = line.split("\t")
            assert len(cells) == 6
            float(cells[1]), float(cells[2]), float(cells[3])

    def test_kv_fields(self):
        text = self.report().to_kv()
        for key in ("precision = ", "recall = ", "f1 = ", "n_utterances = 3",
                    "seen.f1 = ", "unseen_uttr.f1 = "):
            assert key in text


def tiny_split():
    lv = LabelVocabulary.from_names(["city", "date"], ["city", "artist"])
    ic, ia = lv.index("city"), lv.index("artist")
    source = [
        utt("to rome".split(), [TAG_O, TAG_B], [None, ic], "src"),
        utt("on friday".split(), [TAG_O, TAG_B], [None, lv.index("date")], "src"),
    ]
    target = [
        utt("to oslo".split(), [TAG_O, TAG_B], [None, ic], "tgt"),
        utt("play abba now".split(), [TAG_O, TAG_B, TAG_O], [None, ia, None], "tgt"),
    ]
    return DomainSplit(source, target, lv)


class GoldOracleModel:
    """Stub that answers with the gold spans; isolates the scoring path."""

    def __init__(self, split):
        self.split = split
        self.calls = []

    def predict_spans(self, utterances, label_vocab, batch_size):
        self.calls.append((len(utterances), sorted(label_vocab.names()), batch_size))
        return [E.gold_spans(u, self.split.label_vocab) for u in utterances]


class TestEvaluateZeroShot:
    def test_perfect_model_scores_one(self):
        split = tiny_split()
        model = GoldOracleModel(split)
        rep = E.evaluate_zero_shot(model, split, batch_size=7)
        assert rep.f1 == 1.0 and rep.n_utterances == 2
        assert rep.decode_seconds >= 0.0

    def test_model_sees_only_target_labels(self):
        split = tiny_split()
        model = GoldOracleModel(split)
        E.evaluate_zero_shot(model, split, batch_size=7)
        n, names, bs = model.calls[0]
        assert (n, bs) == (2, 7)
        assert names == ["artist", "city"]      # no "date"

    def test_seen_unseen_partition(self):
        split = tiny_split()
        rep = E.evaluate_zero_shot(GoldOracleModel(split), split)
        assert rep.seen.n_gold == 1             # city appears in source
        assert rep.unseen.n_gold == 1           # artist does not
        assert rep.unseen.f1 == 1.0

    def test_empty_target_labels_rejected(self):
        lv = LabelVocabulary.from_names(["city"], [])
        split = DomainSplit([], [utt(["x"], [TAG_O], [None])], lv)
        with pytest.raises(DataError):
            E.evaluate_zero_shot(GoldOracleModel(split), split)


class CountingDecoder:
    """Records batch sizes per decode call and sleeps a fixed time."""

    def __init__(self):
        self.batch_sizes = []

    def decode_batch_spans(self, batch, label_vocab):
        self.batch_sizes.append(batch.size)
        return [[] for _ in range(batch.size)]


def latency_fixture():
    lv = LabelVocabulary.from_names(["city"], ["city"])
    data = [utt(["go", "home"], [TAG_O, TAG_B], [None, 0]) for _ in range(5)]
    split = DomainSplit(data, [], lv)
    return data, lv, build_vocabulary(split)


class TestBenchmarkLatency:
    def test_batched_partitions_dataset(self):
        data, lv, vocab = latency_fixture()
        model = CountingDecoder()
        out = E.benchmark_latency(model, data, lv, vocab, batch_size=2,
                                  mode="batched", runs=3, warmup=1)
        assert out >= 0.0
        # ceil(5/2)=3 batches, seen on 1 warmup + 3 timed passes
        assert model.batch_sizes == [2, 2, 1] * 4

    def test_instance_wise_uses_single_batches(self):
        data, lv, vocab = latency_fixture()
        model = CountingDecoder()
        E.benchmark_latency(model, data, lv, vocab, batch_size=2,
                            mode="instance-wise", runs=1, warmup=0)
        assert model.batch_sizes == [1] * 5

    def test_unknown_mode_rejected(self):
        data, lv, vocab = latency_fixture()
        with pytest.raises(DataError):
            E.benchmark_latency(CountingDecoder(), data, lv, vocab, 2, "turbo")


class ConstantVectors:
    """token_vectors stub emitting a recognizable per-position pattern."""

    def __init__(self, d=3):
        self.d = d

    def token_vectors(self, batch):
        out = np.zeros((batch.size, batch.n_max, self.d))
        out[:, :, 0] = 3.0                      # unit-normalizes to [1, 0, 0]
        return out


class TestExportEmbeddings:
    def test_rows_and_normalization(self, tmp_path):
        lv = LabelVocabulary.from_names(["city"], ["city"])
        data = [
            utt(["to", "rome"], [TAG_O, TAG_B], [None, 0]),
            utt(["new", "york"], [TAG_B, TAG_I], [0, 0]),
        ]
        vocab = build_vocabulary(DomainSplit(data, [], lv))
        path = tmp_path / "emb.tsv"
        n = E.export_entity_embeddings(ConstantVectors(), data, lv, vocab, path)
        lines = path.read_text().strip().split("\n")
        assert n == 3 and len(lines) == 3       # one row per non-O token
        first = lines[0].split("\t")
        assert first[:3] == ["0", "1", "city"]
        np.testing.assert_allclose([float(x) for x in first[3:]], [1, 0, 0])

    def test_empty_dataset_writes_empty_file(self, tmp_path):
        lv = LabelVocabulary.from_names(["city"], ["city"])
        data = [utt(["hi"], [TAG_O], [None])]
        vocab = build_vocabulary(DomainSplit(data, [], lv))
        path = tmp_path / "emb.tsv"
        assert E.export_entity_embeddings(ConstantVectors(), data, lv, vocab, path) == 0
        assert path.read_text() == ""

"""Full-model wiring: joint losses, gradient flow, decoding, batching."""

import numpy as np
import pytest

from slotfill import autodiff as ad
from slotfill.autodiff import Tape, backward
from slotfill.contrastive import ContrastiveConfig
from slotfill.data import (TAG_B, TAG_I, TAG_O, AnnotatedUtterance,
                           DomainSplit, LabelVocabulary, build_vocabulary,
                           make_batches)
from slotfill.encoder import EncoderConfig
from slotfill.errors import NumericError, UsageError
from slotfill.model import ModelConfig, SlotFillModel


def utt(tokens, y_bd, y_sl):
    return AnnotatedUtterance(list(tokens), list(y_bd), list(y_sl), "d")


def fixture(n_extra=0):
    lv = LabelVocabulary.from_names(["city", "date"], ["city"])
    ic, idt = lv.index("city"), lv.index("date")
    data = [
        utt("fly to rome tomorrow".split(),
            [TAG_O, TAG_O, TAG_B, TAG_B], [None, None, ic, idt]),
        utt("book paris".split(), [TAG_O, TAG_B], [None, ic]),
        utt("nothing here".split(), [TAG_O, TAG_O], [None, None]),
    ]
    for i in range(n_extra):
        data.append(utt(["go", "to", f"town{i}"],
                        [TAG_O, TAG_O, TAG_B], [None, None, ic]))
    vocab = build_vocabulary(DomainSplit(data, [], lv))
    return data, lv, vocab


def small_config(**kw):
    enc = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, dropout=0.0,
                        **kw.pop("encoder", {}))
    ctr = ContrastiveConfig(projection_dim=8, **kw.pop("contrastive", {}))
    return ModelConfig(encoder=enc, contrastive=ctr, boundary_hidden=6,
                       boundary_dim=4, **kw)


def small_model(seed=0, **kw):
    data, lv, vocab = fixture()
    model = SlotFillModel(small_config(**kw), vocab, seed=seed)
    (batch,) = make_batches(data, 8, 0, lv, vocab, shuffle=False)
    return model, batch, data, lv, vocab


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.boundary_hidden == 64 and cfg.boundary_dim == 10
        assert cfg.bottleneck is None and cfg.adapter_residual

    def test_validation(self):
        for kw in ({"boundary_hidden": 0}, {"boundary_dim": 0},
                   {"bottleneck": 0}, {"max_len": 1}):
            with pytest.raises(UsageError):
                ModelConfig(**kw)


class TestLosses:
    def test_three_nonnegative_terms_sum(self):
        model, batch, *_ = small_model()
        with Tape():
            out = model.losses(batch)
        total, bdy, typ, ctr = out.as_floats()
        assert bdy >= 0 and typ >= 0 and ctr >= 0
        assert total == pytest.approx(bdy + typ + ctr)
        assert ctr > 0          # slot pairs exist in this fixture

    def test_contrastive_toggle(self):
        model, batch, *_ = small_model()
        with Tape():
            on = model.losses(batch)
            off = model.losses(batch, with_contrastive=False)
        assert off.contrastive.item() == 0.0
        assert off.total.item() == pytest.approx(
            off.boundary.item() + off.typing.item())
        assert on.total.item() != off.total.item()
        # the shared terms are untouched by the toggle
        assert on.boundary.item() == off.boundary.item()
        assert on.typing.item() == off.typing.item()

    def test_deterministic_across_instances(self):
        a = small_model(seed=3)[0]
        model, batch, *_ = small_model(seed=3)
        with Tape():
            la = a.losses(batch).total.item()
            lb = model.losses(batch).total.item()
        assert la == lb

    def test_seed_changes_losses(self):
        _, batch, *_ = small_model(seed=0)
        m0 = small_model(seed=0)[0]
        m1 = small_model(seed=1)[0]
        with Tape():
            assert m0.losses(batch).total.item() != m1.losses(batch).total.item()

    def test_gradient_reaches_every_parameter(self):
        model, batch, *_ = small_model()
        with Tape():
            out = model.losses(batch)
            backward(out.total)
        missing = [k for k, t in model.named_params().items() if t.grad is None]
        assert missing == []

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_names_term(self):
        model, batch, *_ = small_model()
        model.typing.fusion_w.data[:] = np.inf
        with pytest.raises(NumericError, match="typing"):
            with Tape():
                model.losses(batch)


class TestParams:
    def test_prefixes_partition(self):
        model, *_ = small_model()
        named = model.named_params()
        prefixes = {k.split(".", 1)[0] for k in named}
        assert prefixes == {"encoder", "boundary", "typing", "contrastive"}
        enc = {id(t) for t in model.encoder_params()}
        heads = {id(t) for t in model.head_params()}
        assert enc.isdisjoint(heads)
        assert enc | heads == {id(t) for t in named.values()}

    def test_zero_grads(self):
        model, batch, *_ = small_model()
        with Tape():
            backward(model.losses(batch).total)
        model.zero_grads()
        assert all(t.grad is None for t in model.named_params().values())


class TestFrozenTargets:
    def test_value_matches_live_loss(self):
        model, batch, *_ = small_model()
        frozen = model.frozen_typing_targets(batch)
        with Tape():
            live = model.losses(batch).total.item()
            froz = model.losses(batch, typing_frozen=frozen).total.item()
        assert froz == pytest.approx(live, rel=1e-12)

    def test_end_to_end_finite_differences(self):
        # micro joint gradient check; the frozen targets make the typing
        # term an ordinary function of the parameters
        lv = LabelVocabulary.from_names(["city", "date"], ["city"])
        data = [
            utt(["to", "rome"], [TAG_O, TAG_B], [None, lv.index("city")]),
            utt(["on", "friday"], [TAG_O, TAG_B], [None, lv.index("date")]),
        ]
        vocab = build_vocabulary(DomainSplit(data, [], lv))
        cfg = ModelConfig(
            encoder=EncoderConfig(layers=1, heads=1, d_model=8, d_ff=16,
                                  dropout=0.0),
            contrastive=ContrastiveConfig(projection_dim=4),
            boundary_hidden=4, boundary_dim=4)
        model = SlotFillModel(cfg, vocab, seed=1)
        (batch,) = make_batches(data, 2, 0, lv, vocab, shuffle=False)
        frozen = model.frozen_typing_targets(batch)

        def f():
            return model.losses(batch, typing_frozen=frozen).total

        err = ad.finite_diff_check(f, list(model.named_params().values()))
        assert err < 1e-4


class TestDecoding:
    def test_decode_shapes_and_ranges(self):
        model, batch, data, lv, _ = small_model()
        spans_per_utt = model.decode_batch(batch)
        assert len(spans_per_utt) == batch.size
        for spans, u in zip(spans_per_utt, data):
            for s in spans:
                assert 0 <= s.start <= s.end < len(u)
                assert 0 <= s.label < len(lv.labels)

    def test_named_spans_use_vocab_names(self):
        model, batch, _, lv, _ = small_model()
        names = set(lv.names())
        for spans in model.decode_batch_spans(batch, lv):
            assert all(s.label in names for s in spans)

    def test_predict_spans_order_matches_dataset(self):
        data, lv, vocab = fixture(n_extra=4)
        model = SlotFillModel(small_config(), vocab, seed=0)
        whole = model.predict_spans(data, lv, batch_size=len(data))
        assert len(whole) == len(data)

    def test_batching_does_not_change_predictions(self):
        # padding must be inert end to end: attention masks it, the LSTM
        # gates freeze on it, Viterbi stops at the real length
        data, lv, vocab = fixture(n_extra=4)
        model = SlotFillModel(small_config(), vocab, seed=0)
        batched = model.predict_spans(data, lv, batch_size=3)
        single = model.predict_spans(data, lv, batch_size=1)
        assert batched == single

    def test_token_vectors_shape(self):
        model, batch, *_ = small_model()
        u = model.token_vectors(batch)
        assert u.shape == (batch.size, batch.n_max, 16)
        assert np.isfinite(u).all()

    def test_per_first_token_changes_only_typing(self):
        data, lv, vocab = fixture()
        a = SlotFillModel(small_config(), vocab, seed=0)
        b = SlotFillModel(small_config(per_first_token=True), vocab, seed=0)
        sa = a.predict_spans(data, lv, batch_size=4)
        sb = b.predict_spans(data, lv, batch_size=4)
        assert [[(s.start, s.end) for s in u] for u in sa] == \
               [[(s.start, s.end) for s in u] for u in sb]

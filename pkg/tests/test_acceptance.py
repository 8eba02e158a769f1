"""Scorecard run: every end-to-end guarantee the package makes, checked at
fixed tolerances. Each test prints exactly one PASS or FAIL line outside
pytest's capture, so a full run yields a ten-line summary."""

import itertools
import time

import numpy as np
import pytest
from scipy.special import logsumexp

import slotfill.autodiff as ad
from slotfill.autodiff import Tensor
from slotfill.benchmarks import load_benchmark, run_zero_shot
from slotfill.boundary import crf_nll, path_score, viterbi_decode
from slotfill.config import build_train_config, resolve
from slotfill.contrastive import (
    ContrastiveConfig, SlotPairSet, collect_slot_pairs, contrastive_loss,
)
from slotfill.data import (
    TAG_B, TAG_I, TAG_O,
    AnnotatedUtterance, LabelVocabulary, Vocabulary,
    build_model_input, build_vocabulary, collate, generate_synthetic,
    parse_synthetic_spec,
)
from slotfill.encoder import Encoder, EncoderConfig
from slotfill.errors import DataError
from slotfill.evaluation import benchmark_latency
from slotfill.model import ModelConfig, SlotFillModel
from slotfill.training import fit, load_checkpoint, save_checkpoint
from slotfill.typing_head import typing_loss


def report(capsys, name: str, ok: bool, detail: str = "") -> None:
    tail = f"  ({detail})" if detail else ""
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}{tail}")
    assert ok, f"{name}{tail}"


# -- shared micro fixtures --------------------------------------------------

def micro_model():
    """Two labels, d_model 8, one layer and head; the smallest config in
    which every loss term is exercised."""
    cfg = ModelConfig(
        encoder=EncoderConfig(layers=1, heads=1, d_model=8, d_ff=16,
                              dropout=0.0, max_positions=16),
        contrastive=ContrastiveConfig(projection_dim=8),
        boundary_hidden=8, boundary_dim=4, max_len=16)
    labels = LabelVocabulary.from_names(["alpha", "beta"], [])
    utts = [
        AnnotatedUtterance(["v1", "v2", "ctx"], [TAG_B, TAG_I, TAG_O],
                           [0, 0, None]),
        AnnotatedUtterance(["v3", "w"], [TAG_B, TAG_O], [1, None]),
    ]
    vocab = Vocabulary(sorted({"alpha", "beta", "v1", "v2", "v3", "ctx", "w"}))
    batch = collate([build_model_input(u, labels, vocab, max_len=16)
                     for u in utts])
    model = SlotFillModel(cfg, vocab, seed=3)
    return model, batch


def random_instance(rng, max_n: int):
    n = int(rng.integers(1, max_n + 1))
    e = rng.uniform(-2.0, 2.0, size=(n, 3))
    trans = rng.uniform(-2.0, 2.0, size=(3, 3))
    start = rng.uniform(-2.0, 2.0, size=3)
    return e, trans, start


# -- the ten checks ---------------------------------------------------------

def test_01_crf_matches_brute_force(capsys):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_nll = 0.0
    viterbi_exact = True
    with ad.no_grad():
        for _ in range(200):
            e, trans, start = random_instance(rng, 6)
            n = e.shape[0]
            y = rng.integers(0, 3, size=n)
            mask = np.ones((1, n))
            nll = float(crf_nll(Tensor(e[None]), Tensor(trans), Tensor(start),
                                y[None], mask).data)
            scores = [path_score(e, trans, start, p)
                      for p in itertools.product(range(3), repeat=n)]
            brute = logsumexp(scores) - path_score(e, trans, start, y)
            worst_nll = max(worst_nll, abs(nll - brute))
            best = viterbi_decode(e[None], trans, start, mask)[0]
            if abs(path_score(e, trans, start, best) - max(scores)) > 1e-9:
                viterbi_exact = False
    elapsed = time.perf_counter() - t0
    ok = worst_nll <= 1e-8 and viterbi_exact and elapsed < 5.0
    report(capsys, "CRF loss and Viterbi match 3^n enumeration", ok,
           f"max |dNLL| {worst_nll:.2e}, {elapsed:.1f}s")


def test_02_crf_probabilities_normalize(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    with ad.no_grad():
        for _ in range(20):
            e, trans, start = random_instance(rng, 5)
            n = e.shape[0]
            mask = np.ones((1, n))
            te, tt, ts = Tensor(e[None]), Tensor(trans), Tensor(start)
            total = sum(
                np.exp(-float(crf_nll(te, tt, ts,
                                      np.array(p)[None], mask).data))
                for p in itertools.product(range(3), repeat=n))
            worst = max(worst, abs(total - 1.0))
    ok = worst <= 1e-8
    report(capsys, "path probabilities sum to one", ok, f"max |sum-1| {worst:.2e}")


def test_03_whole_model_gradient_check(capsys):
    t0 = time.perf_counter()
    model, batch = micro_model()
    frozen = model.frozen_typing_targets(batch)
    f = lambda: model.losses(batch, typing_frozen=frozen).total
    err = ad.finite_diff_check(f, list(model.named_params().values()))
    elapsed = time.perf_counter() - t0
    ok = err < 1e-4 and elapsed < 60.0
    report(capsys, "whole-model gradient vs central differences", ok,
           f"max rel err {err:.2e}, {elapsed:.1f}s")


def test_04_stop_gradient_isolation(capsys):
    model, batch = micro_model()

    def grads_after(term):
        model.zero_grads()
        with ad.Tape():
            enc = model.encoder.forward(batch)
            bnd = model.boundary.forward(enc.r_utter, batch.utt_mask)
            u = model.typing.boundary_enhanced_repr(enc.r_utter, bnd.e)
            v = model.typing.adapt_labels(enc.label_matrix)
            ad.backward(typing_loss(u, v, batch.y_sl, batch.y_bd,
                                    batch.utt_mask, term=term))

    all_zero = lambda ps: all(p.grad is None or not np.any(p.grad) for p in ps)
    any_nonzero = lambda ps: any(p.grad is not None and np.any(p.grad) for p in ps)

    grads_after("u")
    label_frozen = all_zero(model.typing.adapter_params())
    utter_live = any_nonzero(model.typing.fusion_params())
    grads_after("v")
    utter_frozen = all_zero(model.typing.fusion_params()) and all_zero(
        model.boundary.named_params().values())
    label_live = any_nonzero(model.typing.adapter_params())
    ok = label_frozen and utter_live and utter_frozen and label_live
    report(capsys, "typing terms block their stop-gradient branches", ok)


def test_05_contrastive_oracle(capsys):
    cfg = ContrastiveConfig(metric="cosine", tau=0.5)

    # every pair equally similar: loss = log|P| - log|P+|
    s = Tensor(np.ones((1, 4, 3)))
    pairs = collect_slot_pairs(s, np.array([[0, 0, 1, 1]]),
                               np.full((1, 4), TAG_B), np.ones((1, 4)))
    const_case = abs(float(contrastive_loss(pairs, cfg).data)
                     - (np.log(12) - np.log(4))) <= 1e-6

    # one positive at cos=1, one negative at cos=-1, tau=0.5
    hand = SlotPairSet(Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])),
                       np.array([0, 0, 1]),
                       np.array([[0], [1]]), np.array([[0], [2]]))
    tiny_case = abs(float(contrastive_loss(hand, cfg).data)
                    - np.log1p(np.exp(-4.0))) <= 1e-6

    # monotonicity: dropping a negative strictly lowers the loss, and the
    # loss is strictly positive whenever negatives are present
    rng = np.random.default_rng(2)
    monotone = True
    for _ in range(100):
        m = int(rng.integers(3, 7))
        vecs = Tensor(rng.normal(size=(1, m, 4)))
        labels = rng.integers(0, 2, size=m)
        labels[:2] = 0                      # guarantee a positive pair
        labels[-1] = 1                      # and at least one negative
        ps = collect_slot_pairs(vecs, labels[None], np.full((1, m), TAG_B),
                                np.ones((1, m)))
        full = float(contrastive_loss(ps, cfg).data)
        fewer = SlotPairSet(ps.s, ps.labels, ps.pos, ps.neg[:, :-1])
        if not (full > float(contrastive_loss(fewer, cfg).data)) or not full > 0.0:
            monotone = False
            break
    ok = const_case and tiny_case and monotone
    report(capsys, "contrastive loss matches hand-derived cases", ok)


def test_06_zero_shot_benchmark(capsys):
    t0 = time.perf_counter()
    bench = load_benchmark()
    outcome = run_zero_shot(bench)
    elapsed = time.perf_counter() - t0
    ok = (outcome.min_dev_f1 >= bench.min_dev_f1
          and outcome.unseen_gap >= bench.min_unseen_gap
          and outcome.ablation_changed
          and elapsed < 600.0)
    report(capsys, "zero-shot transfer beats shuffled-label control", ok,
           f"min dev-F1 {outcome.min_dev_f1:.3f}, unseen {outcome.mean_unseen_f1:.3f} "
           f"vs control {outcome.mean_control_f1:.3f}, ablation "
           f"{outcome.ablation_with:.3f}->{outcome.ablation_without:.3f}, "
           f"{elapsed:.0f}s")


def test_07_interaction_policy_isolation(capsys):
    tokens = ["set", "the", "thing", "now"]
    vocab = Vocabulary(sorted(set(tokens) | {"red", "blue", "good", "fast"}))
    prefixes = [LabelVocabulary.from_names(["red", "blue"], []),
                LabelVocabulary.from_names(["good", "fast"], [])]

    def r_utter(policy, labels):
        cfg = EncoderConfig(layers=2, heads=2, d_model=16, d_ff=32,
                            dropout=0.0, max_positions=16,
                            interaction_policy=policy)
        enc = Encoder(cfg, len(vocab), seed=5)
        batch = collate([build_model_input(tokens, labels, vocab, max_len=16)])
        return enc.forward(batch).r_utter.data

    sealed = [r_utter("no-utterance-to-label", lv) for lv in prefixes]
    open_ = [r_utter("full", lv) for lv in prefixes]
    ok = np.array_equal(*sealed) and not np.array_equal(*open_)
    report(capsys, "severed utterance-to-label attention ignores the prefix", ok)


def test_08_batched_decode_speedup(capsys):
    spec = parse_synthetic_spec(
        "type: color\nrole: source\ncount: 500\n"
        "templates:\n  set the {slot} color please\n  use {slot} color now\n"
        "values:\n  zeph\n  quil\n  mave brod\n"
        "\n"
        "type: size\nrole: source\ncount: 500\n"
        "templates:\n  give me the {slot} size\n"
        "values:\n  small\n  tuken sarm\n")
    split = generate_synthetic(spec, 7)
    vocab = build_vocabulary(split)
    cfg = ModelConfig(
        encoder=EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32,
                              dropout=0.0, max_positions=32),
        contrastive=ContrastiveConfig(projection_dim=8),
        boundary_hidden=8, boundary_dim=4, max_len=32)
    model = SlotFillModel(cfg, vocab, seed=0)
    args = (split.source, split.label_vocab, vocab)
    batched = benchmark_latency(model, *args, batch_size=32, mode="batched",
                                runs=3, warmup=1, max_len=32)
    instance = benchmark_latency(model, *args, batch_size=32,
                                 mode="instance-wise", runs=3, warmup=1,
                                 max_len=32)
    ok = len(split.source) >= 1000 and instance >= 2.0 * batched
    report(capsys, "batched decoding at least twice as fast as instance-wise",
           ok, f"{instance / batched:.1f}x over {len(split.source)} utterances")


def test_09_checkpoint_round_trip(capsys, tmp_path):
    model, _ = micro_model()
    params = {k: t.data for k, t in model.named_params().items()}
    fp = bytes(range(32))
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path, fingerprint=fp)
    loaded = load_checkpoint(path, expected_fingerprint=fp)
    exact = (list(loaded.arrays) == list(params)
             and all(a.dtype == np.float64 and np.array_equal(a, params[k])
                     for k, a in loaded.arrays.items()))

    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0x40
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(blob)
    with pytest.raises(DataError):
        load_checkpoint(corrupt)
    with pytest.raises(DataError):
        load_checkpoint(path, expected_fingerprint=bytes(32))
    report(capsys, "checkpoints restore bit-exactly and refuse bad files",
           exact)


def test_10_training_is_deterministic(capsys):
    spec = parse_synthetic_spec(
        "type: color\nrole: source\ncount: 10\n"
        "templates:\n  set the {slot} color\n  {slot} color now\n"
        "values:\n  zeph\n  quil mave\n"
        "\n"
        "type: size\nrole: source\ncount: 10\n"
        "templates:\n  give me {slot} size\n"
        "values:\n  brod\n  nilv\n")
    split = generate_synthetic(spec, 3)
    cfg = build_train_config(resolve(overrides=[
        "encoder.layers=1", "encoder.heads=2", "encoder.d_model=16",
        "encoder.d_ff=32", "model.boundary_hidden=6", "model.boundary_dim=4",
        "contrastive.projection_dim=8", "trainer.epochs=3",
        "trainer.batch_size=8", "trainer.seed=11"]))
    first = fit(split, cfg).metrics_log()
    second = fit(split, cfg).metrics_log()
    ok = first == second and len(first.strip().split("\n")) == 4
    report(capsys, "identical config and seed reproduce the metrics log", ok)

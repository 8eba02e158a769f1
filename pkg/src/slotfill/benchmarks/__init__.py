"""Packaged synthetic benchmarks with seeded run protocols.

A benchmark couples a generated corpus with everything needed to reproduce
its numbers: the corpus seed, the training seeds, config overrides, and the
thresholds a run is expected to clear. The shipped `zeroshot` benchmark
trains on four single-word slot types and evaluates on two held-out types
whose names compose source-name words, so typing an unseen slot works only
if the model matches label-name tokens against the utterance context.

`run_zero_shot` scores three conditions per protocol: the true target
labels, a shuffled-label control (target label names replaced by random
vocabulary tokens, severing the lexical link), and a run without the
contrastive term.
"""

from dataclasses import dataclass
from importlib import resources
from statistics import mean

import numpy as np

from ..config import build_train_config, resolve
from ..data import (
    AnnotatedUtterance,
    DomainSplit,
    LabelVocabulary,
    SlotLabel,
    SlotTypeSpec,
    Vocabulary,
    generate_synthetic,
    parse_synthetic_spec,
    tokenize,
)
from ..errors import DataError
from ..evaluation import evaluate_zero_shot
from ..training import TrainConfig, fit

__all__ = [
    "Benchmark",
    "SeedOutcome",
    "ZeroShotOutcome",
    "load_benchmark",
    "run_zero_shot",
    "shuffled_label_split",
]


@dataclass(frozen=True)
class Benchmark:
    name: str
    spec: list[SlotTypeSpec]
    corpus_seed: int
    train_seeds: tuple[int, ...]
    overrides: tuple[str, ...]
    min_dev_f1: float
    min_unseen_gap: float

    def split(self) -> DomainSplit:
        return generate_synthetic(self.spec, self.corpus_seed)

    def config(self, seed: int, with_contrastive: bool = True) -> TrainConfig:
        extra = [f"trainer.seed={seed}"]
        if not with_contrastive:
            extra.append("trainer.with_contrastive=false")
        return build_train_config(resolve(overrides=[*self.overrides, *extra]))


def _read_packaged(name: str) -> str:
    path = resources.files(__package__).joinpath(name)
    try:
        return path.read_text(encoding="utf-8")
    except (FileNotFoundError, OSError):
        raise DataError(f"no packaged benchmark file {name!r}") from None


def load_benchmark(name: str = "zeroshot") -> Benchmark:
    """Read a packaged `<name>.manifest` protocol and its corpus spec."""
    text = _read_packaged(f"{name}.manifest")
    fields: dict[str, object] = {"override": []}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not sep or not value:
            raise DataError(f"{name}.manifest:{lineno}: expected `key: value`")
        try:
            if key == "spec":
                fields["spec"] = parse_synthetic_spec(_read_packaged(value))
            elif key == "corpus-seed":
                fields["corpus_seed"] = int(value)
            elif key == "train-seeds":
                fields["train_seeds"] = tuple(int(s) for s in value.split())
            elif key == "override":
                fields["override"].append(value)
            elif key == "min-dev-f1":
                fields["min_dev_f1"] = float(value)
            elif key == "min-unseen-gap":
                fields["min_unseen_gap"] = float(value)
            else:
                raise DataError(f"{name}.manifest:{lineno}: unknown key {key!r}")
        except ValueError:
            raise DataError(
                f"{name}.manifest:{lineno}: bad value {value!r} for {key!r}") from None
    required = {"spec", "corpus_seed", "train_seeds", "min_dev_f1", "min_unseen_gap"}
    missing = required - fields.keys()
    if missing:
        raise DataError(f"{name}.manifest: missing keys {sorted(missing)}")
    return Benchmark(name, fields["spec"], fields["corpus_seed"],
                     fields["train_seeds"], tuple(fields["override"]),
                     fields["min_dev_f1"], fields["min_unseen_gap"])


def shuffled_label_split(split: DomainSplit, vocab: Vocabulary,
                         seed: int) -> tuple[DomainSplit, dict[str, str]]:
    """Control condition: rename target labels to random vocabulary tokens.

    Replacement names keep the original token count (the prefix layout is
    unchanged) and are drawn from tokens that appear in no label name, so
    the new names carry no lexical relation to any utterance context the
    typing path could exploit. Gold annotations are renamed consistently;
    scores therefore measure only the lost name-context link.
    """
    rng = np.random.default_rng(seed)
    name_tokens: set[str] = set()
    for lab in split.label_vocab.labels:
        name_tokens.update(lab.tokens)
    pool = [t for t in vocab.id_to_token[3:] if t not in name_tokens]
    need = sum(len(tokenize(n)) for n in split.target_label_names)
    if len(pool) < need:
        raise DataError("vocabulary too small to draw control label names")
    picks = [pool[int(i)] for i in rng.choice(len(pool), size=need, replace=False)]
    mapping: dict[str, str] = {}
    for old in split.target_label_names:
        k = len(tokenize(old))
        mapping[old] = " ".join(picks.pop() for _ in range(k))

    renamed = [
        SlotLabel(mapping.get(l.name, l.name), tokenize(mapping.get(l.name, l.name)),
                  l.in_source, l.in_target)
        for l in split.label_vocab.labels
    ]
    new_vocab = LabelVocabulary(renamed)
    old_vocab = split.label_vocab
    target = []
    for u in split.target:
        new_sl = [
            None if s is None else
            new_vocab.index(mapping.get(old_vocab.labels[s].name,
                                        old_vocab.labels[s].name))
            for s in u.y_sl
        ]
        target.append(AnnotatedUtterance(u.tokens, u.y_bd, new_sl, u.domain))
    return DomainSplit(split.source, target, new_vocab), mapping


@dataclass(frozen=True)
class SeedOutcome:
    seed: int
    dev_f1: float
    unseen_f1: float
    control_f1: float


@dataclass(frozen=True)
class ZeroShotOutcome:
    runs: list[SeedOutcome]
    ablation_with: float
    ablation_without: float

    @property
    def min_dev_f1(self) -> float:
        return min(r.dev_f1 for r in self.runs)

    @property
    def mean_unseen_f1(self) -> float:
        return mean(r.unseen_f1 for r in self.runs)

    @property
    def mean_control_f1(self) -> float:
        return mean(r.control_f1 for r in self.runs)

    @property
    def unseen_gap(self) -> float:
        return self.mean_unseen_f1 - self.mean_control_f1

    @property
    def ablation_changed(self) -> bool:
        return self.ablation_with != self.ablation_without


def run_zero_shot(benchmark: Benchmark | None = None, log=None) -> ZeroShotOutcome:
    """Train per protocol seed and score true, control, and ablation runs.

    The control reuses each seed's trained model; only the evaluation-time
    label names change. The ablation retrains the first seed without the
    contrastive term.
    """
    bench = benchmark if benchmark is not None else load_benchmark()
    split = bench.split()
    runs: list[SeedOutcome] = []
    for seed in bench.train_seeds:
        result = fit(split, bench.config(seed))
        report = evaluate_zero_shot(result.model, split)
        control, _ = shuffled_label_split(split, result.vocab, seed)
        control_report = evaluate_zero_shot(result.model, control)
        runs.append(SeedOutcome(seed, result.best_f1, report.unseen.f1,
                                control_report.unseen.f1))
        if log:
            r = runs[-1]
            log(f"seed {r.seed}: dev-F1 {r.dev_f1:.3f} unseen-F1 "
                f"{r.unseen_f1:.3f} control-F1 {r.control_f1:.3f}")
    ablation = fit(split, bench.config(bench.train_seeds[0], with_contrastive=False))
    ablation_f1 = evaluate_zero_shot(ablation.model, split).unseen.f1
    if log:
        log(f"without contrastive: unseen-F1 {ablation_f1:.3f} "
            f"(with: {runs[0].unseen_f1:.3f})")
    return ZeroShotOutcome(runs, runs[0].unseen_f1, ablation_f1)

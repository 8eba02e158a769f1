"""Tokenization, BIO dataset ingestion, batching, and synthetic corpus generation.

Dataset files are two-column UTF-8 text: one `token<TAB>tag` line per token,
blank line between utterances, with a `# domain: <name>` header. Tags follow
the BIO schema (`B-<label>`, `I-<label>`, `O`).

A model input is the concatenation [start marker; label-name tokens; utterance
tokens] with no separator; each label's tokens occupy a known contiguous span
inside the prefix.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

# boundary tag indices, fixed everywhere (emissions, CRF, targets)
TAG_B, TAG_I, TAG_O = 0, 1, 2
NUM_TAGS = 3
TAG_NAMES = ("B", "I", "O")

START_TOKEN = "<s>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
START_ID, PAD_ID, UNK_ID = 0, 1, 2

DEFAULT_MAX_LEN = 128


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokenization."""
    return text.lower().split()


class Vocabulary:
    """Token ids with three reserved slots: start marker, padding, unknown."""

    def __init__(self, tokens=()):
        self.id_to_token: list[str] = [START_TOKEN, PAD_TOKEN, UNK_TOKEN]
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        i = self.token_to_id.get(token)
        if i is None:
            i = len(self.id_to_token)
            self.token_to_id[token] = i
            self.id_to_token.append(token)
        return i

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256("\n".join(self.id_to_token).encode("utf-8"))
        return h.hexdigest()


@dataclass
class SlotLabel:
    name: str
    tokens: list[str]
    in_source: bool = False
    in_target: bool = False


class LabelVocabulary:
    """Ordered slot labels with source / target membership flags.

    Order is the sorted order of label names, so any two runs over the same
    label set agree on label indices.
    """

    def __init__(self, labels: list[SlotLabel]):
        names = [l.name for l in labels]
        if len(set(names)) != len(names):
            raise DataError("duplicate label names")
        for l in labels:
            if not l.tokens:
                raise DataError(f"label {l.name!r} tokenizes to nothing")
        self.labels = sorted(labels, key=lambda l: l.name)
        self._index = {l.name: i for i, l in enumerate(self.labels)}

    @classmethod
    def from_names(cls, source_names, target_names) -> "LabelVocabulary":
        source_names = set(source_names)
        target_names = set(target_names)
        out = []
        for name in sorted(source_names | target_names):
            toks = tokenize(name)
            out.append(SlotLabel(name, toks, name in source_names, name in target_names))
        return cls(out)

    def index(self, name: str) -> int:
        i = self._index.get(name)
        if i is None:
            raise DataError(f"label {name!r} not in vocabulary")
        return i

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [l.name for l in self.labels]

    def source_names(self) -> list[str]:
        return [l.name for l in self.labels if l.in_source]

    def target_names(self) -> list[str]:
        return [l.name for l in self.labels if l.in_target]

    def shared_names(self) -> list[str]:
        return [l.name for l in self.labels if l.in_source and l.in_target]

    def restrict(self, names) -> "LabelVocabulary":
        """Sub-vocabulary over the given names, keeping flags."""
        keep = set(names)
        missing = keep - set(self._index)
        if missing:
            raise DataError(f"labels not in vocabulary: {sorted(missing)}")
        return LabelVocabulary([l for l in self.labels if l.name in keep])

    def content_hash(self) -> str:
        import hashlib

        lines = [f"{l.name}\t{int(l.in_source)}\t{int(l.in_target)}" for l in self.labels]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


@dataclass
class AnnotatedUtterance:
    tokens: list[str]
    y_bd: list[int]              # TAG_B / TAG_I / TAG_O per token
    y_sl: list[int | None]       # label index for non-O tokens, None for O
    domain: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def bio_tags(self, label_vocab: LabelVocabulary) -> list[str]:
        out = []
        for b, s in zip(self.y_bd, self.y_sl):
            if b == TAG_O:
                out.append("O")
            else:
                out.append(f"{TAG_NAMES[b]}-{label_vocab.labels[s].name}")
        return out


@dataclass
class DomainSplit:
    source: list[AnnotatedUtterance]
    target: list[AnnotatedUtterance]
    label_vocab: LabelVocabulary

    @property
    def source_label_names(self) -> list[str]:
        return self.label_vocab.source_names()

    @property
    def target_label_names(self) -> list[str]:
        return self.label_vocab.target_names()


def check_bio(tags: list[str]) -> str | None:
    """Diagnostic message for an invalid BIO sequence, or None if fine."""
    prev = "O"
    prev_label = None
    for i, tag in enumerate(tags):
        if tag == "O":
            prev, prev_label = "O", None
            continue
        if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
            return f"unrecognized tag {tag!r} at token {i}"
        kind, label = tag[0], tag[2:]
        if kind == "I":
            if prev == "O":
                return f"I-{label} at token {i} follows {'start' if i == 0 else 'O'}"
            if label != prev_label:
                return f"I-{label} at token {i} follows span of {prev_label!r}"
        prev, prev_label = kind, label
    return None


def decompose_bio(tags: list[str], label_vocab: LabelVocabulary):
    """Split BIO strings into boundary tags and per-token label indices."""
    problem = check_bio(tags)
    if problem:
        raise DataError(f"invalid BIO sequence: {problem}")
    y_bd: list[int] = []
    y_sl: list[int | None] = []
    for tag in tags:
        if tag == "O":
            y_bd.append(TAG_O)
            y_sl.append(None)
        else:
            y_bd.append(TAG_B if tag[0] == "B" else TAG_I)
            y_sl.append(label_vocab.index(tag[2:]))
    return y_bd, y_sl


def recompose_bio(y_bd, y_sl, label_vocab: LabelVocabulary) -> list[str]:
    return AnnotatedUtterance(list(map(str, range(len(y_bd)))), list(y_bd), list(y_sl)).bio_tags(
        label_vocab
    )


def remap_labels(utterances, from_vocab: LabelVocabulary,
                 to_vocab: LabelVocabulary) -> list[AnnotatedUtterance]:
    """Re-index y_sl by label name from one vocabulary into another.

    Needed when training decodes against a restricted label set whose
    indices differ from the full vocabulary's. A gold label absent from
    the destination is a data error, not a silent drop.
    """
    mapping: dict[int, int] = {}
    out = []
    for u in utterances:
        new_sl: list[int | None] = []
        for s in u.y_sl:
            if s is None:
                new_sl.append(None)
                continue
            if s not in mapping:
                name = from_vocab.labels[s].name
                mapping[s] = to_vocab.index(name)
            new_sl.append(mapping[s])
        out.append(AnnotatedUtterance(u.tokens, u.y_bd, new_sl, u.domain))
    return out


_DOMAIN_RE = re.compile(r"^#\s*domain:\s*(.+?)\s*$")


def _open_text(path):
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def load_dataset(path, label_vocab: LabelVocabulary) -> list[AnnotatedUtterance]:
    """Parse a two-column BIO file.

    Unknown tag shapes or labels raise with the offending line number.
    Records with an invalid BIO transition are dropped, with one warning
    summarizing how many were rejected.
    """
    path = Path(path)
    out: list[AnnotatedUtterance] = []
    domain = ""
    rejected = 0
    cur_tokens: list[str] = []
    cur_tags: list[str] = []
    cur_first_line = 0

    def flush():
        nonlocal rejected
        if not cur_tokens:
            return
        problem = check_bio(cur_tags)
        if problem:
            rejected += 1
            log.warning("%s:%d: rejected record: %s", path, cur_first_line, problem)
        else:
            y_bd, y_sl = decompose_bio(cur_tags, label_vocab)
            out.append(AnnotatedUtterance(list(cur_tokens), y_bd, y_sl, domain))
        cur_tokens.clear()
        cur_tags.clear()

    with _open_text(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            m = _DOMAIN_RE.match(line)
            if m:
                domain = m.group(1)
                continue
            if line.startswith("#"):
                continue
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected `token<TAB>tag`, got {line!r}")
            token, tag = parts[0].strip(), parts[1].strip()
            if tag != "O":
                if len(tag) < 3 or tag[1] != "-" or tag[0] not in "BI":
                    raise DataError(f"{path}:{lineno}: unknown tag {tag!r}")
                if tag[2:] not in label_vocab:
                    raise DataError(f"{path}:{lineno}: unknown label {tag[2:]!r} in tag {tag!r}")
            if not cur_tokens:
                cur_first_line = lineno
            cur_tokens.append(token.lower())
            cur_tags.append(tag)
    flush()
    if rejected:
        log.warning("%s: rejected %d record(s) with invalid BIO transitions", path, rejected)
    if not out:
        log.warning("%s: empty dataset", path)
    return out


def format_dataset(utterances, label_vocab: LabelVocabulary, domain: str | None = None) -> str:
    """Inverse of load_dataset up to whitespace and case normalization."""
    chunks = []
    if domain is None and utterances:
        domain = utterances[0].domain
    if domain:
        chunks.append(f"# domain: {domain}\n")
    for utt in utterances:
        lines = [f"{tok}\t{tag}" for tok, tag in zip(utt.tokens, utt.bio_tags(label_vocab))]
        chunks.append("\n".join(lines) + "\n\n")
    return "".join(chunks)


def save_dataset(utterances, label_vocab, path, domain=None) -> None:
    Path(path).write_text(format_dataset(utterances, label_vocab, domain), encoding="utf-8")


@dataclass
class ModelInput:
    """One encoded sequence: [start; label prefix; utterance], no separators.

    Spans are inclusive (start, end) index pairs into ``ids``.
    """

    ids: np.ndarray                       # int64, full sequence
    label_spans: list[tuple[int, int]]    # one per label, in label-vocab order
    utterance_range: tuple[int, int]
    y_bd: list[int] | None = None
    y_sl: list[int | None] | None = None
    utterance: AnnotatedUtterance | None = None

    @property
    def prefix_len(self) -> int:
        return self.utterance_range[0]

    @property
    def n_tokens(self) -> int:
        return self.utterance_range[1] - self.utterance_range[0] + 1


def build_model_input(utt, label_vocab: LabelVocabulary, vocab: Vocabulary,
                      max_len: int = DEFAULT_MAX_LEN) -> ModelInput:
    """Assemble ids and span bookkeeping for one utterance.

    ``utt`` is an AnnotatedUtterance (targets carried over) or a plain token
    list (targets left unset). Tokens absent from the vocabulary map to the
    unknown id.
    """
    if len(label_vocab) == 0:
        raise DataError("label vocabulary is empty; matching requires at least one label")
    if isinstance(utt, AnnotatedUtterance):
        tokens, y_bd, y_sl = utt.tokens, utt.y_bd, utt.y_sl
        ann = utt
    else:
        tokens, y_bd, y_sl, ann = list(utt), None, None, None

    ids = [START_ID]
    spans = []
    for lab in label_vocab.labels:
        start = len(ids)
        ids.extend(vocab.encode(lab.tokens))
        spans.append((start, len(ids) - 1))
    u_start = len(ids)
    ids.extend(vocab.encode(tokens))
    u_end = len(ids) - 1
    if len(ids) > max_len:
        raise DataError(
            f"sequence length {len(ids)} exceeds the configured maximum {max_len} "
            f"(prefix {u_start} + utterance {len(tokens)})")
    if u_end < u_start:
        raise DataError("empty utterance")
    return ModelInput(np.asarray(ids, dtype=np.int64), spans, (u_start, u_end),
                      y_bd, y_sl, ann)


@dataclass
class Batch:
    """Right-padded batch sharing one label prefix layout.

    ``mask`` marks real positions over the full padded sequence; the prefix
    is always real. ``y_sl`` uses -1 where the target is null or padding.
    """

    ids: np.ndarray            # (B, T) int64
    mask: np.ndarray           # (B, T) float64, 1 = real
    label_spans: list[tuple[int, int]]
    prefix_len: int
    utt_lens: np.ndarray       # (B,) int64
    y_bd: np.ndarray | None    # (B, n_max) int64, pad = TAG_O
    y_sl: np.ndarray | None    # (B, n_max) int64, null/pad = -1
    inputs: list[ModelInput] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def n_max(self) -> int:
        return self.ids.shape[1] - self.prefix_len

    @property
    def utt_mask(self) -> np.ndarray:
        """(B, n_max) mask over utterance positions only."""
        return self.mask[:, self.prefix_len:]


def collate(inputs: list[ModelInput]) -> Batch:
    if not inputs:
        raise DataError("cannot collate an empty batch")
    prefix_len = inputs[0].prefix_len
    spans = inputs[0].label_spans
    for mi in inputs:
        if mi.prefix_len != prefix_len or mi.label_spans != spans:
            raise DataError("inputs in one batch must share the label prefix layout")
    utt_lens = np.array([mi.n_tokens for mi in inputs], dtype=np.int64)
    n_max = int(utt_lens.max())
    T = prefix_len + n_max
    B = len(inputs)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float64)
    has_targets = all(mi.y_bd is not None for mi in inputs)
    y_bd = np.full((B, n_max), TAG_O, dtype=np.int64) if has_targets else None
    y_sl = np.full((B, n_max), -1, dtype=np.int64) if has_targets else None
    for b, mi in enumerate(inputs):
        L = mi.ids.size
        ids[b, :L] = mi.ids
        mask[b, :L] = 1.0
        if has_targets:
            n = mi.n_tokens
            y_bd[b, :n] = mi.y_bd
            y_sl[b, :n] = [-1 if s is None else s for s in mi.y_sl]
    return Batch(ids, mask, spans, prefix_len, utt_lens, y_bd, y_sl, list(inputs))


def make_batches(dataset, batch_size: int, seed: int, label_vocab: LabelVocabulary,
                 vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN,
                 shuffle: bool = True) -> list[Batch]:
    """Shuffle (seeded), encode, and right-pad into batches of at most batch_size."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    out = []
    for i in range(0, len(order), batch_size):
        chunk = [build_model_input(dataset[j], label_vocab, vocab, max_len)
                 for j in order[i:i + batch_size]]
        out.append(collate(chunk))
    return out


def build_vocabulary(split: DomainSplit) -> Vocabulary:
    """Token vocabulary over the union of both splits plus label-name tokens.

    Target-only tokens therefore have ids (their embeddings simply never
    receive gradient); sorted insertion keeps ids reproducible.
    """
    seen: set[str] = set()
    for lab in split.label_vocab.labels:
        seen.update(lab.tokens)
    for utt in split.source + split.target:
        seen.update(utt.tokens)
    return Vocabulary(sorted(seen))


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path) -> DomainSplit:
    """Read a key-value manifest naming dataset files and target labels.

    Keys `source:` and `target:` (repeatable) give file paths relative to the
    manifest; a bare `labels:` line starts the target label list, one name
    per line. Source labels are collected from the source files' tags.
    """
    path = Path(path)
    src_files: list[Path] = []
    tgt_files: list[Path] = []
    target_labels: list[str] = []
    in_labels = False
    with _open_text(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "labels:":
                in_labels = True
                continue
            if in_labels:
                target_labels.append(line)
                continue
            if ":" not in line:
                raise DataError(f"{path}:{lineno}: expected `key: value`, got {line!r}")
            key, _, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if key == "source":
                src_files.append(path.parent / value)
            elif key == "target":
                tgt_files.append(path.parent / value)
            else:
                raise DataError(f"{path}:{lineno}: unknown manifest key {key!r}")
    if not src_files:
        raise DataError(f"{path}: no source files listed")

    source_labels = set()
    for f in src_files:
        source_labels.update(_scan_labels(f))
    label_vocab = LabelVocabulary.from_names(source_labels, target_labels)
    source = []
    for f in src_files:
        source.extend(load_dataset(f, label_vocab))
    target = []
    for f in tgt_files:
        target.extend(load_dataset(f, label_vocab))
    return DomainSplit(source, target, label_vocab)


def _scan_labels(path) -> set[str]:
    found = set()
    with _open_text(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 2 and parts[1] not in ("O", "") and len(parts[1]) > 2:
                found.add(parts[1][2:])
    return found


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SlotTypeSpec:
    name: str
    role: str                  # source | target | shared
    templates: list[str]
    values: list[str]
    count: int = 50


def parse_synthetic_spec(text: str) -> list[SlotTypeSpec]:
    """Parse the sectioned synthetic-corpus description.

    Each section starts at a `type:` line and carries `role:`, optional
    `count:`, and indented line lists under `templates:` and `values:`.
    """
    sections: list[SlotTypeSpec] = []
    cur: dict | None = None
    mode = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        is_key = sep == ":" and key in ("type", "role", "count", "templates", "values")
        if is_key and key in ("templates", "values") and value.strip():
            is_key = False  # list line that merely starts with the word
        if is_key:
            value = value.strip()
            if key == "type":
                if cur is not None:
                    sections.append(_finish_section(cur))
                cur = {"name": value, "templates": [], "values": []}
                mode = None
            elif cur is None:
                raise DataError(f"line {lineno}: {key!r} before any `type:`")
            elif key == "role":
                cur["role"] = value
                mode = None
            elif key == "count":
                try:
                    cur["count"] = int(value)
                except ValueError:
                    raise DataError(f"line {lineno}: count must be an integer") from None
                mode = None
            else:
                mode = key
            continue
        if cur is None or mode is None:
            raise DataError(f"line {lineno}: unexpected content {line!r}")
        cur[mode].append(line)
    if cur is not None:
        sections.append(_finish_section(cur))
    if not sections:
        raise DataError("synthetic spec defines no slot types")
    return sections


def _finish_section(cur: dict) -> SlotTypeSpec:
    name = cur.get("name", "")
    if not name:
        raise DataError("slot type with empty name")
    role = cur.get("role")
    if role not in ("source", "target", "shared"):
        raise DataError(f"type {name!r}: role must be source, target, or shared")
    if not cur["values"]:
        raise DataError(f"type {name!r}: empty value lexicon")
    if not cur["templates"]:
        raise DataError(f"type {name!r}: no templates")
    for t in cur["templates"]:
        if t.count("{slot}") != 1:
            raise DataError(f"type {name!r}: template {t!r} needs exactly one {{slot}}")
    count = cur.get("count", 50)
    if count < 1:
        raise DataError(f"type {name!r}: count must be >= 1")
    return SlotTypeSpec(name, role, cur["templates"], cur["values"], count)


def generate_synthetic(spec: list[SlotTypeSpec], seed: int) -> DomainSplit:
    """Sample template-plus-value utterances with BIO annotations.

    Each type contributes exactly `count` utterances to every split its role
    places it in (source types fill D_S, target types fill D_T, shared types
    fill both with independent draws). Reproducible from (spec, seed).
    """
    rng = np.random.default_rng(seed)
    source: list[AnnotatedUtterance] = []
    target: list[AnnotatedUtterance] = []
    label_vocab = LabelVocabulary.from_names(
        [s.name for s in spec if s.role in ("source", "shared")],
        [s.name for s in spec if s.role in ("target", "shared")],
    )
    for st in sorted(spec, key=lambda s: s.name):
        idx = label_vocab.index(st.name)
        dests = []
        if st.role in ("source", "shared"):
            dests.append(("source", source))
        if st.role in ("target", "shared"):
            dests.append(("target", target))
        for domain, dest in dests:
            for _ in range(st.count):
                template = st.templates[rng.integers(len(st.templates))]
                value = st.values[rng.integers(len(st.values))]
                dest.append(_render(template, value, idx, domain))
    return DomainSplit(source, target, label_vocab)


def _render(template: str, value: str, label_idx: int, domain: str) -> AnnotatedUtterance:
    before, _, after = template.partition("{slot}")
    toks_b, toks_v, toks_a = tokenize(before), tokenize(value), tokenize(after)
    tokens = toks_b + toks_v + toks_a
    y_bd = [TAG_O] * len(toks_b) + [TAG_B] + [TAG_I] * (len(toks_v) - 1) + [TAG_O] * len(toks_a)
    y_sl: list[int | None] = [None] * len(toks_b) + [label_idx] * len(toks_v) + [None] * len(toks_a)
    return AnnotatedUtterance(tokens, y_bd, y_sl, domain)

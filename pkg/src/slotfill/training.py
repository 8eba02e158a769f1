"""Joint training loop: AdamW with parameter groups, dev selection, checkpoints.

The source split alone drives optimization; a seeded slice of it serves as
the development set and the best-dev parameters are restored at the end.
Checkpoints are a binary format with a config fingerprint and per-tensor
checksums so a stale or damaged artifact is refused instead of half-loaded.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import DomainSplit, build_vocabulary, make_batches, remap_labels
from .errors import DataError, UsageError
from .evaluation import gold_spans, span_f1
from .model import ModelConfig, SlotFillModel

METRICS_HEADER = "# epoch\tL_bdy\tL_typ\tL_ctr\tdev-P\tdev-R\tdev-F1"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 32
    encoder_lr: float = 1e-3     # 2e-5 suits a pretrained encoder; from
    head_lr: float = 1e-3        # scratch there is no prior to preserve
    weight_decay: float = 0.01
    seed: int = 0
    with_contrastive: bool = True
    dev_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.encoder_lr <= 0 or self.head_lr <= 0:
            raise UsageError("learning rates must be positive")
        if self.weight_decay < 0:
            raise UsageError("weight_decay must be >= 0")
        if not 0.0 < self.dev_fraction < 1.0:
            raise UsageError("dev_fraction must lie in (0, 1)")


class AdamW:
    """Decoupled weight decay; one shared step counter across groups.

    Parameters whose grad is None this step are skipped entirely, so a
    disabled loss term leaves its head untouched rather than decayed away.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                g = p.grad
                m = self._m[key]
                v = self._v[key]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
                p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()


def make_optimizer(model: SlotFillModel, config: TrainConfig) -> AdamW:
    return AdamW([(model.encoder_params(), config.encoder_lr),
                  (model.head_params(), config.head_lr)],
                 weight_decay=config.weight_decay)


def train_step(model: SlotFillModel, batch, optimizer: AdamW,
               config: TrainConfig, rng=None):
    """One forward/backward/update; returns (total, bdy, typ, ctr) floats."""
    model.zero_grads()
    with Tape():
        out = model.losses(batch, train=True, rng=rng,
                           with_contrastive=config.with_contrastive)
        backward(out.total)
    optimizer.step()
    return out.as_floats()


@dataclass
class EpochStats:
    epoch: int
    l_bdy: float
    l_typ: float
    l_ctr: float
    dev_p: float
    dev_r: float
    dev_f1: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.l_bdy:.6f}\t{self.l_typ:.6f}"
                f"\t{self.l_ctr:.6f}\t{self.dev_p:.6f}\t{self.dev_r:.6f}"
                f"\t{self.dev_f1:.6f}")


@dataclass
class TrainResult:
    model: SlotFillModel
    vocab: object
    source_labels: object        # label vocabulary the model decodes against
    history: list[EpochStats]
    best_epoch: int
    best_f1: float

    def metrics_log(self) -> str:
        lines = [METRICS_HEADER] + [s.line() for s in self.history]
        return "\n".join(lines) + "\n"


def split_dev(source, seed: int, fraction: float):
    """Seeded dev slice; both halves stay non-empty."""
    if len(source) < 2:
        raise DataError("need at least 2 source utterances to hold out dev")
    order = np.random.default_rng(seed).permutation(len(source))
    n_dev = min(max(1, int(round(len(source) * fraction))), len(source) - 1)
    dev = [source[i] for i in order[:n_dev]]
    train = [source[i] for i in order[n_dev:]]
    return train, dev


def fit(split: DomainSplit, config: TrainConfig, *, log=None,
        checkpoint_path=None, fingerprint: bytes = b"") -> TrainResult:
    """Train on the source split, select by dev F1, restore the best epoch.

    `log` receives each metrics line as it is produced. When
    `checkpoint_path` is given the best parameters are also written there
    under the supplied fingerprint.
    """
    if not split.source:
        raise DataError("source split is empty")
    source_names = split.source_label_names
    if not source_names:
        raise DataError("source label set is empty")
    source_labels = split.label_vocab.restrict(source_names)
    vocab = build_vocabulary(split)
    source = remap_labels(split.source, split.label_vocab, source_labels)
    train_data, dev_data = split_dev(source, config.seed, config.dev_fraction)

    model = SlotFillModel(config.model, vocab, seed=config.seed)
    optimizer = make_optimizer(model, config)
    drop_rng = np.random.default_rng([config.seed, 1])

    if log is not None:
        log(METRICS_HEADER)
    history: list[EpochStats] = []
    best_f1 = -1.0
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train_data, config.batch_size,
                               config.seed + epoch, source_labels, vocab,
                               max_len=config.model.max_len, shuffle=True)
        sums = np.zeros(3)
        for batch in batches:
            _, l_bdy, l_typ, l_ctr = train_step(model, batch, optimizer,
                                                config, drop_rng)
            sums += (l_bdy, l_typ, l_ctr)
        means = sums / len(batches)

        pred = model.predict_spans(dev_data, source_labels, config.batch_size)
        gold = [gold_spans(u, source_labels) for u in dev_data]
        p, r, f1 = span_f1(pred, gold)
        stats = EpochStats(epoch, means[0], means[1], means[2], p, r, f1)
        history.append(stats)
        if log is not None:
            log(stats.line())
        if f1 > best_f1:                      # ties keep the earliest epoch
            best_f1 = f1
            best_epoch = epoch
            best_params = {k: t.data.copy()
                           for k, t in model.named_params().items()}

    for name, t in model.named_params().items():
        t.data[...] = best_params[name]
    if checkpoint_path is not None:
        save_checkpoint(model.named_params(), checkpoint_path, fingerprint)
    return TrainResult(model, vocab, source_labels, history, best_epoch, best_f1)


# -- checkpoint format ----------------------------------------------------
#
#   magic "SLTF" | version u32 | fingerprint_len u32 | fingerprint |
#   n_tensors u32 | table | payload
#
# Each table entry: name_len u32, name, dtype_len u32, dtype, ndim u32,
# dims u64 each, payload offset u64, byte length u64, crc32 u32. All
# integers little-endian; payload entries are contiguous in table order.

CHECKPOINT_MAGIC = b"SLTF"
CHECKPOINT_VERSION = 1


def make_fingerprint(config_text: str, vocab_hash: str, label_hash: str) -> bytes:
    """Digest tying a checkpoint to its config and vocabularies.

    The target label set is deliberately excluded: a zero-shot model must
    load against any target domain.
    """
    h = sha256()
    for part in ("config", config_text, "vocab", vocab_hash,
                 "labels", label_hash):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(params: dict, path, fingerprint: bytes = b"") -> None:
    """Atomic write: a crash never leaves a half-written file behind."""
    table = bytearray()
    payload = bytearray()
    for name, tensor in params.items():
        arr = np.ascontiguousarray(
            tensor.data if isinstance(tensor, Tensor) else tensor,
            dtype="<f8")
        raw = arr.tobytes()
        table += _pack_str(name)
        table += _pack_str("<f8")
        table += struct.pack("<I", arr.ndim)
        table += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        table += struct.pack("<QQI", len(payload), len(raw), zlib.crc32(raw))
        payload += raw
    blob = (CHECKPOINT_MAGIC
            + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(fingerprint)) + fingerprint
            + struct.pack("<I", len(params))
            + table + payload)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                               prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CheckpointData:
    version: int
    fingerprint: bytes
    arrays: dict[str, np.ndarray]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected_fingerprint: bytes | None = None) -> CheckpointData:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    fingerprint = r.take(r.u32())
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise DataError("fingerprint mismatch: checkpoint was written under "
                        "a different config or vocabulary")
    n = r.u32()
    entries = []
    names = set()
    for _ in range(n):
        name = r.string()
        if name in names:
            raise DataError(f"duplicate tensor name {name!r}")
        names.add(name)
        dtype = r.string()
        if dtype != "<f8":
            raise DataError(f"unsupported dtype {dtype!r} for {name!r}")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        offset, nbytes, crc = r.u64(), r.u64(), r.u32()
        entries.append((name, shape, offset, nbytes, crc))
    payload_start = r.pos
    payload = data[payload_start:]
    end = max((off + nb for _, _, off, nb, _ in entries), default=0)
    if len(payload) != end:
        raise DataError("truncated checkpoint")
    arrays = {}
    for name, shape, offset, nbytes, crc in entries:
        raw = payload[offset:offset + nbytes]
        if zlib.crc32(raw) != crc:
            raise DataError(f"checksum mismatch for {name!r} at file offset "
                            f"{payload_start + offset}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    return CheckpointData(version, fingerprint, arrays)


def load_into_model(model: SlotFillModel, path,
                    expected_fingerprint: bytes | None = None) -> CheckpointData:
    """Restore every model parameter from a checkpoint, strictly by name."""
    ckpt = load_checkpoint(path, expected_fingerprint)
    params = model.named_params()
    missing = sorted(set(params) - set(ckpt.arrays))
    unexpected = sorted(set(ckpt.arrays) - set(params))
    if missing or unexpected:
        raise DataError(f"checkpoint does not match model: missing {missing}, "
                        f"unexpected {unexpected}")
    for name, t in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != t.data.shape:
            raise DataError(f"shape mismatch for {name!r}: "
                            f"{arr.shape} vs {t.data.shape}")
        t.data[...] = arr
    return ckpt

"""Corpus ingestion, batching, the Adam training loop and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape
from .model import Model, ModelConfig, count_parameters, init_params
from .tokenizer import Vocabulary, encode_text

log = logging.getLogger(__name__)

IGNORE_ID = -100
_TAG_RE = re.compile(r"<[^>]*>")


class EmptyCorpusError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Corpus:
    examples: list[list[int]]
    task: str
    pad_id: int
    sep_id: int
    stats: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


def strip_html(text: str) -> str:
    return _TAG_RE.sub(" ", text)


def load_text_corpus(path, vocab: Vocabulary, max_seq_len: int, min_words: int = 10,
                     mode: str = "wordpiece") -> Corpus:
    """One document per line, framed as [BOS] text [EOS] and truncated to ``max_seq_len``."""
    examples = []
    short = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            text = strip_html(line)
            if len(text.split()) < min_words:
                short += 1
                continue
            ids = [vocab.bos_id] + encode_text(vocab, text.lower(), mode) + [vocab.eos_id]
            ids = ids[:max_seq_len]
            if len(ids) >= 2:
                examples.append(ids)
    if not examples:
        raise EmptyCorpusError(f"no usable lines in {path}")
    return Corpus(examples, "lm", vocab.pad_id, vocab.sep_id, {"short_dropped": short})


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\r\n") for line in f]


def encode_couplet_half(vocab: Vocabulary, text: str, mode: str) -> list[int]:
    # the public couplet dataset separates characters with spaces
    if mode == "char":
        text = "".join(text.split())
    return encode_text(vocab, text, mode)


def load_couplet_corpus(first_path, second_path, vocab: Vocabulary, max_seq_len: int,
                        mode: str = "char") -> Corpus:
    """Aligned line files -> [BOS] first [SEP] second [EOS] examples."""
    firsts = _read_lines(first_path)
    seconds = _read_lines(second_path)
    if len(firsts) != len(seconds):
        raise AlignmentError(
            f"couplet files differ in length: {len(firsts)} lines vs {len(seconds)} lines"
        )
    examples = []
    stats = {"too_long": 0, "length_mismatch": 0, "empty": 0}
    for first, second in zip(firsts, seconds):
        a = encode_couplet_half(vocab, first, mode)
        b = encode_couplet_half(vocab, second, mode)
        if not a or not b:
            stats["empty"] += 1
            continue
        if len(a) != len(b):
            stats["length_mismatch"] += 1
        ids = [vocab.bos_id, *a, vocab.sep_id, *b, vocab.eos_id]
        if len(ids) > max_seq_len:
            stats["too_long"] += 1
            continue
        examples.append(ids)
    if stats["length_mismatch"]:
        log.warning("%d couplets have halves of different length", stats["length_mismatch"])
    if stats["too_long"]:
        log.info("dropped %d couplets longer than %d tokens", stats["too_long"], max_seq_len)
    if not examples:
        raise EmptyCorpusError(f"no usable couplets in {first_path} / {second_path}")
    return Corpus(examples, "couplet", vocab.pad_id, vocab.sep_id, stats)


def collate(examples: list[list[int]], corpus: Corpus, max_seq_len: int) -> Batch:
    t = min(max(len(ex) for ex in examples), max_seq_len)
    inputs = np.full((len(examples), t), corpus.pad_id, dtype=np.int64)
    targets = np.full((len(examples), t), IGNORE_ID, dtype=np.int64)
    for row, ex in enumerate(examples):
        ex = ex[:t]
        inputs[row, : len(ex)] = ex
        targets[row, : len(ex) - 1] = ex[1:]
        if corpus.task == "couplet" and corpus.sep_id in ex:
            # only the second half (from the SEP position on) is scored
            targets[row, : ex.index(corpus.sep_id)] = IGNORE_ID
    return Batch(inputs, targets)


def make_batches(corpus: Corpus, batch_size: int, max_seq_len: int, seed: int) -> Iterator[Batch]:
    """Endless stream of batches, reshuffled every epoch from ``seed``."""
    if not corpus.examples:
        raise EmptyCorpusError("cannot batch an empty corpus")
    rng = np.random.default_rng(seed)
    n = len(corpus.examples)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = [corpus.examples[i] for i in order[start:start + batch_size]]
            yield collate(chunk, corpus, max_seq_len)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainHyperParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 8


@dataclass
class Checkpoint:
    model: Model
    optimizer: AdamState
    step: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def new_checkpoint(cfg: ModelConfig, hyper: TrainHyperParams, seed: int, meta: dict | None = None) -> Checkpoint:
    model = Model(cfg, init_params(cfg, seed))
    opt = AdamState.for_params(model.parameters(), lr=hyper.lr, beta1=hyper.beta1,
                               beta2=hyper.beta2, epsilon=hyper.epsilon)
    return Checkpoint(model, opt, 0, seed, dict(meta or {}))


def train_step(model: Model, opt: AdamState, batch: Batch, clip_norm: float) -> tuple[float, float]:
    """Forward, loss, backward, clip and update. Returns (loss, pre-clip grad norm)."""
    params = model.parameters()
    with Tape() as tape:
        loss = ad.cross_entropy(model(batch.inputs), batch.targets, IGNORE_ID)
    value = float(loss.data)
    ad.backward(tape, loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    norm = ad.clip_grad_norm(grads, clip_norm)
    if not (math.isfinite(value) and math.isfinite(norm)):
        raise TrainingError(f"non-finite loss {value} or gradient norm {norm}")
    ad.adam_step(params, grads, opt)
    return value, norm


def train(cfg: ModelConfig, corpus: Corpus, steps: int, hyper: TrainHyperParams | None = None,
          seed: int = 0, checkpoint_path=None, checkpoint_interval: int = 500,
          meta: dict | None = None, on_step: Callable[[int, float], None] | None = None,
          ) -> tuple[Checkpoint, list[tuple[int, float]]]:
    """Train from a fresh initialisation and return the final state and loss trace.

    ``seed`` fixes both the initial weights and the batch order.
    """
    hyper = hyper or TrainHyperParams()
    ckpt = new_checkpoint(cfg, hyper, seed, meta)
    trace: list[tuple[int, float]] = []
    batches = make_batches(corpus, hyper.batch_size, cfg.max_seq_len, seed)
    for _ in range(steps):
        batch = next(batches)
        step = ckpt.step + 1
        try:
            loss, norm = train_step(ckpt.model, ckpt.optimizer, batch, hyper.clip_norm)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        ckpt.step = step
        trace.append((step, loss))
        if on_step is not None:
            on_step(step, loss)
        if step % 100 == 0:
            log.info("step %d loss %.4f grad-norm %.3f", step, loss, norm)
        if checkpoint_path is not None and checkpoint_interval > 0 and step % checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, ckpt)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt, trace


def eval_loss(model: Model | Checkpoint, corpus: Corpus, batch_size: int = 8) -> float:
    """Mean cross-entropy over every scored position, in corpus order."""
    if isinstance(model, Checkpoint):
        model = model.model
    if not corpus.examples:
        raise ad.DegenerateBatchError("empty corpus")
    total = 0.0
    count = 0
    for start in range(0, len(corpus.examples), batch_size):
        batch = collate(corpus.examples[start:start + batch_size], corpus, model.config.max_seq_len)
        n = int((batch.targets != IGNORE_ID).sum())
        if n == 0:
            continue
        total += float(ad.cross_entropy(model(batch.inputs), batch.targets, IGNORE_ID).data) * n
        count += n
    if count == 0:
        raise ad.DegenerateBatchError("no scored positions in corpus")
    return total / count


# ---------------------------------------------------------------------------
# Checkpoint file format
#
#   b"PSDP1"
#   u32 header length, UTF-8 JSON header (config, step, seed, adam scalars, meta)
#   u32 tensor count, then per tensor:
#       u16 name length, name, u8 ndim, u32 dims..., float32 LE data
#   (parameters in declared order, then Adam "m:" and "v:" moments)
#   u64 LE blake2b-64 digest of every preceding byte
# ---------------------------------------------------------------------------

MAGIC = b"PSDP1"


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class MagicError(CheckpointError):
    pass


class ConfigShapeError(CheckpointError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", buf.read(2))
    name = buf.read(n).decode("utf-8")
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
    return name, arr


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    named = ckpt.model.named_parameters()
    opt = ckpt.optimizer
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon, "t": opt.t},
        "meta": ckpt.meta,
    }
    raw_header = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(raw_header)))
    buf.write(raw_header)
    tensors = [(n, t.data) for n, t in named]
    if opt.m:
        tensors += [(f"m:{n}", m) for (n, _), m in zip(named, opt.m)]
        tensors += [(f"v:{n}", v) for (n, _), v in zip(named, opt.v)]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    body = buf.getvalue()
    return body + _digest(body)


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Write ``ckpt`` to ``path`` and return the file size in bytes."""
    data = checkpoint_bytes(ckpt)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise MagicError(f"{path}: not a PSDP checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 12 or _digest(data[:-8]) != data[-8:]:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    buf = io.BytesIO(data[len(MAGIC):-8])
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    (count,) = struct.unpack("<I", buf.read(4))
    stored = dict(_read_tensor(buf) for _ in range(count))

    params = init_params(cfg, 0)
    model = Model(cfg, params)
    named = model.named_parameters()
    for name, tensor in named:
        if name not in stored:
            raise ConfigShapeError(f"{path}: missing parameter {name}")
        if stored[name].shape != tensor.shape:
            raise ConfigShapeError(
                f"{path}: parameter {name} has shape {stored[name].shape}, config expects {tensor.shape}"
            )
        tensor.data = stored[name]
    a = header["adam"]
    opt = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"], t=a["t"])
    if f"m:{named[0][0]}" in stored:
        opt.m = [stored[f"m:{n}"] for n, _ in named]
        opt.v = [stored[f"v:{n}"] for n, _ in named]
    else:
        opt.m = [np.zeros_like(t.data) for _, t in named]
        opt.v = [np.zeros_like(t.data) for _, t in named]
    return Checkpoint(model, opt, header["step"], header["seed"], header.get("meta", {}))


def stored_parameter_bytes(cfg: ModelConfig) -> int:
    """Bytes the parameter tensors occupy in a checkpoint (float32)."""
    return 4 * count_parameters(cfg)["total"]

"""Top-k sampling, the repeat-retry rule, chunked generation and couplet completion.

Randomness comes from a single ``numpy.random.Generator`` (PCG64) per run.
Draw order: exactly one ``rng.random()`` per sampling decision, including
each retry, so a run is reproducible from its seed alone. Chunk candidates
are drawn one after another from that same generator.

Any object with a ``config`` (for ``max_seq_len``) and a ``logits(ids)``
method returning a (1, T, V) array can be used as the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import log_softmax
from .model import SequenceLengthError
from .tokenizer import Vocabulary, decode_ids, encode_text


@dataclass
class SamplerPolicy:
    k: int = 10
    retry_repeats: int = 3
    max_new_tokens: int = 100
    temperature: float = 1.0
    seed: int = 0
    eos_id: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.retry_repeats < 0:
            raise ValueError(f"retry_repeats must be >= 0, got {self.retry_repeats}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class ChunkPolicy:
    chunk_length: int = 8
    candidates: int = 4

    def __post_init__(self):
        if self.chunk_length < 1 or self.candidates < 1:
            raise ValueError("chunk_length and candidates must both be >= 1")


def top_k_candidates(logits: np.ndarray, k: int, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """The k most probable ids (ties to the lower id) and their renormalised probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    vocab = logits.shape[-1]
    if k > vocab:
        raise ValueError(f"k={k} exceeds vocabulary size {vocab}")
    z = logits / temperature
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    order = np.lexsort((np.arange(vocab), -probs))[:k]
    kept = probs[order]
    return order, kept / kept.sum()


def top_k_sample(logits: np.ndarray, k: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
    ids, probs = top_k_candidates(logits, k, temperature)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return int(ids[min(idx, len(ids) - 1)])


def _context(ids: Sequence[int], max_len: int) -> np.ndarray:
    return np.asarray(ids[-max_len:], dtype=np.int64)[None, :]


def _extend(model, ids: list[int], n: int, policy: SamplerPolicy, rng: np.random.Generator,
            continuation_start: int) -> list[int]:
    """Sample up to ``n`` tokens after ``ids``; stops after EOS.

    A token already present in ``ids[continuation_start:]`` or among the new
    tokens is redrawn up to ``policy.retry_repeats`` times; the last draw wins.
    """
    max_len = model.config.max_seq_len
    seq = list(ids)
    new: list[int] = []
    for _ in range(n):
        logits = model.logits(_context(seq, max_len))[0, -1]
        tok = top_k_sample(logits, policy.k, rng, policy.temperature)
        generated = seq[continuation_start:]
        tries = 0
        while tries < policy.retry_repeats and tok in generated:
            tok = top_k_sample(logits, policy.k, rng, policy.temperature)
            tries += 1
        seq.append(tok)
        new.append(tok)
        if policy.eos_id is not None and tok == policy.eos_id:
            break
    return new


def _check_prompt(model, prompt_ids: Sequence[int]) -> None:
    if len(prompt_ids) == 0:
        raise ValueError("prompt must not be empty")
    if len(prompt_ids) > model.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt of {len(prompt_ids)} tokens exceeds max_seq_len {model.config.max_seq_len}"
        )


def generate(model, prompt_ids: Sequence[int], policy: SamplerPolicy,
             rng: np.random.Generator | None = None) -> list[int]:
    """Prompt followed by up to ``policy.max_new_tokens`` sampled tokens.

    Once the sequence outgrows ``max_seq_len`` the model sees only the most
    recent ``max_seq_len`` tokens.
    """
    _check_prompt(model, prompt_ids)
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    prompt = list(prompt_ids)
    return prompt + _extend(model, prompt, policy.max_new_tokens, policy, rng, len(prompt))


def sequence_log_prob(model, context_ids: Sequence[int], continuation_ids: Sequence[int]) -> float:
    """Sum of log p(token | everything before it) over the continuation."""
    if len(continuation_ids) == 0:
        return 0.0
    if len(context_ids) == 0:
        raise ValueError("context must contain at least one token")
    full = list(context_ids) + list(continuation_ids)
    if len(full) > model.config.max_seq_len:
        raise SequenceLengthError(
            f"context + continuation = {len(full)} tokens exceeds max_seq_len {model.config.max_seq_len}"
        )
    logp = log_softmax(model.logits(np.asarray(full[:-1], dtype=np.int64)[None, :])[0])
    start = len(context_ids) - 1
    rows = np.arange(start, start + len(continuation_ids))
    return float(logp[rows, np.asarray(continuation_ids)].sum())


def chunk_score(model, context_ids: Sequence[int], chunk: Sequence[int]) -> float:
    """Mean per-token log-probability; the context is left-truncated to fit."""
    room = model.config.max_seq_len - len(chunk)
    return sequence_log_prob(model, list(context_ids)[-room:], chunk) / len(chunk)


def best_chunk(scores: Sequence[float]) -> int:
    """Index of the highest score; the earliest candidate wins ties."""
    return int(np.argmax(scores))


def chunk_generate(model, prompt_ids: Sequence[int], sampler: SamplerPolicy, chunks: ChunkPolicy,
                   total_tokens: int, rng: np.random.Generator | None = None,
                   trace: list | None = None) -> list[int]:
    """Grow the text one chunk at a time, keeping the best of several sampled chunks.

    If ``trace`` is a list, one dict per step is appended with the candidate
    chunks, their scores and the chosen index.
    """
    _check_prompt(model, prompt_ids)
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    out = list(prompt_ids)
    start = len(out)
    emitted = 0
    while emitted < total_tokens:
        n = min(chunks.chunk_length, total_tokens - emitted)
        candidates = [_extend(model, out, n, sampler, rng, start) for _ in range(chunks.candidates)]
        if len(candidates) == 1:
            scores = [0.0]
        else:
            scores = [chunk_score(model, out, c) for c in candidates]
        best = best_chunk(scores)
        if trace is not None:
            trace.append({"context": list(out), "candidates": candidates, "scores": scores, "chosen": best})
        chosen = candidates[best]
        out.extend(chosen)
        emitted += len(chosen)
        if sampler.eos_id is not None and chosen[-1] == sampler.eos_id:
            break
    return out


def complete_couplet(model, first: str, vocab: Vocabulary, policy: SamplerPolicy, n: int = 1,
                     mode: str = "char") -> list[str]:
    """``n`` sampled second sentences for ``first``; sample i uses seed ``policy.seed + i``."""
    text = "".join(first.split()) if mode == "char" else first
    encoded = encode_text(vocab, text, mode)
    if not encoded:
        raise ValueError("first sentence must not be empty")
    prompt = [vocab.bos_id, *encoded, vocab.sep_id]
    limit = SamplerPolicy(k=policy.k, retry_repeats=policy.retry_repeats, max_new_tokens=len(encoded) + 4,
                          temperature=policy.temperature, seed=policy.seed, eos_id=vocab.eos_id)
    results = []
    for i in range(n):
        ids = generate(model, prompt, limit, np.random.default_rng(policy.seed + i))[len(prompt):]
        if vocab.eos_id in ids:
            ids = ids[: ids.index(vocab.eos_id)]
        results.append(decode_ids(vocab, ids, mode))
    return results

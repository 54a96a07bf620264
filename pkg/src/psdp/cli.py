"""Command-line entry point: ``psdp <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import generation as gen
from .autodiff import DegenerateBatchError
from .config import RunConfig, load_config, shipped_configs
from .model import ConfigError, SequenceLengthError, count_parameters, stacked_counterpart
from .tokenizer import (
    Vocabulary,
    VocabFormatError,
    build_char_vocab,
    decode_ids,
    encode_text,
    load_vocab,
)
from .training import (
    AlignmentError,
    CheckpointError,
    EmptyCorpusError,
    TrainHyperParams,
    TrainingError,
    eval_loss,
    load_checkpoint,
    load_couplet_corpus,
    load_text_corpus,
    stored_parameter_bytes,
    train,
)

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _fmt(n: int) -> str:
    return f"{n:,}"


def cmd_count_params(args) -> int:
    cfg = load_config(args.config).model_config()
    c = count_parameters(cfg)
    rows = [
        ("variant", cfg.variant),
        ("per-layer", _fmt(c["per_layer"])),
        ("decoders", _fmt(c["decoders"])),
        ("mapping weight", _fmt(c["mapping_weight"])),
        ("mapping bias", _fmt(c["mapping_bias"])),
        ("final norm", _fmt(c["final_norm"])),
        ("token embeddings", _fmt(c["token_embeddings"])),
        ("position embeddings", _fmt(c["position_embeddings"])),
        ("total excluding embeddings", _fmt(c["total_excluding_embeddings"])),
        ("total", _fmt(c["total"])),
        ("float32 bytes", _fmt(stored_parameter_bytes(cfg))),
    ]
    if cfg.variant == "psdp":
        stacked = count_parameters(stacked_counterpart(cfg))
        rows.append(("stacked decoders", _fmt(stacked["decoders"])))
        rows.append(("shared/stacked ratio", f"{100.0 * c['decoders'] / stacked['decoders']:.2f}%"))
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key.ljust(width)}  {value}")
    return 0


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"{what} path is not set")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _corpus_paths(rc: RunConfig, task: str) -> list[str]:
    if task == "couplet":
        return [_require_file(rc.couplet_first, "couplet_first"), _require_file(rc.couplet_second, "couplet_second")]
    return [_require_file(rc.corpus, "corpus")]


def _vocab_for(rc: RunConfig, paths: list[str]) -> Vocabulary:
    if rc.vocab:
        return load_vocab(_require_file(rc.vocab, "vocab"))
    if rc.tokenizer == "char":
        return build_char_vocab(paths)
    raise UsageError("wordpiece tokenizer needs a vocab file")


def _load_corpus(rc: RunConfig, task: str, vocab: Vocabulary, paths: list[str]):
    if task == "couplet":
        return load_couplet_corpus(paths[0], paths[1], vocab, rc.max_seq_len, rc.tokenizer)
    return load_text_corpus(paths[0], vocab, rc.max_seq_len, rc.min_words, rc.tokenizer)


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    for key in ("steps", "seed", "checkpoint_out", "loss_log"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(rc, key, value)
    return rc


def cmd_train(args) -> int:
    rc = _apply_overrides(load_config(args.config), args)
    paths = _corpus_paths(rc, args.task)
    vocab = _vocab_for(rc, paths)
    if rc.vocab_size != len(vocab):
        logging.getLogger(__name__).info("vocab_size set to %d from the vocabulary", len(vocab))
        rc.vocab_size = len(vocab)
    cfg = rc.model_config()
    corpus = _load_corpus(rc, args.task, vocab, paths)
    ckpt_path = rc.checkpoint_out or "checkpoint.psdp"
    log_path = rc.loss_log or f"{ckpt_path}.loss.csv"
    hyper = TrainHyperParams(lr=rc.lr, beta1=rc.beta1, beta2=rc.beta2, epsilon=rc.epsilon,
                             clip_norm=rc.clip_norm, batch_size=rc.batch_size)
    meta = {"tokenizer": rc.tokenizer, "task": args.task, "vocab": vocab.id_to_token}
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_file:
        def on_step(step, loss):
            log_file.write(f"{step},{loss:.6f}\n")

        ckpt, trace = train(cfg, corpus, rc.steps, hyper, rc.seed, ckpt_path,
                            rc.checkpoint_interval, meta, on_step)
    size = os.path.getsize(ckpt_path)
    final = f"{trace[-1][1]:.6f}" if trace else "n/a"
    print(f"final loss {final}")
    print(f"checkpoint {ckpt_path} ({size} bytes)")
    return 0


def _load_for_inference(args):
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    mode = ckpt.meta.get("tokenizer", "wordpiece")
    if args.vocab:
        vocab = load_vocab(_require_file(args.vocab, "vocab"))
    elif "vocab" in ckpt.meta:
        vocab = Vocabulary(ckpt.meta["vocab"])
    else:
        raise UsageError("checkpoint carries no vocabulary; pass --vocab")
    if len(vocab) != ckpt.config.vocab_size:
        raise UsageError(
            f"vocabulary has {len(vocab)} tokens but the checkpoint expects {ckpt.config.vocab_size}"
        )
    return ckpt, vocab, mode


def cmd_generate(args) -> int:
    ckpt, vocab, mode = _load_for_inference(args)
    prompt = [vocab.bos_id] + encode_text(vocab, args.prompt, mode)
    policy = gen.SamplerPolicy(k=args.k, retry_repeats=args.retries, max_new_tokens=args.max_tokens,
                               temperature=args.temperature, seed=args.seed, eos_id=vocab.eos_id)
    if args.chunked:
        chunks = gen.ChunkPolicy(chunk_length=args.chunk_len, candidates=args.candidates)
        ids = gen.chunk_generate(ckpt.model, prompt, policy, chunks, args.max_tokens)
    else:
        ids = gen.generate(ckpt.model, prompt, policy)
    print(decode_ids(vocab, ids, mode))
    return 0


def cmd_couplet(args) -> int:
    if not args.first.strip():
        raise UsageError("--first must not be empty")
    if args.n == 0:
        return 0
    ckpt, vocab, mode = _load_for_inference(args)
    policy = gen.SamplerPolicy(k=args.k, retry_repeats=args.retries, temperature=args.temperature,
                               seed=args.seed)
    for line in gen.complete_couplet(ckpt.model, args.first, vocab, policy, args.n, mode):
        print(line)
    return 0


def cmd_tokenize(args) -> int:
    vocab = load_vocab(_require_file(args.vocab, "vocab"))
    ids = encode_text(vocab, args.text, args.mode)
    pieces = [vocab.id_to_token[i] for i in ids]
    print(" ".join(pieces) + "\t" + " ".join(str(i) for i in ids))
    print(decode_ids(vocab, ids, args.mode))
    return 0


def cmd_eval(args) -> int:
    rc = load_config(args.config)
    ckpt, vocab, _ = _load_for_inference(args)
    rc.tokenizer = ckpt.meta.get("tokenizer", rc.tokenizer)
    rc.max_seq_len = ckpt.config.max_seq_len
    paths = _corpus_paths(rc, args.task)
    corpus = _load_corpus(rc, args.task, vocab, paths)
    print(f"{eval_loss(ckpt, corpus):.6f}")
    return 0


def cmd_dump_config(args) -> int:
    sys.stdout.write(load_config(args.config).dumps())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psdp",
        description="Parameter sharing decoder pair language models.",
        epilog=f"shipped configs: {', '.join(shipped_configs())}; "
               f"config keys: {', '.join(f.name for f in RunConfig.__dataclass_fields__.values())}",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="print the parameter breakdown of a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("train", help="train a model and write a checkpoint and loss log")
    p.add_argument("--config", required=True)
    p.add_argument("--task", choices=("lm", "couplet"), required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-out", dest="checkpoint_out")
    p.add_argument("--loss-log", dest="loss_log")
    p.set_defaults(func=cmd_train)

    def inference_flags(p, k):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vocab")
        p.add_argument("--k", type=int, default=k)
        p.add_argument("--retries", type=int, default=3)
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="continue a prompt with top-k sampling")
    inference_flags(p, 10)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=100)
    p.add_argument("--chunked", action="store_true")
    p.add_argument("--chunk-len", dest="chunk_len", type=int, default=8)
    p.add_argument("--candidates", type=int, default=4)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("couplet", help="sample second sentences for a couplet")
    inference_flags(p, 15)
    p.add_argument("--first", required=True)
    p.add_argument("--n", type=int, default=1)
    p.set_defaults(func=cmd_couplet)

    p = sub.add_parser("tokenize", help="show pieces, ids and the decoded round trip")
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", choices=("wordpiece", "char"), default="wordpiece")
    p.add_argument("text")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("eval", help="mean loss of a checkpoint on the config's corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--task", choices=("lm", "couplet"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-config", help="print the fully resolved config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_dump_config)
    return parser


USAGE_ERRORS = (UsageError, ConfigError, VocabFormatError, CheckpointError, AlignmentError,
                EmptyCorpusError, SequenceLengthError, FileNotFoundError, ValueError)
RUNTIME_ERRORS = (TrainingError, DegenerateBatchError, RuntimeError, OSError, ArithmeticError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS[:2] as exc:
        print(f"psdp: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except USAGE_ERRORS as exc:
        print(f"psdp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"psdp: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Modified (self-attention only) decoder, its stacked baseline, and PSDP.

PSDP runs two decoders over the same embedded input. Each decoder owns a
single layer's worth of weights and applies it ``num_layers`` times. The two
outputs are concatenated, projected back to the embedding width, added to
their average and passed through a final layer norm. Logits come from the
transposed token embedding. There is no dropout anywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("psdp", "stacked")
MASK_FILL = -1e9
INIT_STD = 0.02
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_size: int = 768
    num_heads: int = 12
    head_size: int = 64
    hidden_size: int = 768
    ffn_size: int = 3072
    num_layers: int = 12
    max_seq_len: int = 128
    vocab_size: int = 30522
    variant: str = "psdp"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "variant" and (not isinstance(getattr(self, f.name), int) or getattr(self, f.name) <= 0):
                raise ConfigError(f"{f.name} must be a positive integer, got {getattr(self, f.name)!r}")
        if self.num_heads * self.head_size != self.embed_size:
            raise ConfigError(
                f"num_heads * head_size must equal embed_size "
                f"({self.num_heads} * {self.head_size} != {self.embed_size})"
            )
        if self.hidden_size != self.embed_size:
            raise ConfigError(f"hidden_size must equal embed_size ({self.hidden_size} != {self.embed_size})")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be at least 2, got {self.max_seq_len}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig(**{**asdict(self), **changes})


@dataclass
class LayerParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)


@dataclass
class PsdpParams:
    tok_emb: Tensor
    pos_emb: Tensor
    decoder_a: LayerParams
    decoder_b: LayerParams
    w_p: Tensor
    b_p: Tensor
    lnf_g: Tensor
    lnf_b: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        yield from self.decoder_a.named("decoder_a")
        yield from self.decoder_b.named("decoder_b")
        yield "w_p", self.w_p
        yield "b_p", self.b_p
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b


@dataclass
class StackedParams:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layers.{i}")


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

def layer_parameter_count(embed_size: int, ffn_size: int) -> int:
    e, f = embed_size, ffn_size
    return 4 * (e * e + e) + (e * f + f) + (f * e + e) + 4 * e


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Exact element counts per parameter group.

    ``decoders`` counts distinct storage: two shared layer sets for PSDP,
    ``num_layers`` independent ones for the stacked baseline.
    """
    e = cfg.embed_size
    per_layer = layer_parameter_count(e, cfg.ffn_size)
    psdp = cfg.variant == "psdp"
    counts = {
        "per_layer": per_layer,
        "decoders": 2 * per_layer if psdp else cfg.num_layers * per_layer,
        "mapping_weight": 2 * e * e if psdp else 0,
        "mapping_bias": e if psdp else 0,
        "final_norm": 2 * e if psdp else 0,
        "token_embeddings": cfg.vocab_size * e,
        "position_embeddings": cfg.max_seq_len * e,
    }
    counts["embeddings"] = counts["token_embeddings"] + counts["position_embeddings"]
    counts["total_excluding_embeddings"] = (
        counts["decoders"] + counts["mapping_weight"] + counts["mapping_bias"] + counts["final_norm"]
    )
    counts["total"] = counts["total_excluding_embeddings"] + counts["embeddings"]
    return counts


def unshared_counterpart(cfg: ModelConfig) -> dict[str, int]:
    """Counts for the same PSDP layout with every layer application owning its weights."""
    counts = count_parameters(cfg)
    if cfg.variant != "psdp":
        return counts
    extra = (2 * cfg.num_layers - 2) * counts["per_layer"]
    counts = dict(counts)
    counts["decoders"] += extra
    counts["total_excluding_embeddings"] += extra
    counts["total"] += extra
    return counts


def stacked_counterpart(cfg: ModelConfig) -> ModelConfig:
    """The single stacked decoder with as many layers as the PSDP pair has in total."""
    return cfg.replace(variant="stacked", num_layers=2 * cfg.num_layers)


def parameter_bytes(cfg: ModelConfig, bytes_per_param: int = 4, shared: bool = True) -> int:
    counts = count_parameters(cfg) if shared else unshared_counterpart(cfg)
    return bytes_per_param * counts["total"]


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _weight_drawer(rng: np.random.Generator, zeros: bool):
    def w(*shape):
        data = np.zeros(shape) if zeros else rng.normal(0.0, INIT_STD, size=shape)
        return Tensor(data, requires_grad=True)
    return w


def _init_layer(cfg: ModelConfig, w) -> LayerParams:
    e, f = cfg.embed_size, cfg.ffn_size

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    return LayerParams(
        w_q=w(e, e), b_q=const(0.0, e),
        w_k=w(e, e), b_k=const(0.0, e),
        w_v=w(e, e), b_v=const(0.0, e),
        w_o=w(e, e), b_o=const(0.0, e),
        w_1=w(e, f), b_1=const(0.0, f),
        w_2=w(f, e), b_2=const(0.0, e),
        ln1_g=const(1.0, e), ln1_b=const(0.0, e),
        ln2_g=const(1.0, e), ln2_b=const(0.0, e),
    )


def init_params(cfg: ModelConfig, seed: int = 0, zeros: bool = False) -> PsdpParams | StackedParams:
    """Weights ~ N(0, 0.02^2), biases 0, norm gains 1; deterministic in ``seed``.

    ``zeros=True`` skips the random draws (weights start at 0), which makes
    building a full-size model for structural checks cheap.
    """
    w = _weight_drawer(np.random.default_rng(seed), zeros)
    e = cfg.embed_size
    tok = w(cfg.vocab_size, e)
    pos = w(cfg.max_seq_len, e)
    if cfg.variant == "stacked":
        return StackedParams(tok, pos, [_init_layer(cfg, w) for _ in range(cfg.num_layers)])
    dec_a = _init_layer(cfg, w)
    dec_b = _init_layer(cfg, w)
    return PsdpParams(
        tok_emb=tok,
        pos_emb=pos,
        decoder_a=dec_a,
        decoder_b=dec_b,
        w_p=w(2 * e, e),
        b_p=Tensor(np.zeros(e), requires_grad=True),
        lnf_g=Tensor(np.ones(e), requires_grad=True),
        lnf_b=Tensor(np.zeros(e), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def causal_mask(t: int) -> np.ndarray:
    """Boolean T x T matrix, True where query i may attend to key j (j <= i)."""
    if t < 1:
        raise ValueError(f"mask length must be >= 1, got {t}")
    return np.tril(np.ones((t, t), dtype=bool))


def additive_mask(t: int) -> np.ndarray:
    return np.where(causal_mask(t), 0.0, MASK_FILL)


def multi_head_attention(x: Tensor, p: LayerParams, num_heads: int, mask: np.ndarray) -> Tensor:
    b, t, e = x.shape
    d = e // num_heads

    def heads(w, bias):
        return ((x @ w) + bias).reshape(b, t, num_heads, d).transpose(0, 2, 1, 3)

    q = heads(p.w_q, p.b_q)
    k = heads(p.w_k, p.b_k)
    v = heads(p.w_v, p.b_v)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + mask
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, e)
    return (ctx @ p.w_o) + p.b_o


def decoder_layer_forward(x: Tensor, p: LayerParams, num_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Post-norm layer: LN(x + MHA(x)) followed by LN(a + FFN(a))."""
    if x.ndim != 3 or x.shape[-1] != p.w_q.shape[0]:
        raise ad.ShapeError(f"decoder layer expects (B, T, {p.w_q.shape[0]}), got {x.shape}")
    if mask is None:
        mask = additive_mask(x.shape[1])
    a = ad.layer_norm(x + multi_head_attention(x, p, num_heads, mask), p.ln1_g, p.ln1_b, LN_EPS)
    hidden = ad.gelu((a @ p.w_1) + p.b_1)
    ffn = (hidden @ p.w_2) + p.b_2
    return ad.layer_norm(a + ffn, p.ln2_g, p.ln2_b, LN_EPS)


def _embed(ids: np.ndarray, tok_emb: Tensor, pos_emb: Tensor, cfg: ModelConfig) -> Tensor:
    if ids.ndim != 2:
        raise ad.ShapeError(f"ids must be (B, T), got shape {ids.shape}")
    t = ids.shape[1]
    if t > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    positions = ad.embedding_lookup(pos_emb, np.arange(t)[None, :])
    return ad.embedding_lookup(tok_emb, ids) + positions


def _head(h: Tensor, tok_emb: Tensor) -> Tensor:
    return h @ tok_emb.transpose()


def psdp_decoder_outputs(ids, p: PsdpParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    ids = np.asarray(ids, dtype=np.int64)
    x0 = _embed(ids, p.tok_emb, p.pos_emb, cfg)
    mask = additive_mask(ids.shape[1])
    out_a = out_b = x0
    for _ in range(cfg.num_layers):
        out_a = decoder_layer_forward(out_a, p.decoder_a, cfg.num_heads, mask)
    for _ in range(cfg.num_layers):
        out_b = decoder_layer_forward(out_b, p.decoder_b, cfg.num_heads, mask)
    return out_a, out_b


def psdp_fuse(out_a: Tensor, out_b: Tensor, p: PsdpParams) -> Tensor:
    """LN_final(concat(a, b) @ W_p + b_p + (a + b) / 2)."""
    fused = ad.concat([out_a, out_b], axis=-1)
    projected = (fused @ p.w_p) + p.b_p
    average = (out_a + out_b) * 0.5
    return ad.layer_norm(projected + average, p.lnf_g, p.lnf_b, LN_EPS)


def psdp_forward(ids, p: PsdpParams, cfg: ModelConfig) -> Tensor:
    out_a, out_b = psdp_decoder_outputs(ids, p, cfg)
    return _head(psdp_fuse(out_a, out_b, p), p.tok_emb)


def stacked_forward(ids, p: StackedParams, cfg: ModelConfig) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    x = _embed(ids, p.tok_emb, p.pos_emb, cfg)
    mask = additive_mask(ids.shape[1])
    for layer in p.layers:
        x = decoder_layer_forward(x, layer, cfg.num_heads, mask)
    return _head(x, p.tok_emb)


class Model:
    """A config plus its parameters; calling it returns logits (B, T, V)."""

    def __init__(self, config: ModelConfig, params: PsdpParams | StackedParams | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def __call__(self, ids) -> Tensor:
        if self.config.variant == "psdp":
            return psdp_forward(ids, self.params, self.config)
        return stacked_forward(ids, self.params, self.config)

    def logits(self, ids) -> np.ndarray:
        return self(np.atleast_2d(np.asarray(ids, dtype=np.int64))).data

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.named())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.params.named()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

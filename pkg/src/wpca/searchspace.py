"""Genome encoding for the layered BERT/MobileBERT space, parameter counting,
and sampling from the FlexiBERT element space.

A genome is a tuple of ``m`` integers in ``[0, 2n)``.  Gene ``g`` selects block
kind ``g // n`` (0 = bert, 1 = mobilebert) and FFN width
``dim_step * (g % n + 1)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .archmodel import DEFAULT_SEQ_LEN, DEFAULT_VOCAB, ArchConfig, LayerSpec
from .errors import CodecError, InputError


@dataclass(frozen=True)
class SpaceSpec:
    m: int = 12
    n: int = 6
    embed_dim: int = 528
    dim_step: int = 132
    param_cap: Optional[int] = 15_700_000  # None = uncapped
    block_kinds: tuple = ("bert", "mobilebert")  # gene // n indexes this
    embedding_size: Optional[int] = 128
    vocab_size: int = DEFAULT_VOCAB
    max_seq_len: int = DEFAULT_SEQ_LEN
    bert_heads: int = 8
    mobile_heads: int = 4
    inner_ratio: int = 4

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.dim_step < 1:
            raise InputError("space needs m, n, dim_step >= 1")
        if self.param_cap is not None and self.param_cap <= 0:
            raise InputError("param_cap must be positive")
        if self.embed_dim % self.inner_ratio:
            raise InputError("embed_dim must be divisible by inner_ratio")

    @property
    def genes_per_layer(self) -> int:
        return len(self.block_kinds) * self.n

    @property
    def size(self) -> int:
        return self.genes_per_layer ** self.m

    @property
    def inner_dim(self) -> int:
        return self.embed_dim // self.inner_ratio

    def scaled(self, embed_dim: int, vocab_size: Optional[int] = None, **overrides) -> "SpaceSpec":
        """Same layout at a different width; FFN step = width / 4 and no embedding factorisation."""
        kw = dict(embed_dim=embed_dim, dim_step=embed_dim // self.inner_ratio, embedding_size=None)
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        kw.update(overrides)
        return replace(self, **kw)


PRESETS = {
    "small": SpaceSpec(),
    "tiny": SpaceSpec(m=6, param_cap=10_000_000),
}


def preset(name: str) -> SpaceSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(f"unknown space preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- genome codec

def validate_genome(genome, space: SpaceSpec) -> tuple:
    genes = tuple(int(g) for g in genome)
    if len(genes) != space.m:
        raise CodecError(f"genome has {len(genes)} genes, space expects {space.m}")
    for g in genes:
        if not 0 <= g < space.genes_per_layer:
            raise CodecError(f"gene {g} outside [0, {space.genes_per_layer - 1}]")
    return genes


def parse_genome(literal: str) -> tuple:
    try:
        return tuple(int(tok) for tok in literal.split(","))
    except ValueError:
        raise CodecError(f"malformed genome literal {literal!r}") from None


def format_genome(genome) -> str:
    return ",".join(str(int(g)) for g in genome)


def decode_gene(gene: int, space: SpaceSpec) -> LayerSpec:
    kind = space.block_kinds[gene // space.n]
    hidden = space.dim_step * (gene % space.n + 1)
    if kind == "mobilebert":
        return LayerSpec("mobilebert", ffn_hidden=hidden, heads=space.mobile_heads, inner_dim=space.inner_dim)
    return LayerSpec(kind, ffn_hidden=hidden, heads=space.bert_heads)


def decode(genome, space: SpaceSpec) -> ArchConfig:
    genes = validate_genome(genome, space)
    return ArchConfig(
        layers=tuple(decode_gene(g, space) for g in genes),
        embed_dim=space.embed_dim,
        vocab_size=space.vocab_size,
        max_seq_len=space.max_seq_len,
        embedding_size=space.embedding_size if space.embedding_size != space.embed_dim else None,
    )


def encode(config: ArchConfig, space: SpaceSpec) -> tuple:
    genes = []
    for spec in config.layers:
        if spec.block_kind not in space.block_kinds:
            raise CodecError(f"block kind {spec.block_kind!r} is not part of this space")
        dim_index, rem = divmod(spec.ffn_hidden, space.dim_step)
        if rem or not 1 <= dim_index <= space.n:
            raise CodecError(f"ffn_hidden {spec.ffn_hidden} is not a multiple of {space.dim_step} in range")
        genes.append(space.block_kinds.index(spec.block_kind) * space.n + dim_index - 1)
    return validate_genome(genes, space)


def all_genomes(space: SpaceSpec):
    return itertools.product(range(space.genes_per_layer), repeat=space.m)


# ---------------------------------------------------------------- parameter count

@dataclass(frozen=True)
class ParamBreakdown:
    embeddings: int  # token + position tables
    attention: tuple  # per layer: MHA / token-mixer weights
    ffn: tuple  # per layer: all FFN sublayers
    norms: int  # every layernorm gain and bias
    projections: int  # embedding projection, bottleneck down/up, head dense, decoder bias

    @property
    def total(self) -> int:
        return self.embeddings + sum(self.attention) + sum(self.ffn) + self.norms + self.projections

    def to_dict(self) -> dict:
        return {"embeddings": self.embeddings, "attention": list(self.attention), "ffn": list(self.ffn),
                "norms": self.norms, "projections": self.projections, "total": self.total}


def _dense(d_in, d_out):
    return d_in * d_out + d_out


def _mixer_params(spec: LayerSpec, width: int) -> int:
    if spec.attn_op in ("scaled-dot-product", "multiplicative"):
        return 4 * _dense(width, width)
    if spec.attn_op == "dynamic-conv":
        return 2 * _dense(width, width) + _dense(width, spec.heads * spec.conv_kernel)
    return 0  # fixed Fourier / cosine transforms


def param_count(config: ArchConfig) -> ParamBreakdown:
    d, e, v = config.embed_dim, config.emb_size, config.vocab_size
    embeddings = v * e + config.max_seq_len * e
    norms = 2 * e + 2 * d  # embedding norm, final norm
    projections = _dense(d, e) + v
    if e != d:
        projections += _dense(e, d)
    attention, ffn = [], []
    for spec in config.layers:
        w = spec.width(d)
        attention.append(_mixer_params(spec, w))
        ffn.append(spec.ffn_stacks * (_dense(w, spec.ffn_hidden) + _dense(spec.ffn_hidden, w)))
        norms += 2 * w * (1 + spec.ffn_stacks)
        if spec.block_kind == "mobilebert":
            norms += 2 * d
            projections += _dense(d, w) + _dense(w, d)
    return ParamBreakdown(embeddings, tuple(attention), tuple(ffn), norms, projections)


def genome_params(genome, space: SpaceSpec) -> int:
    return param_count(decode(genome, space)).total


def is_feasible(genome, space: SpaceSpec) -> bool:
    return space.param_cap is None or genome_params(genome, space) <= space.param_cap


# ---------------------------------------------------------------- FlexiBERT

FLEXIBERT_EMBED = (128, 256)
FLEXIBERT_LAYERS = (2, 4)
FLEXIBERT_HEADS = (2, 4)
FLEXIBERT_HIDDEN = (512, 1024)
FLEXIBERT_STACKS = (1, 3)
FLEXIBERT_OPS = {
    # operator family -> ((attn_op, conv_kernel), ...)
    "self-attention": (("scaled-dot-product", None), ("multiplicative", None)),
    "linear-transform": (("fourier", None), ("cosine", None)),
    "dynamic-conv": (("dynamic-conv", 5), ("dynamic-conv", 9)),
}


def _flexibert_layer_choices(families):
    ops = [op for fam in families for op in FLEXIBERT_OPS[fam]]
    return list(itertools.product(ops, FLEXIBERT_HEADS, FLEXIBERT_HIDDEN, FLEXIBERT_STACKS))


def flexibert_space_size(layers=FLEXIBERT_LAYERS, families=tuple(FLEXIBERT_OPS), embeds=FLEXIBERT_EMBED) -> int:
    """Number of distinct architectures (layers are heterogeneous)."""
    per_layer = len(_flexibert_layer_choices(families))
    return len(embeds) * sum(per_layer ** n for n in layers)


def sample_flexibert(seed: int, vocab_size: int = DEFAULT_VOCAB, max_seq_len: int = DEFAULT_SEQ_LEN,
                     uniform_over: str = "elements") -> ArchConfig:
    """Random FlexiBERT architecture.

    ``uniform_over="elements"`` draws every table row independently and
    uniformly (layer count first, then each layer's operator, heads, hidden
    size and stack count).  ``"architectures"`` weights the layer count by the
    number of architectures it admits, which makes the draw uniform over the
    full 10,621,440-element space.
    """
    rng = np.random.default_rng(seed)
    embed = FLEXIBERT_EMBED[rng.integers(len(FLEXIBERT_EMBED))]
    choices = _flexibert_layer_choices(tuple(FLEXIBERT_OPS))
    if uniform_over == "elements":
        n_layers = FLEXIBERT_LAYERS[rng.integers(len(FLEXIBERT_LAYERS))]
    elif uniform_over == "architectures":
        weights = np.array([len(choices) ** n for n in FLEXIBERT_LAYERS], dtype=float)
        n_layers = FLEXIBERT_LAYERS[rng.choice(len(FLEXIBERT_LAYERS), p=weights / weights.sum())]
    else:
        raise InputError(f"unknown sampling mode {uniform_over!r}")
    layers = []
    for _ in range(n_layers):
        (op, kernel), heads, hidden, stacks = choices[rng.integers(len(choices))]
        layers.append(LayerSpec("flexibert", ffn_hidden=hidden, attn_op=op, heads=heads,
                                ffn_stacks=stacks, conv_kernel=kernel))
    return ArchConfig(layers=tuple(layers), embed_dim=embed, vocab_size=vocab_size, max_seq_len=max_seq_len)

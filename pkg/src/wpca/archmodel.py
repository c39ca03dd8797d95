"""Random-weight miniature transformers and their tapped forward pass.

A model is a frozen name -> array parameter mapping plus the config that
produced it.  ``forward`` runs on raw arrays unless gradients are requested, in
which case parameters become tape leaves and every op is recorded.

Block layouts (all pre-norm, residual):

* ``bert``: ``x += MHA(LN(x)); x += FFN(LN(x))`` at full width.
* ``mobilebert``: ``h = Down(LN(x)); h += MHA(LN(h)); h += FFN(LN(h)); x += Up(h)``
  with the inner width a quarter of the model width.
* ``flexibert``: ``x += Op(LN(x))`` followed by ``ffn_stacks`` FFN sublayers.

The token embedding table is tied to the output decoder; when the embedding
size differs from the model width a projection is inserted on the way in and
a dense layer maps back before decoding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from types import MappingProxyType
from typing import Optional

import numpy as np

from . import autograd as ag
from .errors import InputError, ShapeError

INIT_STD = 0.02
DEFAULT_VOCAB = 30522
DEFAULT_SEQ_LEN = 128

BLOCK_KINDS = ("bert", "mobilebert", "flexibert")
ATTN_OPS = ("scaled-dot-product", "multiplicative", "fourier", "cosine", "dynamic-conv")
HEADED_OPS = ("scaled-dot-product", "multiplicative")


@dataclass(frozen=True)
class LayerSpec:
    block_kind: str
    ffn_hidden: int
    attn_op: str = "scaled-dot-product"
    heads: int = 1
    ffn_stacks: int = 1
    conv_kernel: Optional[int] = None
    inner_dim: Optional[int] = None

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ShapeError(f"unknown block kind {self.block_kind!r}")
        if self.attn_op not in ATTN_OPS:
            raise ShapeError(f"unknown attention op {self.attn_op!r}")
        if self.ffn_hidden <= 0 or self.heads <= 0 or self.ffn_stacks <= 0:
            raise ShapeError("layer dimensions must be positive")
        if self.block_kind == "mobilebert" and not (self.inner_dim and self.inner_dim > 0):
            raise ShapeError("mobilebert layers need a positive inner_dim")
        if self.attn_op == "dynamic-conv" and not (self.conv_kernel and self.conv_kernel % 2 == 1):
            raise ShapeError("dynamic-conv needs an odd conv_kernel")

    def width(self, embed_dim: int) -> int:
        return self.inner_dim if self.block_kind == "mobilebert" else embed_dim

    @property
    def has_heads(self) -> bool:
        return self.attn_op in HEADED_OPS


@dataclass(frozen=True)
class ArchConfig:
    layers: tuple
    embed_dim: int
    vocab_size: int = DEFAULT_VOCAB
    max_seq_len: int = DEFAULT_SEQ_LEN
    embedding_size: Optional[int] = None  # factorised token embedding width; None = embed_dim

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if min(self.embed_dim, self.vocab_size, self.max_seq_len) <= 0:
            raise ShapeError("config dimensions must be positive")
        for spec in self.layers:
            w = spec.width(self.embed_dim)
            if spec.attn_op in HEADED_OPS or spec.attn_op == "dynamic-conv":
                if w % spec.heads:
                    raise ShapeError(f"width {w} not divisible by {spec.heads} heads")

    @property
    def emb_size(self) -> int:
        return self.embedding_size or self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [{k: v for k, v in asdict(s).items() if v is not None} for s in self.layers]
        if d["embedding_size"] is None:
            del d["embedding_size"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        unknown = set(d) - {"layers", "embed_dim", "vocab_size", "max_seq_len", "embedding_size"}
        if unknown:
            raise InputError(f"unknown architecture fields: {sorted(unknown)}")
        try:
            layers = tuple(LayerSpec(**spec) for spec in d.pop("layers"))
            return cls(layers=layers, **d)
        except (TypeError, KeyError) as exc:
            raise InputError(f"bad architecture descriptor: {exc}") from exc


@dataclass(frozen=True)
class Model:
    config: ArchConfig
    params: MappingProxyType
    seed: int

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def with_params(self, updates: dict) -> "Model":
        """Copy with some tensors replaced (shapes must match)."""
        params = dict(self.params)
        for name, value in updates.items():
            value = np.array(value, dtype=np.float64)
            if name not in params or params[name].shape != value.shape:
                raise ShapeError(f"cannot replace parameter {name!r}")
            value.setflags(write=False)
            params[name] = value
        return Model(self.config, MappingProxyType(params), self.seed)


@dataclass
class TappedActivations:
    ffn_pre: list = field(default_factory=list)  # (B, N, D') per FFN sublayer
    ffn_names: list = field(default_factory=list)
    attn_heads: list = field(default_factory=list)  # (B, H, N, dh) per attention layer
    attn_softmax: list = field(default_factory=list)  # (B, H, N, N)
    attn_names: list = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    tape: Optional[ag.Tape] = None
    nodes: dict = field(default_factory=dict)  # tap name -> Node, gradient runs only
    params: dict = field(default_factory=dict)  # name -> Node, gradient runs only


# ---------------------------------------------------------------- init

def _trunc_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


class _Builder:
    def __init__(self, rng, std):
        self.rng = rng
        self.std = std
        self.params = {}

    def weight(self, name, *shape):
        self.params[name] = _trunc_normal(self.rng, shape, self.std)

    def zeros(self, name, *shape):
        self.params[name] = np.zeros(shape)

    def linear(self, name, d_in, d_out):
        self.weight(f"{name}.w", d_in, d_out)
        self.zeros(f"{name}.b", d_out)

    def norm(self, name, dim):
        self.params[f"{name}.g"] = np.ones(dim)
        self.zeros(f"{name}.b", dim)


def _build_attention(b, prefix, spec, width):
    if spec.attn_op in HEADED_OPS:
        for proj in ("q", "k", "v", "o"):
            b.linear(f"{prefix}.attn.{proj}", width, width)
    elif spec.attn_op == "dynamic-conv":
        b.linear(f"{prefix}.conv.v", width, width)
        b.linear(f"{prefix}.conv.k", width, spec.heads * spec.conv_kernel)
        b.linear(f"{prefix}.conv.o", width, width)


def _build_ffn(b, prefix, width, hidden):
    b.norm(f"{prefix}_ln", width)
    b.linear(f"{prefix}.w1", width, hidden)
    b.linear(f"{prefix}.w2", hidden, width)


def instantiate(config: ArchConfig, seed: int, std: float = INIT_STD) -> Model:
    """Draw all weights from a +-2 sigma truncated normal; biases zero, norm gains one."""
    b = _Builder(np.random.default_rng(seed), std)
    d, e = config.embed_dim, config.emb_size
    b.weight("embed.tok", config.vocab_size, e)
    b.weight("embed.pos", config.max_seq_len, e)
    b.norm("embed.ln", e)
    if e != d:
        b.linear("embed.proj", e, d)
    for i, spec in enumerate(config.layers):
        pre = f"layer{i}"
        width = spec.width(d)
        if spec.block_kind == "mobilebert":
            b.norm(f"{pre}.in_ln", d)
            b.linear(f"{pre}.down", d, width)
        b.norm(f"{pre}.attn_ln", width)
        _build_attention(b, pre, spec, width)
        for s in range(spec.ffn_stacks):
            _build_ffn(b, f"{pre}.ffn{s}", width, spec.ffn_hidden)
        if spec.block_kind == "mobilebert":
            b.linear(f"{pre}.up", width, d)
    b.norm("final_ln", d)
    b.linear("head.dense", d, e)
    b.zeros("head.out_b", config.vocab_size)
    for arr in b.params.values():
        arr.setflags(write=False)
    return Model(config, MappingProxyType(b.params), int(seed))


# ---------------------------------------------------------------- forward

@lru_cache(maxsize=32)
def fourier_matrix(n: int) -> np.ndarray:
    """Real part of the n-point DFT matrix."""
    jk = np.outer(np.arange(n), np.arange(n)) % n
    m = np.cos(2.0 * np.pi * jk / n)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=32)
def cosine_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=32)
def shift_stack(n: int, kernel: int) -> np.ndarray:
    """(kernel*n, n) 0/1 matrix whose block j shifts tokens by j - kernel//2 (zero padded)."""
    s = np.zeros((kernel * n, n))
    half = kernel // 2
    for j in range(kernel):
        for t in range(n):
            src = t + j - half
            if 0 <= src < n:
                s[j * n + t, src] = 1.0
    s.setflags(write=False)
    return s


def _linear(x, p, name):
    return ag.add(ag.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _norm(x, p, name):
    return ag.add(ag.mul(ag.layernorm(x), p[f"{name}.g"]), p[f"{name}.b"])


def _shape(x):
    return x.value.shape if isinstance(x, ag.Node) else x.shape


class _Run:
    def __init__(self, params, tape, taps):
        self.p = params
        self.tape = tape
        self.taps = taps

    def tap(self, name, x):
        if self.tape is not None:
            self.tape.tap(name, x)
            self.taps.nodes[name] = x
        return x.value if isinstance(x, ag.Node) else x

    def attention(self, x, pre, spec):
        bsz, n, w = _shape(x)
        h = spec.heads
        dh = w // h
        q = ag.transpose(ag.reshape(_linear(x, self.p, f"{pre}.attn.q"), (bsz, n, h, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(_linear(x, self.p, f"{pre}.attn.k"), (bsz, n, h, dh)), (0, 2, 3, 1))
        v = ag.transpose(ag.reshape(_linear(x, self.p, f"{pre}.attn.v"), (bsz, n, h, dh)), (0, 2, 1, 3))
        scores = ag.matmul(q, k)
        if spec.attn_op == "scaled-dot-product":
            scores = ag.scale(scores, 1.0 / math.sqrt(dh))
        probs = ag.softmax(scores)
        ctx = ag.matmul(probs, v)
        self.taps.attn_names.append(pre)
        self.taps.attn_softmax.append(self.tap(f"{pre}.attn.probs", probs))
        self.taps.attn_heads.append(self.tap(f"{pre}.attn.heads", ctx))
        merged = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (bsz, n, w))
        return _linear(merged, self.p, f"{pre}.attn.o")

    def dynamic_conv(self, x, pre, spec):
        bsz, n, w = _shape(x)
        h, ks = spec.heads, spec.conv_kernel
        dh = w // h
        v = _linear(x, self.p, f"{pre}.conv.v")
        kern = ag.softmax(ag.reshape(_linear(x, self.p, f"{pre}.conv.k"), (bsz, n, h, ks)))
        kern = ag.reshape(kern, (bsz, n, h, 1, ks))
        unfolded = ag.reshape(ag.matmul(shift_stack(n, ks), v), (bsz, ks, n, h, dh))
        unfolded = ag.transpose(unfolded, (0, 2, 3, 1, 4))
        out = ag.reshape(ag.matmul(kern, unfolded), (bsz, n, w))
        return _linear(out, self.p, f"{pre}.conv.o")

    def token_mixer(self, x, pre, spec):
        op = spec.attn_op
        if op in HEADED_OPS:
            return self.attention(x, pre, spec)
        n = _shape(x)[1]
        if op == "fourier":
            return ag.matmul(fourier_matrix(n), x)
        if op == "cosine":
            return ag.matmul(cosine_matrix(n), x)
        return self.dynamic_conv(x, pre, spec)

    def ffn(self, x, name):
        pre_act = _linear(_norm(x, self.p, f"{name}_ln"), self.p, f"{name}.w1")
        self.taps.ffn_names.append(name)
        self.taps.ffn_pre.append(self.tap(f"{name}.pre", pre_act))
        return _linear(ag.gelu(pre_act), self.p, f"{name}.w2")

    def block(self, x, i, spec):
        pre = f"layer{i}"
        inner = x
        if spec.block_kind == "mobilebert":
            inner = _linear(_norm(x, self.p, f"{pre}.in_ln"), self.p, f"{pre}.down")
        inner = ag.add(inner, self.token_mixer(_norm(inner, self.p, f"{pre}.attn_ln"), pre, spec))
        for s in range(spec.ffn_stacks):
            inner = ag.add(inner, self.ffn(inner, f"{pre}.ffn{s}"))
        if spec.block_kind == "mobilebert":
            return ag.add(x, _linear(inner, self.p, f"{pre}.up"))
        return inner


def check_batch(config: ArchConfig, batch) -> np.ndarray:
    ids = np.asarray(batch)
    if ids.ndim != 2 or ids.shape[0] < 1 or ids.shape[1] < 1:
        raise InputError(f"batch must be a non-empty B x N matrix, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    return ids


def forward(model: Model, batch, want_grads=False, want_logits=True, embeddings=None) -> TappedActivations:
    """Run the model on a B x N token-id matrix and collect taps.

    With ``want_grads`` the pass is recorded on a fresh tape (``taps.tape``),
    parameters are available as leaves in ``taps.params`` and the summed
    input embeddings are tagged ``"inputs"``.  The final pre-decoder hidden
    state is tapped as ``"head.out"``.  ``embeddings`` (B x N x E) replaces
    the summed token and position embeddings, e.g. for finite differences.
    """
    cfg = model.config
    ids = check_batch(cfg, batch)
    taps = TappedActivations()
    tape = None
    if want_grads:
        tape = ag.Tape()
        params = {name: tape.leaf(v, name) for name, v in model.params.items()}
        taps.tape = tape
        taps.params = params
    else:
        params = model.params
    run = _Run(params, tape, taps)

    n = ids.shape[1]
    x = ag.add(ag.embed(params["embed.tok"], ids), ag.embed(params["embed.pos"], np.arange(n)))
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != ag._value(x).shape:
            raise ShapeError(f"embeddings must have shape {ag._value(x).shape}")
        x = tape.leaf(embeddings) if tape is not None else embeddings
    if tape is not None:
        tape.tag("inputs", x)
        taps.nodes["inputs"] = x
    x = _norm(x, params, "embed.ln")
    if cfg.emb_size != cfg.embed_dim:
        x = _linear(x, params, "embed.proj")
    for i, spec in enumerate(cfg.layers):
        x = run.block(x, i, spec)

    if want_grads or want_logits:
        hidden = _linear(_norm(x, params, "final_ln"), params, "head.dense")
        run.tap("head.out", hidden)
        if want_logits:
            logits = ag.add(ag.matmul(hidden, ag.transpose(params["embed.tok"], (1, 0))), params["head.out_b"])
            taps.logits = run.tap("logits", logits)
    return taps


# ---------------------------------------------------------------- batches

def random_batch(vocab_size: int, batch_size: int, seq_len: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(batch_size, seq_len), dtype=np.int64)


def load_batch_file(path) -> np.ndarray:
    """Whitespace-separated integer token ids, one input per line."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: non-integer token id") from exc
    if not rows:
        raise InputError(f"{path}: empty batch file")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: rows have different lengths")
    return np.array(rows, dtype=np.int64)

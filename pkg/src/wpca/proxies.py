"""Zero-shot proxies: each maps (model, token batch) to one scalar.

Gradient-free: ``params``, ``v_pca``, ``w_pca``, ``activation_distance``,
``head_confidence``, ``softmax_confidence``.  The rest differentiate a
label-free pseudo-loss (sum of all output logits) on an autograd tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autograd as ag
from .archmodel import Model, forward
from .errors import InputError
from .linalg import nuclear_norm, sym_eigvals
from .searchspace import param_count

DEFAULT_ETA = 0.99
ETA_PRESETS = (0.9, 0.99, 0.999)
SINGULAR_SENTINEL = -1e30
JACOB_COV_K = 1e-5
RANK_TOL = 1e-10

CSV_HEADER = ("proxy", "genome", "value", "seed", "batch_id", "eta")


@dataclass(frozen=True)
class PcaConfig:
    eta: float = DEFAULT_ETA
    eig_method: str = "lapack"

    def __post_init__(self):
        check_eta(self.eta)


@dataclass(frozen=True)
class ProxyScore:
    proxy: str
    value: float
    seed: int
    batch_id: str
    eta: Optional[float] = None
    genome: str = ""
    warning: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise InputError(f"{self.proxy} produced a non-finite value")
        if self.eta is not None:
            check_eta(self.eta)

    def csv_row(self) -> list:
        return [self.proxy, self.genome, repr(float(self.value)), self.seed, self.batch_id,
                "" if self.eta is None else repr(self.eta)]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def check_eta(eta: float) -> float:
    if not 0.0 < eta <= 1.0:
        raise InputError(f"eta must lie in (0, 1], got {eta}")
    return eta


# ---------------------------------------------------------------- PCA family

def pca_spectrum(h, method="lapack") -> np.ndarray:
    """Descending covariance eigenvalues of the (B*N, D') reshaped activations.

    Values at or below ``1e-10 * max`` (round-off) are set to zero.  When
    B*N < D' the nonzero spectrum is taken from the smaller Gram matrix,
    which shares it exactly.
    """
    h = np.asarray(h, dtype=np.float64)
    flat = h.reshape(-1, h.shape[-1])
    rows = flat.shape[0]
    if rows < 2:
        raise InputError("PCA needs at least two token rows (B*N >= 2)")
    if not np.all(np.isfinite(flat)):
        raise InputError("activations contain non-finite values")
    centered = flat - flat.mean(axis=0)
    if rows < flat.shape[1]:
        gram = centered @ centered.T
    else:
        gram = centered.T @ centered
    values = sym_eigvals(gram / (rows - 1), method=method, clamp_negative=True)
    values = np.maximum(values, 0.0)
    if values.size and values[0] > 0.0:
        values[values <= RANK_TOL * values[0]] = 0.0
    return values


def dim_from_spectrum(values: np.ndarray, eta: float) -> int:
    """Smallest k whose leading eigenvalues carry at least ``eta`` of the total."""
    check_eta(eta)
    cum = np.cumsum(values)
    total = cum[-1] if cum.size else 0.0
    if total <= 0.0:
        return 0
    return int(np.argmax(cum / total >= eta)) + 1


def pca_dim(h, eta=DEFAULT_ETA, method="lapack") -> int:
    return dim_from_spectrum(pca_spectrum(h, method), eta)


def ffn_spectra(model: Model, batch, method="lapack") -> list:
    """Covariance spectrum of every FFN pre-activation tap, in layer order."""
    taps = forward(model, batch, want_grads=False, want_logits=False)
    return [pca_spectrum(h, method) for h in taps.ffn_pre]


def v_pca(model: Model, batch, eta=DEFAULT_ETA, method="lapack") -> float:
    taps = forward(model, batch, want_grads=False, want_logits=False)
    if not taps.ffn_pre:
        raise InputError("model has no FFN taps")
    return float(sum(pca_dim(h, eta, method) for h in taps.ffn_pre))


def params(model: Model, batch=None) -> float:
    return float(param_count(model.config).total)


def w_pca(model: Model, batch, eta=DEFAULT_ETA, method="lapack") -> float:
    return params(model) * v_pca(model, batch, eta, method)


# ---------------------------------------------------------------- gradient helpers

def pseudo_loss(taps):
    """Sum of every output logit, without materialising the B x N x vocab tensor.

    sum_{b,n,v} (t_bn . E_v + c_v) = sum_{b,n} t_bn . (sum_v E_v) + B*N*sum_v c_v
    """
    p = taps.params
    hidden = taps.nodes["head.out"]
    bsz, n, e = hidden.value.shape
    col = ag.reshape(ag.reduce_sum(p["embed.tok"], axis=0), (e, 1))
    dot = ag.reduce_sum(ag.matmul(hidden, col))
    return ag.add(dot, ag.scale(ag.reduce_sum(p["head.out_b"]), bsz * n))


def _grad_run(model, batch):
    taps = forward(model, batch, want_grads=True, want_logits=False)
    loss = pseudo_loss(taps)
    grads = taps.tape.backward(loss)
    return taps, loss, grads


def synaptic_saliency(model: Model, batch) -> float:
    taps, _, grads = _grad_run(model, batch)
    total = 0.0
    for node in taps.params.values():
        total += float(np.sum(np.abs(grads[node] * node.value)))
    return total


def _head_slices(name_prefix, spec, width):
    dh = width // spec.heads
    for h in range(spec.heads):
        cols = slice(h * dh, (h + 1) * dh)
        for proj in ("q", "k", "v"):
            yield f"{name_prefix}.attn.{proj}.w", (slice(None), cols)
        yield f"{name_prefix}.attn.o.w", (cols, slice(None))


def synaptic_diversity(model: Model, batch, method="lapack") -> float:
    """Sum over per-head Q/K/V/O weight slices of ||grad||_nuc * ||W||_nuc."""
    cfg = model.config
    headed = [(i, s) for i, s in enumerate(cfg.layers) if s.has_heads]
    if not headed:
        return 0.0
    taps, _, grads = _grad_run(model, batch)
    total = 0.0
    for i, spec in headed:
        for name, sl in _head_slices(f"layer{i}", spec, spec.width(cfg.embed_dim)):
            node = taps.params[name]
            total += nuclear_norm(grads[node][sl], method) * nuclear_norm(node.value[sl], method)
    return total


def _codes_kernel(ffn_pre) -> np.ndarray:
    bsz = ffn_pre[0].shape[0]
    k = np.zeros((bsz, bsz))
    for h in ffn_pre:
        c = (h.reshape(bsz, -1) > 0).astype(np.float32)
        length = c.shape[1]
        ones = c.sum(axis=1).astype(np.float64)
        both = (c @ c.T).astype(np.float64)  # exact: integer sums < 2**24
        # agreements = length - hamming = length - (ones_i + ones_j - 2 * both)
        k += length - ones[:, None] - ones[None, :] + 2.0 * both
    return k


def logdet_kernel(k: np.ndarray) -> float:
    """log|det K| or the singular sentinel."""
    if np.linalg.matrix_rank(k) < k.shape[0]:
        return SINGULAR_SENTINEL
    sign, logdet = np.linalg.slogdet(k)
    if sign == 0 or not np.isfinite(logdet):
        return SINGULAR_SENTINEL
    return float(logdet)


def activation_distance(model: Model, batch) -> float:
    if np.asarray(batch).shape[0] < 2:
        raise InputError("activation distance needs B >= 2")
    taps = forward(model, batch, want_grads=False, want_logits=False)
    if not taps.ffn_pre:
        raise InputError("model has no FFN taps")
    return logdet_kernel(_codes_kernel(taps.ffn_pre))


def jacobian_covariance_score(jac: np.ndarray, k=JACOB_COV_K, method="lapack") -> float:
    """-sum(log(l + k) + 1/(l + k)) over eigenvalues of the row correlation matrix."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.shape[0] < 2:
        raise InputError("Jacobian covariance needs at least two inputs")
    centered = jac - jac.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    live = norms > 0.0
    corr = np.eye(jac.shape[0])
    z = centered[live] / norms[live, None]
    corr[np.ix_(live, live)] = z @ z.T
    lam = sym_eigvals(corr, method=method)
    return float(-np.sum(np.log(lam + k) + 1.0 / (lam + k)))


def jacobian_cosine_score(jac: np.ndarray) -> float:
    """1 - mean over off-diagonal |cos(J_i, J_j)|^(1/20); zero-norm rows dropped."""
    jac = np.asarray(jac, dtype=np.float64)
    norms = np.sqrt(np.sum(jac * jac, axis=1))
    jac = jac[norms > 0.0] / norms[norms > 0.0, None]
    n = jac.shape[0]
    if n < 2:
        raise InputError("Jacobian cosine needs at least two inputs with nonzero gradient")
    g = np.abs(jac @ jac.T) ** (1.0 / 20.0)
    off = np.sum(g) - np.sum(np.diagonal(g))
    return float(1.0 - off / (n * n - n))


def input_jacobian_of(model: Model, batch) -> np.ndarray:
    taps = forward(model, batch, want_grads=True, want_logits=False)
    loss = pseudo_loss(taps)
    return ag.input_jacobian(taps.tape, loss, taps.nodes["inputs"])


def jacobian_covariance(model: Model, batch) -> float:
    if np.asarray(batch).shape[0] < 2:
        raise InputError("Jacobian covariance needs B >= 2")
    return jacobian_covariance_score(input_jacobian_of(model, batch))


def jacobian_cosine(model: Model, batch) -> float:
    if np.asarray(batch).shape[0] < 2:
        raise InputError("Jacobian cosine needs B >= 2")
    return jacobian_cosine_score(input_jacobian_of(model, batch))


def _per_head_max_mean(tensors) -> Optional[float]:
    per_head = []
    for t in tensors:  # (B, H, ...)
        bsz, heads = t.shape[:2]
        m = np.abs(t.reshape(bsz, heads, -1).max(axis=2))
        per_head.extend(m.mean(axis=0))
    return float(np.mean(per_head)) if per_head else None


def head_confidence(model: Model, batch) -> float:
    taps = forward(model, batch, want_grads=False, want_logits=False)
    value = _per_head_max_mean(taps.attn_heads)
    return 0.0 if value is None else value


def softmax_confidence(model: Model, batch) -> float:
    taps = forward(model, batch, want_grads=False, want_logits=False)
    value = _per_head_max_mean(taps.attn_softmax)
    return 0.0 if value is None else value


def head_importance(model: Model, batch) -> float:
    if not any(s.has_heads for s in model.config.layers):
        return 0.0
    taps, _, grads = _grad_run(model, batch)
    per_head = []
    for name in taps.attn_names:
        node = taps.nodes[f"{name}.attn.heads"]
        prod = node.value * grads[node]  # (B, H, N, dh)
        per_head.extend(np.abs(prod.sum(axis=(0, 2, 3))))
    return float(np.mean(per_head))


# ---------------------------------------------------------------- registry

PROXIES = {
    "params": params,
    "v_pca": v_pca,
    "w_pca": w_pca,
    "synaptic_saliency": synaptic_saliency,
    "synaptic_diversity": synaptic_diversity,
    "activation_distance": activation_distance,
    "jacobian_covariance": jacobian_covariance,
    "jacobian_cosine": jacobian_cosine,
    "head_confidence": head_confidence,
    "softmax_confidence": softmax_confidence,
    "head_importance": head_importance,
}
PCA_PROXIES = ("v_pca", "w_pca")
GRADIENT_FREE = ("params", "v_pca", "w_pca", "activation_distance", "head_confidence", "softmax_confidence")
HEADED_PROXIES = ("head_confidence", "softmax_confidence", "head_importance", "synaptic_diversity")


def evaluate(proxy: str, model: Model, batch, eta=DEFAULT_ETA, method="lapack") -> float:
    try:
        fn = PROXIES[proxy]
    except KeyError:
        raise InputError(f"unknown proxy {proxy!r}; choose from {sorted(PROXIES)}") from None
    if proxy in PCA_PROXIES:
        return fn(model, batch, eta, method)
    return fn(model, batch)


def score(proxy: str, model: Model, batch, seed: int, batch_id: str, eta=DEFAULT_ETA,
          genome: str = "", method="lapack") -> ProxyScore:
    value = evaluate(proxy, model, batch, eta, method)
    warning = None
    if proxy in HEADED_PROXIES and not any(s.has_heads for s in model.config.layers):
        warning = "no attention heads; score defined as 0"
    return ProxyScore(proxy=proxy, value=float(value), seed=seed, batch_id=batch_id,
                      eta=eta if proxy in PCA_PROXIES else None, genome=genome, warning=warning)

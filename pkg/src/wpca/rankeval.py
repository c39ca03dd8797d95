"""Rank correlation, ranking datasets, and the proxy evaluation protocols.

Datasets are JSON lines, one record per line::

    {"id": "a0", "genome": [0, 3, 7], "score": 0.71}
    {"id": "b4", "flexibert": {"embed_dim": 128, "layers": [...]}, "score": 0.64}
"""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import proxies
from .archmodel import ArchConfig, instantiate, random_batch
from .errors import CodecError, DatasetError, InputError, ShapeError
from .searchspace import SpaceSpec, decode, format_genome, param_count, sample_flexibert
from .seeds import derive_seed

MAX_SKIP_FRACTION = 0.10
SYNTHETIC_SWAP_FRACTION = 0.05


# ---------------------------------------------------------------- statistics

class Correlation(NamedTuple):
    value: float
    degenerate: bool  # True when undefined (constant input); value is then 0


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise InputError("rank correlation needs at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputError("rank correlation inputs must be finite")
    return x, y


def _tied_pairs(sorted_values) -> int:
    _, counts = np.unique(sorted_values, return_counts=True)
    return int(sum(int(c) * (int(c) - 1) // 2 for c in counts))


def _inversions(a: np.ndarray) -> int:
    """Count pairs i < j with a[i] > a[j] (bottom-up merge sort)."""
    a = a.copy()
    n = a.size
    inv = 0
    width = 1
    while width < n:
        for start in range(0, n - width, 2 * width):
            left = a[start:start + width]
            right = a[start + width:start + 2 * width]
            inv += left.size * right.size - int(np.searchsorted(left, right, side="right").sum())
            a[start:start + 2 * width] = np.sort(a[start:start + 2 * width], kind="stable")
        width *= 2
    return inv


def kendall_tau_b(x, y) -> Correlation:
    """Tie-corrected Kendall tau in O(n log n)."""
    x, y = _pair(x, y)
    n = x.size
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(xs)
    n2 = _tied_pairs(np.sort(y))
    # pairs tied in both: runs of equal (x, y) in the sorted order
    joint = np.concatenate(([True], (xs[1:] != xs[:-1]) | (ys[1:] != ys[:-1]), [True]))
    runs = np.diff(np.flatnonzero(joint))
    n3 = int(sum(int(c) * (int(c) - 1) // 2 for c in runs))
    discordant = _inversions(ys)
    concordant = n0 - n1 - n2 + n3 - discordant
    denom = (n0 - n1) * (n0 - n2)
    if denom == 0:
        return Correlation(0.0, True)
    return Correlation((concordant - discordant) / math.sqrt(denom), False)


def kendall_tau(x, y) -> float:
    return kendall_tau_b(x, y).value


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    _, inverse, counts = np.unique(np.asarray(x, dtype=np.float64), return_inverse=True, return_counts=True)
    avg = np.cumsum(counts) - (counts - 1) / 2.0
    return avg[inverse.ravel()]


def spearman(x, y) -> Correlation:
    x, y = _pair(x, y)
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return Correlation(0.0, True)
    return Correlation(float(np.clip((rx @ ry) / denom, -1.0, 1.0)), False)


def spearman_rho(x, y) -> float:
    return spearman(x, y).value


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class RankingRecord:
    id: str
    score: float
    genome: Optional[tuple] = None
    flexibert: Optional[dict] = None

    def __post_init__(self):
        if (self.genome is None) == (self.flexibert is None):
            raise InputError(f"record {self.id!r} needs exactly one of genome / flexibert")
        if not math.isfinite(self.score):
            raise InputError(f"record {self.id!r} has a non-finite score")

    def config(self, space: Optional[SpaceSpec]) -> ArchConfig:
        if self.genome is not None:
            if space is None:
                raise CodecError(f"record {self.id!r} is a genome but no space was given")
            return decode(self.genome, space)
        return ArchConfig.from_dict(self.flexibert)

    def to_dict(self) -> dict:
        d = {"id": self.id}
        if self.genome is not None:
            d["genome"] = list(self.genome)
        else:
            d["flexibert"] = self.flexibert
        d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RankingRecord":
        if not isinstance(d, dict):
            raise InputError("record must be a JSON object")
        unknown = set(d) - {"id", "genome", "flexibert", "score"}
        if unknown:
            raise InputError(f"unknown record fields {sorted(unknown)}")
        if "id" not in d or "score" not in d:
            raise InputError("record needs 'id' and 'score'")
        genome = d.get("genome")
        if genome is not None:
            if not isinstance(genome, list) or not all(isinstance(g, int) for g in genome):
                raise InputError("genome must be a list of integers")
            genome = tuple(genome)
        if not isinstance(d["score"], (int, float)) or isinstance(d["score"], bool):
            raise InputError("score must be a number")
        return cls(id=str(d["id"]), score=float(d["score"]), genome=genome, flexibert=d.get("flexibert"))


@dataclass
class RankingDataset:
    records: list

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DatasetError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records])

    @classmethod
    def load(cls, path) -> "RankingDataset":
        records, seen = [], set()
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    if isinstance(obj, dict) and set(obj) == {"header"}:
                        continue  # provenance line written by the CLI
                    rec = RankingRecord.from_dict(obj)
                except (json.JSONDecodeError, InputError) as exc:
                    raise DatasetError(str(exc), lineno) from exc
                if rec.id in seen:
                    raise DatasetError(f"duplicate record id {rec.id!r}", lineno)
                seen.add(rec.id)
                records.append(rec)
        return cls(records)

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


# ---------------------------------------------------------------- proxy evaluation

@dataclass
class CorrelationReport:
    proxy: str
    kendall_tau: float
    spearman_rho: float
    n: int
    elapsed: float  # seconds per 1,000 evaluations
    skipped: int = 0
    eta: Optional[float] = None
    degenerate: bool = False
    values: list = field(default_factory=list, repr=False)

    def to_dict(self, include_timing=True) -> dict:
        d = {"proxy": self.proxy, "kendall_tau": self.kendall_tau, "spearman_rho": self.spearman_rho,
             "n": self.n, "skipped": self.skipped, "eta": self.eta, "degenerate": self.degenerate}
        if include_timing:
            d["elapsed_per_1000"] = self.elapsed
        return d


def _correlate(proxy, values, truth, elapsed, skipped, eta) -> CorrelationReport:
    if len(values) < 2:
        raise DatasetError("fewer than two scorable records")
    tau = kendall_tau_b(values, truth)
    rho = spearman(values, truth)
    return CorrelationReport(proxy=proxy, kendall_tau=tau.value, spearman_rho=rho.value, n=len(values),
                             elapsed=elapsed, skipped=skipped, eta=eta,
                             degenerate=tau.degenerate or rho.degenerate, values=list(values))


def _check_skips(skipped, total):
    if total and skipped / total > MAX_SKIP_FRACTION:
        raise DatasetError(f"{skipped} of {total} records could not be instantiated")


def default_batch(vocab_size: int, seed: int, batch_size: int = 128, seq_len: int = 128) -> np.ndarray:
    return random_batch(vocab_size, batch_size, seq_len, derive_seed(seed, "batch"))


def record_model(record: RankingRecord, space, seed: int):
    return instantiate(record.config(space), derive_seed(seed, record.id))


def evaluate_proxy(dataset: RankingDataset, proxy: str, eta: float = proxies.DEFAULT_ETA, seed: int = 0,
                   batch=None, space: Optional[SpaceSpec] = None, method: str = "lapack") -> CorrelationReport:
    """Score every record (weights seeded per record id) and correlate with ground truth."""
    if proxy not in proxies.PROXIES:
        raise InputError(f"unknown proxy {proxy!r}")
    values, truth, skipped, spent = [], [], 0, 0.0
    for rec in dataset.records:
        try:
            model = record_model(rec, space, seed)
            b = batch if batch is not None else default_batch(model.config.vocab_size, seed)
            start = time.perf_counter()
            v = proxies.evaluate(proxy, model, b, eta, method)
            spent += time.perf_counter() - start
        except (CodecError, InputError, ShapeError):
            skipped += 1
            continue
        values.append(v)
        truth.append(rec.score)
    _check_skips(skipped, len(dataset))
    per_1000 = 1000.0 * spent / max(len(values), 1)
    return _correlate(proxy, values, truth, per_1000, skipped,
                      eta if proxy in proxies.PCA_PROXIES else None)


def eta_sweep(dataset: RankingDataset, etas, seed: int = 0, batch=None, space: Optional[SpaceSpec] = None,
              method: str = "lapack") -> list:
    """(v_pca, w_pca) correlation reports per eta; spectra are computed once per record."""
    etas = [proxies.check_eta(float(e)) for e in etas]
    rows, skipped, spent = [], 0, 0.0
    for rec in dataset.records:
        try:
            model = record_model(rec, space, seed)
            b = batch if batch is not None else default_batch(model.config.vocab_size, seed)
            start = time.perf_counter()
            spectra = proxies.ffn_spectra(model, b, method)
            spent += time.perf_counter() - start
        except (CodecError, InputError, ShapeError):
            skipped += 1
            continue
        if not spectra:
            skipped += 1
            continue
        rows.append((spectra, param_count(model.config).total, rec.score))
    _check_skips(skipped, len(dataset))
    truth = [r[2] for r in rows]
    per_1000 = 1000.0 * spent / max(len(rows), 1)
    out = []
    for eta in etas:
        v = [float(sum(proxies.dim_from_spectrum(s, eta) for s in spectra)) for spectra, _, _ in rows]
        w = [p * vi for (_, p, _), vi in zip(rows, v)]
        out.append(_correlate("v_pca", v, truth, per_1000, skipped, eta))
        out.append(_correlate("w_pca", w, truth, per_1000, skipped, eta))
    return out


# ---------------------------------------------------------------- stability

@dataclass
class StabilityRow:
    id: str
    values: list
    mean: float
    stdev: float

    def to_dict(self) -> dict:
        return {"id": self.id, "mean": self.mean, "stdev": self.stdev, "values": self.values}


def stability_study(records, proxy: str, mode: str = "seeds", trials: int = 10, seed: int = 0,
                    space: Optional[SpaceSpec] = None, batch_size: int = 128, seq_len: int = 128,
                    eta: float = proxies.DEFAULT_ETA, method: str = "lapack") -> list:
    """Per-architecture spread of a proxy across weight seeds or across batches.

    ``mode="seeds"`` fixes one batch and redraws the weights ``trials`` times;
    ``mode="batches"`` fixes the weights and draws ``trials`` batches.
    """
    if trials < 2:
        raise InputError("stability needs at least two trials")
    if mode not in ("seeds", "batches"):
        raise InputError(f"mode must be 'seeds' or 'batches', got {mode!r}")
    rows = []
    for rec in records:
        config = rec.config(space)
        vals = []
        for t in range(trials):
            if mode == "seeds":
                w_seed, b_seed = derive_seed(seed, f"{rec.id}/weights/{t}"), derive_seed(seed, "batch")
            else:
                w_seed, b_seed = derive_seed(seed, f"{rec.id}/weights"), derive_seed(seed, f"batch/{t}")
            model = instantiate(config, w_seed)
            batch = random_batch(config.vocab_size, batch_size, seq_len, b_seed)
            vals.append(float(proxies.evaluate(proxy, model, batch, eta, method)))
        rows.append(StabilityRow(rec.id, vals, statistics.fmean(vals), statistics.stdev(vals)))
    return rows


def select_deciles(dataset: RankingDataset, buckets: int = 10, seed: int = 0) -> list:
    """One random record from each score-rank bucket, lowest bucket first."""
    n = len(dataset)
    if n < buckets:
        raise DatasetError(f"need at least {buckets} records, have {n}")
    order = np.argsort(dataset.scores, kind="stable")
    bucket_of_rank = np.arange(n) * buckets // n
    rng = np.random.default_rng(seed)
    picks = []
    for b in range(buckets):
        members = order[bucket_of_rank == b]
        picks.append(dataset.records[int(members[rng.integers(members.size)])])
    return picks


# ---------------------------------------------------------------- synthetic benchmarks

def _log_affine(values: np.ndarray) -> np.ndarray:
    """Strictly increasing map onto [0.4, 0.9] (a plausible score range)."""
    r = np.sign(values) * np.log1p(np.abs(values))
    span = r.max() - r.min()
    if span == 0:
        return np.full_like(r, 0.65)
    return 0.4 + 0.5 * (r - r.min()) / span


def _adjacent_swaps(scores: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Swap the scores of disjoint rank-adjacent pairs; at most ``fraction`` of the n-1 pairs."""
    order = np.argsort(scores, kind="stable")
    out = scores.copy()
    budget = int(fraction * (scores.size - 1))
    candidates = rng.permutation(scores.size - 1)
    used = np.zeros(scores.size, dtype=bool)
    swapped = 0
    for pos in candidates:
        if swapped >= budget:
            break
        if used[pos] or used[pos + 1]:
            continue
        i, j = order[pos], order[pos + 1]
        out[i], out[j] = out[j], out[i]
        used[pos] = used[pos + 1] = True
        swapped += 1
    return out


def make_benchmark(n: int, proxy: str = "w_pca", seed: int = 0, space: Optional[SpaceSpec] = None,
                   batch=None, eta: float = proxies.DEFAULT_ETA, swap_fraction: float = SYNTHETIC_SWAP_FRACTION,
                   method: str = "lapack") -> RankingDataset:
    """Synthetic dataset whose score is a monotone transform of ``proxy`` plus rank noise.

    Architectures are distinct random feasible genomes of ``space`` or, with
    ``space=None``, FlexiBERT samples.  Proxy values use the same per-record
    seeds as :func:`evaluate_proxy`, so the noise-free ranking is recoverable.
    """
    if not 0.0 <= swap_fraction <= 1.0:
        raise InputError("swap_fraction must lie in [0, 1]")
    rng = np.random.default_rng(derive_seed(seed, "benchmark"))
    records = []
    if space is not None:
        if n > space.size:
            raise InputError(f"space holds only {space.size} genomes")
        seen = set()
        while len(records) < n:
            g = tuple(int(v) for v in rng.integers(0, space.genes_per_layer, space.m))
            if g in seen or (space.param_cap is not None and param_count(decode(g, space)).total > space.param_cap):
                continue
            seen.add(g)
            records.append(RankingRecord(id=f"g{len(records)}:{format_genome(g)}", score=0.0, genome=g))
    else:
        for i in range(n):
            cfg = sample_flexibert(derive_seed(seed, f"flexibert/{i}"))
            records.append(RankingRecord(id=f"f{i}", score=0.0, flexibert=cfg.to_dict()))
    values = []
    for rec in records:
        model = record_model(rec, space, seed)
        b = batch if batch is not None else default_batch(model.config.vocab_size, seed)
        values.append(proxies.evaluate(proxy, model, b, eta, method))
    scores = _adjacent_swaps(_log_affine(np.array(values)), swap_fraction, rng)
    return RankingDataset([RankingRecord(id=r.id, score=float(s), genome=r.genome, flexibert=r.flexibert)
                           for r, s in zip(records, scores)])

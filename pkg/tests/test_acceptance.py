"""Acceptance criteria 1-10; each test prints one PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from oracles import average_ranks_brute, kendall_brute, pearson, random_symmetric
from test_autograd import OPS, op_grad_error, toy_grad_error
from test_proxies import rank_r_activations
from wpca import autograd as ag
from wpca import cli, gasearch, linalg, proxies, rankeval
from wpca.archmodel import instantiate, random_batch
from wpca.searchspace import SpaceSpec, all_genomes, decode, genome_params, preset
from wpca.seeds import derive_seed


@pytest.fixture
def verdict(capsys):
    """Call as verdict(n, ok, detail, started): prints the line, then asserts."""
    def emit(number, ok, detail, started, budget):
        elapsed = time.perf_counter() - started
        ok = bool(ok) and elapsed < budget
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f}s / {budget:.0f}s)")
        assert ok, detail
    return emit


def test_criterion_01_factorization_identity(verdict):
    start = time.perf_counter()
    space = preset("tiny").scaled(64, vocab_size=1000)
    rng = np.random.default_rng(1)
    mismatches = 0
    for i in range(200):
        g = tuple(int(v) for v in rng.integers(0, space.genes_per_layer, space.m))
        model = instantiate(decode(g, space), derive_seed(1, f"c1/{i}"))
        batch = random_batch(space.vocab_size, 16, 32, derive_seed(2, f"c1/{i}"))
        w = proxies.w_pca(model, batch)
        expected = genome_params(g, space) * proxies.v_pca(model, batch)
        mismatches += w != expected
    verdict(1, mismatches == 0, f"{mismatches} of 200 triples differ", start, 120)


def test_criterion_02_pca_correctness(verdict):
    start = time.perf_counter()
    recovered = {}
    for r in (1, 3, 5):
        h = rank_r_activations(np.random.default_rng(100 + r), r)
        assert h.shape[-1] == 32 and h[..., 0].size == 256
        recovered[r] = proxies.pca_dim(h, 0.999)
    rng = np.random.default_rng(2)
    monotone = 0
    for _ in range(100):
        h = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 40))))
        spectrum = proxies.pca_spectrum(h)
        ks = [proxies.dim_from_spectrum(spectrum, eta) for eta in (0.9, 0.99, 0.999, 1.0)]
        monotone += ks == sorted(ks)
    ok = all(recovered[r] == r for r in recovered) and monotone == 100
    verdict(2, ok, f"recovered ranks {recovered}, monotone {monotone}/100", start, 60)


def test_criterion_03_eigensolver(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_rec = worst_trace = 0.0
    for _ in range(1000):
        c = random_symmetric(rng, int(rng.integers(2, 65)))
        eig = linalg.sym_eig(c, method="jacobi")
        norm = np.linalg.norm(c)
        worst_rec = max(worst_rec, np.linalg.norm(c - eig.reconstruct()) / norm)
        worst_trace = max(worst_trace, abs(eig.values.sum() - np.trace(c)) / norm)
    ok = worst_rec <= 1e-8 and worst_trace <= 1e-8
    verdict(3, ok, f"max reconstruction {worst_rec:.2e}, max trace {worst_trace:.2e}", start, 60)


def test_criterion_04_autodiff(verdict):
    start = time.perf_counter()
    worst_op = max(op_grad_error(name, seed) for name in OPS for seed in range(50))
    worst_toy = max(toy_grad_error(seed) for seed in range(50))
    ok = worst_op <= 1e-4 and worst_toy <= 1e-4
    verdict(4, ok, f"ops {worst_op:.2e}, toy transformer {worst_toy:.2e}", start, 120)


def test_criterion_05_ga_vs_exhaustive(verdict):
    start = time.perf_counter()
    space = SpaceSpec(m=4, n=2, param_cap=None).scaled(32, vocab_size=200)
    batch = random_batch(space.vocab_size, 8, 16, 0)
    hits = {}
    for proxy in ("w_pca", "params"):
        fitness = gasearch.ProxyFitness(space, proxy, weight_seed=11, batch=batch)
        best = max(fitness(g) for g in all_genomes(space))
        hits[proxy] = sum(
            gasearch.run(space, gasearch.GaConfig(population=20, generations=15, seed=s), fitness).best_fitness == best
            for s in range(20))
    ok = hits["w_pca"] >= 18 and hits["params"] == 20
    verdict(5, ok, f"w_pca {hits['w_pca']}/20, params {hits['params']}/20", start, 600)


def test_criterion_06_correlation_statistics(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    bad = 0
    for i in range(1000):
        n = int(rng.integers(2, 50))
        if i % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        tau = rankeval.kendall_tau_b(x, y)
        expected = kendall_brute(x, y)
        bad += (tau.degenerate or tau.value != expected) if expected is not None else not tau.degenerate
        rx, ry = average_ranks_brute(x), average_ranks_brute(y)
        bad += not np.array_equal(rankeval.average_ranks(x), rx)
        if np.ptp(rx) and np.ptp(ry):
            bad += abs(rankeval.spearman_rho(x, y) - pearson(rx, ry)) > 1e-12
    x = rng.normal(size=100)
    extremes = [rankeval.kendall_tau(x, np.exp(x)), rankeval.spearman_rho(x, 3 * x + 1),
                -rankeval.kendall_tau(x, -x ** 3), -rankeval.spearman_rho(x, -np.exp(x))]
    ok = bad == 0 and extremes == [1.0] * 4
    verdict(6, ok, f"{bad} oracle mismatches, extremes {extremes}", start, 60)


def test_criterion_07_synthetic_ranking_recovery(verdict):
    start = time.perf_counter()
    space = preset("tiny").scaled(64, vocab_size=1000)
    batch = random_batch(space.vocab_size, 16, 32, 7)
    dataset = rankeval.make_benchmark(200, "w_pca", seed=7, space=space, batch=batch)
    w = rankeval.evaluate_proxy(dataset, "w_pca", seed=7, batch=batch, space=space)
    p = rankeval.evaluate_proxy(dataset, "params", seed=7, batch=batch, space=space)
    ok = w.kendall_tau >= 0.9 and p.kendall_tau < w.kendall_tau and w.n == 200
    verdict(7, ok, f"w_pca tau {w.kendall_tau:.3f}, params tau {p.kendall_tau:.3f}", start, 300)


def _strip_timing(text: str, kind: str) -> str:
    if kind == "search":
        payload = json.loads(text)
        payload["report"].pop("timing")
        return json.dumps(payload, sort_keys=True)
    lines = text.splitlines()
    body = [i for i, line in enumerate(lines) if not line.startswith("#")]
    columns = lines[body[0]].split(",")
    if "elapsed_per_1000" not in columns:
        return text
    drop = columns.index("elapsed_per_1000")
    return "\n".join(lines[:body[0]] + [",".join(c for j, c in enumerate(lines[i].split(",")) if j != drop)
                                        for i in body])


def test_criterion_08_determinism(verdict, tmp_path, capsys):
    start = time.perf_counter()
    flags = ["--layers", "4", "--choices", "2", "--embed-dim", "32", "--vocab-size", "200", "--batch-size", "8",
             "--seq-len", "16", "--cap", "none", "--seed", "8"]
    dataset = tmp_path / "ds.jsonl"
    assert cli.main(["make-benchmark", "--n", "30", "--jobs", "1", "--out", str(dataset)] + flags) == 0
    commands = {
        "score": ["score", "--genome", "0,3,1,2", "--proxy", "w_pca,v_pca,params"],
        "search": ["search", "--fitness", "w_pca", "--pop", "10", "--gens", "5"],
        "rank": ["rank", "--dataset", str(dataset), "--proxy", "w_pca,v_pca,params"],
    }
    identical = {}
    for kind, argv in commands.items():
        outputs = []
        for trial in range(2):
            out = tmp_path / f"{kind}{trial}.out"
            assert cli.main(argv + flags + ["--jobs", "2", "--out", str(out)]) == 0
            outputs.append(_strip_timing(out.read_text(), kind))
        identical[kind] = outputs[0] == outputs[1]
    capsys.readouterr()
    verdict(8, all(identical.values()), f"identical payloads {identical}", start, 120)


def test_criterion_09_gradient_free_contract(verdict, mixed_config):
    start = time.perf_counter()
    space = preset("tiny").scaled(64, vocab_size=1000)
    models = [instantiate(mixed_config, 0), instantiate(decode((0, 3, 7, 11, 5, 9), space), 1)]
    names = ("w_pca", "v_pca", "params", "activation_distance", "head_confidence", "softmax_confidence")
    constructed = {}
    for name in names:
        before = ag.Tape.constructed
        for model in models:
            proxies.evaluate(name, model, random_batch(model.config.vocab_size, 4, 8, 0))
        constructed[name] = ag.Tape.constructed - before
    # the counter itself works
    before = ag.Tape.constructed
    proxies.evaluate("synaptic_saliency", models[0], random_batch(50, 2, 4, 0))
    ok = not any(constructed.values()) and ag.Tape.constructed > before
    verdict(9, ok, f"tapes built {constructed}", start, 60)


def test_criterion_10_cap_enforcement(verdict):
    start = time.perf_counter()
    space = preset("small")
    cap = 15_700_000
    batch = random_batch(space.vocab_size, 8, 32, 10)
    worst, evaluated = 0, 0
    runs = [("w_pca", gasearch.GaConfig(population=10, generations=5, seed=s)) for s in range(10)]
    runs += [("params", gasearch.GaConfig(seed=s)) for s in range(10)]
    for proxy, ga in runs:
        inner = gasearch.ProxyFitness(space, proxy, weight_seed=ga.seed, batch=batch)
        seen = []

        def fitness(g, inner=inner, seen=seen):
            seen.append(genome_params(g, space))
            return inner(g)

        report = gasearch.run(space, ga, fitness)
        worst = max(worst, max(seen), genome_params(report.best_genome, space))
        evaluated += len(seen)
    verdict(10, worst <= cap, f"{len(runs)} runs, {evaluated} evaluations, largest {worst:,}", start, 900)

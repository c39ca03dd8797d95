import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, strategies as st

from oracles import average_ranks_brute, kendall_brute, pearson
from wpca import proxies, rankeval
from wpca.archmodel import instantiate, random_batch
from wpca.errors import DatasetError, InputError
from wpca.rankeval import RankingDataset, RankingRecord
from wpca.searchspace import SpaceSpec, all_genomes, decode, format_genome, genome_params

SPACE = SpaceSpec(m=3, n=2, param_cap=None).scaled(16, vocab_size=40)
BATCH = random_batch(40, 4, 8, 0)


def genome_dataset(score_fn, count=24):
    records = []
    for i, g in enumerate(list(all_genomes(SPACE))[:count]):
        records.append(RankingRecord(id=f"r{i}", score=float(score_fn(g, i)), genome=g))
    return RankingDataset(records)


def test_correlation_examples():
    assert rankeval.kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert rankeval.kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert rankeval.spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert rankeval.spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert rankeval.kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)


def test_constant_input_is_degenerate():
    tau = rankeval.kendall_tau_b([5, 5, 5], [1, 2, 3])
    rho = rankeval.spearman([1, 2, 3], [0, 0, 0])
    assert tau.degenerate and tau.value == 0.0
    assert rho.degenerate and rho.value == 0.0


def test_correlation_input_errors():
    with pytest.raises(InputError):
        rankeval.kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        rankeval.spearman_rho([1], [1])
    with pytest.raises(InputError):
        rankeval.kendall_tau([1, np.nan], [1, 2])


@pytest.mark.parametrize("ties", [False, True])
def test_correlations_match_brute_force(ties):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        if ties:
            x, y = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        expected = kendall_brute(x, y)
        tau = rankeval.kendall_tau_b(x, y)
        if expected is None:
            assert tau.degenerate
        else:
            assert tau.value == pytest.approx(expected, abs=1e-12)
        rx, ry = average_ranks_brute(x), average_ranks_brute(y)
        np.testing.assert_array_equal(rankeval.average_ranks(x), rx)
        if np.ptp(rx) and np.ptp(ry):
            assert rankeval.spearman_rho(x, y) == pytest.approx(pearson(rx, ry), abs=1e-12)


def test_large_input_is_fast_and_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=20_000)
    y = x + rng.normal(size=20_000)
    assert rankeval.kendall_tau(x, y) == pytest.approx(scipy.stats.kendalltau(x, y)[0], abs=1e-12)


vectors = st.lists(st.integers(-5, 5), min_size=2, max_size=40)


@given(vectors, st.randoms(use_true_random=False))
def test_property_symmetry_and_permutation(xs, r):
    ys = list(xs)
    r.shuffle(ys)
    x, y = np.array(xs, float), np.array(ys, float)
    for fn in (rankeval.kendall_tau_b, rankeval.spearman):
        a, b = fn(x, y), fn(y, x)
        assert a.degenerate == b.degenerate
        assert a.value == pytest.approx(b.value, abs=1e-12)
        perm = np.array(r.sample(range(len(x)), len(x)))
        assert fn(x[perm], y[perm]).value == pytest.approx(a.value, abs=1e-12)
        assert -1.0 <= a.value <= 1.0


@given(vectors)
def test_property_monotone_transform_invariance(xs):
    x = np.array(xs, float)
    y = np.arange(len(x), dtype=float)
    for fn in (rankeval.kendall_tau, rankeval.spearman_rho):
        assert fn(np.exp(x), y) == pytest.approx(fn(x, y), abs=1e-12)
        assert fn(-x, y) == pytest.approx(-fn(x, y), abs=1e-12)


def test_record_validation():
    with pytest.raises(InputError):
        RankingRecord(id="a", score=1.0)
    with pytest.raises(InputError):
        RankingRecord(id="a", score=math.inf, genome=(0,))
    with pytest.raises(InputError):
        RankingRecord.from_dict({"id": "a", "score": "high", "genome": [0]})
    with pytest.raises(InputError):
        RankingRecord.from_dict({"id": "a", "score": 1, "genome": [0], "extra": 1})
    rec = RankingRecord.from_dict({"id": "a", "score": 0.5, "genome": [1, 2, 3]})
    assert RankingRecord.from_dict(rec.to_dict()) == rec


def test_dataset_round_trip_and_header(tmp_path):
    ds = genome_dataset(lambda g, i: i / 10, count=5)
    path = tmp_path / "ds.jsonl"
    path.write_text(json.dumps({"header": {"seed": 1}}) + "\n" + ds.dumps())
    loaded = RankingDataset.load(path)
    assert loaded.records == ds.records
    ds.save(path)
    assert RankingDataset.load(path).dumps() == ds.dumps()


def test_dataset_errors_report_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"id": "a", "score": 1, "genome": [0, 0, 0]})
    path.write_text(good + "\n{not json\n")
    with pytest.raises(DatasetError, match="line 2") as info:
        RankingDataset.load(path)
    assert info.value.lineno == 2
    path.write_text(good + "\n" + good + "\n")
    with pytest.raises(DatasetError, match="duplicate"):
        RankingDataset.load(path)
    with pytest.raises(DatasetError):
        RankingDataset([RankingRecord("x", 1.0, genome=(0,)), RankingRecord("x", 2.0, genome=(1,))])


def proxy_value(proxy, rec):
    return proxies.evaluate(proxy, rankeval.record_model(rec, SPACE, 0), BATCH)


def test_evaluate_proxy_self_and_reversed_correlation():
    base = genome_dataset(lambda g, i: 0.0)
    vals = {r.id: proxy_value("params", r) for r in base.records}
    up = RankingDataset([RankingRecord(r.id, vals[r.id], genome=r.genome) for r in base.records])
    down = RankingDataset([RankingRecord(r.id, -math.log(vals[r.id]), genome=r.genome) for r in base.records])
    rep = rankeval.evaluate_proxy(up, "params", seed=0, batch=BATCH, space=SPACE)
    assert (rep.kendall_tau, rep.spearman_rho, rep.n, rep.skipped) == (1.0, 1.0, 24, 0)
    assert rep.eta is None and "elapsed_per_1000" not in rep.to_dict(include_timing=False)
    rep = rankeval.evaluate_proxy(down, "params", seed=0, batch=BATCH, space=SPACE)
    assert (rep.kendall_tau, rep.spearman_rho) == (-1.0, -1.0)


def test_evaluate_proxy_uses_per_record_seeds():
    ds = genome_dataset(lambda g, i: i)
    rep = rankeval.evaluate_proxy(ds, "v_pca", eta=0.9, seed=3, batch=BATCH, space=SPACE)
    shuffled = RankingDataset(ds.records[::-1])
    rep2 = rankeval.evaluate_proxy(shuffled, "v_pca", eta=0.9, seed=3, batch=BATCH, space=SPACE)
    assert rep.values == rep2.values[::-1]
    assert rep.eta == 0.9


def test_too_many_skipped_records_raise():
    ds = genome_dataset(lambda g, i: i, count=10)
    bad = [RankingRecord(f"bad{i}", 0.0, genome=(99, 0, 0)) for i in range(2)]
    with pytest.raises(DatasetError):
        rankeval.evaluate_proxy(RankingDataset(ds.records + bad), "params", batch=BATCH, space=SPACE)
    rep = rankeval.evaluate_proxy(RankingDataset(ds.records + bad[:1]), "params", batch=BATCH, space=SPACE)
    assert (rep.n, rep.skipped) == (10, 1)


def test_eta_sweep_matches_single_evaluations():
    ds = genome_dataset(lambda g, i: math.sin(i))
    sweep = rankeval.eta_sweep(ds, [0.9, 0.99], seed=1, batch=BATCH, space=SPACE)
    assert [(r.proxy, r.eta) for r in sweep] == [("v_pca", 0.9), ("w_pca", 0.9), ("v_pca", 0.99), ("w_pca", 0.99)]
    for r in sweep:
        single = rankeval.evaluate_proxy(ds, r.proxy, eta=r.eta, seed=1, batch=BATCH, space=SPACE)
        assert single.values == r.values
        assert single.kendall_tau == r.kendall_tau


def test_stability_of_params_is_exactly_zero():
    recs = genome_dataset(lambda g, i: i, count=3).records
    for mode in ("seeds", "batches"):
        rows = rankeval.stability_study(recs, "params", mode=mode, trials=4, space=SPACE, batch_size=2, seq_len=4)
        for row, rec in zip(rows, recs):
            assert row.stdev == 0.0
            assert row.mean == genome_params(rec.genome, SPACE)


def test_stability_summary_statistics():
    recs = genome_dataset(lambda g, i: i, count=2).records
    rows = rankeval.stability_study(recs, "v_pca", mode="seeds", trials=5, space=SPACE, batch_size=4, seq_len=8,
                                    eta=0.9)
    for row in rows:
        assert len(row.values) == 5
        assert row.mean == pytest.approx(np.mean(row.values))
        assert row.stdev == pytest.approx(np.std(row.values, ddof=1))
    with pytest.raises(InputError):
        rankeval.stability_study(recs, "v_pca", trials=1, space=SPACE)
    with pytest.raises(InputError):
        rankeval.stability_study(recs, "v_pca", mode="layers", space=SPACE)


def test_select_deciles_against_bucket_oracle():
    rng = np.random.default_rng(5)
    scores = rng.permutation(37).astype(float)
    ds = RankingDataset([RankingRecord(f"r{i}", s, genome=(0,)) for i, s in enumerate(scores)])
    picks = rankeval.select_deciles(ds, buckets=10, seed=2)
    ranked = sorted(ds.records, key=lambda r: r.score)
    for b, rec in enumerate(picks):
        members = [r for k, r in enumerate(ranked) if k * 10 // 37 == b]
        assert rec in members
    assert rankeval.select_deciles(ds, seed=2) == picks
    with pytest.raises(DatasetError):
        rankeval.select_deciles(RankingDataset(ds.records[:5]))


def test_adjacent_swaps_stay_within_budget():
    rng = np.random.default_rng(0)
    scores = np.linspace(0, 1, 101)
    out = rankeval._adjacent_swaps(scores, 0.05, rng)
    assert np.count_nonzero(out != scores) == 10  # five disjoint pairs
    assert sorted(out) == sorted(scores)
    assert rankeval.kendall_tau(out, scores) > 0.99


def test_make_benchmark_recovers_proxy_ranking():
    space = SpaceSpec(m=4, n=2, param_cap=None).scaled(16, vocab_size=40)
    ds = rankeval.make_benchmark(20, "w_pca", seed=4, space=space, batch=BATCH, eta=0.9)
    assert len({r.genome for r in ds.records}) == 20
    assert all(0.4 <= s <= 0.9 for s in ds.scores)
    assert all(r.id.endswith(format_genome(r.genome)) for r in ds.records)
    rep = rankeval.evaluate_proxy(ds, "w_pca", eta=0.9, seed=4, batch=BATCH, space=space)
    assert rep.kendall_tau >= 0.85
    assert rankeval.make_benchmark(20, "w_pca", seed=4, space=space, batch=BATCH, eta=0.9).dumps() == ds.dumps()


def test_w_pca_is_params_times_v_pca_on_records():
    ds = genome_dataset(lambda g, i: 0.0, count=8)
    for rec in ds.records:
        model = rankeval.record_model(rec, SPACE, 9)
        assert proxies.w_pca(model, BATCH) == genome_params(rec.genome, SPACE) * proxies.v_pca(model, BATCH)
        assert model.num_parameters() == instantiate(decode(rec.genome, SPACE), 0).num_parameters()

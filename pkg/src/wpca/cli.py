"""Command-line interface.

    wpca score --genome 0,0,0,0,0,0 --proxy params --space tiny
    wpca search --space small --fitness w_pca --seed 1 --out report.json
    wpca make-benchmark --n 200 --space tiny --embed-dim 64 --seed 3 --out bench.jsonl
    wpca rank --dataset bench.jsonl --proxy w_pca,params --space tiny --embed-dim 64 --seed 3

Every command accepts ``--config FILE`` with ``key = value`` lines (keys are
flag names); flags given on the command line win.  Exit codes: 0 success,
2 usage or input error, 3 infeasible configuration, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__, gasearch, proxies, rankeval
from .archmodel import DEFAULT_VOCAB, ArchConfig, instantiate, load_batch_file, random_batch
from .errors import ConfigurationError, InputError, NumericError, WpcaError
from .searchspace import PRESETS, SpaceSpec, all_genomes, decode, format_genome, param_count, parse_genome, preset
from .seeds import derive_seed

ENUMERATE_LIMIT = 100_000
EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4
# resolved-config keys left out of the provenance header (they do not affect results)
_NOT_IN_HEADER = {"out", "config", "jobs", "func", "command"}


# ---------------------------------------------------------------- argument types

def _cap(text: str):
    if text.lower() in ("none", "inf"):
        return None
    return int(float(text))


def _probability(text: str) -> float:
    p = float(text)
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return p


def _eta(text: str) -> float:
    try:
        return proxies.check_eta(float(text))
    except InputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _eta_list(text: str) -> list:
    return [_eta(t) for t in text.split(",") if t.strip()]


def _proxy_list(text: str) -> list:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in proxies.PROXIES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown proxy {bad or text!r}; choose from {sorted(proxies.PROXIES)}")
    return names


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, formats=("csv", "jsonl")):
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, help="base seed (generated and reported when omitted)")
    p.add_argument("--jobs", type=_positive, default=os.cpu_count() or 1,
                   help="worker processes (1 = serial reference run)")
    p.add_argument("--out", help="output path (default: stdout)")
    if formats:
        p.add_argument("--format", choices=formats, default=formats[0])
    p.add_argument("--eig", choices=("lapack", "jacobi"), default="lapack", help="eigensolver for PCA proxies")


def _space_flags(p):
    p.add_argument("--space", choices=sorted(PRESETS), default="small")
    p.add_argument("--layers", type=_positive, help="genome length m")
    p.add_argument("--choices", type=_positive, help="FFN width choices n per block kind")
    p.add_argument("--embed-dim", type=_positive, help="hidden width (FFN step = width / 4, unfactorised embeddings)")
    p.add_argument("--vocab-size", type=_positive)
    p.add_argument("--cap", type=_cap, default=argparse.SUPPRESS, help="parameter cap ('none' for uncapped)")


def _batch_flags(p, size=128, length=128):
    p.add_argument("--batch-size", type=_positive, default=size)
    p.add_argument("--seq-len", type=_positive, default=length)
    p.add_argument("--batch-file", help="token ids, one input per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wpca", description="Zero-shot scoring and search for small transformers.")
    parser.add_argument("--version", action="version", version=f"wpca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score genomes or architectures with proxies")
    _common(p)
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--genome", type=parse_genome, help="comma-separated gene literal")
    p.add_argument("--arch-file", help="JSON lines with 'genome' or 'flexibert' descriptors")
    p.add_argument("--proxy", type=_proxy_list, default=["w_pca"], help="comma-separated proxy names")
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("search", help="genetic search under the parameter cap")
    _common(p, formats=())
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--fitness", choices=sorted(proxies.PROXIES), default="w_pca")
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.add_argument("--pop", type=_positive, default=50)
    p.add_argument("--gens", type=_positive, default=40)
    p.add_argument("--crossover-prob", type=_probability, default=1.0)
    p.add_argument("--mutation-prob", type=_probability, default=0.1)
    p.add_argument("--parent-pool", type=_positive, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rank", help="rank correlation of proxies against a dataset")
    _common(p)
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--proxy", type=_proxy_list, default=["w_pca"])
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("stability", help="proxy spread over weight seeds or batches")
    _common(p)
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--proxy", choices=sorted(proxies.PROXIES), default="w_pca")
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.add_argument("--mode", choices=("seeds", "batches"), default="seeds")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--deciles", action="store_true", help="study one record per score decile")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("eta-sweep", help="v_pca / w_pca correlation across eta values")
    _common(p)
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--etas", type=_eta_list, default=list(proxies.ETA_PRESETS))
    p.set_defaults(func=cmd_eta_sweep)

    p = sub.add_parser("enumerate", help="score every genome of a small space")
    _common(p)
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--proxy", choices=sorted(proxies.PROXIES), default="w_pca")
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("make-benchmark", help="synthetic ranking dataset from a proxy")
    _common(p, formats=())
    _space_flags(p)
    _batch_flags(p)
    p.add_argument("--n", type=_positive, default=200)
    p.add_argument("--proxy", choices=sorted(proxies.PROXIES), default="w_pca")
    p.add_argument("--eta", type=_eta, default=proxies.DEFAULT_ETA)
    p.add_argument("--source", choices=("genome", "flexibert"), default="genome")
    p.add_argument("--swap-fraction", type=_probability, default=rankeval.SYNTHETIC_SWAP_FRACTION)
    p.set_defaults(func=cmd_make_benchmark)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _read_config(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise InputError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise InputError(f"config key {key!r} needs a boolean")
            value = raw.lower() in ("true", "1", "yes")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError, WpcaError) as exc:
                raise InputError(f"config key {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise InputError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(_subparser(parser, args.command), _read_config(args.config))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- shared helpers

def build_space(args) -> SpaceSpec:
    space = preset(args.space)
    if args.embed_dim is not None:
        space = space.scaled(args.embed_dim, args.vocab_size)
    elif args.vocab_size is not None:
        space = replace(space, vocab_size=args.vocab_size)
    overrides = {}
    if args.layers is not None:
        overrides["m"] = args.layers
    if args.choices is not None:
        overrides["n"] = args.choices
    if hasattr(args, "cap"):
        overrides["param_cap"] = args.cap
    return replace(space, **overrides) if overrides else space


def make_batch(args, vocab_size: int):
    """(token batch, batch id) from --batch-file or the seed."""
    if args.batch_file:
        batch = load_batch_file(args.batch_file)
        digest = hashlib.sha256(batch.tobytes()).hexdigest()[:12]
        return batch, f"file:{Path(args.batch_file).name}:{digest}"
    batch = random_batch(vocab_size, args.batch_size, args.seq_len, derive_seed(args.seed, "batch"))
    return batch, f"random:{args.batch_size}x{args.seq_len}"


def header(args) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_IN_HEADER}
    return {"tool": "wpca", "version": __version__, "command": args.command, "seed": args.seed,
            "config": json.loads(json.dumps(config, default=str))}


class Writer:
    """Serialises all output through one sink (file or stdout)."""

    def __init__(self, args):
        self.args = args
        self.buf = io.StringIO()

    def csv(self, columns, rows):
        h = header(self.args)
        self.buf.write(f"# {h['tool']} {h['version']}\n# command: {h['command']}\n# seed: {h['seed']}\n")
        self.buf.write(f"# config: {json.dumps(h['config'], sort_keys=True)}\n")
        w = csv.writer(self.buf, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)

    def jsonl(self, records):
        self.buf.write(json.dumps({"header": header(self.args)}, sort_keys=True) + "\n")
        for r in records:
            self.buf.write(json.dumps(r, sort_keys=True) + "\n")

    def table(self, columns, rows):
        if self.args.format == "csv":
            self.csv(columns, [[_cell(v) for v in row] for row in rows])
        else:
            self.jsonl([dict(zip(columns, row)) for row in rows])

    def json(self, payload):
        self.buf.write(json.dumps({"header": header(self.args), **payload}, indent=2, sort_keys=True) + "\n")

    def close(self):
        text = self.buf.getvalue()
        if self.args.out:
            Path(self.args.out).write_text(text)
        else:
            sys.stdout.write(text)


def _cell(v):
    return repr(v) if isinstance(v, float) else ("" if v is None else v)


def _pool_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------- commands

def _arch_targets(path, space, seed):
    """(label, config, weight seed) per line of an architecture file."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if set(obj) == {"header"}:
                    continue
                label = str(obj.get("id", f"arch{lineno}"))
                if "genome" in obj:
                    config = decode(obj["genome"], space)
                elif "flexibert" in obj:
                    config = ArchConfig.from_dict(obj["flexibert"])
                else:
                    raise InputError("needs 'genome' or 'flexibert'")
            except (json.JSONDecodeError, AttributeError, WpcaError) as exc:
                raise InputError(f"{path}: line {lineno}: {exc}") from None
            out.append((label, config, derive_seed(seed, label)))
    return out


def cmd_score(args) -> None:
    space = build_space(args)
    if args.genome is not None:
        config = decode(args.genome, space)
        label = format_genome(args.genome)
        targets = [(label, config, derive_seed(args.seed, label))]
    elif args.arch_file:
        targets = _arch_targets(args.arch_file, space, args.seed)
    else:
        raise InputError("score needs --genome or --arch-file")
    rows = []
    for label, config, wseed in targets:
        model = batch = None
        batch_id = ""
        for name in args.proxy:
            if name == "params":
                value = float(param_count(config).total)
                rows.append(proxies.ProxyScore(name, value, args.seed, "", None, label))
                continue
            if model is None:
                model = instantiate(config, wseed)
                batch, batch_id = make_batch(args, config.vocab_size)
            rows.append(proxies.score(name, model, batch, args.seed, batch_id, args.eta, label, args.eig))
    out = Writer(args)
    if args.format == "csv":
        out.csv(proxies.CSV_HEADER, [r.csv_row() for r in rows])
    else:
        out.jsonl([r.to_dict() for r in rows])
    out.close()
    for r in rows:
        if r.warning:
            print(f"warning: {r.proxy} on {r.genome}: {r.warning}", file=sys.stderr)


def _fitness(args, space, proxy):
    batch = None if proxy == "params" else make_batch(args, space.vocab_size)[0]
    return gasearch.ProxyFitness(space, proxy, eta=args.eta, weight_seed=args.seed, batch=batch,
                                 method=args.eig)


def cmd_search(args) -> None:
    space = build_space(args)
    ga = gasearch.GaConfig(population=args.pop, generations=args.gens, crossover_prob=args.crossover_prob,
                           mutation_prob=args.mutation_prob, parent_pool=args.parent_pool,
                           param_cap=space.param_cap, fitness=args.fitness, seed=args.seed)
    report = gasearch.run(space, ga, _fitness(args, space, args.fitness), jobs=args.jobs)
    payload = report.to_dict(include_timing=False)
    payload["timing"] = {"wall_time": report.wall_time}
    out = Writer(args)
    out.json({"report": payload})
    out.close()
    print(format_genome(report.best_genome), file=sys.stderr if not args.out else sys.stdout)


def _load_dataset(args):
    return rankeval.RankingDataset.load(args.dataset)


def _dataset_batch(args, space, dataset):
    if args.batch_file:
        return make_batch(args, space.vocab_size)[0]
    vocab = space.vocab_size
    if dataset.records and dataset.records[0].flexibert is not None:
        vocab = dataset.records[0].config(None).vocab_size
    return make_batch(args, vocab)[0]


_REPORT_COLUMNS = ("proxy", "eta", "kendall_tau", "spearman_rho", "n", "skipped", "degenerate", "elapsed_per_1000")


def cmd_rank(args) -> None:
    space = build_space(args)
    dataset = _load_dataset(args)
    batch = _dataset_batch(args, space, dataset)
    reports = [rankeval.evaluate_proxy(dataset, name, args.eta, args.seed, batch, space, args.eig)
               for name in args.proxy]
    out = Writer(args)
    out.table(_REPORT_COLUMNS, [[r.to_dict()[c] for c in _REPORT_COLUMNS] for r in reports])
    out.close()


def cmd_eta_sweep(args) -> None:
    space = build_space(args)
    dataset = _load_dataset(args)
    batch = _dataset_batch(args, space, dataset)
    reports = rankeval.eta_sweep(dataset, args.etas, args.seed, batch, space, args.eig)
    out = Writer(args)
    out.table(_REPORT_COLUMNS, [[r.to_dict()[c] for c in _REPORT_COLUMNS] for r in reports])
    out.close()


def cmd_stability(args) -> None:
    space = build_space(args)
    dataset = _load_dataset(args)
    records = rankeval.select_deciles(dataset, seed=args.seed) if args.deciles else dataset.records
    rows = rankeval.stability_study(records, args.proxy, args.mode, args.trials, args.seed, space,
                                    args.batch_size, args.seq_len, args.eta, args.eig)
    out = Writer(args)
    out.table(("id", "mean", "stdev", "values"),
              [[r.id, r.mean, r.stdev, " ".join(repr(v) for v in r.values)] for r in rows])
    out.close()


def cmd_enumerate(args) -> None:
    space = build_space(args)
    if space.size > ENUMERATE_LIMIT:
        raise ConfigurationError(f"space has {space.size} genomes; enumerate allows at most {ENUMERATE_LIMIT}")
    scorer = _fitness(args, space, args.proxy)
    genomes = list(all_genomes(space))
    values = _pool_map(scorer, genomes, args.jobs)
    rows = []
    for g, v in zip(genomes, values):
        n = param_count(decode(g, space)).total
        feasible = space.param_cap is None or n <= space.param_cap
        rows.append([format_genome(g), n, feasible, float(v)])
    out = Writer(args)
    out.table(("genome", "params", "feasible", "value"), rows)
    out.close()


def cmd_make_benchmark(args) -> None:
    space = build_space(args) if args.source == "genome" else None
    vocab = space.vocab_size if space is not None else DEFAULT_VOCAB
    batch = make_batch(args, vocab)[0]
    dataset = rankeval.make_benchmark(args.n, args.proxy, args.seed, space, batch, args.eta,
                                      args.swap_fraction, args.eig)
    out = Writer(args)
    out.jsonl([r.to_dict() for r in dataset.records])
    out.close()


# ---------------------------------------------------------------- entry point

def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is None:
        args.seed = secrets.randbelow(2 ** 31)
        print(f"seed: {args.seed}", file=sys.stderr)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WpcaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``slate-forge <command> [flags]``.

Every command writes into one output directory (``--out``, default ``out``)
and records its arguments, seed and produced files in ``manifest.json``
there. Inputs default to the files a previous command left in that
directory, so a pipeline is::

    slate-forge gen-data --users 2000 --items 1000
    slate-forge embed --dim 16
    slate-forge build-index
    slate-forge train --estimator lgp-mips --budget-iterations 500
    slate-forge eval --k 5
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._threads import get_threads, set_threads
from .errors import ConfigurationError, ParseError, SlateForgeError

logger = logging.getLogger("slate_forge")

INTERACTIONS = "interactions.csv"
EMBEDDINGS = "embeddings.sleb"
INDEX = "index.slmi"
PARAMS = "params.bin"
MANIFEST = "manifest.json"

# TrainConfig field -> (flag, type)
TRAIN_FLAGS = {
    "estimator": ("--estimator", str),
    "K": ("--k", int),
    "S": ("--s", int),
    "sigma": ("--sigma", str),
    "lr": ("--lr", float),
    "batch_size": ("--batch-size", int),
    "iterations": ("--budget-iterations", int),
    "seconds": ("--budget-seconds", float),
    "eval_intervals": ("--eval-intervals", int),
    "variant": ("--variant", str),
    "init_scale": ("--init-scale", float),
    "mips_beam": ("--mips-beam", int),
    "train_eval_users": ("--train-eval-users", int),
}


class _UsageError(Exception):
    pass


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _sigma_value(text):
    if text in ("auto", "norm"):
        return text
    try:
        return float(text)
    except ValueError:
        raise ConfigurationError(f"--sigma must be 'auto', 'norm' or a number, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, help="controls all randomness")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (falls back to SLATE_FORGE_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slate-forge", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic interaction CSV")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--latent-dim", type=int, default=16, help="rank of the generating logits")

    p = sub.add_parser("embed", parents=[common], help="SVD action embeddings from interactions")
    p.add_argument("--data", help=f"interaction CSV (default: OUT/{INTERACTIONS})")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension L")
    p.add_argument("--iters", type=int, default=30, help="subspace iterations")
    p.add_argument("--split-ratio", type=float, default=0.5)
    p.add_argument("--full-matrix", action="store_true", help="use observed and hidden interactions")

    p = sub.add_parser("build-index", parents=[common], help="build the graph MIPS index")
    p.add_argument("--embeddings", help=f"SLEB file (default: OUT/{EMBEDDINGS})")
    p.add_argument("--max-degree", type=int, default=16)
    p.add_argument("--beam", type=int, default=100, help="construction beam width")
    p.add_argument("--query-beam", type=int, default=256, help="default search beam width")

    p = sub.add_parser("train", parents=[common], help="train a policy")
    _add_pipeline_inputs(p)
    p.add_argument("--config", help="TOML file with any training flag; command-line flags win")
    for name, (flag, kind) in TRAIN_FLAGS.items():
        p.add_argument(flag, dest=name, type=kind, default=None)
    p.add_argument("--lr-grid", type=_csv_list(float), default=None,
                   help="sweep these learning rates on validation reward and keep the best")

    p = sub.add_parser("eval", parents=[common], help="deterministic reward of saved parameters")
    _add_pipeline_inputs(p)
    p.add_argument("--params", help=f"parameter file (default: OUT/{PARAMS})")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--on", choices=("val", "train"), default="val", help="which users to evaluate")

    for name, helptext in (("bench-time", "equal wall-clock budget comparison"),
                           ("bench-iter", "equal iteration budget comparison")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--scenario", default="small")
        p.add_argument("--methods", type=_csv_list(str), default=["lgp-mips", "lgp", "pl-pg"])
        p.add_argument("--seeds", type=int, default=6, help="number of seeds (0 .. n-1 offset by --seed)")
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--s", type=int, default=10)
        p.add_argument("--lr", type=float, default=1e-2)
        if name == "bench-time":
            p.add_argument("--budget-seconds", type=float, default=120.0)
        else:
            p.add_argument("--budget-iterations", type=int, default=1000)

    p = sub.add_parser("bench-variance", parents=[common], help="gradient variance against K (or sigma)")
    p.add_argument("--scenario", default="small")
    p.add_argument("--ks", type=_csv_list(int), default=[2, 5, 10])
    p.add_argument("--methods", type=_csv_list(str), default=["pl-pg", "lgp"])
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seeds", type=int, default=6)
    p.add_argument("--sigmas", type=_csv_list(float), default=None,
                   help="run the LGP sigma-scaling study at this K instead")

    p = sub.add_parser("bench-beta", parents=[common], help="fixed versus trained action embeddings")
    p.add_argument("--scenario", default="small")
    p.add_argument("--epochs", type=float, default=1.0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--trials", type=int, default=200, help="probe estimates per logged interval")
    p.add_argument("--variants", type=_csv_list(str), default=["learn-theta", "learn-beta"])

    p = sub.add_parser("recall", parents=[common], help="recall@K of the graph index against brute force")
    p.add_argument("--index", help=f"SLMI file (default: OUT/{INDEX})")
    p.add_argument("--embeddings", help=f"SLEB file (default: OUT/{EMBEDDINGS})")
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--beam", type=int, default=None, help="search beam (default: the index's)")
    return parser


def _add_pipeline_inputs(p):
    p.add_argument("--data", help=f"interaction CSV (default: OUT/{INTERACTIONS})")
    p.add_argument("--embeddings", help=f"SLEB file (default: OUT/{EMBEDDINGS})")
    p.add_argument("--index", help=f"SLMI file (default: OUT/{INDEX} when present)")
    p.add_argument("--split-ratio", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=None, help="seed of the user split (default: from manifest)")


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno=exc.lineno, path=path) from None


def _record(out: Path, command: str, args, outputs, **extra) -> None:
    """Replace this command's entry in the manifest (no timestamps, so reruns are byte-identical)."""
    data = _manifest(out)
    data["slate_forge_version"] = __version__
    data["numpy_version"] = np.__version__
    skip = {"out", "verbose", "threads", "func"}
    entry = {"args": {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None},
             "seed": args.seed, "outputs": sorted(str(o) for o in outputs)}
    entry.update(extra)
    data.setdefault("commands", {})[command] = entry
    (out / MANIFEST).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n",
                                encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


def _input(path_arg, out: Path, default_name: str) -> Path:
    path = Path(path_arg) if path_arg else out / default_name
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _splits(args, out: Path):
    """The train/validation users used by embed, reproduced from the manifest seed."""
    from .data import holdout_users, load_interactions, split_sessions

    split_seed = args.split_seed
    if split_seed is None:
        split_seed = _manifest(out).get("commands", {}).get("embed", {}).get("seed", args.seed)
    ds = load_interactions(_input(args.data, out, INTERACTIONS))
    split = split_sessions(ds, args.split_ratio, split_seed)
    return holdout_users(split, 0.1, split_seed), split_seed


def _log(msg, *fmt):
    logger.info(msg, *fmt)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    from .data import generate_synthetic, save_interactions

    out = _out_dir(args)
    ds = generate_synthetic(args.users, args.items, args.latent_dim, args.density, args.seed)
    path = out / INTERACTIONS
    save_interactions(ds, path)
    print(f"wrote {path}: {ds.n_users} users, {ds.n_items} items, {ds.n_interactions} interactions "
          f"(density {ds.density:.4%})")
    _record(out, "gen-data", args, [path])


def cmd_embed(args):
    from .data import compute_svd_embeddings, holdout_users, load_interactions, save_embeddings, split_sessions

    out = _out_dir(args)
    ds = load_interactions(_input(args.data, out, INTERACTIONS))
    split = split_sessions(ds, args.split_ratio, args.seed)
    train_split, _ = holdout_users(split, 0.1, args.seed)
    beta = compute_svd_embeddings(train_split, args.dim, args.iters, args.seed, full_matrix=args.full_matrix)
    path = out / EMBEDDINGS
    save_embeddings(beta, path)
    print(f"wrote {path}: P={beta.P}, L={beta.L}, mean norm {beta.mean_norm():.4f}")
    _record(out, "embed", args, [path], dropped_users=split.dropped)


def cmd_build_index(args):
    from .data import load_embeddings
    from .mips import build_approx, save_index

    out = _out_dir(args)
    beta = load_embeddings(_input(args.embeddings, out, EMBEDDINGS))
    index = build_approx(beta, args.max_degree, args.beam, args.seed, query_beam=args.query_beam)
    path = out / INDEX
    save_index(index, path)
    print(f"wrote {path}: P={beta.P}, max degree {args.max_degree}")
    _record(out, "build-index", args, [path])


def _train_config(args):
    from .train import TrainConfig, config_key, load_config

    mapping = {}
    if args.config:
        for key, value in load_config(_input(args.config, Path("."), args.config)).items():
            mapping[config_key(key)] = value
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            mapping[name] = value
    if "iterations" in mapping and "seconds" in mapping and args.iterations is not None and args.seconds is None:
        del mapping["seconds"]
    if "iterations" in mapping and "seconds" in mapping and args.seconds is not None and args.iterations is None:
        del mapping["iterations"]
    if "iterations" not in mapping and "seconds" not in mapping:
        mapping["iterations"] = 1000
    mapping["seed"] = args.seed
    if "estimator" not in mapping:
        mapping["estimator"] = "lgp-mips"
    if "sigma" in mapping and isinstance(mapping["sigma"], str):
        mapping["sigma"] = _sigma_value(mapping["sigma"])
    return TrainConfig.from_mapping(mapping)


def _load_index_if_any(args, out, beta, needed):
    from .mips import build_approx, load_index

    path = Path(args.index) if args.index else out / INDEX
    if path.exists():
        return load_index(path, beta), path
    if args.index:
        raise FileNotFoundError(f"input file not found: {path}")
    if needed:
        _log("no index at %s; building one", path)
        return build_approx(beta, rng=args.seed), None
    return None, None


def cmd_train(args):
    from dataclasses import replace

    from .data import load_embeddings
    from .train import lr_sweep, save_params, train

    out = _out_dir(args)
    config = _train_config(args)
    (train_split, val_split), split_seed = _splits(args, out)
    beta = load_embeddings(_input(args.embeddings, out, EMBEDDINGS))
    index, index_path = _load_index_if_any(args, out, beta, config.estimator == "lgp-mips")
    sweep = None
    if args.lr_grid:
        best, scores = lr_sweep(config, args.lr_grid, train_split, beta, index, val_split=val_split)
        sweep = {str(k): v for k, v in scores.items()}
        print("learning-rate sweep: " + ", ".join(f"{k:g} -> {v:.4f}" for k, v in scores.items()))
        config = replace(config, lr=best)
    params, log = train(config, train_split, beta, index, config.seed, val_split=val_split)
    outputs = [out / PARAMS, out / "trainlog.csv", out / "trainlog.json"]
    save_params(params, outputs[0])
    log.to_csv(outputs[1])
    log.to_json(outputs[2])
    last = log.records[-1]
    print(f"trained {config.estimator}: {last['iteration']} iterations in {last['seconds']:.1f}s, "
          f"validation reward {last['val_reward']:.4f}")
    _record(out, "train", args, outputs, config=config.to_dict(), split_seed=split_seed,
            index=str(index_path) if index_path else None, lr_sweep=sweep)


def cmd_eval(args):
    from .data import load_embeddings
    from .train import evaluate_deterministic, load_params

    out = Path(args.out)
    (train_split, val_split), _ = _splits(args, out)
    beta = load_embeddings(_input(args.embeddings, out, EMBEDDINGS))
    params = load_params(_input(args.params, out, PARAMS))
    if params.L != beta.L:
        raise ConfigurationError(f"parameters have L={params.L} but embeddings have L={beta.L}")
    split = val_split if args.on == "val" else train_split
    reward = evaluate_deterministic(params, beta, split, args.k)
    print(f"{reward:.6f}")


def _seeds(args):
    return [args.seed + j for j in range(args.seeds)]


def _write_report(out: Path, stem: str, report, args):
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    _record(out, stem.replace("_", "-"), args, [csv_path, json_path])
    return csv_path


def _print_curves(report):
    for method in report.methods():
        xs, mean, se = report.curve(method)
        print(f"{method:>12}: final {report.y_label} {mean[-1]:.4f} +- {se[-1]:.4f} at {report.x_label}={xs[-1]:g}")
    for method in report.extras.get("unavailable", []):
        print(f"{method:>12}: unavailable")


def cmd_bench_time(args):
    from .bench import bench_time_budget, build_scenario
    from .train import TrainConfig

    out = _out_dir(args)
    data = build_scenario(args.scenario, args.seed)
    base = TrainConfig(K=args.k, S=args.s, lr=args.lr, seconds=args.budget_seconds, train_eval_users=0)
    report = bench_time_budget(data, args.methods, args.budget_seconds, _seeds(args), base=base)
    _print_curves(report)
    print(f"wrote {_write_report(out, 'bench_time', report, args)}")


def cmd_bench_iter(args):
    from .bench import bench_iteration_budget, build_scenario
    from .train import TrainConfig

    out = _out_dir(args)
    data = build_scenario(args.scenario, args.seed)
    base = TrainConfig(K=args.k, S=args.s, lr=args.lr, iterations=args.budget_iterations)
    report = bench_iteration_budget(data, args.methods, args.budget_iterations, _seeds(args), base=base)
    _print_curves(report)
    print(f"wrote {_write_report(out, 'bench_iter', report, args)}")


def cmd_bench_variance(args):
    from .bench import ContextPool, bench_sigma_scaling, bench_variance_vs_k, build_scenario

    out = _out_dir(args)
    data = build_scenario(args.scenario, args.seed)
    if args.sigmas:
        report = bench_sigma_scaling(ContextPool(data, args.ks[0]), args.sigmas, args.trials, _seeds(args))
        print(f"log-log slope of LGP variance against sigma: {report.extras['slope']:.3f}")
        print(f"wrote {_write_report(out, 'bench_sigma', report, args)}")
        return
    report = bench_variance_vs_k(ContextPool(data, args.ks[0]), args.ks, args.trials, _seeds(args), args.methods,
                                 scenario=data.scenario.name)
    for method, per_k in report.extras["variance"].items():
        print(f"{method:>8}: " + ", ".join(f"K={k}: {np.mean(v):.4g}" for k, v in per_k.items()))
    print(f"wrote {_write_report(out, 'bench_variance', report, args)}")


def cmd_bench_beta(args):
    from .bench import bench_fixed_beta, build_scenario

    out = _out_dir(args)
    data = build_scenario(args.scenario, args.seed)
    report = bench_fixed_beta(data, args.epochs, args.k, args.lr, probe_trials=args.trials, seed=args.seed,
                              variants=args.variants)
    for kind, secs in report.extras["seconds_per_iteration"].items():
        var = report.extras["variance"][kind]
        print(f"{kind:>12}: {secs * 1e3:.2f} ms/iteration, variance first {var[0]:.4g} last {var[-1]:.4g}")
    print(f"wrote {_write_report(out, 'bench_beta', report, args)}")


def cmd_recall(args):
    from .data import load_embeddings
    from .mips import ExactIndex, load_index, measure_recall, random_queries

    out = Path(args.out)
    beta = load_embeddings(_input(args.embeddings, out, EMBEDDINGS))
    index = load_index(_input(args.index, out, INDEX), beta)
    queries = random_queries(beta, args.queries, args.seed)
    report = measure_recall(index, ExactIndex(beta), queries, args.k, beam=args.beam)
    print(f"recall@{args.k} = {report.recall:.4f} over {report.query_count} queries")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "embed": cmd_embed,
    "build-index": cmd_build_index,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-time": cmd_bench_time,
    "bench-iter": cmd_bench_iter,
    "bench-variance": cmd_bench_variance,
    "bench-beta": cmd_bench_beta,
    "recall": cmd_recall,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
    except ValueError as exc:
        parser.error(str(exc))
    _log("using %d worker thread(s)", get_threads())
    try:
        COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"slate-forge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ParseError as exc:
        print(f"slate-forge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        message = str(exc)
        if exc.filename is not None and str(exc.filename) not in message:
            message = f"{exc.filename}: {message}"
        print(f"slate-forge {args.command}: error: {message}", file=sys.stderr)
        return 1
    except (SlateForgeError, ValueError) as exc:
        print(f"slate-forge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 runtime or domain error, 2 usage error.
Progress goes to stderr; machine-readable output to stdout or files.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from . import analysis, bundleio, evolve, fitness, pruner, simplify
from .exprcore import GenerationError, evaluate, format_expr, parse_expr

log = logging.getLogger("symprune")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _ratio(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _nm(text):
    if ":" not in text:
        raise argparse.ArgumentTypeError(f"expected N:M, got {text!r}")
    try:
        return pruner.parse_pattern(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _depth_range(text):
    try:
        lo, hi = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"need 1 <= MIN <= MAX, got {text!r}")
    return lo, hi


def _csv_floats(text):
    try:
        vals = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not math.isfinite(v) or v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("anisotropy entries must be positive")
    return vals


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_globals(p, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
    p.add_argument("-q", "--quiet", action="store_true", default=default(False),
                   help="suppress progress output")
    p.add_argument("--threads", type=_positive_int, default=default(None),
                   help="worker threads for layer scoring (env PRUNER_ZERO_THREADS)")


def _add_metric(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--expr", help="metric expression string")
    g.add_argument("--builtin", choices=sorted(pruner.BUILTIN_EXPRS), help="built-in metric")


def _add_pattern(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sparsity", type=_ratio, help="unstructured sparsity ratio (default 0.5)")
    g.add_argument("--nm", type=_nm, help="N:M structured pattern, e.g. 2:4")
    p.add_argument("--scope", choices=("row", "layer"), default="row",
                   help="ranking scope for unstructured masks (default row)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symprune",
                                     description="Search and apply symbolic pruning metrics.")
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", parents=[common], help="generate a tensor bundle")
    p.add_argument("--kind", choices=("gaussian", "mlp"), default="gaussian")
    p.add_argument("--layers", type=_positive_int, default=2)
    p.add_argument("--rows", type=_positive_int, default=16)
    p.add_argument("--cols", type=_positive_int, default=32)
    p.add_argument("--d", type=_positive_int, default=64, help="mlp input width")
    p.add_argument("--h", type=_positive_int, default=16, help="mlp hidden width")
    p.add_argument("--o", type=_positive_int, default=8, help="mlp output width")
    p.add_argument("--samples", type=_positive_int, default=128,
                   help="calibration samples (default 128)")
    p.add_argument("--anisotropy", type=_csv_floats, help="column scales, tiled across columns")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score a metric by reconstruction error")
    p.add_argument("--bundle", required=True)
    _add_metric(p)
    _add_pattern(p)
    p.add_argument("--verbose", action="store_true", help="print per-layer errors")

    p = sub.add_parser("prune", parents=[common], help="write masks for every layer")
    p.add_argument("--bundle", required=True)
    _add_metric(p)
    _add_pattern(p)
    p.add_argument("--out", required=True)

    for name, help_ in (("evolve", "genetic-programming metric search"),
                        ("random", "random-search baseline")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--bundle")
        p.add_argument("--fitness", choices=("recon", "target", "external"), default="recon")
        p.add_argument("--target-builtin", choices=sorted(pruner.BUILTIN_EXPRS))
        p.add_argument("--target-expr")
        p.add_argument("--cmd", help="external evaluator command; {expr} becomes the quoted expression")
        p.add_argument("--timeout", type=float, default=600.0, help="external evaluator timeout (s)")
        p.add_argument("--max-concurrent", type=_positive_int, default=1)
        _add_pattern(p)
        p.add_argument("--pop", type=_positive_int, default=50, help="population size (default 50)")
        p.add_argument("--iters", type=int, default=300, help="iterations (default 300)")
        p.add_argument("--topk", type=_positive_int, default=10, help="tournament top-k (default 10)")
        p.add_argument("--mut", type=_ratio, default=0.5, help="mutation probability (default 0.5)")
        p.add_argument("--sample-ratio", type=float, default=0.5,
                       help="tournament sample ratio r (default 0.5)")
        p.add_argument("--depth", type=_depth_range, default=(3, 5), help="depth range (default 3:5)")
        p.add_argument("--retry-limit", type=_positive_int, default=32)
        p.add_argument("--catalog", help="simplification catalog file")
        p.add_argument("--log", required=True, help="JSONL search log to write")
        p.add_argument("--record-timing", action="store_true",
                       help="store wall-clock timings in the log (breaks byte determinism)")

    p = sub.add_parser("simplify", parents=[common], help="apply opposing-operation simplification")
    p.add_argument("--expr", required=True)
    p.add_argument("--catalog", help="simplification catalog file")

    p = sub.add_parser("analyze", parents=[common], help="op-frequency correlation CSV from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spearman", action="store_true", help="rank correlation instead of Pearson")

    p = sub.add_parser("builtin", parents=[common], help="print a built-in metric")
    p.add_argument("--name", required=True, choices=sorted(pruner.BUILTIN_EXPRS))
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PRUNER_ZERO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"PRUNER_ZERO_THREADS must be an integer, got {env!r}") from None
    return 1


def _pattern(args):
    if getattr(args, "nm", None) is not None:
        return args.nm
    return pruner.Unstructured(args.sparsity if args.sparsity is not None else 0.5)


def _metric(args):
    if args.builtin is not None:
        return pruner.builtin_metric(args.builtin)
    return parse_expr(args.expr)


def _progress(args, msg, *fmt):
    if not args.quiet:
        print(msg % fmt if fmt else msg, file=sys.stderr)


def cmd_gen(args):
    if args.kind == "mlp":
        bundle = bundleio.gen_mlp(args.seed, args.d, args.h, args.o, args.samples,
                                  anisotropy=args.anisotropy)
    else:
        bundle = bundleio.gen_gaussian(args.seed, args.layers, args.rows, args.cols, args.samples,
                                       anisotropy=args.anisotropy)
    bundleio.write_bundle(bundle, args.out)
    _progress(args, "wrote %d layers to %s", len(bundle.layers), args.out)


def cmd_eval(args):
    tree = _metric(args)
    bundle = bundleio.read_bundle(args.bundle)
    proxy = fitness.ReconProxy(bundle, _pattern(args), scope=args.scope, threads=_threads(args))
    score = proxy(tree)
    print(f"{score.value!r}")
    if args.verbose:
        for layer, err, base in zip(proxy.layers, proxy.layer_errors(tree), proxy.baseline):
            print(f"{layer.name}\t{err!r}\t{base!r}")


def cmd_prune(args):
    tree = _metric(args)
    bundle = bundleio.read_bundle(args.bundle)
    pattern = _pattern(args)
    masks, kept, total = {}, 0, 0
    for layer in bundle.layers:
        S, finite = evaluate(tree, layer)
        if not finite:
            raise ValueError(f"metric is non-finite on layer {layer.name!r}")
        mask = pruner.make_mask(S, pattern, args.scope)
        masks[layer.name] = mask.keep
        kept += int(mask.keep.sum())
        total += mask.keep.size
    pruner.write_masks(args.out, masks)
    print(f"sparsity {1.0 - kept / total:.6f}")


def _fitness_fn(args):
    mode = args.fitness
    if mode == "external":
        if not args.cmd:
            raise UsageError("--fitness external needs --cmd")
        return fitness.ExternalEvaluator(args.cmd, args.timeout, args.max_concurrent)
    if not args.bundle:
        raise UsageError(f"--fitness {mode} needs --bundle")
    if mode == "target":
        if (args.target_builtin is None) == (args.target_expr is None):
            raise UsageError("--fitness target needs exactly one of --target-builtin, --target-expr")
        bundle = bundleio.read_bundle(args.bundle)
        target = (pruner.builtin_metric(args.target_builtin) if args.target_builtin
                  else parse_expr(args.target_expr))
        return fitness.TargetRecovery(bundle, target, threads=_threads(args))
    bundle = bundleio.read_bundle(args.bundle)
    return fitness.ReconProxy(bundle, _pattern(args), scope=args.scope, threads=_threads(args))


def _search(args, runner):
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    try:
        config = evolve.EvolveConfig(
            population_size=args.pop, iterations=args.iters, top_k=args.topk,
            sample_ratio=args.sample_ratio, mutation_prob=args.mut,
            depth_min=args.depth[0], depth_max=args.depth[1], seed=args.seed,
            resample_retry_limit=args.retry_limit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    catalog = simplify.load_catalog(args.catalog) if args.catalog else None
    fn = _fitness_fn(args)
    every = max(1, args.iters // 10)

    def progress(rec):
        if rec.iter % every == 0:
            _progress(args, "iter %d best %.6g %s", rec.iter, rec.best_fitness, rec.best_expr)

    result = runner(config, fn, catalog=catalog, log_path=args.log,
                    record_timing=args.record_timing, progress=progress)
    print(result.best_expr)
    print(f"{result.best_fitness!r}")


def cmd_evolve(args):
    _search(args, evolve.run_evolution)


def cmd_random(args):
    _search(args, evolve.random_search)


def cmd_simplify(args):
    catalog = simplify.load_catalog(args.catalog) if args.catalog else None
    tree = parse_expr(args.expr)
    out = simplify.oos_simplify(tree, catalog)
    print(format_expr(out))
    if out == tree:
        _progress(args, "no-op: nothing to simplify")


def cmd_analyze(args):
    records = analysis.collect_candidates(args.log, args.threshold)
    if len(records) < 3:
        raise ValueError(f"too few records below threshold {args.threshold} ({len(records)}, need 3)")
    matrix = analysis.correlation_matrix(records, "spearman" if args.spearman else "pearson")
    analysis.write_correlation_csv(args.out, matrix)
    _progress(args, "%d candidates; wrote %s", len(records), args.out)
    for op, r in analysis.top_correlated_ops(matrix):
        print(f"{op}\t{r:+.4f}")


def cmd_builtin(args):
    print(pruner.BUILTIN_EXPRS[args.name])


COMMANDS = {"gen": cmd_gen, "eval": cmd_eval, "prune": cmd_prune, "evolve": cmd_evolve,
            "random": cmd_random, "simplify": cmd_simplify, "analyze": cmd_analyze,
            "builtin": cmd_builtin}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"symprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

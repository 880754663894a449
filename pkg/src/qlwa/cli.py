"""Command-line surface: gen-fixture, analyze, additivity, fix, diagnose.

Every command is deterministic given its flags; all randomness is derived
from --seed. Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 internal error. Output files are written atomically (temp then rename).
QLWA_THREADS caps per-layer analysis parallelism (0 = one worker per CPU;
unset = serial).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import analysis as A
from . import data as D
from . import graph as G
from . import quant as Q
from .errors import ConfigError, QlwaError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_bits_list(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            bits = list(range(int(lo), int(hi) + 1))
        else:
            bits = [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse bit list '{text}'") from None
    if not bits or any(not Q.MIN_BITS <= b <= Q.MAX_BITS for b in bits):
        raise argparse.ArgumentTypeError(
            f"bit widths must lie in [{Q.MIN_BITS}, {Q.MAX_BITS}], got '{text}'"
        )
    return bits


def _parse_bits(text: str) -> int:
    bits = _parse_bits_list(text)
    if len(bits) != 1:
        raise argparse.ArgumentTypeError(f"expected a single bit width, got '{text}'")
    return bits[0]


def _arch_name(text: str) -> str:
    return text.replace("-", "_")


def _threads() -> int:
    raw = os.environ.get("QLWA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QLWA_THREADS must be an integer, got '{raw}'") from None
    if n < 0:
        raise ConfigError(f"QLWA_THREADS must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _add_model_dataset_flags(p, calib_default=64):
    p.add_argument("--model", required=True, help="model.json or its directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="dataset directory")
    src.add_argument(
        "--gen-samples",
        type=int,
        metavar="N",
        help="generate a self-labeled dataset of N samples from the model (uses --seed)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib-samples", type=int, default=calib_default)
    p.add_argument("--out-dir", default=".", help="where report files are written")
    p.add_argument("--force", action="store_true", help="accepted for flag symmetry; reports always overwrite")
    p.add_argument(
        "--no-fold",
        action="store_true",
        help="skip batch-norm folding (debugging only; analysis semantics assume folded graphs)",
    )


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qlwa", description="Layer-wise quantization analysis toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-fixture", parents=[], help="write a fixture model + dataset")
    g.add_argument("--arch", type=_arch_name, choices=D.ARCHES, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=512, help="dataset size")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    a = sub.add_parser("analyze", help="per-layer sensitivity sweep -> report.json + heatmap.csv")
    _add_model_dataset_flags(a)
    a.add_argument("--weight-bits", type=_parse_bits_list, default=list(range(3, 9)),
                   help="comma list or lo..hi (default 3..8)")
    a.add_argument("--act-bits", type=_parse_bits, default=8)
    a.add_argument("--clip", choices=("minmax", "mse-grid"), default="minmax")
    a.add_argument("--granularity", choices=("per-tensor", "per-channel"), default="per-tensor")

    d = sub.add_parser("additivity", help="expected-vs-measured mixes -> additivity.json + scatter.csv")
    _add_model_dataset_flags(d)
    d.add_argument("--trials", type=int, default=20)
    d.add_argument("--low-bits", type=_parse_bits, default=4)
    d.add_argument("--high-bits", type=_parse_bits, default=8)
    d.add_argument("--act-bits", type=_parse_bits, default=8)
    d.add_argument("--clip", choices=("minmax", "mse-grid"), default="minmax")
    d.add_argument("--report", help="reuse an existing report.json instead of sweeping inline")

    f = sub.add_parser("fix", help="naive vs global vs local clipping -> fix.json")
    _add_model_dataset_flags(f)
    f.add_argument("--target-layer", required=True)
    f.add_argument("--method", choices=("minmax", "mse-grid"), default="mse-grid")
    f.add_argument("--weight-bits", type=_parse_bits, default=8)
    f.add_argument("--act-bits", type=_parse_bits, default=8)

    dg = sub.add_parser("diagnose", help="weight outlier census -> outliers.json + histogram.csv")
    dg.add_argument("--model", required=True)
    dg.add_argument("--layer", required=True)
    dg.add_argument("--k-sigma", type=float, default=6.0)
    dg.add_argument("--out-dir", default=".")
    return p


def _load_graph(args) -> G.NetworkGraph:
    graph = G.load_model(args.model)
    if getattr(args, "no_fold", False):
        if G.has_batch_norm(graph):
            print(
                "WARNING: --no-fold set; analyzing an unfolded graph. Results are not "
                "comparable with the folded defaults.",
                file=sys.stderr,
            )
        return graph
    if G.has_batch_norm(graph):
        graph = G.fold_batch_norms(graph)
    return graph


def _load_dataset(args, graph) -> D.Dataset:
    if args.dataset:
        return D.load_dataset(args.dataset)
    if args.gen_samples < 1:
        raise ConfigError(f"--gen-samples must be >= 1, got {args.gen_samples}")
    return D.gen_dataset(graph, args.gen_samples, args.seed)


def _cmd_gen_fixture(args) -> int:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to write anyway)")
    graph = D.gen_fixture(args.arch, args.seed)
    G.save_model(graph, out)
    dataset = D.gen_dataset(graph, args.samples, args.seed)
    D.save_dataset(dataset, out / "dataset")
    print(f"model: {out / 'model.json'} ({G.network_id(graph)})")
    print(f"dataset: {out / 'dataset'} ({dataset.id}, n={args.samples})")
    return 0


def _cmd_analyze(args) -> int:
    graph = _load_graph(args)
    eval_set = _load_dataset(args, graph)
    calib = Q.calibrate(graph, eval_set, min(args.calib_samples, len(eval_set.samples)))
    report = A.sweep(
        graph,
        args.weight_bits,
        args.act_bits,
        calib,
        eval_set,
        D.TOP1,
        weight_clip=args.clip.replace("-", "_"),
        granularity=args.granularity.replace("-", "_"),
        threads=_threads(),
        allow_unfolded=args.no_fold,
    )
    out = Path(args.out_dir)
    _write_atomic(out / "report.json", A.report_to_json(report))
    _write_atomic(out / "heatmap.csv", A.heatmap_csv(report))
    worst = A.rank_layers(report, min(args.weight_bits))[0]
    print(f"report: {out / 'report.json'}")
    print(f"heatmap: {out / 'heatmap.csv'} ({len(report.weight_bits)} bit rows x {len(report.layers)} layers)")
    print(f"fp score: {report.fp_score:.4f}")
    print(f"worst layer at {min(args.weight_bits)} bits: {worst[0]} (degradation {worst[1]:.4f})")
    return 0


def _cmd_additivity(args) -> int:
    graph = _load_graph(args)
    eval_set = _load_dataset(args, graph)
    calib = Q.calibrate(graph, eval_set, min(args.calib_samples, len(eval_set.samples)))
    if args.trials < 0:
        raise ConfigError(f"--trials must be >= 0, got {args.trials}")
    if args.report:
        report = A.report_from_json(Path(args.report).read_text())
    else:
        report = A.sweep(
            graph,
            sorted({args.low_bits, args.high_bits}),
            args.act_bits,
            calib,
            eval_set,
            D.TOP1,
            weight_clip=args.clip.replace("-", "_"),
            threads=_threads(),
            allow_unfolded=args.no_fold,
        )
    result = A.check_additivity(
        graph,
        report,
        args.trials,
        args.seed,
        low_bits=args.low_bits,
        high_bits=args.high_bits,
        calib=calib,
        eval_set=eval_set,
        metric=D.TOP1,
        allow_unfolded=args.no_fold,
    )
    out = Path(args.out_dir)
    _write_atomic(out / "additivity.json", A.additivity_to_json(result))
    _write_atomic(out / "scatter.csv", A.scatter_csv(result))
    print(f"additivity: {out / 'additivity.json'} ({len(result.trials)} trials)")
    print(f"scatter: {out / 'scatter.csv'}")
    corr = result.summary.get("pearson_degradation")
    print(f"pearson(expected, measured degradation): {corr if corr is None else f'{corr:.4f}'}")
    return 0


def _cmd_fix(args) -> int:
    graph = _load_graph(args)
    eval_set = _load_dataset(args, graph)
    calib = Q.calibrate(graph, eval_set, min(args.calib_samples, len(eval_set.samples)))
    fix = A.compare_fixes(
        graph,
        args.target_layer,
        calib,
        eval_set,
        D.TOP1,
        method=args.method.replace("-", "_"),
        weight_bits=args.weight_bits,
        act_bits=args.act_bits,
        allow_unfolded=args.no_fold,
    )
    out = Path(args.out_dir)
    _write_atomic(out / "fix.json", A.fix_comparison_to_json(fix))
    print(f"fix report: {out / 'fix.json'}")
    for name, value in (
        ("full precision", fix.fp_score),
        ("naive", fix.naive),
        (f"{args.method} globally", fix.global_clip),
        (f"{args.method} on {args.target_layer}", fix.local_clip),
    ):
        print(f"  {name:<24s} {value:.4f}")
    return 0


def _cmd_diagnose(args) -> int:
    graph = G.load_model(args.model)
    if G.has_batch_norm(graph):
        graph = G.fold_batch_norms(graph)
    summary = A.diagnose_outliers(graph, args.layer, k_sigma=args.k_sigma)
    out = Path(args.out_dir)
    _write_atomic(out / "outliers.json", A.outliers_to_json(summary))
    _write_atomic(out / "histogram.csv", A.histogram_csv(summary))
    ratio = summary.max_abs_ratio
    print(f"outliers: {out / 'outliers.json'}")
    print(f"histogram: {out / 'histogram.csv'}")
    print(
        f"layer {summary.layer_id}: {summary.outlier_count} weights beyond "
        f"{summary.k_sigma:g} sigma, max|w|/({summary.k_sigma:g}*std) = "
        + (f"{ratio:.2f}" if ratio != float("inf") else "inf")
    )
    return 0


_COMMANDS = {
    "gen-fixture": _cmd_gen_fixture,
    "analyze": _cmd_analyze,
    "additivity": _cmd_additivity,
    "fix": _cmd_fix,
    "diagnose": _cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.cmd](args)
    except QlwaError as exc:
        print(f"qlwa: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"qlwa: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 3
        print(f"qlwa: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

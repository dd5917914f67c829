"""Command-line front door.

Subcommands: gen-features, forward, report, gradcheck, toy-train, bench.
Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import flops, fmap, gradcheck, pipeline, plots
from .errors import EXIT_IO, TokenFusionError
from .fusion import PROJECTOR_NAMES


def _common_flags(parser: argparse.ArgumentParser, include_projector: bool = True) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for synthetic features and parameter init")
    parser.add_argument("--k", type=int, default=None, help="fusion kernel/stride")
    parser.add_argument("--e", type=int, default=None, help="fused tokens per window")
    if include_projector:
        parser.add_argument("--projector", choices=PROJECTOR_NAMES, default="stf")


def _fusion_config(args):
    return pipeline.load_fusion_config(
        args.config,
        seed=getattr(args, "seed", None),
        kernel=getattr(args, "k", None),
        fused_tokens=getattr(args, "e", None),
    )


def _run_config(args, need_out: bool = False) -> pipeline.RunConfig:
    cfg = _fusion_config(args)
    input_path = getattr(args, "input", None)
    out = getattr(args, "out", None)
    if need_out and out is None:
        raise TokenFusionError("--out is required for this subcommand")
    synthetic_seed = None
    if input_path is None:
        synthetic_seed = args.seed if args.seed is not None else cfg.seed
    return pipeline.RunConfig(
        fusion=cfg,
        projector=getattr(args, "projector", "stf"),
        input_path=input_path,
        synthetic_seed=synthetic_seed,
        out_path=out,
        fmt=getattr(args, "format", "text"),
        bench_reps=getattr(args, "reps", 20),
        llm_params=getattr(args, "llm_params", flops.DEFAULT_LLM_PARAMS),
    )


def cmd_gen_features(args) -> int:
    run = _run_config(args, need_out=True)
    stack = pipeline.gen_features(run.synthetic_seed, run.fusion)
    fmap.write_feature_file(run.out_path, stack)
    m, h, w, c = stack.maps.shape
    print(f"wrote {run.out_path}: {m} maps of {h}x{w}x{c}, blocks {stack.block_indices}")
    return 0


def cmd_forward(args) -> int:
    run = _run_config(args)
    _, summary = pipeline.run_forward(run)
    print(summary.render_text())
    if run.out_path is not None:
        print(f"wrote {run.out_path}")
    return 0


def cmd_report(args) -> int:
    cfg = _fusion_config(args)
    reports = flops.table_grid(llm_params=args.llm_params, base=cfg)
    rendered = flops.render_csv(reports) if args.format == "csv" else flops.render_text(reports)
    print(rendered, end="" if rendered.endswith("\n") else "\n")
    if args.out is not None:
        Path(args.out).write_text(
            flops.render_csv(reports) if args.format == "csv" else rendered + "\n",
            encoding="utf-8",
        )
        fig = plots.render_flops_figure(reports, plots.figure_path_for(args.out))
        print(f"wrote {args.out} and {fig}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _fusion_config(args) if args.config is not None else gradcheck.TINY_CONFIG
    modules = gradcheck.MODULE_IDS if args.module == "all" else (args.module,)
    seed = args.seed if args.seed is not None else 0
    reports = []
    for module in modules:
        report = gradcheck.check_module(
            module, cfg, seed=seed, epsilon=args.epsilon, threshold=args.threshold
        )
        reports.append(report)
        print(report.render_text())
    if args.out is not None:
        Path(args.out).write_text(gradcheck.render_reports_csv(reports), encoding="utf-8")
        print(f"wrote {args.out}")
    if not all(r.passed for r in reports):
        print("gradient check FAILED", file=sys.stderr)
        return 4
    return 0


def cmd_toy_train(args) -> int:
    run = _run_config(args, need_out=True)
    start = time.perf_counter()
    curve = pipeline.toy_train(run, steps=args.steps, lr=args.lr, batch=args.batch)
    elapsed = time.perf_counter() - start
    Path(run.out_path).write_text(pipeline.render_curve_csv(curve), encoding="utf-8")
    fig = plots.render_loss_figure(curve, plots.figure_path_for(run.out_path))
    first, last = curve[0][1], curve[-1][1]
    print(
        f"steps={len(curve) - 1} initial_loss={first:.6e} final_loss={last:.6e} "
        f"ratio={last / first:.4f} elapsed={elapsed:.1f}s"
    )
    print(f"wrote {run.out_path} and {fig}")
    return 0


def cmd_bench(args) -> int:
    run = _run_config(args)
    result = pipeline.bench(run)
    print(result.render_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenfusion",
        description="Vision-token compression projectors with FLOPs accounting "
        "and gradient verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-features", help="write a synthetic feature stack")
    _common_flags(p, include_projector=False)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_gen_features)

    p = sub.add_parser("forward", help="run a projector over features")
    _common_flags(p)
    p.add_argument("--input", type=Path, default=None, help="FMAP1 feature file")
    p.add_argument("--out", type=Path, default=None, help="token output file")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("report", help="prefill-cost grid over fusion settings")
    _common_flags(p, include_projector=False)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--llm-params", dest="llm_params", type=float,
                   default=flops.DEFAULT_LLM_PARAMS)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common_flags(p, include_projector=False)
    p.add_argument("--module", choices=("all",) + gradcheck.MODULE_IDS, default="all")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--out", type=Path, default=None, help="CSV report path")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("toy-train", help="regression sanity run with gradient descent")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True, help="loss-curve CSV path")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.set_defaults(fn=cmd_toy_train)

    p = sub.add_parser("bench", help="projector forward timing")
    _common_flags(p)
    p.add_argument("--input", type=Path, default=None, help="FMAP1 feature file")
    p.add_argument("--reps", type=int, default=20)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TokenFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: run experiments from a config file, verify
gradients, evaluate checkpoints, and plot result files.

Exit codes: 0 success, 1 invariant failure, 2 config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from types import SimpleNamespace

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck
from .config import (
    ConfigError,
    ExperimentConfig,
    echo_config,
    eval_protocol_for,
    method_spec_for,
    parse_config,
    train_config_for,
)
from .evaluation import (
    EvalProtocol,
    ResultRow,
    emit_loss_trajectory,
    evaluate,
    run_shot_generalization,
    run_vary_context_params,
    run_vary_sample_points,
    RunHooks,
)
from .reporting import emit_csv, emit_svg, read_csv
from .rng import rng_stream
from .training import train

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class InvariantFailure(RuntimeError):
    pass


def _ensure_dirs(out_dir):
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "plots"), exist_ok=True)


def _checkpoint_hooks(cfg: ExperimentConfig) -> RunHooks:
    def on_trained(key, spec, state):
        parts = [str(p) for p in key]
        path = os.path.join(cfg.out_dir, "checkpoints", "_".join(parts) + ".viab")
        seed = int(parts[-1])
        ckpt.save_checkpoint(path, state, spec, seed)

    return RunHooks(on_trained=on_trained, log=lambda m: print(f"  {m}", flush=True))


def _eval_seed(cfg: ExperimentConfig) -> int:
    # One evaluation stream shared across methods keeps comparisons paired.
    return min(cfg.seeds)


def _cell_worker(args):
    kind, cfg, method, dim, seed = args
    hooks = _checkpoint_hooks(cfg)
    protocol = eval_protocol_for(cfg)
    train_cfg = train_config_for(cfg, seed)
    if kind == "context":
        spec = method_spec_for(cfg, method, phi_dim=dim)
        return run_vary_context_params(
            [spec], [dim], train_cfg, protocol, [seed], _eval_seed(cfg), hooks
        )
    if kind == "sample":
        spec = method_spec_for(cfg, method)
        return run_vary_sample_points(
            [spec], cfg.eval_k, train_cfg, protocol, [seed], _eval_seed(cfg), hooks
        )
    spec = method_spec_for(cfg, method)
    return run_shot_generalization(
        [spec], cfg.eval_shots, train_cfg, protocol, [seed], _eval_seed(cfg), hooks
    )


def _run_cells(cfg, cells):
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_cell = list(pool.map(_cell_worker, cells))
    else:
        per_cell = [_cell_worker(cell) for cell in cells]
    return [row for rows in per_cell for row in rows]


def _mean_by(rows, x_field):
    """Collapse seeds: one synthetic row per (method, x) with the mean."""
    grouped = {}
    for row in rows:
        grouped.setdefault((row.method, getattr(row, x_field)), []).append(row)
    out = []
    for (method, x), group in sorted(grouped.items()):
        out.append(SimpleNamespace(
            method=method, value=float(np.mean([r.value for r in group])),
            **{x_field: x},
        ))
    return out


def _run_experiment(cfg: ExperimentConfig) -> int:
    _ensure_dirs(cfg.out_dir)
    with open(os.path.join(cfg.out_dir, "config_echo.cfg"), "w") as fh:
        fh.write(echo_config(cfg))

    if cfg.experiment == "gradcheck":
        results = gradcheck.run_all(seed=min(cfg.seeds))
        report = "\n".join(r.line() for r in results) + "\n"
        with open(os.path.join(cfg.out_dir, "gradcheck_report.txt"), "w") as fh:
            fh.write(report)
        print(report, end="")
        if not all(r.passed for r in results):
            raise InvariantFailure("finite-difference checks failed")
        return EXIT_OK

    rows: list[ResultRow] = []
    plot_x = "k_train"
    if cfg.experiment == "sine_single":
        protocol = eval_protocol_for(cfg)
        hooks = _checkpoint_hooks(cfg)
        trajectory_points = []
        for method in cfg.methods:
            spec = method_spec_for(cfg, method)
            for seed in cfg.seeds:
                hooks.info(f"train {method} seed={seed}")
                state = train(spec, train_config_for(cfg, seed))
                hooks.trained((method, f"c{spec.context_dim}", seed), spec, state)
                eval_rng = rng_stream(_eval_seed(cfg), "evaluation", 0)
                rows.append(evaluate(
                    spec, state.best_theta, state.best_psi, protocol, eval_rng,
                    seed=seed, iteration=state.iteration,
                    amplitude_range=cfg.amplitude_range,
                ))
                pre, post = emit_loss_trajectory(
                    spec, state.best_theta, state.best_psi,
                    EvalProtocol(
                        n_tasks=min(protocol.n_tasks, 200),
                        adapt_points=protocol.adapt_points,
                        grid_points=protocol.grid_points,
                        metric=protocol.metric,
                    ),
                    rng_stream(_eval_seed(cfg), "evaluation", 1),
                    amplitude_range=cfg.amplitude_range,
                )
                for split, values in (("pre_update", pre), ("post_update", post)):
                    mean, ci = float(values.mean()), float(
                        1.96 * values.std(ddof=1) / np.sqrt(len(values))
                    )
                    rows.append(ResultRow(
                        method=method, phi_dim=spec.context_dim,
                        k_train=protocol.adapt_points, seed=seed, split=split,
                        iteration=state.iteration, metric=protocol.metric,
                        value=mean, ci95=ci,
                    ))
                    for task_index, value in enumerate(values):
                        trajectory_points.append(SimpleNamespace(
                            series=f"{method}/{split}", task=task_index,
                            value=float(value),
                        ))
        if trajectory_points:
            emit_svg(
                trajectory_points,
                os.path.join(cfg.out_dir, "plots", "loss_trajectory.svg"),
                x_field="task", series_field="series",
                title="Task loss before and after adaptation",
                x_label="evaluation task", y_label="task loss",
            )
    elif cfg.experiment == "sine_context_sweep":
        cells = [
            ("context", cfg, method, dim, seed)
            for method in cfg.methods
            for dim in cfg.phi_dims
            for seed in cfg.seeds
        ]
        rows = _run_cells(cfg, cells)
        plot_x = "phi_dim"
    elif cfg.experiment == "sine_sample_sweep":
        cells = [
            ("sample", cfg, method, None, seed)
            for method in cfg.methods
            for seed in cfg.seeds
        ]
        rows = _run_cells(cfg, cells)
    elif cfg.experiment == "class_shot_gen":
        cells = [
            ("shots", cfg, method, None, seed)
            for method in cfg.methods
            for seed in cfg.seeds
        ]
        rows = _run_cells(cfg, cells)

    if rows:
        emit_csv(rows, os.path.join(cfg.out_dir, "results.csv"))
        plottable = [r for r in rows if r.split == "test"]
        if plottable:
            emit_svg(
                _mean_by(plottable, plot_x),
                os.path.join(cfg.out_dir, "plots", f"{cfg.experiment}.svg"),
                x_field=plot_x,
                title=cfg.experiment.replace("_", " "),
                y_label=plottable[0].metric,
            )
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.profile is not None:
        overrides["profile"] = args.profile
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = parse_config(text, overrides)
    return _run_experiment(cfg)


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def _cmd_eval(args) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    spec = ckpt.spec_from_entries(loaded.entries)
    state = ckpt.restore_train_state(loaded, spec)
    seed = ckpt.checkpoint_seed(loaded)
    with open(args.config) as fh:
        cfg = parse_config(fh.read())
    protocol = eval_protocol_for(cfg)
    row = evaluate(
        spec, state.best_theta, state.best_psi, protocol,
        rng_stream(_eval_seed(cfg), "evaluation", 0),
        seed=seed, iteration=state.iteration,
        amplitude_range=cfg.amplitude_range,
    )
    out = args.out or "eval_results.csv"
    emit_csv([row], out)
    print(f"{row.method}: {row.metric}={row.value:.4f} (+-{row.ci95:.4f}) -> {out}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    rows = read_csv(args.results)
    plottable = [r for r in rows if r.split == "test"] or rows
    x_field = "k_train"
    if len({r.phi_dim for r in plottable}) > 1:
        x_field = "phi_dim"
    elif len({r.k_train for r in plottable}) <= 1:
        x_field = "iteration"
    emit_svg(
        plottable, args.output, x_field=x_field,
        title=os.path.basename(args.results),
        y_label=plottable[0].metric,
    )
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaloss",
        description="Few-shot meta-learning lab with learned inner-loop losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--profile", choices=("desk", "paper"), default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(handler=_cmd_run)

    p_gc = sub.add_parser("gradcheck", help="finite-difference verification")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(handler=_cmd_gradcheck)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("config")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(handler=_cmd_eval)

    p_plot = sub.add_parser("plot", help="plot a results.csv as SVG")
    p_plot.add_argument("results")
    p_plot.add_argument("output")
    p_plot.set_defaults(handler=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except InvariantFailure as err:
        print(f"invariant failure: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as err:
        print(f"invariant failure: {err}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

"""`atrl` command line: data generation, POD, training, experiments, checks, reports."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import verify
from .config import ConfigError, TrainJob, load_config
from .datasets import (
    apply_permutation,
    export_csv,
    gen_gravity,
    gen_linear_functional,
    gen_target_form_dataset,
    load_dataset,
    rotate_left,
    save_dataset,
)
from .experiments import (
    GravityConfig,
    SweepConfig,
    TemporalConfig,
    analyze_sweep,
    check_table1,
    run_gravity,
    run_temporal_order,
    sweep_mh,
    table1_cells,
)
from .pod import QuadratureGrid, fit_decay_exponent, pod
from .report import REPORT_KINDS, emit_report
from .targets import kernel_function, load_spec
from .training import ExperimentRecord, ResultStore, Timer, config_hash, train
from .transformer import init_transformer, save_checkpoint

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(kind: str, exc: BaseException) -> str:
    return json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)})


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a) -> None:
    if a.kind == "gravity":
        ds = gen_gravity(a.tau, a.count, a.seed, eps=a.eps, causal=a.causal)
    elif a.kind in ("exponential", "random"):
        ds = gen_linear_functional(a.kind, a.tau, a.count, a.seed)
    else:
        if a.target is None:
            raise UsageError("--kind target needs --target SPEC.json")
        spec = load_spec(a.target)
        if a.tau != spec.tau:
            raise UsageError(f"--tau {a.tau} does not match the target's tau={spec.tau}")
        ds = gen_target_form_dataset(spec, a.count, a.seed)
    if a.rotate:
        ds = apply_permutation(ds, rotate_left(ds.tau, a.rotate))
    save_dataset(ds, a.out)
    if a.csv:
        export_csv(ds, a.csv)
    print(json.dumps({"out": str(a.out), "count": len(ds), "tau": ds.tau, "d": ds.d, "d_out": ds.d_out}))


def cmd_pod(a) -> None:
    spec = load_spec(a.target)
    grid = QuadratureGrid.midpoint(a.grid)
    fact = pod(kernel_function(spec), grid)
    if a.out:
        fact.save(a.out)
    k = a.show or len(fact.sigma)
    sigma = [float(s) for s in fact.sigma[:k]]
    doc = {"grid": a.grid, "sigma": sigma}
    try:
        c, alpha = fit_decay_exponent(fact.sigma)
        doc.update(c=c, alpha=alpha)
    except ValueError:
        pass
    print(json.dumps(doc))


def cmd_train(a) -> None:
    job, store = load_config(a.config, "train")
    store = a.store or store
    tr = load_dataset(job.train_data)
    te = load_dataset(job.test_data) if job.test_data else None
    b = job.budget
    if (tr.d, tr.d_out, tr.tau) != (b.d, b.d_out, b.tau):
        raise ConfigError(f"dataset (d, d_out, tau) = {(tr.d, tr.d_out, tr.tau)} does not match the budget")
    model = init_transformer(
        b, job.model_seed, job.activation, job.positional, job.ff_residual, job.scaled_scores
    )
    with Timer() as clock:
        res = train(model, tr, te, job.train, log=_progress if a.verbose else None)
    if job.checkpoint:
        save_checkpoint(model, job.checkpoint)
    h = config_hash({"experiment": "train", "config": _job_dict(job)})
    recs = [
        ExperimentRecord("train", h, job.train.seed, "train_mse", res.best_train, {}, clock.elapsed),
        ExperimentRecord("train", h, job.train.seed, "final_train_mse", res.final_train, {}, clock.elapsed),
        ExperimentRecord("train", h, job.train.seed, "epochs", res.epochs_run, {}, clock.elapsed),
    ]
    if te is not None:
        recs.append(ExperimentRecord("train", h, job.train.seed, "test_mse", res.final_test, {}, clock.elapsed))
    _store(store, recs)


def _progress(epoch, train_mse, test_mse) -> None:
    print(json.dumps({"epoch": epoch, "train_mse": train_mse, "test_mse": test_mse}), file=sys.stderr)


def _job_dict(job: TrainJob) -> dict:
    return asdict(job)


def _store(path, recs: list[ExperimentRecord]) -> None:
    if path is None:
        raise UsageError("no results store: pass --store or set 'store' in the config")
    ResultStore(path).append(recs)
    for r in recs:
        if not isinstance(r.value, list):
            print(r.to_json())


def _experiment_config(a, kind: str, default):
    if a.config:
        cfg, store = load_config(a.config, kind)
    else:
        cfg, store = default, None
    return cfg, a.store or store


def cmd_sweep(a) -> None:
    cfg, store = _experiment_config(a, "sweep", SweepConfig())
    recs = sweep_mh(cfg, a.threads)
    _store(store, recs)
    for c in analyze_sweep(recs, cfg.slope_window):
        print(json.dumps({"alpha": c.alpha, "r": c.r, "median": c.median, "monotone": c.monotone, "knee": c.knee, "slope": c.slope, "slope_ok": c.slope_ok}))


def cmd_table1(a) -> None:
    cfg, store = _experiment_config(a, "table1", TemporalConfig())
    recs = run_temporal_order(cfg, a.threads)
    _store(store, recs)
    for name, ok in check_table1(table1_cells(recs)).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")


def cmd_gravity(a) -> None:
    cfg, store = _experiment_config(a, "gravity", GravityConfig())
    _store(store, run_gravity(cfg))


def cmd_verify(a) -> int:
    names = a.suite or list(verify.SUITES)
    ok = True
    for name in names:
        res = verify.SUITES[name]()
        print(res.line(), flush=True)
        ok &= res.passed
    return 0 if ok else EXIT_RUNTIME


def cmd_report(a) -> None:
    if not Path(a.store).exists():
        raise FileNotFoundError(f"results store {a.store} does not exist")
    for p in emit_report(ResultStore(a.store).read(), a.kind, a.out_dir):
        print(p)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a dataset file")
    g.add_argument("--kind", required=True, choices=("gravity", "exponential", "random", "target"))
    g.add_argument("--tau", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--target", type=Path, help="target spec JSON (kind target)")
    g.add_argument("--eps", type=float, default=0.05, help="gravity distance clamp")
    g.add_argument("--causal", action="store_true", help="gravity: sources s < t only")
    g.add_argument("--rotate", type=int, default=0, help="apply the rotate-left-by-K time permutation")
    g.add_argument("--csv", type=Path, help="also export a CSV copy")
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pod", help="POD of a target's attention kernel")
    g.add_argument("--target", type=Path, required=True)
    g.add_argument("--grid", type=int, default=256)
    g.add_argument("--out", type=Path)
    g.add_argument("--show", type=int, default=16, help="number of singular values to print (0 = all)")
    g.set_defaults(fn=cmd_pod)

    g = sub.add_parser("train", help="train one transformer from a config")
    g.add_argument("--config", type=Path, required=True)
    g.add_argument("--store", type=Path)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(fn=cmd_train)

    for name, fn, text in (
        ("sweep", cmd_sweep, "error-vs-head-width sweep"),
        ("table1", cmd_table1, "RNN vs transformer on ordered / unordered data"),
        ("gravity", cmd_gravity, "attention-graph recovery on gravity data"),
    ):
        g = sub.add_parser(name, help=text)
        g.add_argument("--config", type=Path)
        g.add_argument("--store", type=Path)
        g.add_argument("--threads", type=int, help="overrides ATRL_THREADS")
        g.set_defaults(fn=fn)

    g = sub.add_parser("verify", help="run the invariant suites")
    g.add_argument("--suite", action="append", choices=list(verify.SUITES))
    g.set_defaults(fn=cmd_verify)

    g = sub.add_parser("report", help="figures, tables and summary CSV from a results store")
    g.add_argument("--store", type=Path, required=True)
    g.add_argument("--kind", required=True, choices=REPORT_KINDS)
    g.add_argument("--out-dir", type=Path, required=True)
    g.set_defaults(fn=cmd_report)
    return p


def cli_dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        code = args.fn(args)
    except (UsageError, ConfigError) as e:
        print(_error_line("usage", e), file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001  every runtime failure becomes one error line
        print(_error_line("runtime", e), file=sys.stderr)
        return EXIT_RUNTIME
    return int(code or 0)


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()

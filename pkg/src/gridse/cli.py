"""Command-line pipeline: gen-data | train | eval | attack-eval.

Heavy imports happen inside the command handlers so that --threads can pin
the numeric libraries' thread pools before they are loaded; single-threaded
runs are bit-reproducible under a fixed seed.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

import argparse
import csv
import json
import os
import sys
import time

from .errors import (ConfigError, ConvergenceError, DimensionError, FormatError,
                     GenerationError, GridseError, IllPosedError, InitError,
                     NumericsError, ParseError, SelectionError, ValidationError)

_USAGE_ERRORS = (ParseError, ValidationError, FormatError, SelectionError,
                 ConfigError, DimensionError)
_NUMERICAL_ERRORS = (ConvergenceError, GenerationError, IllPosedError,
                     InitError, NumericsError)
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def _add_common(p):
    p.add_argument("--config", metavar="JSON",
                   help="JSON file of option defaults; explicit flags override")
    p.add_argument("--threads", type=int, metavar="N",
                   help="cap numeric thread pools (1 for bit reproducibility)")


def _add_robust_flags(p):
    p.add_argument("--gamma", type=float, default=0.13,
                   help="dual multiplier of the transport cost")
    p.add_argument("--rho", type=float, default=0.0,
                   help="ambiguity radius (additive constant in the objective)")
    p.add_argument("--eta", type=float, default=0.02,
                   help="input ascent stepsize")
    p.add_argument("--steps", type=int, default=1, help="input ascent steps")
    p.add_argument("--normalize", action="store_true",
                   help="normalize per-sample attack gradients")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gridse",
        description="State estimation on power grids: simulated measurement "
                    "generation, learned and classical solvers, robustness "
                    "evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("gen-data", help="solve load scenarios and save a dataset")
    p.add_argument("case", help="grid case file")
    p.add_argument("--out", required=True, help="dataset output path")
    p.add_argument("--count", type=int, default=1000, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--selection", default="default", choices=("default", "full"),
                   help="meter placement")
    p.add_argument("--mult-lo", type=float, default=0.8,
                   help="lower bound of the load multiplier")
    p.add_argument("--mult-hi", type=float, default=1.2,
                   help="upper bound of the load multiplier")
    p.add_argument("--train-frac", type=float, default=0.8,
                   help="fraction of samples in the train split")
    p.add_argument("--noiseless", action="store_true",
                   help="store exact measurements (sigma = 0 mode)")
    p.add_argument("--sigma-magnitude", type=float, default=None,
                   help="noise level for squared-magnitude meters")
    p.add_argument("--sigma-power", type=float, default=None,
                   help="noise level for power meters")
    p.add_argument("--noise-on-magnitude", action="store_true",
                   help="perturb |V| before squaring instead of adding to |V|^2")
    p.add_argument("--shared-shape", action="store_true",
                   help="scale all loads by one multiplier per sample")
    p.add_argument("--retries", type=int, default=5,
                   help="re-draws allowed per sample when power flow diverges")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)
    subparsers["gen-data"] = p

    p = sub.add_parser("train", help="fit the learned estimator on a dataset")
    p.add_argument("dataset", help="dataset file from gen-data")
    p.add_argument("--case", required=True, help="grid case file")
    p.add_argument("--checkpoint", required=True, help="model output path")
    p.add_argument("--history", default=None,
                   help="per-epoch loss CSV (default: <checkpoint>.history.csv)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=1.0, help="Huber threshold")
    p.add_argument("--unroll", type=int, default=6,
                   help="refinement iterations (model has unroll+1 blocks)")
    p.add_argument("--layers", type=int, default=2, help="graph conv layers")
    p.add_argument("--hidden", type=int, default=8, help="hidden feature width")
    p.add_argument("--hops", type=int, default=2, help="filter taps per layer")
    p.add_argument("--lam", type=float, default=1.0,
                   help="regularization weight of the warm-start operator")
    p.add_argument("--init", default="warm", choices=("warm", "random"))
    p.add_argument("--tied", action="store_true",
                   help="share graph filters across blocks")
    p.add_argument("--shift-kind", default="normalized-adjacency",
                   help="graph shift operator kind")
    p.add_argument("--shift-weighting", default="admittance-magnitude",
                   help="edge weighting of the shift operator")
    p.add_argument("--robust", action="store_true",
                   help="train on adversarially perturbed inputs")
    _add_robust_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("eval", help="score estimators on the test split")
    p.add_argument("dataset", help="dataset file from gen-data")
    p.add_argument("--case", required=True, help="grid case file")
    p.add_argument("--checkpoint", default=None, help="trained model to score")
    p.add_argument("--solver", default=None, choices=("gn", "altmin"),
                   help="also score a classical iterative solver")
    p.add_argument("--lam", type=float, default=1.0,
                   help="regularization weight for --solver altmin")
    p.add_argument("--max-iter", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--metrics", default=None, help="metrics JSON output path")
    p.add_argument("--profiles", default=None,
                   help="tidy per-bus voltage profile CSV output path")
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    subparsers["eval"] = p

    p = sub.add_parser("attack-eval",
                       help="score a model on adversarially perturbed inputs")
    p.add_argument("dataset", help="dataset file from gen-data")
    p.add_argument("--case", required=True, help="grid case file")
    p.add_argument("--checkpoint", required=True, help="trained model to attack")
    p.add_argument("--baseline", default=None,
                   help="second model scored on the same perturbed inputs")
    p.add_argument("--delta", type=float, default=1.0, help="Huber threshold")
    p.add_argument("--metrics", default=None, help="metrics JSON output path")
    p.add_argument("--paired", default=None,
                   help="CSV of clean vs attacked estimates per (slot, bus)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_robust_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_attack_eval)
    subparsers["attack-eval"] = p

    return parser, subparsers


def _apply_config(parser, subparsers, argv, args):
    """Second parse with config-file values as defaults; flags still win."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        try:
            values = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: not valid JSON ({e})") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    sub = subparsers[args.command]
    known = {a.dest for a in sub._actions} - {"help", "func", "config"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(
            f"{args.config}: unknown option(s) {', '.join(unknown)}"
        )
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _load_problem(case_path, selection_dict):
    """Rebuild (case, adm, mm) so the meter layout matches the dataset."""
    from . import case_io, grid_model, measurement

    case = case_io.load_case(case_path)
    adm = grid_model.build_admittance(case)
    sel = measurement.MeasurementSelection.from_dict(selection_dict)
    mm = measurement.build_measurement_model(adm, sel)
    return case, adm, mm


def _check_dims(ds, mm, case_path):
    if ds.Z.shape[1] != mm.pack.n_meters:
        raise DimensionError(
            f"dataset has {ds.Z.shape[1]} meters but {case_path} with the "
            f"stored selection gives {mm.pack.n_meters}"
        )


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train_loss", "test_loss"))
        for epoch, tr, te in history:
            w.writerow((epoch, repr(float(tr)), repr(float(te))))


def _write_reports(path, reports):
    with open(path, "w") as fh:
        json.dump({"reports": [r.to_dict() for r in reports]}, fh, indent=2)
        fh.write("\n")


def _write_profiles(path, named_states):
    from . import metrics

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slot", "bus", "quantity", "method", "value"))
        for method, V in named_states:
            for row in metrics.profile_rows(method, V):
                w.writerow(row)


def cmd_gen_data(args):
    from . import case_io, grid_model, measurement, powerflow

    sigmas = None
    if args.sigma_magnitude is not None or args.sigma_power is not None:
        sigmas = dict(measurement.DEFAULT_SIGMAS)
        if args.sigma_magnitude is not None:
            sigmas["magnitude"] = args.sigma_magnitude
        if args.sigma_power is not None:
            sigmas["power"] = args.sigma_power
    sc = powerflow.ScenarioConfig(
        count=args.count, seed=args.seed, mult_lo=args.mult_lo,
        mult_hi=args.mult_hi, shared_shape=args.shared_shape,
        train_frac=args.train_frac, noise=not args.noiseless, sigmas=sigmas,
        noise_on_magnitude=args.noise_on_magnitude, retries=args.retries,
    )
    case = case_io.load_case(args.case)
    adm = grid_model.build_admittance(case)
    sel = measurement.selection_by_name(adm, args.selection)
    mm = measurement.build_measurement_model(adm, sel, sigmas=sigmas)
    ds = powerflow.generate_dataset(case, mm, sc, adm=adm)
    case_io.save_dataset(ds, args.out)
    n_train = sum(1 for s in ds.split if s == "train")
    print(f"case {case.name or args.case}: N={case.n_bus} buses, "
          f"E={case.n_branch} branches, M={mm.pack.n_meters} meters")
    print(f"wrote {ds.count} samples ({n_train} train, "
          f"{ds.count - n_train} test) to {args.out}")
    return 0


def cmd_train(args):
    from . import case_io, grid_model, robust, unrolled

    if args.layers < 1:
        raise ConfigError("--layers must be >= 1")
    widths = (2,) + (args.hidden,) * (args.layers - 1) + (2,)
    cfg = unrolled.GnnConfig(widths=widths, hops=(args.hops,) * args.layers)
    rc = robust.RobustConfig(gamma=args.gamma, rho=args.rho, eta=args.eta,
                             steps=args.steps,
                             normalize=args.normalize) if args.robust else None

    ds = case_io.load_dataset(args.dataset)
    case, adm, mm = _load_problem(args.case, ds.selection)
    _check_dims(ds, mm, args.case)
    shift = grid_model.build_shift_operator(case, kind=args.shift_kind,
                                            weighting=args.shift_weighting)
    model = unrolled.init_unrolled(shift.W, cfg, mm, lam=args.lam,
                                   strategy=args.init, seed=args.seed,
                                   unroll=args.unroll, tied=args.tied)
    t0 = time.perf_counter()
    if rc is not None:
        model, history = robust.robust_train(
            model, ds, rc, args.epochs, batch=args.batch, lr=args.lr,
            seed=args.seed, delta=args.delta)
    else:
        model, history = unrolled.train(
            model, ds, args.epochs, batch=args.batch, lr=args.lr,
            seed=args.seed, delta=args.delta)
    elapsed = time.perf_counter() - t0

    model.meta.update({
        "epochs": int(args.epochs), "batch": int(args.batch),
        "lr": float(args.lr), "delta": float(args.delta),
        "robust": bool(args.robust),
        "shift_kind": args.shift_kind, "shift_weighting": args.shift_weighting,
        "dataset": os.path.basename(args.dataset),
    })
    if rc is not None:
        model.meta.update({"gamma": rc.gamma, "rho": rc.rho, "eta": rc.eta,
                           "attack_steps": rc.steps})
    case_io.save_checkpoint(model, args.checkpoint)
    history_path = args.history or args.checkpoint + ".history.csv"
    _write_history(history_path, history)
    first, last = history[0], history[-1]
    print(f"trained {args.epochs} epochs in {elapsed:.1f}s "
          f"({'robust' if args.robust else 'clean'})")
    print(f"train loss {first[1]:.6g} -> {last[1]:.6g}, "
          f"test loss {first[2]:.6g} -> {last[2]:.6g}")
    print(f"wrote {args.checkpoint} and {history_path}")
    return 0


def _solver_states(args, ds, idx, mm):
    """Run the chosen classical solver on each sample of the split."""
    import numpy as np

    from . import measurement, solvers

    n_bus = mm.n_bus
    v0 = measurement.flat_state(n_bus)
    opts = solvers.SolverOptions(max_iter=args.max_iter, tol=args.tol,
                                 lam=args.lam if args.solver == "altmin" else 0.0)
    prior = (lambda v: measurement.flat_state(n_bus)) if args.solver == "altmin" else None
    out = np.empty((idx.size, 2 * n_bus))
    n_conv = 0
    t0 = time.perf_counter()
    for row, t in enumerate(idx):
        if args.solver == "altmin":
            rep = solvers.altmin_regularized(ds.Z[t], mm, prior, v0, opts)
        else:
            rep = solvers.gauss_newton(ds.Z[t], mm, v0, opts)
        out[row] = rep.v
        n_conv += bool(rep.converged)
    per_sample = (time.perf_counter() - t0) / max(idx.size, 1)
    return out, n_conv, per_sample


def cmd_eval(args):
    import numpy as np

    from . import case_io, metrics

    if args.checkpoint is None and args.solver is None:
        raise ConfigError("nothing to evaluate: give --checkpoint and/or --solver")
    ds = case_io.load_dataset(args.dataset)
    _, _, mm = _load_problem(args.case, ds.selection)
    _check_dims(ds, mm, args.case)
    idx = ds.indices(args.split)
    if idx.size == 0:
        raise ConfigError(f"dataset has no '{args.split}' samples")
    Z, V = ds.Z[idx], ds.V[idx]

    reports, states = [], [("truth", V)]
    if args.checkpoint is not None:
        model = case_io.load_checkpoint(args.checkpoint)
        if model.n_bus != mm.n_bus or model.n_meter != mm.pack.n_meters:
            raise DimensionError(
                f"checkpoint is for {model.n_bus} buses / {model.n_meter} "
                f"meters, dataset+case give {mm.n_bus} / {mm.pack.n_meters}"
            )
        t0 = time.perf_counter()
        pred = model.predict(Z)
        per_sample = (time.perf_counter() - t0) / idx.size
        reports.append(metrics.evaluate("unrolled", pred, V, Z=Z, mm=mm,
                                        runtime_per_sample=per_sample))
        states.append(("unrolled", pred))
    if args.solver is not None:
        pred, n_conv, per_sample = _solver_states(args, ds, idx, mm)
        rep = metrics.evaluate(args.solver, pred, V, Z=Z, mm=mm,
                               runtime_per_sample=per_sample,
                               extra={"converged": n_conv,
                                      "samples": int(idx.size)})
        reports.append(rep)
        states.append((args.solver, pred))

    for rep in reports:
        print(f"{rep.method}: aligned RMSE {rep.aligned_rmse:.3e}, "
              f"vm RMSE {rep.vm_rmse:.3e} p.u., va RMSE {rep.va_rmse:.3e} rad, "
              f"huber {rep.mean_huber:.3e}, {rep.runtime_per_sample * 1e3:.2f} "
              f"ms/sample")
    if args.metrics:
        _write_reports(args.metrics, reports)
        print(f"wrote {args.metrics}")
    if args.profiles:
        _write_profiles(args.profiles, states)
        print(f"wrote {args.profiles}")
    return 0


def cmd_attack_eval(args):
    from . import case_io, metrics, robust

    rc = robust.RobustConfig(gamma=args.gamma, rho=args.rho, eta=args.eta,
                             steps=args.steps, normalize=args.normalize)
    ds = case_io.load_dataset(args.dataset)
    _, _, mm = _load_problem(args.case, ds.selection)
    _check_dims(ds, mm, args.case)
    model = case_io.load_checkpoint(args.checkpoint)
    if model.n_bus != mm.n_bus or model.n_meter != mm.pack.n_meters:
        raise DimensionError(
            f"checkpoint is for {model.n_bus} buses / {model.n_meter} meters, "
            f"dataset+case give {mm.n_bus} / {mm.pack.n_meters}"
        )
    idx = ds.indices(args.split)
    if idx.size == 0:
        raise ConfigError(f"dataset has no '{args.split}' samples")
    Z, V = ds.Z[idx], ds.V[idx]

    t0 = time.perf_counter()
    clean_pred = model.predict(Z)
    per_sample = (time.perf_counter() - t0) / idx.size
    clean = metrics.evaluate("clean", clean_pred, V, Z=Z, mm=mm, delta=args.delta,
                             runtime_per_sample=per_sample)
    attacked, zeta = robust.attack_eval(model, ds, rc, mm=mm, delta=args.delta,
                                        split=args.split)
    attacked.extra["loss_gap"] = attacked.mean_huber - clean.mean_huber
    reports = [clean, attacked]

    attacked_pred = model.predict(zeta)
    states = [("truth", V), ("clean", clean_pred), ("attacked", attacked_pred)]
    if args.baseline:
        base = case_io.load_checkpoint(args.baseline)
        if base.n_bus != mm.n_bus or base.n_meter != mm.pack.n_meters:
            raise DimensionError(
                f"baseline checkpoint is for {base.n_bus} buses / "
                f"{base.n_meter} meters, dataset+case give "
                f"{mm.n_bus} / {mm.pack.n_meters}"
            )
        base_pred = base.predict(zeta)
        rep = metrics.evaluate("baseline-attacked", base_pred, V, Z=zeta, mm=mm,
                               delta=args.delta)
        rep.extra["loss_gap"] = rep.mean_huber - attacked.mean_huber
        reports.append(rep)
        states.append(("baseline-attacked", base_pred))

    for rep in reports:
        line = (f"{rep.method}: aligned RMSE {rep.aligned_rmse:.3e}, "
                f"huber {rep.mean_huber:.3e}")
        if "psi_mean" in rep.extra:
            line += f", mean dual objective {rep.extra['psi_mean']:.6g}"
        print(line)
    if args.metrics:
        _write_reports(args.metrics, reports)
        print(f"wrote {args.metrics}")
    if args.paired:
        _write_paired(args.paired, clean_pred, attacked_pred)
        print(f"wrote {args.paired}")
    return 0


def _write_paired(path, clean_pred, attacked_pred):
    from . import metrics

    clean_rows = {(t, n, q): v
                  for t, n, q, _, v in metrics.profile_rows("clean", clean_pred)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slot", "bus", "quantity", "clean", "attacked"))
        for t, n, q, _, v in metrics.profile_rows("attacked", attacked_pred):
            w.writerow((t, n, q, repr(clean_rows[(t, n, q)]), repr(v)))


def main(argv=None):
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, subparsers, argv, args)
        if getattr(args, "threads", None) is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            for var in _THREAD_VARS:
                os.environ[var] = str(args.threads)
        return args.func(args)
    except FileNotFoundError as e:
        name = e.filename or str(e)
        print(f"error: no such file: {name}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GridseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

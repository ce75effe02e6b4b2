"""Command-line entry point.

Subcommands map onto the library layers: ``simulate`` integrates the
uncontrolled system, ``equilibria`` and ``r0`` report steady states and the
reproduction number, ``control`` solves one optimal-control scenario,
``calibrate`` fits the ten free parameters to prevalence data, and ``sweep``
runs a batch of scenarios over compliance or rodent prevalence.

Every subcommand accepts --preset or --config to choose the base scenario
(--config also accepts a run manifest for ``control``, which replays it),
--out to place outputs, and --seed to override the recorded seed. Exit
status is 0 unless a run errored; nonconvergence of the sweep iteration is
reported as a warning, not a failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from .calibrate import (
    CalibrationError,
    abc_rejection,
    default_priors,
    load_prevalence_csv,
    refine_fit,
    save_prevalence_csv,
    synth_data,
)
from .equilibria import (
    EquilibriumError,
    dfe1,
    dfe2,
    endemic_equilibrium,
    r0,
)
from .integrate import TimeGrid
from .model import ModelParams
from .scenarios import (
    ScenarioConfig,
    ScenarioError,
    SweepSpec,
    config_from_dict,
    config_from_file,
    config_to_dict,
    emit_plot_data,
    list_presets,
    load_preset,
    replay_manifest,
    resolve_initial,
    resolve_params,
    run_scenario,
    run_sweep,
    write_table,
)
from .simulate import simulate_model

_DEFAULT_COMPLIANCE = tuple(round(0.1 * k, 1) for k in range(1, 11))
_DEFAULT_RODENT_PREVALENCE = (0.0, 0.2, 0.4, 0.6)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _base_config(args) -> ScenarioConfig:
    """The scenario the flags name: preset, config file, or the defaults."""
    if args.preset and args.config:
        raise ScenarioError("--preset and --config are mutually exclusive")
    if args.preset:
        config = load_preset(args.preset)
    elif args.config:
        config = config_from_file(args.config)
    else:
        config = config_from_dict(
            {"schema_version": 1, "name": "default", "params": "defaults"})
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = str(args.out)
    return config


def _out_dir(args, config, fallback: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    if config is not None and config.out:
        return Path(config.out)
    return Path("runs") / fallback


def _resolved(config: ScenarioConfig) -> tuple[ModelParams, np.ndarray]:
    params = resolve_params(config)
    return params, resolve_initial(config)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    config = _base_config(args)
    params, x0 = _resolved(config)
    grid = config.grid
    if args.t_end is not None or args.dt is not None:
        grid = TimeGrid(grid.t0,
                        args.t_end if args.t_end is not None else grid.t_end,
                        args.dt if args.dt is not None else grid.dt)
        config.grid = grid
    traj = simulate_model(params, x0, grid, None,
                          substeps=config.substeps, engine=config.engine)
    out = _out_dir(args, config, f"simulate-{config.name}")
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "trajectory.csv", ["t"] + params.state_names(),
                np.column_stack([grid.points(), traj.values]))
    record = {"schema_version": 1, "kind": "simulate",
              "config": config_to_dict(config)}
    (out / "run.yaml").write_text(
        yaml.safe_dump(record, sort_keys=False), encoding="utf-8")
    print(f"simulate: {traj.values.shape[0]} rows -> {out / 'trajectory.csv'}")
    return 0


def _equilibrium_lines(rep, state_names) -> list[str]:
    lines = [f"[{rep.kind}] stability={rep.stability} "
             f"max_real_eigenvalue={rep.max_real_eigenvalue:.6g} "
             f"residual={rep.residual:.3e}"]
    lines += [f"  {name} = {value:.17g}"
              for name, value in zip(state_names, rep.state.to_vector())]
    return lines


def _cmd_equilibria(args) -> int:
    config = _base_config(args)
    params = resolve_params(config)
    reports = [dfe1(params), dfe2(params)]
    rep_r0 = r0(params)
    note = None
    if rep_r0.r0 > 1.0:
        reports.append(endemic_equilibrium(params))
    else:
        note = (f"r0 = {rep_r0.r0:.6g} <= 1: no positive endemic "
                "equilibrium exists; only the disease-free states are "
                "reported")

    out = _out_dir(args, config, "equilibria")
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"r0 = {rep_r0.r0:.17g}",
             f"ngm_spectral_radius = {rep_r0.ngm_spectral_radius:.17g}"]
    if note:
        lines.append(note)
    for rep in reports:
        lines += _equilibrium_lines(rep, params.state_names())
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    rows = []
    for rep in reports:
        for k, ev in enumerate(rep.eigenvalues):
            rows.append((rep.kind, float(k), float(ev.real), float(ev.imag)))
    write_table(out / "eigenvalues.csv", ["kind", "index", "real", "imag"],
                rows)
    for rep in reports:
        print(f"{rep.kind}: {rep.stability} "
              f"(max Re eig = {rep.max_real_eigenvalue:.6g})")
    if note:
        print(note)
    print(f"report -> {out / 'report.txt'}")
    return 0


def _cmd_r0(args) -> int:
    config = _base_config(args)
    params = resolve_params(config)
    rep = r0(params)
    out = _out_dir(args, config, "r0")
    out.mkdir(parents=True, exist_ok=True)
    terms = ", ".join(f"{t:.17g}" for t in rep.per_species_terms)
    lines = [f"r0 = {rep.r0:.17g}",
             f"ngm_spectral_radius = {rep.ngm_spectral_radius:.17g}",
             f"per_species_terms = [{terms}]"]
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    n = rep.ngm.shape[0]
    write_table(out / "ngm.csv",
                [f"c{j}" for j in range(n)],
                [tuple(float(v) for v in row) for row in rep.ngm])
    print(lines[0])
    return 0


def _cmd_control(args) -> int:
    if args.config:
        tree = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
        if isinstance(tree, dict) and tree.get("kind") == "scenario":
            bundle = replay_manifest(args.config,
                                     args.out or Path("runs") / "replay")
            print(f"replayed {args.config} -> {bundle.out_dir}")
            return 0
    config = _base_config(args)
    bundle = run_scenario(config, args.out)
    if not bundle.summary["converged"]:
        _warn(f"sweep iteration did not converge within "
              f"{config.sweep.max_iterations} iterations "
              f"(final change {bundle.summary['final_change']:.3e})")
    if args.plot_data:
        emit_plot_data(bundle)
    s = bundle.summary
    print(f"{config.name}: converged={s['converged']} "
          f"iterations={s['iterations']} objective={s['objective']:.6g} "
          f"final_total_infected={s['final_total_infected']:.6g}")
    print(f"outputs -> {bundle.out_dir}")
    return 0


def _cmd_calibrate(args) -> int:
    config = _base_config(args)
    params, x0 = _resolved(config)
    out = _out_dir(args, config, "calibrate")
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed

    if args.data:
        obs = load_prevalence_csv(args.data)
        source = str(args.data)
    else:
        times = np.asarray(args.times, dtype=float)
        obs = synth_data(params, x0, times, args.noise_sd, seed,
                         dt=args.dt, engine=config.engine)
        save_prevalence_csv(obs, out / "observations.csv")
        source = (f"synthetic from the configured parameters "
                  f"(noise_sd={args.noise_sd}, seed={seed})")

    prior = default_priors(params)
    post = abc_rejection(prior, obs, params, args.n_draws,
                         args.accept_fraction, seed, initial=x0,
                         dt=args.dt, engine=config.engine)
    write_table(out / "posterior.csv", list(post.names) + ["distance"],
                [tuple(map(float, vec)) + (float(d),)
                 for vec, d in zip(post.accepted, post.distances)])
    lo, hi = post.interval(0.95)
    write_table(out / "posterior_summary.csv",
                ["name", "mean", "variance", "lo95", "hi95"],
                [(name, m, v, float(l), float(h))
                 for (name, m, v), l, h in zip(post.table(), lo, hi)])

    report = {
        "schema_version": 1,
        "kind": "calibrate",
        "observations": source,
        "n_draws": post.n_draws,
        "n_failed": post.n_failed,
        "n_accepted": int(post.accepted.shape[0]),
        "threshold": float(post.threshold),
        "seed": seed,
    }
    if args.refine:
        best = post.accepted[int(np.argmin(post.distances))]
        res = refine_fit(best, obs, params, prior=prior, initial=x0,
                         dt=args.dt, engine=config.engine,
                         max_evaluations=args.max_evaluations)
        write_table(out / "refined.csv", ["name", "value"],
                    list(zip(post.names, map(float, res.parameters))))
        report["refine"] = {
            "start_distance": float(res.start_distance),
            "distance": float(res.distance),
            "n_evaluations": int(res.n_evaluations),
            "improved": bool(res.improved),
        }
    (out / "report.yaml").write_text(
        yaml.safe_dump(report, sort_keys=False), encoding="utf-8")
    print(f"calibrate: accepted {report['n_accepted']}/{post.n_draws} draws "
          f"(threshold {post.threshold:.5g}, {post.n_failed} failed)")
    if args.refine:
        print(f"refine: distance {report['refine']['start_distance']:.5g} "
              f"-> {report['refine']['distance']:.5g}")
    print(f"outputs -> {out}")
    return 0


def _cmd_sweep(args) -> int:
    config = _base_config(args)

    kind, values, channel = args.kind, args.values, args.channel
    # a sweep_spec block in the config file supplies whatever the flags
    # leave unset
    if args.config:
        tree = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
        spec_tree = tree.get("sweep_spec") if isinstance(tree, dict) else None
        if spec_tree:
            kind = kind or spec_tree.get("kind")
            if values is None and "values" in spec_tree:
                values = tuple(float(v) for v in spec_tree["values"])
            if channel is None:
                channel = spec_tree.get("channel")
    kind = kind or "compliance"
    if values is None:
        values = (_DEFAULT_COMPLIANCE if kind == "compliance"
                  else _DEFAULT_RODENT_PREVALENCE)
    spec = SweepSpec(kind=kind, values=tuple(values), base=config,
                     channel=channel or "treatment")

    out = _out_dir(args, config, f"sweep-{kind}-{config.name}")
    bundle = run_sweep(spec, out, workers=args.workers)
    failures = [r for r in bundle.rows if r.get("error")]
    for r in failures:
        _warn(f"value {r['value']:g} errored: {r['error']}")
    unconverged = [r for r in bundle.rows
                   if not r.get("error") and not r["converged"]]
    for r in unconverged:
        _warn(f"value {r['value']:g} did not converge")
    if args.plot_data:
        emit_plot_data(bundle)
    print(f"sweep {kind}: {len(bundle.rows) - len(failures)} ok, "
          f"{len(failures)} errored -> {bundle.out_dir}")
    return 1 if bundle.any_errors else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="scenario config file (YAML)")
    common.add_argument("--preset", metavar="NAME",
                        help=f"shipped preset: {', '.join(list_presets())}")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="override the config's seed")

    parser = argparse.ArgumentParser(
        prog="schistoctl",
        description="Multi-host schistosomiasis transmission model: "
                    "simulation, equilibria, optimal control, calibration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="integrate the uncontrolled system")
    p.add_argument("--t-end", type=float, help="override horizon (days)")
    p.add_argument("--dt", type=float, help="override output step (days)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("equilibria", parents=[common],
                       help="steady states with stability labels")
    p.set_defaults(func=_cmd_equilibria)

    p = sub.add_parser("r0", parents=[common],
                       help="basic reproduction number")
    p.set_defaults(func=_cmd_r0)

    p = sub.add_parser("control", parents=[common],
                       help="solve one optimal-control scenario "
                            "(or replay a run manifest)")
    p.add_argument("--plot-data", action="store_true",
                   help="also write the fixed-name plot CSVs")
    p.set_defaults(func=_cmd_control)

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit the ten free parameters to prevalence data")
    p.add_argument("--data", metavar="CSV",
                   help="observed prevalence (t,human_prev,bovine_prev); "
                        "omitted = synthetic from the configured parameters")
    p.add_argument("--times", type=_float_list,
                   default=tuple(float(t) for t in range(30, 361, 30)),
                   help="synthetic sampling days (comma-separated)")
    p.add_argument("--noise-sd", type=float, default=0.0,
                   help="synthetic observation noise (default 0)")
    p.add_argument("--n-draws", type=int, default=2000)
    p.add_argument("--accept-fraction", type=float, default=0.1)
    p.add_argument("--dt", type=float, default=0.25,
                   help="simulation step for the fit (days)")
    p.add_argument("--refine", action=argparse.BooleanOptionalAction,
                   default=True, help="polish the best draw locally")
    p.add_argument("--max-evaluations", type=int, default=4000)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("sweep", parents=[common],
                       help="batch runs over compliance or rodent prevalence")
    p.add_argument("--kind", choices=("compliance", "rodent_prevalence"))
    p.add_argument("--values", type=_float_list,
                   help="comma-separated swept values")
    p.add_argument("--channel",
                   help="compliance only: channel (group) whose bound is "
                        "scaled (default: treatment)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot-data", action="store_true",
                   help="also write the fixed-name plot CSVs")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, EquilibriumError, CalibrationError) as exc:
        return _fail(str(exc))
    except (ValueError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())

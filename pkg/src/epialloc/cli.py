"""Pipeline command-line front end.

Chains the stages:

    simulate -> synth -> {fit-gp, fit-nlls} -> sample -> reduce
             -> augment -> optimize -> evaluate -> report

Each subcommand reads the shared TOML config, derives its own seed from
the master seed, writes artifacts under ``<outdir>/<stage>/``, and
records them in ``<outdir>/manifest.json``.  Artifacts carry the config
hash and stage seed, and contain nothing time-dependent: rerunning a
stage with the same config rewrites identical bytes.

Exit codes: 0 success, 1 config or validation error, 2 missing upstream
artifact (the message names the stage to run), 3 numerical failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .allocation import ScenarioBatchEvaluator, solve_nominal, solve_stochastic
from .config import ExperimentConfig, load_config
from .errors import (
    ConfigError,
    DomainError,
    EpiallocError,
    MissingArtifactError,
    StructuralError,
)
from .gp import GpHyperParams, fit_gp_hyperparams
from .mcmc import ChainConfig, mh_sample
from .models import (
    TimeSeriesData,
    VaccinePolicy,
    generate_noisy_observations,
    simulate,
)
from .nlls import nlls_fit
from .persist import (
    provenance,
    provenance_comment,
    read_json,
    read_table,
    update_manifest,
    write_json,
    write_table,
)
from .scenarios import (
    DiscreteDistribution,
    ScenarioSet,
    augment_onset,
    distribution_mode,
    reduce_scenarios,
)

TRACE_COLUMNS = (
    "generation",
    "best_feasible_objective",
    "best_violation",
    "mean_objective",
)


def _finish(cfg: ExperimentConfig, stage: str, artifacts) -> list[Path]:
    update_manifest(
        cfg.outdir,
        cfg.config_hash,
        cfg.master_seed,
        stage,
        cfg.seed_for(stage),
        artifacts,
    )
    return list(artifacts)


def _prov(cfg: ExperimentConfig, stage: str) -> dict:
    return provenance(stage, cfg.config_hash, cfg.seed_for(stage))


# ---------------------------------------------------------------------------
# Artifact loading between stages.
# ---------------------------------------------------------------------------


def _observations_path(cfg) -> Path:
    return cfg.outdir / "synth" / "observations.csv"


def _load_observations(cfg) -> TimeSeriesData:
    path = _observations_path(cfg)
    if not path.is_file():
        raise MissingArtifactError("synth", str(path))
    population = float(cfg.population.sizes[cfg.obs_subpop])
    return TimeSeriesData.from_csv(path, population=population)


def _load_chain_samples(cfg):
    names, matrix, _ = read_table(cfg.outdir / "sample" / "chain.csv", "sample")
    return names, matrix


def _load_scenarios(cfg) -> ScenarioSet:
    for stage in ("augment", "reduce"):
        path = cfg.outdir / stage / "scenarios.json"
        if path.is_file():
            return ScenarioSet.from_dict(read_json(path, stage))
    raise MissingArtifactError("reduce", str(cfg.outdir / "reduce" / "scenarios.json"))


def _scenario_table(scen: ScenarioSet, pop_names):
    names = ["p"] + list(scen.param_names)
    cols = [scen.probabilities] + [scen.thetas[:, j] for j in range(len(scen.param_names))]
    if scen.c2 is not None:
        for k, pname in enumerate(pop_names):
            names.append(f"onset_c2:{pname}")
            cols.append(scen.c2[:, k])
    return names, cols


def _policy_payload(policy: VaccinePolicy, pop_names, mode, prov) -> dict:
    return {
        "window": list(policy.window),
        "subpop_names": list(pop_names),
        "V": [[float(v) for v in row] for row in policy.doses],
        "mode": mode,
        "provenance": prov,
    }


def _policy_from_payload(payload: dict) -> VaccinePolicy:
    return VaccinePolicy(
        window=(int(payload["window"][0]), int(payload["window"][1])),
        doses=np.array(payload["V"], dtype=float),
    )


def _make_evaluator(cfg, scen, workers) -> ScenarioBatchEvaluator:
    return ScenarioBatchEvaluator(
        cfg.allocation_model(),
        cfg.population,
        scen,
        cfg.require_objective(),
        cfg.require_budgets(),
        cfg.allocation_x0(),
        step=cfg.eval_step,
        workers=workers,
    )


# ---------------------------------------------------------------------------
# Stage handlers.
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> list[Path]:
    # System-level ground truth: the coupled, onset-gated dynamics with
    # no vaccination (the immunized compartment stays at zero).
    prov = _prov(cfg, "simulate")
    grid = np.arange(0.0, float(cfg.truth_horizon) + 0.5)
    traj = simulate(
        cfg.allocation_model(),
        cfg.population,
        cfg.truth_theta,
        cfg.allocation_x0(),
        grid,
        step=cfg.truth_step,
    )
    path = cfg.stage_dir("simulate") / "truth.csv"
    traj.to_csv(path, header_comment=provenance_comment(prov))
    return _finish(cfg, "simulate", [path])


def cmd_synth(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "synth")
    times = cfg.require_obs_times()
    pop1 = cfg.inference_population()
    x0 = cfg.inference_x0()[None, :]
    grid = np.concatenate([[0.0], times])
    traj = simulate(
        cfg.model, pop1, cfg.truth_theta, x0, grid, step=cfg.truth_step
    )
    data = generate_noisy_observations(
        traj.restrict(times), cfg.obs_sigma, seed=prov["seed"]
    )
    path = cfg.stage_dir("synth") / "observations.csv"
    data.to_csv(path, header_comment=provenance_comment(prov))
    return _finish(cfg, "synth", [path])


def cmd_fit_gp(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "fit-gp")
    data = _load_observations(cfg)
    hyper = fit_gp_hyperparams(data, mismatch=cfg.gp_mismatch)
    path = write_json(
        cfg.stage_dir("fit-gp") / "hyperparams.json",
        {"hyperparams": hyper.to_dict(), "provenance": prov},
    )
    return _finish(cfg, "fit-gp", [path])


def cmd_fit_nlls(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "fit-nlls")
    data = _load_observations(cfg)
    fit = nlls_fit(
        data,
        cfg.model,
        cfg.inference_x0(),
        n_starts=cfg.nlls["n_starts"],
        seed=prov["seed"],
        step=cfg.truth_step,
        max_iter=cfg.nlls["max_iter"],
    )
    path = write_json(
        cfg.stage_dir("fit-nlls") / "nlls.json",
        {**fit.to_dict(), "provenance": prov},
    )
    return _finish(cfg, "fit-nlls", [path])


def cmd_sample(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "sample")
    data = _load_observations(cfg)
    payload = read_json(cfg.outdir / "fit-gp" / "hyperparams.json", "fit-gp")
    hyper = GpHyperParams.from_dict(payload["hyperparams"]).aligned_to(
        data.state_names
    )
    mc = cfg.require_mcmc()
    chain = mh_sample(
        data,
        cfg.model,
        hyper,
        ChainConfig(
            iterations=mc["iterations"],
            burn_in=mc["burn_in"],
            seed=prov["seed"],
            thin=mc["thin"],
            adapt_interval=mc["adapt_interval"],
            store_latent=mc["store_latent"],
        ),
    )
    out = cfg.stage_dir("sample")
    csv_path = write_table(
        out / "chain.csv",
        list(chain.param_names),
        [chain.samples[:, j] for j in range(len(chain.param_names))],
        comment=provenance_comment(prov),
    )
    json_path = write_json(
        out / "chain.json",
        {
            "param_names": list(chain.param_names),
            "acceptance": {k: float(v) for k, v in chain.acceptance.items()},
            "iterations": chain.iterations,
            "burn_in": chain.burn_in,
            "thin": chain.thin,
            "n_samples": chain.n_samples,
            "model_kind": chain.model_kind,
            "bounds": chain.bounds.tolist(),
            "summary": chain.summarize(),
            "provenance": prov,
        },
    )
    return _finish(cfg, "sample", [csv_path, json_path])


def cmd_reduce(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "reduce")
    names, matrix = _load_chain_samples(cfg)
    rc = cfg.require_reduce()
    scen, cost = reduce_scenarios(
        matrix,
        k=rc["k"],
        restarts=rc["restarts"],
        seed=prov["seed"],
        standardize=rc["standardize"],
        param_names=names,
        source_chain=str(cfg.outdir / "sample" / "chain.csv"),
    )
    out = cfg.stage_dir("reduce")
    json_path = write_json(
        out / "scenarios.json",
        {**scen.to_dict(), "cost": float(cost), "provenance": prov},
    )
    tnames, tcols = _scenario_table(scen, cfg.population.names)
    csv_path = write_table(
        out / "scenarios.csv", tnames, tcols, comment=provenance_comment(prov)
    )
    return _finish(cfg, "reduce", [json_path, csv_path])


def cmd_augment(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "augment")
    base = ScenarioSet.from_dict(
        read_json(cfg.outdir / "reduce" / "scenarios.json", "reduce")
    )
    scen = augment_onset(base, cfg.require_onset_grid())
    out = cfg.stage_dir("augment")
    json_path = write_json(
        out / "scenarios.json", {**scen.to_dict(), "provenance": prov}
    )
    tnames, tcols = _scenario_table(scen, cfg.population.names)
    csv_path = write_table(
        out / "scenarios.csv", tnames, tcols, comment=provenance_comment(prov)
    )
    return _finish(cfg, "augment", [json_path, csv_path])


def cmd_optimize(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "optimize")
    budgets = cfg.require_budgets()
    objective = cfg.require_objective()
    ga = cfg.ga_config(seed=prov["seed"])
    workers = cfg.workers(args.threads)
    model = cfg.allocation_model()
    x0 = cfg.allocation_x0()
    if args.mode == "nominal":
        _names, matrix = _load_chain_samples(cfg)
        theta = distribution_mode(DiscreteDistribution.from_samples(matrix))
        policy, trace = solve_nominal(
            model,
            cfg.population,
            theta,
            budgets,
            objective,
            ga,
            x0,
            nominal_c2=cfg.population.onset_c2,
            step=cfg.eval_step,
            workers=workers,
        )
    else:
        scen = _load_scenarios(cfg)
        policy, trace = solve_stochastic(
            model,
            cfg.population,
            scen,
            budgets,
            objective,
            ga,
            x0,
            step=cfg.eval_step,
            workers=workers,
        )
    out = cfg.stage_dir("optimize")
    json_path = write_json(
        out / f"policy_{args.mode}.json",
        _policy_payload(policy, cfg.population.names, args.mode, prov),
    )
    days = np.arange(policy.window[0], policy.window[1] + 1, dtype=float)
    csv_path = write_table(
        out / f"policy_{args.mode}.csv",
        ["day"] + [f"doses:{n}" for n in cfg.population.names],
        [days] + [policy.doses[k] for k in range(policy.n_pops)],
        comment=provenance_comment(prov),
    )
    trace_path = write_table(
        out / f"trace_{args.mode}.csv",
        list(TRACE_COLUMNS),
        [np.array([row[c] for row in trace]) for c in TRACE_COLUMNS],
        comment=provenance_comment(prov),
    )
    return _finish(cfg, "optimize", [json_path, csv_path, trace_path])


def cmd_evaluate(cfg: ExperimentConfig, args) -> list[Path]:
    prov = _prov(cfg, "evaluate")
    scen = _load_scenarios(cfg)
    budgets = cfg.require_budgets()
    if args.policy == "zero":
        policy = VaccinePolicy.zero(cfg.population.n_pops, budgets.window)
        payload = _policy_payload(policy, cfg.population.names, "zero", prov)
        label = args.label or "zero"
    else:
        payload = read_json(args.policy, "optimize")
        policy = _policy_from_payload(payload)
        label = args.label or Path(args.policy).stem
    with _make_evaluator(cfg, scen, cfg.workers(args.threads)) as ev:
        res = ev.evaluate(policy)
    out = cfg.stage_dir("evaluate")
    json_path = write_json(
        out / f"evaluation_{label}.json",
        {
            "label": label,
            "objective": res.objective,
            "violation": res.violation,
            "peaks": [float(v) for v in res.peaks],
            "probabilities": [float(v) for v in res.probabilities],
            "policy": {k: payload[k] for k in ("window", "subpop_names", "V")},
            "provenance": prov,
        },
    )
    csv_path = write_table(
        out / f"evaluation_{label}.csv",
        ["scenario", "probability", "peak"],
        [np.arange(scen.n, dtype=float), res.probabilities, res.peaks],
        comment=provenance_comment(prov),
    )
    return _finish(cfg, "evaluate", [json_path, csv_path])


def cmd_report(cfg: ExperimentConfig, args) -> list[Path]:
    from .errors import NumericalError
    from . import plots

    prov = _prov(cfg, "report")
    eval_dir = cfg.outdir / "evaluate"
    artifacts = sorted(eval_dir.glob("evaluation_*.json"))
    if not artifacts:
        raise MissingArtifactError("evaluate", str(eval_dir / "evaluation_*.json"))
    scen = _load_scenarios(cfg)
    objective = cfg.require_objective()
    model = cfg.allocation_model()
    pop_names = cfg.population.names
    out = cfg.stage_dir("report")
    comment = provenance_comment(prov)

    peaks_rows: list[tuple[str, float, float]] = []
    total_series: dict[str, np.ndarray] = {}
    per_state_series: dict[str, dict[str, np.ndarray]] = {}
    tracked = [objective.target_state, "M"]
    if "H" in model.state_names and objective.target_state != "H":
        tracked.append("H")
    grid = None
    with _make_evaluator(cfg, scen, cfg.workers(args.threads)) as ev:
        for path in artifacts:
            payload = read_json(path, "evaluate")
            label = payload["label"]
            peaks = np.asarray(payload["peaks"], dtype=float)
            probs = np.asarray(payload["probabilities"], dtype=float)
            recomputed = float(peaks @ probs)
            stored = float(payload["objective"])
            if abs(recomputed - stored) > 1e-9 * max(1.0, abs(stored)):
                raise NumericalError(
                    f"evaluation artifact {path.name} is inconsistent: "
                    f"stored objective {stored!r} vs recomputed {recomputed!r}"
                )
            peaks_rows.append((label, stored, float(payload["violation"])))
            policy = _policy_from_payload(payload["policy"])
            grid, mean = ev.mean_trajectory(policy)
            for state in tracked:
                idx = model.state_names.index(state)
                per_state_series.setdefault(state, {})[label] = mean[:, :, idx].T
            t_idx = model.state_names.index(objective.target_state)
            total_series[label] = mean[:, :, t_idx].sum(axis=1)

    written = []
    labels = sorted(total_series)
    written.append(
        write_table(
            out / "expected_peaks.csv",
            ["label", "expected_peak", "violation"],
            [
                np.array([r[0] for r in sorted(peaks_rows)], dtype=object),
                np.array([r[1] for r in sorted(peaks_rows)]),
                np.array([r[2] for r in sorted(peaks_rows)]),
            ],
            comment=comment,
        )
    )
    written.append(
        write_table(
            out / f"total_{objective.target_state}.csv",
            ["t"] + labels,
            [grid] + [total_series[l] for l in labels],
            comment=comment,
        )
    )
    for state, series in per_state_series.items():
        names = ["t"] + [f"{l}:{p}" for l in labels for p in pop_names]
        cols = [grid] + [series[l][k] for l in labels for k in range(len(pop_names))]
        written.append(
            write_table(out / f"per_pop_{state}.csv", names, cols, comment=comment)
        )
    written.append(
        plots.total_series_figure(
            out / f"total_{objective.target_state}.png",
            grid,
            total_series,
            ylabel=f"total {objective.target_state}",
        )
    )
    for state, series in per_state_series.items():
        written.append(
            plots.per_pop_figure(
                out / f"per_pop_{state}.png",
                grid,
                series,
                pop_names,
                ylabel=state,
            )
        )
    return _finish(cfg, "report", written)


# ---------------------------------------------------------------------------
# Entry point.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epialloc",
        description="Epidemic inference, scenario reduction, and vaccine "
        "allocation pipeline.",
    )
    parser.add_argument("-c", "--config", required=True, help="TOML config file")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker processes for policy evaluation (EPIALLOC_THREADS caps it)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "simulate": cmd_simulate,
        "synth": cmd_synth,
        "fit-gp": cmd_fit_gp,
        "fit-nlls": cmd_fit_nlls,
        "sample": cmd_sample,
        "reduce": cmd_reduce,
        "augment": cmd_augment,
    }
    for name, fn in handlers.items():
        sp = sub.add_parser(name)
        sp.set_defaults(handler=fn)
    opt = sub.add_parser("optimize")
    opt.add_argument("--mode", choices=("nominal", "stochastic"), required=True)
    opt.set_defaults(handler=cmd_optimize)
    ev = sub.add_parser("evaluate")
    ev.add_argument(
        "--policy",
        required=True,
        help="policy JSON path, or 'zero' for the do-nothing policy",
    )
    ev.add_argument("--label", default=None)
    ev.set_defaults(handler=cmd_evaluate)
    rep = sub.add_parser("report")
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap to 1
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = load_config(args.config)
        written = args.handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except (DomainError, StructuralError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except EpiallocError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

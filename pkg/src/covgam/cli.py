"""Command-line pipeline: synth, fit-mean, select, fit, forecast, score,
bootstrap, ale.

Every subcommand reads a JSON config, writes its outputs into --out, and
embeds the resolved seed, a config hash, and input-file hashes in each
artifact.  Exit codes: 0 success, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import ale, artifacts, baseline, basis, data, fit, formulas, mcd, pipeline, score, select

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

_VALIDATION = (data.SchemaError, data.ParseError, data.ScenarioError,
               basis.SpecError, basis.BasisError, ale.AleError,
               score.ScoreError, artifacts.ArtifactError, select.SelectError,
               FileNotFoundError, KeyError, ValueError)
_NUMERIC = (fit.FitError, mcd.McdError, np.linalg.LinAlgError, FloatingPointError)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fit_options(cfg: dict) -> fit.FitOptions:
    overrides = cfg.get("fit_options", {})
    return dataclasses.replace(fit.FitOptions(), **overrides)


def _load_dataset(cfg: dict) -> data.Dataset:
    schema = data.load_schema(cfg["schema"])
    return data.load_dataset(cfg["data"], schema)


def _mean_effects_from(cfg: dict, dataset: data.Dataset):
    """Per-region mean effect lists, from a spec file or the built-in formula."""
    if cfg.get("mean_spec"):
        doc = _read_json(cfg["mean_spec"])
        return [[basis.EffectSpec.from_dict(e) for e in doc[str(g)]]
                for g in range(1, dataset.d + 1)]
    return [formulas.mean_effects(dataset, g) for g in range(1, dataset.d + 1)]


def _restore_mean_stage(path, dataset: data.Dataset) -> pipeline.MeanStage:
    doc = artifacts.read_artifact(path, "mean-states")
    states = []
    for g, payload in enumerate(doc["payload"]["regions"], start=1):
        state, _, _ = artifacts.restore_fit_state(payload, dataset.region_view(g))
        states.append(state)
    return pipeline.MeanStage(states)


def _split_by_month(dataset: data.Dataset, month: str):
    start = np.datetime64(month, "M").astype("datetime64[s]")
    ts = dataset.timestamps
    if start <= ts[0] or start > ts[-1]:
        raise ValueError(f"split month {month} outside the data span")
    return dataset.subset(ts < start), dataset.subset(ts >= start)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_synth(args, out: Path) -> None:
    cfg = _read_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    scen_path = out / "scenario.json"
    with open(scen_path, "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    scenario = data.SyntheticScenario.from_json(scen_path)
    result = data.generate_synthetic(scenario)
    ds = result.dataset
    data.write_dataset(ds, out / "data.csv")
    with open(out / "schema.json", "w") as fh:
        json.dump(data.schema_for(ds), fh, indent=1, sort_keys=True)
    q = result.truth_eta.shape[1]
    header = ",".join(f"eta_{j}" for j in range(1, q + 1))
    np.savetxt(out / "truth_eta.csv", result.truth_eta, delimiter=",",
               header=header, comments="", fmt="%.17g")
    artifacts.write_artifact(
        out / "synth_meta.json", "synth",
        payload={"n": ds.n, "d": ds.d,
                 "files": {name: artifacts.file_hash(out / name)
                           for name in ("data.csv", "schema.json", "truth_eta.csv")}},
        seed=scenario.seed, config=cfg)


def cmd_fit_mean(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    opts = _fit_options(cfg)
    effects = _mean_effects_from(cfg, ds)
    stage = pipeline.fit_mean_models(ds, opts, effects)
    regions = []
    for g, state in enumerate(stage.states, start=1):
        spec = pipeline.mean_spec(ds, g, effects[g - 1])
        regions.append(artifacts.fit_state_payload(state, spec, None))
    artifacts.write_artifact(
        out / "mean_states.json", "mean-states",
        payload={"regions": regions},
        seed=args.seed, config=cfg,
        inputs={"data": cfg["data"], "schema": cfg["schema"]})


def cmd_select(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    stage = _restore_mean_stage(cfg["mean_states"], ds)
    resid = stage.residuals(ds)
    train, valid = _split_by_month(ds, cfg["valid_start"])
    r_train = resid[: train.n]
    r_valid = resid[train.n:]
    tables = mcd.build_index_tables(ds.d)
    t_zero = bool(cfg.get("t_zero", False))
    mode = "diag" if t_zero else args.restriction
    offsets = baseline.marginal_offsets(r_train, tables) if t_zero \
        else select.residual_offsets(r_train, tables)
    config = select.BoostConfig(
        max_iter=cfg.get("max_iter", 3000),
        learning_rate=cfg.get("learning_rate", 0.1),
        target_edf=cfg.get("target_edf", 4.0),
        mode=mode)
    ranked = select.boost_rank(train, r_train, offsets, config)
    m_star = select.choose_m_star(ranked, valid, r_valid, offsets)
    grid = cfg.get("grid", [0, 2, 4, 6, 8, 10])
    opts = _fit_options(cfg)
    if t_zero:
        n_effects = min(cfg.get("max_scale_effects", 2 * ds.d),
                        len(ranked.ranking(upto=m_star)))
        effects = baseline.scale_effects_from_ranking(ranked, ds.d, n_effects)
        with open(out / "scale_effects.json", "w") as fh:
            json.dump({str(g): [e.to_dict() for e in effs]
                       for g, effs in enumerate(effects, start=1)},
                      fh, indent=1, sort_keys=True)
        chosen = {"l": n_effects}
    else:
        L, spec = select.choose_l(ranked, train, r_train, valid, r_valid,
                                  grid=grid, opts=opts)
        spec.to_json(out / "chosen_spec.json")
        chosen = {"l": L}
    ranked.write_trace_csv(out / "trace.csv")
    select.save_ranking(ranked, out / "ranking.json")
    artifacts.write_artifact(
        out / "select_meta.json", "selection",
        payload={"metadata": ranked.metadata(), "m_star": m_star,
                 "chosen": chosen, "grid": grid, "restriction": mode,
                 "t_zero": t_zero},
        seed=args.seed, config=cfg,
        inputs={"data": cfg["data"], "schema": cfg["schema"],
                "mean_states": cfg["mean_states"]})


def cmd_fit(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    stage = _restore_mean_stage(cfg["mean_states"], ds)
    resid = stage.residuals(ds)
    spec = basis.ModelSpec.from_json(cfg["spec"])
    opts = _fit_options(cfg)
    cov = pipeline.fit_covariance_model(spec, ds, resid, opts)
    artifacts.write_artifact(
        out / "fit_state.json", "fit-state",
        payload=artifacts.fit_state_payload(cov.state, spec, cov.offsets),
        seed=args.seed, config=cfg,
        inputs={"data": cfg["data"], "schema": cfg["schema"],
                "mean_states": cfg["mean_states"], "spec": cfg["spec"]})


def cmd_forecast(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    windows = data.rolling_windows(ds, cfg["first_test_month"])
    opts = _fit_options(cfg)
    mean_effects = _mean_effects_from(cfg, ds)
    model = cfg.get("model", "mcd")
    if model == "mcd":
        spec = basis.ModelSpec.from_json(cfg["spec"])
        forecasts = pipeline.rolling_forecast(
            ds, windows, spec, opts, mean_effects,
            model_id=cfg.get("model_id", "mcd"))
        inputs = {"data": cfg["data"], "schema": cfg["schema"], "spec": cfg["spec"]}
    elif model == "gaulss+cop":
        doc = _read_json(cfg["scale_effects"])
        scale_effects = [[basis.EffectSpec.from_dict(e) for e in doc[str(g)]]
                         for g in range(1, ds.d + 1)]
        forecasts = []
        for w in windows.windows:
            train = ds.subset(w.train_mask(ds.timestamps))
            test = ds.subset(w.test_mask(ds.timestamps))
            if test.n == 0:
                continue
            stage = pipeline.fit_mean_models(train, opts, mean_effects)
            cop = baseline.fit_copula_baseline(train, stage, scale_effects, opts)
            forecasts.append(baseline.copula_forecast(
                cop, stage, test, model_id=cfg.get("model_id", "gaulss+cop"),
                train_end=str(w.train_end)))
        inputs = {"data": cfg["data"], "schema": cfg["schema"],
                  "scale_effects": cfg["scale_effects"]}
    else:
        raise ValueError(f"unknown forecast model {model!r}")
    artifacts.write_artifact(
        out / "forecasts.json", "forecasts",
        payload=artifacts.forecast_payload(forecasts),
        seed=args.seed, config=cfg, inputs=inputs)


def _aligned_observations(ds: data.Dataset, forecasts) -> tuple:
    mu = np.concatenate([f.mu for f in forecasts])
    Sigma = np.concatenate([f.Sigma for f in forecasts])
    ts = np.concatenate([f.timestamps for f in forecasts])
    lut = {t: i for i, t in enumerate(ds.timestamps)}
    try:
        rows = np.array([lut[t] for t in ts])
    except KeyError as exc:
        raise ValueError(f"forecast timestamp {exc} not present in the data") from exc
    merged = score.ForecastDistribution(mu, Sigma, forecasts[0].model_id,
                                        timestamps=ts)
    return merged, ds.responses[rows]


def transform_from_json(cfg: dict, d: int):
    names, rows = [], []
    for name, entry in cfg.items():
        row = np.zeros(d)
        if isinstance(entry, list):
            for g in entry:
                row[g - 1] += 1.0
        else:
            for g in entry.get("plus", []):
                row[g - 1] += 1.0
            for g in entry.get("minus", []):
                row[g - 1] -= 1.0
        names.append(name)
        rows.append(row)
    return names, np.vstack(rows)


def cmd_score(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    table = score.ScoreTable()
    A = None
    if args.transform:
        names, A = transform_from_json(_read_json(args.transform), ds.d)
        table.meta["transform"] = {"names": names, "matrix": A.tolist()}
    for label, path in cfg["forecasts"].items():
        doc = artifacts.read_artifact(path, "forecasts")
        forecasts = artifacts.restore_forecasts(doc["payload"])
        merged, y = _aligned_observations(ds, forecasts)
        if A is not None:
            merged = score.transform_forecast(merged, A, require_full_rank=True)
            y = y @ A.T
        table.add(label, merged, y, n_samples=cfg.get("n_samples", 500),
                  seed=cfg.get("score_seed", args.seed or 0))
    table.to_csv(out / "scores.csv")
    artifacts.write_artifact(
        out / "scores.json", "scores",
        payload={"rows": table.rows, "totals": table.totals, "meta": table.meta},
        seed=args.seed, config=cfg,
        inputs={label: path for label, path in cfg["forecasts"].items()})


def _loss_series(ds: data.Dataset, path: str, metric: str) -> tuple:
    doc = artifacts.read_artifact(path, "forecasts")
    forecasts = artifacts.restore_forecasts(doc["payload"])
    merged, y = _aligned_observations(ds, forecasts)
    r = y - merged.mu
    C = np.linalg.cholesky(merged.Sigma)
    z = np.linalg.solve(C, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.einsum("nii->ni", C)), axis=1)
    d = merged.d
    if metric == "log":
        series = 0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=1))
    elif metric == "log_ind":
        sd = merged.marginal_sd()
        series = np.sum(0.5 * (np.log(2 * np.pi) + 2 * np.log(sd) + (r / sd) ** 2),
                        axis=1)
    elif metric == "crps":
        series = np.sum(score.crps_gaussian(y, merged.mu, merged.marginal_sd()),
                        axis=1)
    else:
        raise ValueError(f"unknown bootstrap metric {metric!r}")
    return merged.timestamps, series


def cmd_bootstrap(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    metric = cfg.get("metric", "log")
    series = {}
    for label, path in cfg["forecasts"].items():
        ts, losses = _loss_series(ds, path, metric)
        series[label] = (ts, losses)
    results = {}
    for a, b in cfg["pairs"]:
        ts_a, la = series[a]
        ts_b, lb = series[b]
        if not np.array_equal(ts_a, ts_b):
            raise ValueError(f"forecast series {a!r} and {b!r} are not aligned")
        outcome = score.block_bootstrap_diff(
            la, lb, block_len=cfg.get("block_len", 336),
            n_boot=cfg.get("n_boot", 2000), seed=cfg.get("bootstrap_seed", 0))
        results[f"{a} - {b}"] = {
            "mean": outcome["mean"], "quantiles": outcome["quantiles"],
            "block_len": outcome["block_len"], "seed": outcome["seed"],
            "samples": [float(x) for x in outcome["samples"]],
        }
    artifacts.write_artifact(
        out / "bootstrap.json", "bootstrap",
        payload={"metric": metric, "differences": results},
        seed=args.seed, config=cfg,
        inputs={label: path for label, path in cfg["forecasts"].items()})


def cmd_ale(args, out: Path) -> None:
    cfg = _read_json(args.config)
    ds = _load_dataset(cfg)
    stage = _restore_mean_stage(cfg["mean_states"], ds)
    resid = stage.residuals(ds)
    doc = artifacts.read_artifact(cfg["fit_state"], "fit-state")
    state, spec, offsets = artifacts.restore_fit_state(doc["payload"], ds)
    need_var = any(c.get("variance", True) for c in cfg["curves"])
    v_beta = None
    if need_var:
        _, _, negH = fit.log_posterior_grad_hess(
            state.beta, state.lambdas, state.assembly, resid)
        state.neg_hessian = fit._ensure_pd(negH, fit.FitOptions())
        v_beta = fit.posterior_covariance(state)
    model = ale.AleModel(state.assembly, state.beta, offsets, v_beta)
    written = []
    for curve_cfg in cfg["curves"]:
        o = curve_cfg["output"]
        output = ale.OutputSpec(o["kind"], o["l"] - 1, o.get("m", 1) - 1)
        curve = ale.ale_estimate(model, ds, curve_cfg["covariate"], output,
                                 n_bins=curve_cfg.get("bins", 40))
        if curve_cfg.get("variance", True):
            ale.ale_variance(model, curve, ds)
        name = f"ale_{output.label()}_{curve_cfg['covariate']}.csv".replace(
            "[", "").replace("]", "").replace(",", "_")
        curve.write_csv(out / name)
        written.append(name)
    artifacts.write_artifact(
        out / "ale_meta.json", "ale",
        payload={"files": written,
                 "hashes": {n: artifacts.file_hash(out / n) for n in written}},
        seed=args.seed, config=cfg,
        inputs={"data": cfg["data"], "schema": cfg["schema"],
                "fit_state": cfg["fit_state"]})


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "synth": cmd_synth,
    "fit-mean": cmd_fit_mean,
    "select": cmd_select,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "bootstrap": cmd_bootstrap,
    "ale": cmd_ale,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covgam",
        description="Multivariate Gaussian additive covariance modelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name == "select":
            p.add_argument("--restriction", default="full",
                           choices=list(formulas.RESTRICTION_MODES))
        if name == "score":
            p.add_argument("--transform", default=None,
                           help="JSON aggregation/difference matrix")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _HANDLERS[args.command](args, out)
        return EXIT_OK
    except _NUMERIC as exc:
        code = EXIT_NUMERIC
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    except _VALIDATION as exc:
        code = EXIT_VALIDATION
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    with open(out / "error.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    print(json.dumps(record), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

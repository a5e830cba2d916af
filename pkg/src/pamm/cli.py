"""Command line interface.

Four subcommands, each driven by a JSON config file:

    pamm ped      --config ped.json       subject CSV -> PED CSV
    pamm fit      --config fit.json       PED CSV -> model JSON (+ tables)
    pamm evaluate --config eval.json      model + PED -> report
    pamm simulate --config sim.json       scenario study -> results CSV

Every command writes a manifest (<output>.manifest.json) with content
digests of the config, the inputs and the outputs, and nothing volatile,
so a rerun on identical inputs produces byte-identical files.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError, NumericError
from .fit import (
    FittedModel,
    ModelSpec,
    coefficient_table,
    fit,
    model_from_json,
    model_to_json,
)
from .metrics import fit_report
from .ped import SurvivalRecord, as_ped, make_cut_points, read_ped_csv, write_ped_csv
from .sim import SimConfig, rows_to_table, run_scenarios


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _write_manifest(command: str, config_path, inputs: list, outputs: list) -> None:
    primary = Path(outputs[0])
    doc = {
        "command": command,
        "package_version": __version__,
        "config_sha256": _sha256(config_path),
        "inputs": {str(p): _sha256(p) for p in sorted(map(str, inputs))},
        "outputs": {str(p): _sha256(p) for p in sorted(map(str, outputs))},
    }
    with open(str(primary) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------- ped


def _coerce_event(values) -> np.ndarray:
    out = np.zeros(len(values), dtype=bool)
    for i, v in enumerate(values):
        if isinstance(v, str):
            s = v.strip().lower()
            if s in ("1", "true", "yes"):
                out[i] = True
            elif s in ("0", "false", "no"):
                out[i] = False
            else:
                raise ConfigError(f"cannot interpret event value {v!r}")
        else:
            out[i] = bool(int(v))
    return out


def cmd_ped(cfg: dict, config_path) -> list:
    src = _require(cfg, "input")
    out = cfg.get("output", "ped.csv")
    cols = cfg.get("columns", {})
    id_col = cols.get("id", "id")
    time_col = cols.get("time", "time")
    event_col = cols.get("event", "event")
    group_col = cols.get("group")
    cov_cols = list(cols.get("covariates", []))

    try:
        df = pd.read_csv(src, float_precision="round_trip")
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {src}") from None
    mapped = [id_col, time_col, event_col] + cov_cols + ([group_col] if group_col else [])
    for c in mapped:
        if c not in df.columns:
            raise ConfigError(f"input is missing column {c!r}")

    # rows with a missing value in any mapped column are unusable: drop, report
    missing = df[mapped].isna().any(axis=1)
    if bool(missing.any()):
        df = df.loc[~missing].reset_index(drop=True)
        print(f"dropped {int(missing.sum())} rows with missing values in mapped columns")
    if df.empty:
        raise ConfigError("no usable rows after dropping missing values")

    time = df[time_col].to_numpy(dtype=float)
    event = _coerce_event(df[event_col].tolist())

    # administrative horizon: later times are cut back and censored
    horizon = cfg.get("admin_horizon")
    if horizon is not None:
        horizon = float(horizon)
        if horizon <= 0:
            raise ConfigError("admin_horizon must be positive")
        late = time > horizon
        time = np.where(late, horizon, time)
        event = event & ~late

    # nonpositive recorded times get half a time unit so they stay in the risk set
    zero_time = float(cfg.get("zero_time", 0.5))
    if zero_time <= 0:
        raise ConfigError("zero_time must be positive")
    time = np.where(time <= 0, zero_time, time)

    records = [
        SurvivalRecord(
            id=str(df[id_col].iloc[i]),
            time=float(time[i]),
            event=bool(event[i]),
            covariates={c: float(df[c].iloc[i]) for c in cov_cols},
            group=str(df[group_col].iloc[i]) if group_col else "all",
        )
        for i in range(len(df))
    ]

    cut_cfg = cfg.get("cuts", {})
    strategy = cut_cfg.get("strategy", "unique-event-times")
    cuts = make_cut_points(
        records,
        strategy,
        n_intervals=cut_cfg.get("n_intervals"),
        explicit=cut_cfg.get("values"),
    )
    ped = as_ped(records, cuts, t_convention=cfg.get("t_convention", "end"))
    write_ped_csv(ped, out)
    _write_manifest("ped", config_path, [src], [out])
    print(f"wrote {out}: {ped.n_rows} rows, {len(records)} subjects, "
          f"{len(cuts.kappas) - 1} intervals")
    return [out]


# ---------------------------------------------------------------------- fit


def _term_curve(model: FittedModel, term, grid_size: int, per_group: bool) -> pd.DataFrame:
    """Partial-effect curve of one term on a time grid, with +-2 SE bands."""
    last = model.cuts.kappas[-1]
    t = np.linspace(last / grid_size, last, grid_size)
    V = model.V
    frames = []
    levels = model.schema.group_levels if per_group else (model.schema.group_levels[0],)
    for lev in levels:
        groups = np.array([lev] * grid_size, dtype=object)
        covs = {term.var: np.ones(grid_size)} if term.var else {}
        Z = term.evaluate(t, groups, covs)
        block = slice(term.start, term.stop)
        est = Z @ model.beta[block]
        se = np.sqrt(np.einsum("ij,jk,ik->i", Z, V[block, block], Z))
        frames.append(pd.DataFrame({
            "group": lev if per_group else "all",
            "t": t,
            "estimate": est,
            "lower": est - 2.0 * se,
            "upper": est + 2.0 * se,
        }))
    return pd.concat(frames, ignore_index=True)


def cmd_fit(cfg: dict, config_path) -> list:
    ped_path = _require(cfg, "ped")
    out = cfg.get("output", "model.json")
    try:
        ped = read_ped_csv(ped_path)
    except FileNotFoundError:
        raise ConfigError(f"PED file not found: {ped_path}") from None
    spec = ModelSpec.from_dict(_require(cfg, "model"))
    lambdas = cfg.get("lambdas")
    model = fit(ped, spec, lambdas=lambdas)

    outputs = [out]
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))
        fh.write("\n")

    coef_path = cfg.get("coef_table")
    if coef_path:
        pd.DataFrame(coefficient_table(model)).to_csv(
            coef_path, index=False, float_format="%.17g")
        outputs.append(coef_path)

    curves = cfg.get("curves", {})
    grid_size = int(curves.get("grid_size", 200))
    if curves.get("baseline"):
        sm = [bt for bt in model.terms if bt.kind == "smooth"]
        if not sm:
            raise ConfigError("baseline curve requested but the model has no time smooth")
        _term_curve(model, sm[0], grid_size, per_group=False).to_csv(
            curves["baseline"], index=False, float_format="%.17g")
        outputs.append(curves["baseline"])
    if curves.get("group_effect"):
        het = [bt for bt in model.terms if bt.kind in ("fre", "vc")]
        if not het:
            raise ConfigError("group_effect curve requested but the model has no "
                              "time-varying covariate term")
        _term_curve(model, het[0], grid_size, per_group=het[0].kind == "fre").to_csv(
            curves["group_effect"], index=False, float_format="%.17g")
        outputs.append(curves["group_effect"])

    _write_manifest("fit", config_path, [ped_path], outputs)
    print(f"wrote {out}: loglik={model.loglik:.6f} edf={model.edf_total:.3f} "
          f"converged={model.converged}")
    return outputs


# ----------------------------------------------------------------- evaluate


def cmd_evaluate(cfg: dict, config_path) -> list:
    ped_path = _require(cfg, "ped")
    model_path = _require(cfg, "model")
    out = cfg.get("output", "report.json")
    try:
        ped = read_ped_csv(ped_path)
        with open(model_path, "r", encoding="utf-8") as fh:
            model = model_from_json(fh.read())
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    report = fit_report(
        model, ped,
        label=cfg.get("label", Path(model_path).stem),
        tau=cfg.get("tau"),
        grid_size=int(cfg.get("grid_size", 200)),
    )
    row = report.to_row()
    if str(out).endswith(".csv"):
        pd.DataFrame([row]).to_csv(out, index=False, float_format="%.17g")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(row, fh, indent=1, sort_keys=True)
            fh.write("\n")
    _write_manifest("evaluate", config_path, [ped_path, model_path], [out])
    print(f"wrote {out}: loglik={report.loglik:.6f} ibs={report.ibs:.6f}")
    return [out]


# ----------------------------------------------------------------- simulate


def cmd_simulate(cfg: dict, config_path) -> list:
    out = cfg.get("output", "sim_results.csv")
    n_jobs = int(cfg.get("n_jobs", 1))
    allowed = ("n", "reps", "base_seed", "scenarios", "target_censoring", "cal_n",
               "cal_tol", "n_cuts", "cut_strategy", "n_knots", "diff_order", "ibs_grid")
    unknown = set(cfg) - set(allowed) - {"output", "n_jobs"}
    if unknown:
        raise ConfigError(f"unknown simulate config keys: {sorted(unknown)}")
    kwargs = {k: cfg[k] for k in allowed if k in cfg}
    if "scenarios" in kwargs:
        kwargs["scenarios"] = tuple(kwargs["scenarios"])
    try:
        sim_cfg = SimConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad simulate config: {e}") from None
    done: list[dict] = []
    try:
        df = run_scenarios(sim_cfg, n_jobs=n_jobs, on_rows=done.extend)
    except BaseException:
        # keep whatever replications completed before the failure
        if done:
            partial = out + ".partial.csv"
            rows_to_table(done).to_csv(partial, index=False, float_format="%.17g")
            print(f"run failed; kept {len(done)} finished rows in {partial}",
                  file=sys.stderr)
        raise
    df.to_csv(out, index=False, float_format="%.17g")
    _write_manifest("simulate", config_path, [], [out])
    n_fail = int((~df["converged"]).sum())
    print(f"wrote {out}: {len(df)} rows, {n_fail} nonconverged fits")
    return [out]


# --------------------------------------------------------------------- main


_COMMANDS = {
    "ped": cmd_ped,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pamm",
        description="Piecewise-exponential additive models for survival data.",
    )
    parser.add_argument("--version", action="version", version=f"pamm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ped": "expand subject-level survival data into interval rows",
        "fit": "fit a hazard model on a PED file",
        "evaluate": "evaluate a stored model on a PED file",
        "simulate": "run the scenario comparison study",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", help="override the primary output path")
        sp.add_argument("--seed", type=int, help="override the base random seed")
        sp.add_argument("--threads", "--jobs", dest="threads", type=int,
                        help="worker processes (simulate only)")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.config)
        if args.out:
            cfg["output"] = args.out
        if args.seed is not None:
            cfg["base_seed"] = args.seed
        if args.threads is not None:
            cfg["n_jobs"] = args.threads
        _COMMANDS[args.command](cfg, args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands::

    recode     ingest a CSV, recode the outcome, write the encoded dataset
    crosstab   contingency tables and chi-square screening per factor
    fit        fit one random-intercept cumulative-logit model
    lrt        deviance ladder from a list of -2LL values
    simulate   draw a synthetic dataset in the ingestion CSV schema
    run        the full analysis pipeline
    report     regenerate a run's tables from its manifest

Exit codes: 0 success, 2 configuration error, 3 data error,
4 fit non-convergence.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import reports
from .crosstab import build_crosstab, chi_square_independence
from .data import (
    ColumnMapping,
    CovariateSpec,
    DataError,
    DEFAULT_COVARIATES,
    EncodingSpec,
    encode_dataset,
    load_dataset,
    read_observations,
    write_dataset_csv,
)
from .engine import FitError, ModelSpec, ParamVector, fit as fit_model
from .inference import lrt
from .pipeline import (
    ConfigError,
    load_config,
    rerender_from_manifest,
    run_pipeline,
    select_model,
)
from .simulate import SimConfig, default_covariate_model, generate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", help="input CSV path")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--tol", type=float, help="fit convergence tolerance")
    parser.add_argument("--max-iter", type=int, help="fit iteration cap")
    parser.add_argument("--nodes", type=int, help="quadrature nodes for validation")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--alpha", type=float, help="ladder significance level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordmlm",
        description="Random-intercept cumulative-logit models for clustered ordinal survey data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recode", help="recode hemoglobin and encode covariates")
    _add_common(p)

    p = sub.add_parser("crosstab", help="cross-tabulate anemia level by a factor")
    _add_common(p)
    p.add_argument("--factor", default="all", help="covariate name, 'cluster', or 'all'")

    p = sub.add_parser("fit", help="fit one model")
    _add_common(p)
    p.add_argument(
        "--covariates",
        default="",
        help="comma-separated covariate names (empty for the intercept-only model)",
    )
    p.add_argument("--levels", type=int, default=4, help="number of response levels")
    p.add_argument(
        "--response-column",
        help="column holding a pre-coded ordinal response instead of hemoglobin",
    )

    p = sub.add_parser("lrt", help="deviance ladder from -2LL values")
    p.add_argument("--deviances", required=True, help="comma-separated -2LL values")
    p.add_argument("--df", required=True, help="comma-separated df per step")
    p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    _add_common(p)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--per-cluster", type=int, default=100)
    p.add_argument("--thresholds", default="-2.35,-0.48,-0.19")
    p.add_argument("--beta", default="")
    p.add_argument("--tau00", type=float, default=0.2)
    p.add_argument(
        "--covariates",
        default="",
        help="comma-separated covariate names with default category mixes",
    )

    p = sub.add_parser("run", help="run the full pipeline")
    _add_common(p)

    p = sub.add_parser("report", help="regenerate tables from a run manifest")
    p.add_argument("--run-dir", required=True)

    return parser


def _columns_from_config(args, default_covs=True) -> ColumnMapping:
    if args.config:
        cfg = load_config(args.config, _overrides(args))
        return cfg.columns
    covs = {c.name: c.name for c in DEFAULT_COVARIATES} if default_covs else {}
    return ColumnMapping(cluster="state", hemoglobin="hemoglobin", covariates=covs)


def _overrides(args) -> dict:
    out = {}
    for key in ("tol", "max_iter", "nodes", "seed", "alpha"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "input", None):
        out["input_path"] = args.input
    if getattr(args, "out", None):
        out["output_dir"] = args.out
    return out


def _require(value, flag: str):
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def cmd_recode(args) -> int:
    columns = _columns_from_config(args)
    data, exclusions = load_dataset(_require(args.input, "--input"), columns)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        [
            data.cluster_labels[data.cluster_index[i]],
            int(data.responses[i]),
            *[int(v) for v in data.design[i]],
        ]
        for i in range(data.n_obs)
    ]
    reports.write_table_csv(
        out / "encoded.csv", ["cluster", "response", *data.covariate_names], rows
    )
    reports.write_text(out / "exclusions.txt", exclusions.summary())
    print(exclusions.summary(), end="")
    print(f"encoded dataset: {data.n_obs} observations, {data.n_clusters} clusters")
    return EXIT_OK


def cmd_crosstab(args) -> int:
    columns = _columns_from_config(args)
    data, _ = load_dataset(_require(args.input, "--input"), columns)
    factors = (
        ["cluster", *data.covariate_names] if args.factor == "all" else [args.factor]
    )
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for factor in factors:
        table = build_crosstab(data, factor)
        test = chi_square_independence(table)
        entry = {
            "factor": factor,
            "row_labels": list(table.row_labels),
            "col_labels": list(table.col_labels),
            "counts": table.counts.tolist(),
            "chi2": test.statistic,
            "df": test.df,
            "p": test.p_value,
            "min_expected": test.min_expected_cell,
        }
        text = reports.crosstab_text(entry)
        print(text)
        if out:
            cols, rows = reports.crosstab_csv(entry)
            reports.write_table_csv(out / f"crosstab_{factor}.csv", cols, rows)
            reports.write_text(out / f"crosstab_{factor}.txt", text)
    return EXIT_OK


def _inferred_encoding(records, names) -> EncodingSpec:
    """Canonical category orders where known, sorted observed labels otherwise."""
    known = {c.name: c for c in DEFAULT_COVARIATES}
    specs = []
    for name in names:
        if name in known:
            specs.append(known[name])
        else:
            labels = sorted(
                {r.covariates.get(name) for r in records} - {None, ""}
            )
            specs.append(CovariateSpec(name, tuple(labels)))
    return EncodingSpec(tuple(specs))


def cmd_fit(args) -> int:
    covariates = tuple(c for c in args.covariates.split(",") if c)
    if args.config:
        columns = _columns_from_config(args)
    else:
        covs = {name: name for name in covariates}
        columns = ColumnMapping(
            cluster="state",
            hemoglobin=None if args.response_column else "hemoglobin",
            response=args.response_column,
            covariates=covs,
        )
    records = read_observations(_require(args.input, "--input"), columns)
    spec_enc = _inferred_encoding(records, list(columns.covariates))
    data, _ = encode_dataset(records, spec_enc, n_levels=args.levels)
    spec = ModelSpec(
        n_levels=data.n_levels, covariates=covariates, n_clusters=data.n_clusters
    )
    result = fit_model(
        spec,
        data,
        tol=args.tol if args.tol is not None else 1e-8,
        max_iter=args.max_iter if args.max_iter is not None else 200,
    )
    model = {
        "name": "model",
        "covariates": list(covariates),
        "rows": [list(r) for r in result.parameter_rows()],
        "minus2ll": result.minus2ll,
        "converged": result.converged,
    }
    print(reports.fit_text(model, None), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cols, rows = reports.fit_csv(model)
        reports.write_table_csv(out / "model.csv", cols, rows)
        reports.write_text(out / "model.txt", reports.fit_text(model, None))
    if not result.converged:
        print("fit did not converge", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def cmd_lrt(args) -> int:
    try:
        deviances = [float(v) for v in args.deviances.split(",") if v]
        dfs = [int(v) for v in args.df.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"bad --deviances/--df: {exc}") from None
    if len(dfs) != len(deviances) - 1:
        raise ConfigError(
            f"need one df per step: {len(deviances)} deviances but {len(dfs)} df"
        )
    entries = [{"model": "model1", "n_covariates": 0, "minus2ll": deviances[0]}]
    total_cov = 0
    for i, (dev, df) in enumerate(zip(deviances[1:], dfs), start=2):
        test = lrt(deviances[i - 2], dev, df)
        total_cov += df
        entries.append(
            {
                "model": f"model{i}",
                "n_covariates": total_cov,
                "minus2ll": dev,
                "chi2": test.chi2,
                "df": test.df,
                "p": test.p_value,
            }
        )
    selected = entries[select_model(entries, args.alpha)]["model"]
    print(reports.ladder_text(entries, selected, args.alpha), end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    thresholds = [float(v) for v in args.thresholds.split(",") if v]
    beta = [float(v) for v in args.beta.split(",") if v]
    names = [c for c in args.covariates.split(",") if c]
    if len(names) != len(beta):
        raise ConfigError(
            f"--covariates lists {len(names)} names for {len(beta)} --beta values"
        )
    cov_models = tuple(default_covariate_model(name) for name in names)
    cfg = SimConfig(
        true_params=ParamVector(
            thresholds=np.asarray(thresholds), beta=np.asarray(beta), tau00=args.tau00
        ),
        n_clusters=args.clusters,
        n_per_cluster=args.per_cluster,
        covariates=cov_models,
        seed=args.seed if args.seed is not None else 0,
    )
    data, _ = generate(cfg)
    out = _require(args.out, "--out")
    columns = ColumnMapping(
        cluster="state",
        hemoglobin="hemoglobin" if data.n_levels == 4 else None,
        response=None if data.n_levels == 4 else "response",
        covariates={name: name for name in data.covariate_names},
    )
    write_dataset_csv(out, data, columns)
    print(f"wrote {data.n_obs} observations in {data.n_clusters} clusters to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg_path = _require(args.config, "--config")
    cfg = load_config(cfg_path, _overrides(args))
    manifest = run_pipeline(cfg)
    results = manifest["results"]
    print(f"selected model: {results['selected_model']}")
    print(f"artifacts in {cfg.output_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    written = rerender_from_manifest(args.run_dir)
    print(f"regenerated {len(written)} files in {args.run_dir}")
    return EXIT_OK


_HANDLERS = {
    "recode": cmd_recode,
    "crosstab": cmd_crosstab,
    "fit": cmd_fit,
    "lrt": cmd_lrt,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

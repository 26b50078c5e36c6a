"""Full analysis pipeline: ingest, screen, fit the model ladder, report.

The pipeline recodes the outcome, cross-tabulates every risk factor (and the
cluster factor) with chi-square screening, fits the nested model ladder with
Laplace ML, compares consecutive models by deviance, computes ICC and the
variance z test, odds ratios, and predicted-probability profiles for the
selected model, and writes every table in aligned-text and CSV forms plus a
machine-readable manifest.  Given the same configuration the run is
deterministic, and ``render_tables`` regenerates every table byte-identically
from the manifest alone.
"""
from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, reports
from .crosstab import build_crosstab, chi_square_independence
from .data import (
    ANEMIA_LEVEL_LABELS,
    ColumnMapping,
    DataError,
    DEFAULT_COVARIATES,
    EncodingSpec,
    load_dataset,
)
from .engine import FitError, ModelSpec, ParamVector, fit, total_ghq_minus2ll
from .inference import (
    icc,
    lrt,
    odds_ratio,
    profile_probabilities,
    variance_z_test,
    wald_t_tests,
)


class ConfigError(Exception):
    """The analysis configuration is malformed or inconsistent."""


# Table-4-style default ladder: intercept-only, maternal factors, child age,
# demographics, socio-economic factors.
DEFAULT_LADDER = (
    (),
    ("age_at_marriage", "children_ever_born"),
    ("age_at_marriage", "children_ever_born", "child_age"),
    ("age_at_marriage", "children_ever_born", "child_age", "religion", "literacy"),
    (
        "age_at_marriage",
        "children_ever_born",
        "child_age",
        "religion",
        "literacy",
        "sex",
        "living_standard",
        "residence",
    ),
)


@dataclass(frozen=True)
class AnalysisConfig:
    input_path: str
    output_dir: str
    columns: ColumnMapping
    ladder: tuple[tuple[str, ...], ...] = DEFAULT_LADDER
    tol: float = 1e-8
    max_iter: int = 200
    nodes: int = 61
    seed: int = 0
    alpha: float = 0.05
    n_levels: int = 4
    encoding: EncodingSpec | None = None

    def __post_init__(self):
        if not self.input_path or not self.output_dir:
            raise ConfigError("input_path and output_dir must be non-empty")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if self.nodes % 2 == 0 or not 1 <= self.nodes <= 199:
            raise ConfigError(f"quadrature nodes must be odd in 1..199, got {self.nodes}")
        ladder = tuple(tuple(m) for m in self.ladder)
        if not ladder:
            raise ConfigError("model ladder is empty")
        known = set(self.columns.covariates)
        for m, covs in enumerate(ladder, start=1):
            if len(set(covs)) != len(covs):
                raise ConfigError(f"model {m} repeats a covariate")
            unknown = [c for c in covs if c not in known]
            if unknown:
                raise ConfigError(f"model {m} uses unmapped covariates {unknown}")
        for prev, cur in zip(ladder, ladder[1:]):
            if not set(prev) < set(cur):
                raise ConfigError(
                    "model ladder must be strictly nested: "
                    f"{list(prev)} is not a proper subset of {list(cur)}"
                )
        object.__setattr__(self, "ladder", ladder)

    def to_dict(self) -> dict:
        return {
            "input_path": self.input_path,
            "output_dir": self.output_dir,
            "columns": {
                "cluster": self.columns.cluster,
                "hemoglobin": self.columns.hemoglobin,
                "response": self.columns.response,
                "covariates": dict(self.columns.covariates),
            },
            "ladder": [list(m) for m in self.ladder],
            "tol": self.tol,
            "max_iter": self.max_iter,
            "nodes": self.nodes,
            "seed": self.seed,
            "alpha": self.alpha,
            "n_levels": self.n_levels,
        }


def config_from_dict(raw: dict, overrides: dict | None = None) -> AnalysisConfig:
    """Build a configuration from a parsed mapping (YAML or flag overrides)."""
    data = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        cols_raw = data.get("columns", {})
        covs = dict(cols_raw.get("covariates") or {})
        if not covs and "response" not in cols_raw:
            covs = {c.name: c.name for c in DEFAULT_COVARIATES}
        columns = ColumnMapping(
            cluster=cols_raw.get("cluster", "state"),
            hemoglobin=cols_raw.get("hemoglobin", "hemoglobin")
            if not cols_raw.get("response")
            else None,
            response=cols_raw.get("response"),
            covariates=covs,
        )
        ladder = data.get("ladder")
        if ladder is None:
            available = set(columns.covariates)
            ladder = tuple(
                tuple(m) for m in DEFAULT_LADDER if set(m) <= available
            ) or ((),)
        return AnalysisConfig(
            input_path=str(data["input_path"]),
            output_dir=str(data["output_dir"]),
            columns=columns,
            ladder=tuple(tuple(m) for m in ladder),
            tol=float(data.get("tol", 1e-8)),
            max_iter=int(data.get("max_iter", 200)),
            nodes=int(data.get("nodes", 61)),
            seed=int(data.get("seed", 0)),
            alpha=float(data.get("alpha", 0.05)),
            n_levels=int(data.get("n_levels", 4)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing configuration key: {exc}") from None
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> AnalysisConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return config_from_dict(raw, overrides)


def select_model(ladder_entries: list[dict], alpha: float) -> int:
    """Index of the smallest model after which no deviance drop is significant."""
    selected = 0
    for idx, entry in enumerate(ladder_entries):
        if "p" in entry and entry["p"] < alpha:
            selected = idx
    return selected


def run_pipeline(cfg: AnalysisConfig) -> dict:
    """Execute the full analysis; returns the manifest dict it wrote."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    results: dict = {}
    manifest = {
        "config": cfg.to_dict(),
        "versions": {
            "ordmlm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "partial": True,
        "timings": timings,
        "results": results,
    }

    try:
        t0 = time.perf_counter()
        spec = (
            cfg.encoding
            or EncodingSpec(DEFAULT_COVARIATES).subset(list(cfg.columns.covariates))
        )
        data, exclusions = load_dataset(
            cfg.input_path, cfg.columns, spec, n_levels=cfg.n_levels
        )
        results["exclusion"] = {
            "total_input": exclusions.total_input,
            "total_kept": exclusions.total_kept,
            "counts": dict(sorted(exclusions.counts.items())),
        }
        timings["ingest"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        results["crosstabs"] = []
        for factor in ("cluster", *data.covariate_names):
            table = build_crosstab(data, factor)
            test = chi_square_independence(table)
            results["crosstabs"].append(
                {
                    "factor": factor,
                    "row_labels": list(table.row_labels),
                    "col_labels": list(table.col_labels),
                    "counts": table.counts.tolist(),
                    "chi2": test.statistic,
                    "df": test.df,
                    "p": test.p_value,
                    "min_expected": test.min_expected_cell,
                }
            )
        timings["crosstabs"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        models = []
        fits = []
        previous = None
        for m, covs in enumerate(cfg.ladder, start=1):
            mspec = ModelSpec(
                n_levels=data.n_levels, covariates=covs, n_clusters=data.n_clusters
            )
            init = None
            if previous is not None:
                # warm start: extend the previous optimum with zero slopes
                old = previous.estimates
                beta = np.zeros(len(covs))
                for i, name in enumerate(covs):
                    if name in previous.spec.covariates:
                        beta[i] = old.beta[previous.spec.covariates.index(name)]
                init = ParamVector(
                    thresholds=old.thresholds, beta=beta, tau00=max(old.tau00, 0.01)
                )
            result = fit(mspec, data, tol=cfg.tol, max_iter=cfg.max_iter, init=init)
            if not result.converged:
                raise FitError(
                    f"model {m} ({list(covs) or 'intercept only'}) did not converge "
                    f"(gradient norm {result.gradient_norm:.3g})"
                )
            fits.append(result)
            models.append(
                {
                    "name": f"model{m}",
                    "covariates": list(covs),
                    "rows": [list(r) for r in result.parameter_rows()],
                    "minus2ll": result.minus2ll,
                    "converged": result.converged,
                    "iterations": result.iterations,
                    "gradient_norm": result.gradient_norm,
                }
            )
            previous = result
        results["models"] = models
        timings["fits"] = time.perf_counter() - t0

        ladder_entries = []
        for idx, model in enumerate(models):
            entry = {
                "model": model["name"],
                "n_covariates": len(model["covariates"]),
                "minus2ll": model["minus2ll"],
            }
            if idx > 0:
                df = len(model["covariates"]) - len(models[idx - 1]["covariates"])
                test = lrt(models[idx - 1]["minus2ll"], model["minus2ll"], df)
                entry.update(chi2=test.chi2, df=test.df, p=test.p_value)
            ladder_entries.append(entry)
        results["ladder"] = ladder_entries
        selected_idx = select_model(ladder_entries, cfg.alpha)
        results["selected_model"] = models[selected_idx]["name"]
        results["alpha"] = cfg.alpha

        base_fit = fits[0]
        tau, se_tau = base_fit.estimates.tau00, base_fit.se_tau00
        icc_block = {
            "model": models[0]["name"],
            "tau00": float(tau),
            "se_tau00": float(se_tau),
            "icc": icc(tau),
        }
        if tau > 0 and se_tau > 0:
            ztest = variance_z_test(tau, se_tau)
            icc_block.update(z=ztest.z, p_one_sided=ztest.p_one_sided)
        else:
            icc_block.update(z=float("nan"), p_one_sided=float("nan"))
        results["icc"] = icc_block

        results["intercept_tests"] = [
            {
                "name": w.name,
                "estimate": w.estimate,
                "se": w.se,
                "df": data.n_clusters - 1,
                "t": w.t,
                "p": w.p_value,
                "ci_low": w.ci_low,
                "ci_high": w.ci_high,
            }
            for w in wald_t_tests(base_fit)
        ]

        chosen = fits[selected_idx]
        results["odds_ratios"] = []
        for name, est, se in zip(
            chosen.spec.covariates, chosen.estimates.beta, chosen.se_beta
        ):
            entry = {"covariate": name, "beta": float(est), "se": float(se)}
            if np.isfinite(se) and se > 0:
                orr = odds_ratio(est, se)
                entry.update(
                    **{"or": orr.or_hat},
                    ci_low=orr.ci_low,
                    ci_high=orr.ci_high,
                    level=orr.level,
                )
            else:  # degenerate information matrix: no interval
                entry.update(
                    **{"or": float(np.exp(est))},
                    ci_low=float("nan"),
                    ci_high=float("nan"),
                    level=0.95,
                )
            results["odds_ratios"].append(entry)

        results["profiles"] = []
        for pos, name in enumerate(chosen.spec.covariates):
            categories = data.categories_of(name)
            columns = []
            for score, label in enumerate(categories):
                x = np.zeros(len(chosen.spec.covariates))
                x[pos] = score
                profile = profile_probabilities(chosen, x)
                columns.append(
                    {
                        "category": label,
                        "score": score,
                        "cumulative": list(profile.cumulative),
                        "categories": list(profile.categories),
                    }
                )
            results["profiles"].append({"factor": name, "columns": columns})

        t0 = time.perf_counter()
        laplace_m2 = chosen.minus2ll
        ghq_m2 = total_ghq_minus2ll(
            chosen.estimates, data, cfg.nodes, covariates=chosen.spec.covariates
        ) if chosen.estimates.tau00 > 0 else laplace_m2
        results["quadrature_check"] = {
            "nodes": cfg.nodes,
            "laplace_minus2ll": laplace_m2,
            "ghq_minus2ll": ghq_m2,
            "abs_diff": abs(laplace_m2 - ghq_m2),
        }
        timings["quadrature_check"] = time.perf_counter() - t0

        results["level_labels"] = (
            list(ANEMIA_LEVEL_LABELS)
            if data.n_levels == 4
            else [str(k) for k in range(1, data.n_levels + 1)]
        )
        manifest["partial"] = False
    finally:
        render_tables(results, out, partial=manifest["partial"])
        with (out / "manifest.json").open("w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def render_tables(results: dict, out_dir, partial: bool = False) -> list[str]:
    """Write every table from a results dict; returns the file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def csv_file(name, columns, rows):
        reports.write_table_csv(out / name, columns, rows)
        written.append(name)

    def text_file(name, text):
        reports.write_text(out / name, text)
        written.append(name)

    if partial:
        text_file("PARTIAL.txt", "this run failed part-way; artifacts are incomplete\n")

    if "exclusion" in results:
        exc = results["exclusion"]
        lines = [
            f"records read:     {exc['total_input']}",
            f"records kept:     {exc['total_kept']}",
            f"records excluded: {sum(exc['counts'].values())}",
        ]
        lines += [f"  {k}: {v}" for k, v in sorted(exc["counts"].items())]
        text_file("exclusions.txt", "\n".join(lines) + "\n")

    for entry in results.get("crosstabs", []):
        columns, rows = reports.crosstab_csv(entry)
        csv_file(f"crosstab_{entry['factor']}.csv", columns, rows)
        text_file(f"crosstab_{entry['factor']}.txt", reports.crosstab_text(entry))
    if results.get("crosstabs"):
        csv_file(
            "chi_square_tests.csv",
            ["factor", "chi2", "df", "p_value", "min_expected"],
            [
                [e["factor"], e["chi2"], e["df"], e["p"], e["min_expected"]]
                for e in results["crosstabs"]
            ],
        )

    level_labels = results.get("level_labels")
    for model in results.get("models", []):
        columns, rows = reports.fit_csv(model)
        csv_file(f"{model['name']}.csv", columns, rows)
        text_file(f"{model['name']}.txt", reports.fit_text(model, level_labels))

    if "ladder" in results:
        columns, rows = reports.ladder_csv(results["ladder"])
        csv_file("ladder.csv", columns, rows)
        text_file(
            "ladder.txt",
            reports.ladder_text(
                results["ladder"], results.get("selected_model", "?"), results.get("alpha", 0.05)
            ),
        )

    if "icc" in results:
        text_file("icc.txt", reports.icc_text(results["icc"]))

    if results.get("intercept_tests"):
        columns, rows = reports.intercept_tests_csv(results["intercept_tests"])
        csv_file("intercept_tests.csv", columns, rows)
        text_file(
            "intercept_tests.txt", reports.intercept_tests_text(results["intercept_tests"])
        )

    if results.get("odds_ratios"):
        columns, rows = reports.or_csv(results["odds_ratios"])
        csv_file("odds_ratios.csv", columns, rows)
        text_file("odds_ratios.txt", reports.or_text(results["odds_ratios"]))

    for profile in results.get("profiles", []):
        columns, rows = reports.profile_csv(profile)
        csv_file(f"profile_{profile['factor']}.csv", columns, rows)
        if level_labels:
            text_file(
                f"profile_{profile['factor']}.txt",
                reports.profile_text(profile, level_labels),
            )
    return written


def rerender_from_manifest(run_dir) -> list[str]:
    """Regenerate all tables from manifest.json in a completed run directory."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return render_tables(manifest["results"], run_dir, partial=manifest.get("partial", False))

"""Aligned-text and CSV rendering of analysis tables.

Every table file starts with a ``# columns:`` header naming its schema.
Numbers in CSV files keep full precision (repr round-trip); text tables use
the survey-report conventions: percentages and estimates to two decimals
(ties away from zero), p-values as ``<.0001`` below 1e-4 and four decimals
otherwise.  All rendering consumes plain dicts, so tables regenerate
byte-identically from a run manifest.
"""
from __future__ import annotations

import csv
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from scipy.stats import norm


def round_half_away(x: float, ndigits: int = 2) -> float:
    """Round with ties going away from zero (report convention)."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def fmt_fixed(x: float, ndigits: int = 2) -> str:
    if x != x:  # boundary fits carry NaN z statistics
        return "NA"
    return f"{round_half_away(x, ndigits):.{ndigits}f}"


def fmt_p(p: float) -> str:
    if p != p:
        return "NA"
    if p < 1e-4:
        return "<.0001"
    return f"{p:.4f}".lstrip("0") if p < 1 else f"{p:.4f}"


def fmt_cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_table_csv(path, columns: list[str], rows: list[list]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# columns: " + ",".join(columns) + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt_cell(v) for v in row])


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def read_table_csv(path) -> tuple[list[str], list[list[str]]]:
    """Read a schema-commented CSV back; validates the header comment."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# columns: "):
            raise ValueError(f"{path}: missing '# columns:' schema comment")
        declared = first[len("# columns: ") :].strip().split(",")
        reader = csv.reader(fh)
        header = next(reader)
        if header != declared:
            raise ValueError(f"{path}: header {header} != declared schema {declared}")
        return declared, [row for row in reader]


def _aligned(rows: list[list[str]], sep: str = "  ") -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])]
        cells += [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append(sep.join(cells).rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# crosstab
# ---------------------------------------------------------------------------

def crosstab_csv(entry: dict) -> tuple[list[str], list[list]]:
    columns = ["factor_level", "outcome_level", "count", "row_percent", "col_percent"]
    counts = entry["counts"]
    rows = []
    row_totals = [sum(r) for r in counts]
    col_totals = [sum(c) for c in zip(*counts)]
    for i, rlab in enumerate(entry["row_labels"]):
        for j, clab in enumerate(entry["col_labels"]):
            rows.append(
                [
                    rlab,
                    clab,
                    counts[i][j],
                    100.0 * counts[i][j] / row_totals[i],
                    100.0 * counts[i][j] / col_totals[j] if col_totals[j] else 0.0,
                ]
            )
    return columns, rows


def crosstab_text(entry: dict) -> str:
    counts = entry["counts"]
    row_totals = [sum(r) for r in counts]
    col_totals = [sum(c) for c in zip(*counts)]
    grand = sum(row_totals)
    out = [["# columns: level / count / row% / col%"]]
    rows = [[entry["factor"]] + list(entry["col_labels"]) + ["Total"]]
    for i, rlab in enumerate(entry["row_labels"]):
        rows.append([rlab] + [str(c) for c in counts[i]] + [str(row_totals[i])])
        rows.append(
            [""]
            + [fmt_fixed(100.0 * c / row_totals[i]) for c in counts[i]]
            + ["100.00"]
        )
        rows.append(
            [""]
            + [
                fmt_fixed(100.0 * c / t) if t else "-"
                for c, t in zip(counts[i], col_totals)
            ]
            + ["-"]
        )
    rows.append(["Total"] + [str(t) for t in col_totals] + [str(grand)])
    test_line = (
        f"chi-square = {fmt_fixed(entry['chi2'])}  df = {entry['df']}  "
        f"p = {fmt_p(entry['p'])}  (min expected cell {entry['min_expected']:.2f})"
    )
    return out[0][0] + "\n" + _aligned(rows) + test_line + "\n"


# ---------------------------------------------------------------------------
# model fits
# ---------------------------------------------------------------------------

def fit_csv(model: dict) -> tuple[list[str], list[list]]:
    columns = ["parameter", "estimate", "se"]
    rows = [[name, est, se] for name, est, se in model["rows"]]
    return columns, rows


def fit_text(model: dict, level_labels: list[str] | None = None) -> str:
    lines = ["# columns: parameter / estimate (se)"]
    lines.append(f"model: {model['name']}")
    rows = [["Fixed effects", ""]]
    for name, est, se in model["rows"]:
        if name == "tau00":
            continue
        label = name
        if name.startswith("threshold_") and level_labels:
            k = int(name.split("_")[1])
            label = f"Intercept {k} (<= {level_labels[k - 1]})"
        star = ""
        if se and se > 0:
            star = "*" if 2.0 * norm.sf(abs(est / se)) < 0.05 else ""
        rows.append([label, f"{fmt_fixed(est)}{star} ({fmt_fixed(se)})"])
    tau_rows = [r for r in model["rows"] if r[0] == "tau00"]
    if tau_rows:
        _, est, se = tau_rows[0]
        rows.append(["Error variance", ""])
        se_str = fmt_fixed(se) if se == se else "NA"  # NaN at the boundary
        rows.append(["Intercept", f"{fmt_fixed(est, 4)} ({se_str})"])
    rows.append(["Model fit", ""])
    rows.append(["-2LL", f"{model['minus2ll']:.2f}"])
    rows.append(["converged", str(model["converged"])])
    return "\n".join(lines) + "\n" + _aligned(rows)


# ---------------------------------------------------------------------------
# deviance ladder, odds ratios, profiles
# ---------------------------------------------------------------------------

def ladder_csv(ladder: list[dict]) -> tuple[list[str], list[list]]:
    columns = ["model", "n_covariates", "minus2ll", "chi2", "df", "p_value"]
    rows = []
    for entry in ladder:
        rows.append(
            [
                entry["model"],
                entry["n_covariates"],
                entry["minus2ll"],
                entry.get("chi2", ""),
                entry.get("df", ""),
                entry.get("p", ""),
            ]
        )
    return columns, rows


def ladder_text(ladder: list[dict], selected: str, alpha: float) -> str:
    rows = [["model", "covariates", "-2LL", "chi2", "df", "p"]]
    for entry in ladder:
        rows.append(
            [
                entry["model"],
                str(entry["n_covariates"]),
                f"{entry['minus2ll']:.2f}",
                fmt_fixed(entry["chi2"]) if "chi2" in entry else "",
                str(entry.get("df", "")),
                fmt_p(entry["p"]) if "p" in entry else "",
            ]
        )
    return (
        "# columns: model / covariates / -2LL / chi2 / df / p\n"
        + _aligned(rows)
        + f"selected model: {selected} (smallest model after which no deviance "
        + f"drop is significant at {alpha:g})\n"
    )


def or_csv(entries: list[dict]) -> tuple[list[str], list[list]]:
    columns = ["covariate", "estimate", "se", "odds_ratio", "ci_low", "ci_high", "level"]
    rows = [
        [e["covariate"], e["beta"], e["se"], e["or"], e["ci_low"], e["ci_high"], e["level"]]
        for e in entries
    ]
    return columns, rows


def or_text(entries: list[dict]) -> str:
    rows = [["covariate", "OR", "ci_low", "ci_high"]]
    for e in entries:
        rows.append(
            [e["covariate"], fmt_fixed(e["or"]), fmt_fixed(e["ci_low"]), fmt_fixed(e["ci_high"])]
        )
    return "# columns: covariate / OR / ci_low / ci_high\n" + _aligned(rows)


def profile_csv(profile: dict) -> tuple[list[str], list[list]]:
    columns = ["factor", "category", "score", "outcome_level", "probability"]
    rows = []
    for col in profile["columns"]:
        for level, prob in enumerate(col["categories"], start=1):
            rows.append([profile["factor"], col["category"], col["score"], level, prob])
    return columns, rows


def profile_text(profile: dict, level_labels: list[str]) -> str:
    rows = [[f"P(level) by {profile['factor']}"] + [c["category"] for c in profile["columns"]]]
    for level, label in enumerate(level_labels):
        rows.append(
            [label] + [f"{col['categories'][level]:.4f}" for col in profile["columns"]]
        )
    return "# columns: outcome level / one column per factor category\n" + _aligned(rows)


def intercept_tests_csv(entries: list[dict]) -> tuple[list[str], list[list]]:
    columns = ["parameter", "estimate", "se", "df", "t", "p_value", "ci_low", "ci_high"]
    rows = [
        [e["name"], e["estimate"], e["se"], e["df"], e["t"], e["p"], e["ci_low"], e["ci_high"]]
        for e in entries
    ]
    return columns, rows


def intercept_tests_text(entries: list[dict]) -> str:
    rows = [["parameter", "estimate", "se", "df", "t", "p", "ci_low", "ci_high"]]
    for e in entries:
        rows.append(
            [
                e["name"],
                f"{e['estimate']:.4f}",
                f"{e['se']:.4f}",
                str(e["df"]),
                fmt_fixed(e["t"]),
                fmt_p(e["p"]),
                f"{e['ci_low']:.4f}",
                f"{e['ci_high']:.4f}",
            ]
        )
    return "# columns: parameter / estimate / se / df / t / p / ci_low / ci_high\n" + _aligned(rows)


def icc_text(block: dict) -> str:
    lines = [
        "# columns: quantity / value",
        f"tau00        {block['tau00']!r}",
        f"se(tau00)    {block['se_tau00']!r}",
        f"ICC          {block['icc']!r}",
        f"z            {fmt_fixed(block['z'])}",
        f"p (1-sided)  {fmt_p(block['p_one_sided'])}",
    ]
    return "\n".join(lines) + "\n"

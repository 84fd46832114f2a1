"""Report emission: delimited tables for the published summaries and the
figures rendered alongside them on the CLI report path.

Everything here is a view over results computed elsewhere.  Tables are
CSV (the primary, scriptable form) with a plain-text rendering helper;
figures are written straight to files via the non-interactive backend so
reports work in headless runs.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .design import CellStatus, DesignSchematic
from .did import AttGrid
from .ioutil import atomic_write
from .panel import COVARIATE_FIELDS
from .power import PowerResult

_STATUS_COLORS = {
    CellStatus.CONTROL: "#f2f2f2",
    CellStatus.EXPOSED: "#4878a8",
    CellStatus.EXCLUDED: "#c8c8c8",
}


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    """Fixed-width text rendering of a small table."""
    widths = [len(h) for h in headers]
    for row in rows:
        for k, cell in enumerate(row):
            widths[k] = max(widths[k], len(cell))
    def fmt(cells):
        return "  ".join(f"{c:<{w}}" for c, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(headers), rule] + [fmt(r) for r in rows])


def _write_csv(path, headers, rows) -> None:
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# published-table analogs


def write_matched_pairs_table(matches: dict[str, str], covariates, path) -> None:
    """Matched-comparison table: one row per treated cluster and its match."""
    cov = {p.cluster_id: p for p in covariates}
    headers = ["treated", "control"]
    for fname in COVARIATE_FIELDS:
        headers += [f"treated_{fname}", f"control_{fname}"]
    headers.append("distance")
    rows = []
    for treated, control in matches.items():
        row = [treated, control]
        for fname in COVARIATE_FIELDS:
            row.append(repr(getattr(cov[treated], fname)))
            row.append(repr(getattr(cov[control], fname)))
        distance = sum(
            (a - b) ** 2 for a, b in zip(cov[treated].values(), cov[control].values())
        )
        row.append(repr(distance))
        rows.append(row)
    _write_csv(path, headers, rows)


def write_parameter_table(entries: list[dict], path) -> None:
    """Design-parameter table: trend anchors and variance components.

    Each entry is one comparison set: {design_id, n_clusters, n_cells,
    mean_start, mean_end, changepoint, tau2, sigma2_resid,
    sigma2_marginal, icc}.
    """
    headers = [
        "design_id",
        "n_clusters",
        "n_cells",
        "mean_start",
        "mean_end",
        "changepoint",
        "tau2",
        "sigma2_resid",
        "sigma2_marginal",
        "icc",
    ]
    rows = [[_cell(entry.get(h)) for h in headers] for entry in entries]
    _write_csv(path, headers, rows)


def write_power_table(results: list[PowerResult], targets: dict[str, float], path) -> None:
    """Power table: analytic power per design next to the published value."""
    headers = [
        "design_id",
        "delta",
        "sigma2_marginal",
        "icc",
        "alpha",
        "excluded_policy",
        "variance",
        "se",
        "power",
        "published_power",
    ]
    rows = []
    for res in results:
        rows.append(
            [
                res.design_id or "",
                repr(res.spec.delta),
                repr(res.spec.vc.sigma2_marginal),
                repr(res.spec.vc.icc),
                repr(res.spec.alpha),
                res.excluded_policy,
                repr(res.variance),
                repr(res.se),
                repr(res.power),
                _cell(targets.get(res.design_id or "")),
            ]
        )
    _write_csv(path, headers, rows)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# figures


def fig_schematic(schematic: DesignSchematic, path, title: str | None = None) -> None:
    """Adoption-grid figure: one row per cluster, one column per week.

    Post-adoption cells are shaded, washed-out announcement cells are
    hatched, and absent cells are left blank.
    """
    n_rows = len(schematic.rows)
    n_cols = len(schematic.periods)
    fig, ax = plt.subplots(figsize=(0.42 * n_cols + 1.4, 0.32 * n_rows + 1.2))
    for r, seq in enumerate(schematic.rows):
        y = n_rows - 1 - r
        for c, period in enumerate(schematic.periods):
            status = schematic.grid[r][c]
            if status is CellStatus.ABSENT:
                continue
            hatch = "//" if status is CellStatus.EXCLUDED else None
            ax.add_patch(
                plt.Rectangle(
                    (c, y),
                    1,
                    1,
                    facecolor=_STATUS_COLORS[status],
                    edgecolor="black",
                    linewidth=0.5,
                    hatch=hatch,
                )
            )
    ax.set_xlim(0, n_cols)
    ax.set_ylim(0, n_rows)
    ax.set_xticks(np.arange(n_cols) + 0.5)
    ax.set_xticklabels([str(p) for p in schematic.periods], fontsize=7)
    ax.set_yticks(np.arange(n_rows) + 0.5)
    ax.set_yticklabels([seq.cluster_id for seq in reversed(schematic.rows)], fontsize=7)
    ax.set_xlabel("week")
    ax.tick_params(length=0)
    if title:
        ax.set_title(title, fontsize=9)
    handles = [
        plt.Rectangle((0, 0), 1, 1, facecolor=_STATUS_COLORS[CellStatus.CONTROL], edgecolor="black"),
        plt.Rectangle((0, 0), 1, 1, facecolor=_STATUS_COLORS[CellStatus.EXPOSED], edgecolor="black"),
        plt.Rectangle(
            (0, 0), 1, 1, facecolor=_STATUS_COLORS[CellStatus.EXCLUDED], edgecolor="black", hatch="//"
        ),
    ]
    ax.legend(handles, ["control", "exposed", "washed out"], loc="upper left",
              bbox_to_anchor=(1.01, 1.0), fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_power_comparison(results: list[PowerResult], targets: dict[str, float], path) -> None:
    """Bar chart of analytic power per design against the published value."""
    ids = [res.design_id or f"design{k}" for k, res in enumerate(results)]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(1.6 * len(ids) + 1.6, 3.2))
    ax.bar(x - 0.18, [res.power for res in results], width=0.36, label="analytic", color="#4878a8")
    ax.bar(
        x + 0.18,
        [targets.get(i, np.nan) for i in ids],
        width=0.36,
        label="published",
        color="#c8c8c8",
        edgecolor="black",
        linewidth=0.5,
    )
    ax.set_xticks(x)
    ax.set_xticklabels(ids, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("power")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_event_study(
    grid: AttGrid,
    path,
    intervals: dict[tuple[int, int], tuple[float, float]] | None = None,
    pre_grid: AttGrid | None = None,
    title: str | None = None,
) -> None:
    """Group-time effects by weeks since adoption, one line per group.

    Pre-adoption placebo entries, when given, appear at negative event
    times; interval bars are drawn where an interval is supplied.
    """
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    sources = [grid] + ([pre_grid] if pre_grid is not None else [])
    groups = sorted({cell.group for g in sources for cell in g.entries})
    cmap = plt.get_cmap("tab10")
    for gi, group in enumerate(groups):
        xs, ys, errs = [], [], []
        for source in sources:
            for cell in source.entries:
                if cell.group != group:
                    continue
                xs.append(cell.period - cell.group)
                ys.append(cell.att)
                if intervals and (cell.group, cell.period) in intervals:
                    lo, hi = intervals[(cell.group, cell.period)]
                    errs.append((cell.att - lo, hi - cell.att))
                else:
                    errs.append((0.0, 0.0))
        order = np.argsort(xs)
        xs = np.asarray(xs)[order]
        ys = np.asarray(ys)[order]
        errs = np.asarray(errs)[order].T
        ax.errorbar(
            xs,
            ys,
            yerr=errs if np.any(errs) else None,
            marker="o",
            markersize=3.5,
            linewidth=1.0,
            capsize=2,
            label=f"adopted week {group}",
            color=cmap(gi % 10),
        )
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.axvline(0.0, color="black", linewidth=0.6, linestyle=":")
    ax.set_xlabel("weeks since adoption")
    ax.set_ylabel("effect (pct points)")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

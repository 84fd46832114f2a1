"""Command-line front end for the design/estimation/analysis pipeline.

Subcommands mirror the library: ``design`` (build, restrict, render,
groups), ``match``, ``estimate`` (trend, vc), ``power`` (analytic,
simulate, calibrate-excluded), ``did`` (attgt, aggregate, bootstrap,
placebo), ``trial`` (fit, permute), ``protocol`` (validate, report) and
``repro tables``.  JSON is the primary output format; CSV and text are
views.  Exit codes: 0 success, 1 validation or diagnostic failure,
2 usage error.

Defaults can come from a config file in the same sectioned key-value
format as protocol documents (flags win), and bare input filenames are
also looked up under ``$WEDGELAB_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .design import (
    CellStatus,
    EXCLUDED_POLICIES,
    build_schematic,
    design_to_csv,
    read_announcements_csv,
    read_design_csv,
    render_schematic,
    restrict_clusters,
    timing_groups,
)
from .did import (
    ATT_MODES,
    EstimatorSpec,
    aggregate_att,
    att_grid_to_csv,
    cluster_bootstrap,
    estimate_att_gt,
    fit_trial_mixed_model,
    permutation_test,
    placebo_pretrends,
    read_att_grid_csv,
)
from .estimation import VarianceComponents, fit_interrupted_trend, fit_variance_components
from .ioutil import atomic_write, resolve_input_path
from .lottery import (
    DEFAULT_ALPHA,
    DEFAULT_CHANGEPOINT,
    DEFAULT_EFFECT,
    DESIGN_IDS,
    DESIGN_PARAMETERS,
    LOTTERY_STATES,
    NEVER_LOTTERY_STATES,
    TARGET_POWERS,
    builtin_designs,
    default_trend,
    get_design,
)
from .panel import (
    COVARIATE_FIELDS,
    ingest_covariates_csv,
    ingest_panel_csv,
    match_controls,
    matches_to_csv,
    select_records,
)
from .power import PowerSpec, analytic_power, calibrate_excluded, simulated_power
from .protocol import check_consistency, emit_comparison, validate_protocol

_ERRORS = (ValueError, FileNotFoundError, IsADirectoryError, PermissionError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args, parser)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"wedgelab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# plumbing


def _apply_config(args, parser) -> None:
    """Fill unset args from the config file; flags always win."""
    if not getattr(args, "config", None):
        return
    mapping = {
        "paths.panel": "panel",
        "paths.covariates": "covariates",
        "paths.protocol": "protocol",
        "paths.design": "design",
        "paths.announcements": "announcements",
        "paths.output_dir": "outdir",
        "defaults.seed": "seed",
        "defaults.format": "format",
        "defaults.data_dir": "data_dir",
    }
    try:
        cfg = _read_config(args.config)
    except _ERRORS as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
        return
    for key, attr in mapping.items():
        if key in cfg and getattr(args, attr, _MISSING) is None:
            value = cfg[key]
            if attr == "seed":
                value = int(value)
            setattr(args, attr, value)


_MISSING = object()


def _read_config(path) -> dict[str, str]:
    cfg: dict[str, str] = {}
    section = ""
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"config line is not 'key = value': {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg[f"{section}.{key}" if section else key] = value
    return cfg


def _resolve(args, path):
    if path is None:
        return None
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    data_dir = getattr(args, "data_dir", None)
    if data_dir:
        candidate = Path(data_dir) / p
        if candidate.exists():
            return candidate
    return resolve_input_path(path)


def _emit(args, payload: dict, text: str | None = None, csv_text: str | None = None) -> None:
    """Write the result in the requested format to --out or stdout."""
    fmt = getattr(args, "format", None) or "json"
    if fmt == "json":
        out = json.dumps(payload, indent=2) + "\n"
    elif fmt == "csv":
        out = csv_text if csv_text is not None else json.dumps(payload, indent=2) + "\n"
    else:
        out = (text if text is not None else json.dumps(payload, indent=2)) + "\n"
    dest = getattr(args, "out", None)
    if dest:
        with atomic_write(dest) as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)


def _load_design(args, attr: str = "design"):
    value = getattr(args, attr)
    if value is None:
        raise ValueError(f"--{attr.replace('_', '-')} is required")
    if value in DESIGN_IDS:
        return get_design(value), value
    path = _resolve(args, value)
    return read_design_csv(path), Path(str(value)).stem


def _load_panel(args):
    panel = ingest_panel_csv(
        _resolve(args, args.panel),
        strict_bounds=not getattr(args, "allow_out_of_range", False),
    )
    if getattr(args, "covariates", None):
        profiles = ingest_covariates_csv(_resolve(args, args.covariates))
        panel = panel.with_covariates(profiles, week=getattr(args, "covariate_week", None))
    return panel


def _estimator_spec(args) -> EstimatorSpec:
    return EstimatorSpec(
        estimator=getattr(args, "estimator", "att_gt"),
        mode=getattr(args, "mode", "doubly_robust"),
        covariate=getattr(args, "covariate", None),
        anticipation=getattr(args, "anticipation", 1),
        horizon=getattr(args, "horizon", 3),
        group_weighting=getattr(args, "group_weighting", "equal"),
        strict=not getattr(args, "lenient", False),
    )


def _stamp(payload: dict) -> dict:
    return {"version": __version__, **payload}


def _grid_payload(grid) -> dict:
    return {
        "anticipation": grid.anticipation,
        "anchors": {str(g): a for g, a in sorted(grid.base_period.items())},
        "entries": [
            {
                "group": c.group,
                "period": c.period,
                "att": c.att,
                "n_treated": c.n_treated,
                "n_control": c.n_control,
            }
            for c in grid.entries
        ],
    }


def _inference_text(res) -> str:
    def show(value, fmt="{:.6f}"):
        if value is None or value != value:
            return "n/a"
        return fmt.format(value)

    lines = [
        f"estimate  {show(res.estimate)}",
        f"se        {show(res.se)}",
        "interval  n/a"
        if res.ci_low is None or res.ci_low != res.ci_low
        else f"interval  [{res.ci_low:.6f}, {res.ci_high:.6f}]",
        f"p-value   {show(res.p_value)}",
        f"method    {res.method}",
    ]
    for w in res.warnings:
        lines.append(f"warning   {w}")
    return "\n".join(lines)


def _design_json(schematic, design_id=None) -> dict:
    return {
        "design_id": design_id,
        "periods": list(schematic.periods),
        "cells": [
            {"cluster": seq.cluster_id, "period": p, "status": schematic.grid[r][c].value}
            for r, seq in enumerate(schematic.rows)
            for c, p in enumerate(schematic.periods)
            if schematic.grid[r][c] is not CellStatus.ABSENT
        ],
    }


# ---------------------------------------------------------------------------
# design subcommands


def _cmd_design_build(args) -> int:
    if args.builtin:
        schematic, design_id = get_design(args.builtin), args.builtin
    else:
        if not args.announcements:
            raise ValueError("design build needs --announcements or --builtin")
        if args.start is None or args.end is None:
            raise ValueError("--start and --end are required with --announcements")
        sequences = read_announcements_csv(_resolve(args, args.announcements))
        schematic = build_schematic(sequences, (args.start, args.end), n_excluded=args.n_excluded)
        design_id = None
    _emit(
        args,
        _stamp(_design_json(schematic, design_id)),
        text=render_schematic(schematic),
        csv_text=design_to_csv(schematic),
    )
    return 0


def _cmd_design_restrict(args) -> int:
    schematic, design_id = _load_design(args)
    keep = [s.strip() for s in args.keep.split(",") if s.strip()]
    restricted = restrict_clusters(schematic, keep)
    _emit(
        args,
        _stamp(_design_json(restricted, design_id)),
        text=render_schematic(restricted),
        csv_text=design_to_csv(restricted),
    )
    return 0


def _cmd_design_render(args) -> int:
    schematic, _ = _load_design(args)
    _emit(args, _stamp(_design_json(schematic)), text=render_schematic(schematic))
    return 0


def _cmd_design_groups(args) -> int:
    schematic, _ = _load_design(args)
    groups = timing_groups(schematic)
    payload = _stamp(
        {
            "groups": {str(g): sorted(members) for g, members in sorted(groups.groups.items())},
            "never_exposed": sorted(groups.never),
        }
    )
    lines = [f"{g}: {', '.join(sorted(members))}" for g, members in sorted(groups.groups.items())]
    lines.append(f"never: {', '.join(sorted(groups.never)) or '-'}")
    _emit(args, payload, text="\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# match / estimate


def _cmd_match(args) -> int:
    profiles = ingest_covariates_csv(_resolve(args, args.covariates))
    treated = [s.strip() for s in args.treated.split(",") if s.strip()]
    pool = [s.strip() for s in args.pool.split(",") if s.strip()]
    matches = match_controls(
        treated,
        pool,
        profiles,
        with_replacement=args.with_replacement,
        standardize=args.standardize,
    )
    text = "\n".join(f"{t} -> {c}" for t, c in matches.items())
    _emit(args, _stamp({"matches": matches}), text=text, csv_text=matches_to_csv(matches))
    return 0


def _cmd_estimate_trend(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    control = select_records(panel, schematic, {CellStatus.CONTROL})
    fit = fit_interrupted_trend(control, args.changepoint, mode=args.mode)
    first, last = schematic.periods[0], schematic.periods[-1]
    payload = _stamp(
        {
            **fit.to_dict(),
            "mean_start": fit.mean(first),
            "mean_end": fit.mean(last),
            "n_obs": len(control),
        }
    )
    text = "\n".join(
        [
            f"mean({first})   {fit.mean(first):.4f}",
            f"mean({last})   {fit.mean(last):.4f}",
            f"changepoint  {fit.changepoint}",
            f"n_obs        {len(control)}",
        ]
    )
    _emit(args, payload, text=text)
    return 0


def _cmd_estimate_vc(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    control = select_records(panel, schematic, {CellStatus.CONTROL})
    vc = fit_variance_components(control)
    payload = _stamp({**vc.to_dict(), "n_obs": len(control)})
    text = "\n".join(
        [
            f"tau2             {vc.tau2:.6f}",
            f"sigma2_resid     {vc.sigma2_resid:.6f}",
            f"sigma2_marginal  {vc.sigma2_marginal:.6f}",
            f"icc              {vc.icc:.6f}",
        ]
    )
    _emit(args, payload, text=text)
    return 0


# ---------------------------------------------------------------------------
# power


def _power_spec(args) -> PowerSpec:
    vc = VarianceComponents.from_marginal(args.sigma2, args.icc)
    return PowerSpec(delta=args.delta, vc=vc, alpha=args.alpha)


def _cmd_power_analytic(args) -> int:
    schematic, design_id = _load_design(args)
    result = analytic_power(schematic, _power_spec(args), args.excluded_policy, design_id=design_id)
    text = (
        f"power {result.power:.4f} (excluded_policy={result.excluded_policy}, "
        f"se={result.se:.4f}, design={design_id})"
    )
    _emit(args, _stamp(result.to_dict()), text=text)
    return 0


def _cmd_power_simulate(args) -> int:
    schematic, design_id = _load_design(args)
    trend = default_trend() if args.trend == "declining" else 0.0
    result = simulated_power(
        schematic,
        _power_spec(args),
        trend,
        n_sims=args.n_sims,
        seed=args.seed,
        excluded_policy=args.excluded_policy,
        vc_mode=args.vc_mode,
        design_id=design_id,
    )
    text = (
        f"power {result.power:.4f} +/- {result.mc_se:.4f} "
        f"(n_sims={result.n_sims}, seed={result.seed}, policy={result.excluded_policy})"
    )
    _emit(args, _stamp({**result.to_dict(), "mc_se": result.mc_se}), text=text)
    return 0


def _cmd_power_calibrate(args) -> int:
    designs = builtin_designs()
    specs = {
        d: PowerSpec(delta=args.delta, vc=DESIGN_PARAMETERS[d], alpha=args.alpha)
        for d in designs
    }
    result = calibrate_excluded(designs, specs, TARGET_POWERS, tolerance=args.tolerance)
    lines = []
    header = "policy      " + "  ".join(f"{d:>14}" for d in designs) + "   max|dev|"
    lines.append(header)
    for policy in EXCLUDED_POLICIES:
        row = result.table[policy]
        lines.append(
            f"{policy:<12}"
            + "  ".join(f"{row[d]:>14.4f}" for d in designs)
            + f"   {result.max_abs_deviation[policy]:.4f}"
        )
    lines.append(
        f"selected: {result.selected}"
        if result.selected
        else f"selected: none within tolerance {result.tolerance}"
    )
    _emit(args, _stamp(result.to_dict()), text="\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# did / trial


def _cmd_did_attgt(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    grid = estimate_att_gt(
        panel,
        schematic,
        covariate=args.covariate,
        mode=args.mode,
        anticipation=args.anticipation,
        strict=not args.lenient,
    )
    _emit(args, _stamp(_grid_payload(grid)), csv_text=att_grid_to_csv(grid),
          text=att_grid_to_csv(grid).rstrip("\n"))
    return 0


def _cmd_did_aggregate(args) -> int:
    if args.att_grid:
        grid = read_att_grid_csv(_resolve(args, args.att_grid), anticipation=args.anticipation)
    else:
        schematic, _ = _load_design(args)
        panel = _load_panel(args)
        grid = estimate_att_gt(
            panel,
            schematic,
            covariate=args.covariate,
            mode=args.mode,
            anticipation=args.anticipation,
            strict=not args.lenient,
        )
    res = aggregate_att(grid, horizon=args.horizon, group_weighting=args.group_weighting)
    _emit(args, _stamp(res.to_dict()), text=_inference_text(res))
    return 0


def _cmd_did_bootstrap(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    res = cluster_bootstrap(
        panel,
        schematic,
        spec=_estimator_spec(args),
        B=args.n_boot,
        seed=args.seed,
        ci_level=args.ci_level,
    )
    _emit(args, _stamp(res.to_dict()), text=_inference_text(res))
    return 0


def _cmd_did_placebo(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    res = placebo_pretrends(
        panel,
        schematic,
        covariate=args.covariate,
        mode=args.mode,
        anticipation=args.anticipation,
        B=args.n_boot,
        seed=args.seed,
        ci_level=args.ci_level,
        max_pre=args.max_pre,
    )
    payload = _stamp(
        {
            "passed": res.passed,
            "summary": res.summary.to_dict(),
            "grid": _grid_payload(res.grid),
            "intervals": [
                {"group": g, "period": t, "ci_low": lo, "ci_high": hi}
                for g, t, lo, hi in res.intervals
            ],
        }
    )
    lines = [f"passed: {res.passed}"]
    for g, t, lo, hi in res.intervals:
        flag = "" if lo <= 0.0 <= hi else "  <-- excludes 0"
        lines.append(f"group {g} week {t}: [{lo:.4f}, {hi:.4f}]{flag}")
    _emit(args, payload, text="\n".join(lines), csv_text=att_grid_to_csv(res.grid))
    return 0 if res.passed else 1


def _cmd_trial_fit(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    res = fit_trial_mixed_model(panel, schematic, horizon=args.horizon)
    _emit(args, _stamp(res.to_dict()), text=_inference_text(res))
    return 0


def _cmd_trial_permute(args) -> int:
    schematic, _ = _load_design(args)
    panel = _load_panel(args)
    res = permutation_test(
        panel,
        schematic,
        spec=_estimator_spec(args),
        n_perms=args.n_perms,
        seed=args.seed,
        mode=args.perm_mode,
    )
    _emit(args, _stamp(res.to_dict()), text=_inference_text(res))
    return 0


# ---------------------------------------------------------------------------
# protocol / repro


def _cmd_protocol_validate(args) -> int:
    doc, diags = validate_protocol(_resolve(args, args.protocol))
    if doc is not None and args.design and args.panel:
        schematic, _ = _load_design(args)
        panel = _load_panel(args)
        diags = diags + check_consistency(doc, schematic, panel)
    n_errors = sum(1 for d in diags if d.severity == "error")
    payload = _stamp(
        {
            "valid": doc is not None and n_errors == 0,
            "n_errors": n_errors,
            "n_warnings": sum(1 for d in diags if d.severity == "warning"),
            "diagnostics": [d.to_dict() for d in diags],
        }
    )
    lines = [str(d) for d in diags] or ["OK: protocol is valid"]
    _emit(args, payload, text="\n".join(lines))
    return 1 if (doc is None or n_errors) else 0


def _cmd_protocol_report(args) -> int:
    from .report import fig_schematic

    doc, diags = validate_protocol(_resolve(args, args.protocol))
    if doc is None:
        for d in diags:
            print(f"wedgelab: {d}", file=sys.stderr)
        return 1
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    with atomic_write(outdir / "protocol_comparison.txt") as fh:
        fh.write(emit_comparison(doc) + "\n")
    written.append("protocol_comparison.txt")
    with atomic_write(outdir / "protocol.json") as fh:
        fh.write(json.dumps(_stamp(doc.to_dict()), indent=2) + "\n")
    written.append("protocol.json")

    if args.design:
        schematic, design_id = _load_design(args)
        fig_schematic(schematic, outdir / "design_schematic.png", title=design_id)
        written.append("design_schematic.png")

    for name in written:
        print(outdir / name)
    return 0


def _cmd_repro_tables(args) -> int:
    from .report import (
        fig_event_study,
        fig_power_comparison,
        fig_schematic,
        format_table,
        write_matched_pairs_table,
        write_parameter_table,
        write_power_table,
    )

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    designs = builtin_designs()
    specs = {
        d: PowerSpec(delta=DEFAULT_EFFECT, vc=DESIGN_PARAMETERS[d], alpha=DEFAULT_ALPHA)
        for d in designs
    }
    calibration = calibrate_excluded(designs, specs, TARGET_POWERS)
    policy = calibration.selected or min(
        calibration.max_abs_deviation, key=calibration.max_abs_deviation.get
    )
    results = [
        analytic_power(designs[d], specs[d], policy, design_id=d) for d in designs
    ]

    write_power_table(results, TARGET_POWERS, outdir / "table_power.csv")
    written.append("table_power.csv")
    rows = [
        [r.design_id, f"{r.spec.vc.sigma2_marginal:.2f}", f"{r.spec.vc.icc:.2f}",
         f"{r.power:.3f}", f"{TARGET_POWERS[r.design_id]:.2f}"]
        for r in results
    ]
    with atomic_write(outdir / "table_power.txt") as fh:
        fh.write(
            format_table(
                ["design", "sigma2_marg", "icc", "power", "published"], rows
            )
            + f"\n\nexcluded-cell policy: {policy}\n"
        )
    written.append("table_power.txt")
    with atomic_write(outdir / "calibration.json") as fh:
        fh.write(json.dumps(_stamp(calibration.to_dict()), indent=2) + "\n")
    written.append("calibration.json")

    for d, schematic in designs.items():
        fig_schematic(schematic, outdir / f"schematic_{d}.png", title=d)
        written.append(f"schematic_{d}.png")
    fig_power_comparison(results, TARGET_POWERS, outdir / "power_comparison.png")
    written.append("power_comparison.png")

    if args.panel and args.covariates:
        panel = _load_panel(args)
        profiles = ingest_covariates_csv(_resolve(args, args.covariates))
        matches = match_controls(list(LOTTERY_STATES), list(NEVER_LOTTERY_STATES), profiles)
        write_matched_pairs_table(matches, profiles, outdir / "table_matched_pairs.csv")
        written.append("table_matched_pairs.csv")

        entries = []
        for d in (next(iter(designs)), list(designs)[1]):
            schematic = designs[d]
            control = select_records(panel, schematic, {CellStatus.CONTROL})
            fit = fit_interrupted_trend(control, args.changepoint)
            vc = fit_variance_components(control)
            first, last = schematic.periods[0], schematic.periods[-1]
            entries.append(
                {
                    "design_id": d,
                    "n_clusters": len(schematic.cluster_ids),
                    "n_cells": len(control),
                    "mean_start": fit.mean(first),
                    "mean_end": fit.mean(last),
                    "changepoint": args.changepoint,
                    "tau2": vc.tau2,
                    "sigma2_resid": vc.sigma2_resid,
                    "sigma2_marginal": vc.sigma2_marginal,
                    "icc": vc.icc,
                }
            )
        write_parameter_table(entries, outdir / "table_parameters.csv")
        written.append("table_parameters.csv")

        full = designs[next(iter(designs))]
        grid = estimate_att_gt(panel, full, mode="unadjusted", strict=False)
        fig_event_study(grid, outdir / "event_study.png", title="group-time effects")
        written.append("event_study.png")

    with atomic_write(outdir / "run_metadata.json") as fh:
        fh.write(
            json.dumps(
                _stamp(
                    {
                        "excluded_policy": policy,
                        "inputs": {
                            "panel": str(args.panel) if args.panel else None,
                            "covariates": str(args.covariates) if args.covariates else None,
                        },
                        "files": written,
                    }
                ),
                indent=2,
            )
            + "\n"
        )
    written.append("run_metadata.json")
    for name in written:
        print(outdir / name)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_design_arg(p, required: bool = True):
    p.add_argument(
        "--design",
        required=required,
        help=f"design CSV path or one of: {', '.join(DESIGN_IDS)}",
    )


def _add_panel_args(p):
    p.add_argument("--panel", required=True, help="cluster-period outcome CSV")
    p.add_argument("--covariates", help="cluster covariate CSV")
    p.add_argument("--covariate-week", type=int, default=None)
    p.add_argument(
        "--allow-out-of-range",
        action="store_true",
        help="accept outcomes outside [0, 100] (simulated panels)",
    )


def _add_format_arg(p, default="json", choices=("json", "csv", "text")):
    p.add_argument("--format", choices=list(choices), default=default)
    p.add_argument("--out", help="write output to this file instead of stdout")


def _add_estimator_args(p):
    p.add_argument("--estimator", choices=["att_gt", "mixed_model"], default="att_gt")
    p.add_argument("--mode", choices=list(ATT_MODES), default="doubly_robust")
    p.add_argument("--covariate", choices=list(COVARIATE_FIELDS), default=None)
    p.add_argument("--anticipation", type=int, default=1)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--group-weighting", choices=["equal", "size"], default="equal")
    p.add_argument("--lenient", action="store_true", help="skip, rather than fail on, empty cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wedgelab",
        description="Stepped-wedge designs, power, and staggered-adoption analysis.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="sectioned key-value config file")
    parser.add_argument("--data-dir", default=None, help="directory searched for bare input filenames")
    sub = parser.add_subparsers(dest="command", required=True)

    # design
    p_design = sub.add_parser("design", help="build, restrict, render, group design schematics")
    design_sub = p_design.add_subparsers(dest="subcommand", required=True)

    p = design_sub.add_parser("build", help="build a schematic from an announcements CSV")
    p.add_argument("--announcements", help="CSV: cluster,announce_week (blank week = never)")
    p.add_argument("--builtin", choices=list(DESIGN_IDS), help="use a built-in design instead")
    p.add_argument("--start", type=int, help="first study week")
    p.add_argument("--end", type=int, help="last study week")
    p.add_argument("--n-excluded", type=int, default=1)
    _add_format_arg(p, default="csv")
    p.set_defaults(func=_cmd_design_build)

    p = design_sub.add_parser("restrict", help="keep a subset of clusters")
    _add_design_arg(p)
    p.add_argument("--keep", required=True, help="comma-separated cluster ids")
    _add_format_arg(p, default="csv")
    p.set_defaults(func=_cmd_design_restrict)

    p = design_sub.add_parser("render", help="ASCII-render a schematic")
    _add_design_arg(p)
    _add_format_arg(p, default="text", choices=("text", "json"))
    p.set_defaults(func=_cmd_design_render)

    p = design_sub.add_parser("groups", help="adoption-timing groups and never-exposed set")
    _add_design_arg(p)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_design_groups)

    # match
    p = sub.add_parser("match", help="greedy covariate matching of controls to treated")
    p.add_argument("--covariates", required=True)
    p.add_argument("--treated", required=True, help="comma-separated cluster ids")
    p.add_argument("--pool", required=True, help="comma-separated candidate controls")
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--standardize", action="store_true")
    _add_format_arg(p, default="csv")
    p.set_defaults(func=_cmd_match)

    # estimate
    p_est = sub.add_parser("estimate", help="trend and variance components from control cells")
    est_sub = p_est.add_subparsers(dest="subcommand", required=True)

    p = est_sub.add_parser("trend", help="interrupted linear trend on control cells")
    _add_design_arg(p)
    _add_panel_args(p)
    p.add_argument("--changepoint", type=int, default=DEFAULT_CHANGEPOINT)
    p.add_argument("--mode", choices=["hinge", "segmented"], default="hinge")
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_estimate_trend)

    p = est_sub.add_parser("vc", help="REML variance components on control cells")
    _add_design_arg(p)
    _add_panel_args(p)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_estimate_vc)

    # power
    p_power = sub.add_parser("power", help="analytic and simulated treatment-test power")
    power_sub = p_power.add_subparsers(dest="subcommand", required=True)

    def _power_common(p):
        _add_design_arg(p)
        p.add_argument("--sigma2", type=float, required=True, help="marginal variance")
        p.add_argument("--icc", type=float, required=True)
        p.add_argument("--delta", type=float, required=True, help="effect per exposed week")
        p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        p.add_argument(
            "--excluded-policy",
            choices=list(EXCLUDED_POLICIES),
            default="as_exposed",
            help="washed-out cell coding; default is the policy selected by calibrate-excluded",
        )

    p = power_sub.add_parser("analytic", help="closed-form GLS power")
    _power_common(p)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_power_analytic)

    p = power_sub.add_parser("simulate", help="Monte Carlo power")
    _power_common(p)
    p.add_argument("--n-sims", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--vc-mode", choices=["reml", "known"], default="reml")
    p.add_argument("--trend", choices=["declining", "flat"], default="declining")
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_power_simulate)

    p = power_sub.add_parser(
        "calibrate-excluded",
        help="score every washed-out-cell policy against the published powers",
    )
    p.add_argument("--delta", type=float, default=DEFAULT_EFFECT)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--tolerance", type=float, default=0.02)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_power_calibrate)

    # did
    p_did = sub.add_parser("did", help="group-time effects and inference")
    did_sub = p_did.add_subparsers(dest="subcommand", required=True)

    p = did_sub.add_parser("attgt", help="group-time effect grid")
    _add_design_arg(p)
    _add_panel_args(p)
    p.add_argument("--mode", choices=list(ATT_MODES), default="doubly_robust")
    p.add_argument("--covariate", choices=list(COVARIATE_FIELDS), default=None)
    p.add_argument("--anticipation", type=int, default=1)
    p.add_argument("--lenient", action="store_true")
    _add_format_arg(p, default="csv")
    p.set_defaults(func=_cmd_did_attgt)

    p = did_sub.add_parser("aggregate", help="average effects over the horizon")
    _add_design_arg(p, required=False)
    p.add_argument("--panel")
    p.add_argument("--covariates")
    p.add_argument("--covariate-week", type=int, default=None)
    p.add_argument("--allow-out-of-range", action="store_true")
    p.add_argument("--att-grid", help="aggregate a previously written effect-grid CSV")
    p.add_argument("--mode", choices=list(ATT_MODES), default="doubly_robust")
    p.add_argument("--covariate", choices=list(COVARIATE_FIELDS), default=None)
    p.add_argument("--anticipation", type=int, default=1)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--group-weighting", choices=["equal", "size"], default="equal")
    p.add_argument("--lenient", action="store_true")
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_did_aggregate)

    p = did_sub.add_parser("bootstrap", help="cluster bootstrap percentile interval")
    _add_design_arg(p)
    _add_panel_args(p)
    _add_estimator_args(p)
    p.add_argument("-B", "--n-boot", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ci-level", type=float, default=0.95)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_did_bootstrap)

    p = did_sub.add_parser("placebo", help="pre-adoption placebo effects with intervals")
    _add_design_arg(p)
    _add_panel_args(p)
    p.add_argument("--mode", choices=list(ATT_MODES), default="doubly_robust")
    p.add_argument("--covariate", choices=list(COVARIATE_FIELDS), default=None)
    p.add_argument("--anticipation", type=int, default=1)
    p.add_argument("-B", "--n-boot", type=int, default=500)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--max-pre", type=int, default=None)
    _add_format_arg(p, default="json")
    p.set_defaults(func=_cmd_did_placebo)

    # trial
    p_trial = sub.add_parser("trial", help="trial-style mixed-model analysis")
    trial_sub = p_trial.add_subparsers(dest="subcommand", required=True)

    p = trial_sub.add_parser("fit", help="random-intercept exposure-time model")
    _add_design_arg(p)
    _add_panel_args(p)
    p.add_argument("--horizon", type=int, default=3)
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_trial_fit)

    p = trial_sub.add_parser("permute", help="randomization test over adoption assignments")
    _add_design_arg(p)
    _add_panel_args(p)
    _add_estimator_args(p)
    p.add_argument("--n-perms", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--perm-mode", choices=["sampled", "exhaustive"], default="sampled")
    _add_format_arg(p, default="json", choices=("json", "text"))
    p.set_defaults(func=_cmd_trial_permute)

    # protocol
    p_proto = sub.add_parser("protocol", help="validate and report emulation protocols")
    proto_sub = p_proto.add_subparsers(dest="subcommand", required=True)

    p = proto_sub.add_parser("validate", help="parse and optionally consistency-check")
    p.add_argument("--protocol", required=True)
    _add_design_arg(p, required=False)
    p.add_argument("--panel")
    p.add_argument("--covariates")
    p.add_argument("--covariate-week", type=int, default=None)
    p.add_argument("--allow-out-of-range", action="store_true")
    _add_format_arg(p, default="text", choices=("text", "json"))
    p.set_defaults(func=_cmd_protocol_validate)

    p = proto_sub.add_parser("report", help="write the comparison table, JSON, and figures")
    p.add_argument("--protocol", required=True)
    p.add_argument("--outdir", required=True)
    _add_design_arg(p, required=False)
    p.set_defaults(func=_cmd_protocol_report)

    # repro
    p_repro = sub.add_parser("repro", help="reproduce the published tables and figures")
    repro_sub = p_repro.add_subparsers(dest="subcommand", required=True)

    p = repro_sub.add_parser("tables", help="power/parameter/matching tables plus figures")
    p.add_argument("--outdir", required=True)
    p.add_argument("--panel", help="collated outcome CSV (optional; enables the data tables)")
    p.add_argument("--covariates", help="covariate CSV (optional)")
    p.add_argument("--covariate-week", type=int, default=None)
    p.add_argument("--allow-out-of-range", action="store_true")
    p.add_argument("--changepoint", type=int, default=DEFAULT_CHANGEPOINT)
    p.set_defaults(func=_cmd_repro_tables)

    return parser


if __name__ == "__main__":
    raise SystemExit(main())

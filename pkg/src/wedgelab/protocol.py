"""Structured emulation protocols: parse, render, consistency-check.

A protocol file is a versioned, sectioned key-value document describing
the same eight components twice: once for the hypothetical randomized
trial and once for the observational emulation.  Sections are named
``[column.component]`` with column in {target_trial, emulation} and
component one of

    eligibility, treatment_strategies, assignment, follow_up,
    outcomes, causal_contrast, identifying_assumptions, analysis_plan.

Free-text values are preserved verbatim; a small set of keys is also
machine-readable (thresholds, week ranges, estimand, registry ids) and
drives the consistency checks against a design schematic and panel.

Validation is total: any input yields either a document or a list of
diagnostics, never a crash, and consistency problems come back as
ordered diagnostics rather than exceptions.
"""

from __future__ import annotations

import textwrap
from dataclasses import dataclass
from typing import Sequence

from .design import CellStatus, DesignSchematic, timing_groups
from .ioutil import atomic_write, open_text_source
from .panel import PanelDataset

PROTOCOL_VERSION = 1

COMPONENTS = (
    "eligibility",
    "treatment_strategies",
    "assignment",
    "follow_up",
    "outcomes",
    "causal_contrast",
    "identifying_assumptions",
    "analysis_plan",
)
COMPONENT_NUMBER = {name: k + 1 for k, name in enumerate(COMPONENTS)}
COMPONENT_TITLES = {
    "eligibility": "Eligibility criteria",
    "treatment_strategies": "Treatment strategies",
    "assignment": "Assignment procedures",
    "follow_up": "Follow-up period",
    "outcomes": "Outcomes",
    "causal_contrast": "Causal contrast",
    "identifying_assumptions": "Identifying assumptions",
    "analysis_plan": "Analysis plan",
}

COLUMNS = ("target_trial", "emulation")
COLUMN_TITLES = {
    "target_trial": "Hypothetical Target Trial",
    "emulation": "Observational Study Analog/Emulation",
}

#: Known keys per component; anything else is rejected with its location.
COMPONENT_KEYS = {
    "eligibility": ("units", "threshold_pct", "as_of_week", "exclusions", "text"),
    "treatment_strategies": ("exposed", "control", "text"),
    "assignment": ("design_type", "exchangeability", "text"),
    "follow_up": ("time_scale", "study_start", "study_end", "excluded_weeks", "text"),
    "outcomes": ("measure", "aggregation", "text"),
    "causal_contrast": ("estimand", "horizon", "group_weighting", "scale", "text"),
    "identifying_assumptions": ("flags", "text"),
    "analysis_plan": ("estimator", "inference", "text"),
}

ESTIMAND_FAMILIES = ("ATE", "ATT", "other")

ESTIMATOR_REGISTRY = frozenset(
    {
        "att_gt_unadjusted",
        "att_gt_outcome_regression",
        "att_gt_ipw",
        "att_gt_doubly_robust",
        "mixed_model_exposure_time",
    }
)
INFERENCE_REGISTRY = frozenset(
    {
        "cluster_bootstrap",
        "permutation",
        "placebo_pretrends",
        "model_wald",
        "analytic_power",
        "simulated_power",
    }
)
ASSUMPTION_FLAGS = frozenset(
    {
        "randomization",
        "parallel_trends",
        "no_anticipation",
        "limited_anticipation",
        "no_spillover",
        "no_interference",
        "positivity",
        "consistency",
        "random_timing",
    }
)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    component: int | None
    message: str
    line: int | None = None

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "component": self.component,
            "message": self.message,
            "line": self.line,
        }

    def __str__(self) -> str:
        where = f" [component {self.component}]" if self.component else ""
        at = f" (line {self.line})" if self.line else ""
        return f"{self.severity}{where}: {self.message}{at}"


class ProtocolError(ValueError):
    def __init__(self, message: str, diagnostics: Sequence[Diagnostic] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True)
class ColumnChecks:
    """Machine-readable fields extracted from one protocol column."""

    units: str | None = None
    threshold_pct: float | None = None
    as_of_week: int | None = None
    exclusions: tuple[str, ...] = ()
    exposed: str | None = None
    control: str | None = None
    design_type: str | None = None
    exchangeability: str | None = None
    time_scale: str | None = None
    study_start: int | None = None
    study_end: int | None = None
    excluded_weeks: int | None = None
    measure: str | None = None
    aggregation: str | None = None
    estimand: str | None = None
    horizon: int | None = None
    group_weighting: str | None = None
    scale: str | None = None
    flags: tuple[str, ...] = ()
    estimator: str | None = None
    inference: tuple[str, ...] = ()


@dataclass(frozen=True)
class ProtocolDoc:
    """Parsed protocol: verbatim blocks plus typed views per column."""

    version: int
    blocks: tuple[tuple[str, str, tuple[tuple[str, str], ...]], ...]
    target_trial: ColumnChecks
    emulation: ColumnChecks

    def block(self, column: str, component: str) -> dict[str, str]:
        for col, comp, items in self.blocks:
            if col == column and comp == component:
                return dict(items)
        raise KeyError((column, component))

    def column(self, name: str) -> ColumnChecks:
        if name == "target_trial":
            return self.target_trial
        if name == "emulation":
            return self.emulation
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "protocol_version": self.version,
            "components": {
                col: {comp: dict(self.block(col, comp)) for comp in COMPONENTS}
                for col in COLUMNS
            },
        }


# ---------------------------------------------------------------------------
# parsing


def validate_protocol(source) -> tuple[ProtocolDoc | None, list[Diagnostic]]:
    """Total parse: returns (doc, diagnostics); doc is None on errors."""
    try:
        if isinstance(source, bytes):
            text = source.decode("utf-8", errors="strict")
        else:
            fh = open_text_source(source)
            text = fh.read()
    except (UnicodeDecodeError, FileNotFoundError, OSError) as exc:
        return None, [Diagnostic("error", None, f"could not read protocol: {exc}")]
    return _parse_text(text)


def parse_protocol(source) -> ProtocolDoc:
    """Parse a protocol file; raise ProtocolError carrying diagnostics."""
    doc, diags = validate_protocol(source)
    if doc is None:
        errors = [d for d in diags if d.severity == "error"]
        summary = "; ".join(str(d) for d in errors[:3])
        if len(errors) > 3:
            summary += f"; and {len(errors) - 3} more"
        raise ProtocolError(f"invalid protocol: {summary}", diags)
    return doc


def _parse_text(text: str) -> tuple[ProtocolDoc | None, list[Diagnostic]]:
    diags: list[Diagnostic] = []
    version: int | None = None
    raw: dict[str, dict[str, dict[str, str]]] = {c: {} for c in COLUMNS}
    key_lines: dict[tuple[str, str, str], int] = {}
    current: tuple[str, str] | None = None

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            inner = stripped[1:-1].strip()
            if "." not in inner:
                diags.append(Diagnostic("error", None, f"malformed section header {stripped!r}", lineno))
                current = None
                continue
            col, comp = inner.split(".", 1)
            if col not in COLUMNS:
                diags.append(Diagnostic("error", None, f"unknown column {col!r} in section header", lineno))
                current = None
                continue
            if comp not in COMPONENTS:
                diags.append(Diagnostic("error", None, f"unknown component {comp!r} in section header", lineno))
                current = None
                continue
            if comp in raw[col]:
                diags.append(
                    Diagnostic("error", COMPONENT_NUMBER[comp], f"duplicate section [{col}.{comp}]", lineno)
                )
                current = None
                continue
            raw[col][comp] = {}
            current = (col, comp)
            continue
        if "=" not in stripped:
            diags.append(Diagnostic("error", None, f"expected 'key = value', got {stripped!r}", lineno))
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if current is None:
            if key == "protocol_version":
                if version is not None:
                    diags.append(Diagnostic("error", None, "duplicate protocol_version", lineno))
                try:
                    version = int(value)
                except ValueError:
                    diags.append(Diagnostic("error", None, f"protocol_version {value!r} is not an integer", lineno))
                continue
            diags.append(
                Diagnostic("error", None, f"key {key!r} appears before any section header", lineno)
            )
            continue
        col, comp = current
        if key not in COMPONENT_KEYS[comp]:
            diags.append(
                Diagnostic(
                    "error",
                    COMPONENT_NUMBER[comp],
                    f"unknown key {key!r} in [{col}.{comp}] "
                    f"(known: {', '.join(COMPONENT_KEYS[comp])})",
                    lineno,
                )
            )
            continue
        if key in raw[col][comp]:
            diags.append(
                Diagnostic("error", COMPONENT_NUMBER[comp], f"duplicate key {key!r} in [{col}.{comp}]", lineno)
            )
            continue
        raw[col][comp][key] = value
        key_lines[(col, comp, key)] = lineno

    if version is None:
        diags.append(Diagnostic("error", None, "file header is missing 'protocol_version'"))
    elif version != PROTOCOL_VERSION:
        diags.append(Diagnostic("error", None, f"unsupported protocol_version {version} (supported: {PROTOCOL_VERSION})"))

    for col in COLUMNS:
        for comp in COMPONENTS:
            if comp not in raw[col]:
                diags.append(
                    Diagnostic("error", COMPONENT_NUMBER[comp], f"{col} column missing: {comp}")
                )

    if any(d.severity == "error" for d in diags):
        return None, diags

    checks = {}
    for col in COLUMNS:
        checks[col] = _typed_column(col, raw[col], key_lines, diags)
    if any(d.severity == "error" for d in diags):
        return None, diags

    blocks = tuple(
        (col, comp, tuple(raw[col][comp].items()))
        for comp in COMPONENTS
        for col in COLUMNS
    )
    doc = ProtocolDoc(
        version=version,
        blocks=blocks,
        target_trial=checks["target_trial"],
        emulation=checks["emulation"],
    )
    return doc, diags


def _typed_column(col, blocks, key_lines, diags) -> ColumnChecks:
    def get(comp, key):
        return blocks[comp].get(key)

    def line(comp, key):
        return key_lines.get((col, comp, key))

    def want_int(comp, key, lo=None):
        rawv = get(comp, key)
        if rawv is None:
            return None
        try:
            v = int(rawv)
        except ValueError:
            diags.append(
                Diagnostic("error", COMPONENT_NUMBER[comp], f"{col}: {key} {rawv!r} is not an integer", line(comp, key))
            )
            return None
        if lo is not None and v < lo:
            diags.append(
                Diagnostic("error", COMPONENT_NUMBER[comp], f"{col}: {key} must be >= {lo}, got {v}", line(comp, key))
            )
            return None
        return v

    def want_float(comp, key):
        rawv = get(comp, key)
        if rawv is None:
            return None
        try:
            return float(rawv)
        except ValueError:
            diags.append(
                Diagnostic("error", COMPONENT_NUMBER[comp], f"{col}: {key} {rawv!r} is not numeric", line(comp, key))
            )
            return None

    def want_list(comp, key):
        rawv = get(comp, key)
        if rawv is None or not rawv.strip():
            return ()
        return tuple(part.strip() for part in rawv.split(",") if part.strip())

    start = want_int("follow_up", "study_start")
    end = want_int("follow_up", "study_end")
    if start is not None and end is not None and start > end:
        diags.append(
            Diagnostic(
                "error",
                COMPONENT_NUMBER["follow_up"],
                f"{col}: malformed follow-up range {start}..{end} (start after end)",
                line("follow_up", "study_start"),
            )
        )
    for required_key, comp in (("study_start", "follow_up"), ("study_end", "follow_up"),
                               ("estimand", "causal_contrast"), ("estimator", "analysis_plan"),
                               ("inference", "analysis_plan")):
        if get(comp, required_key) is None:
            diags.append(
                Diagnostic("error", COMPONENT_NUMBER[comp], f"{col}: required key {required_key!r} missing")
            )

    estimand = get("causal_contrast", "estimand")
    if estimand is not None and estimand not in ESTIMAND_FAMILIES:
        diags.append(
            Diagnostic(
                "error",
                COMPONENT_NUMBER["causal_contrast"],
                f"{col}: estimand {estimand!r} not one of {'/'.join(ESTIMAND_FAMILIES)}",
                line("causal_contrast", "estimand"),
            )
        )

    flags = want_list("identifying_assumptions", "flags")
    for fl in flags:
        if fl not in ASSUMPTION_FLAGS:
            diags.append(
                Diagnostic(
                    "error",
                    COMPONENT_NUMBER["identifying_assumptions"],
                    f"{col}: unknown assumption flag {fl!r}",
                    line("identifying_assumptions", "flags"),
                )
            )

    estimator = get("analysis_plan", "estimator")
    if estimator is not None and estimator not in ESTIMATOR_REGISTRY:
        diags.append(
            Diagnostic(
                "error",
                COMPONENT_NUMBER["analysis_plan"],
                f"{col}: unknown estimator id {estimator!r} "
                f"(registry: {', '.join(sorted(ESTIMATOR_REGISTRY))})",
                line("analysis_plan", "estimator"),
            )
        )
    inference = want_list("analysis_plan", "inference")
    for inf in inference:
        if inf not in INFERENCE_REGISTRY:
            diags.append(
                Diagnostic(
                    "error",
                    COMPONENT_NUMBER["analysis_plan"],
                    f"{col}: unknown inference id {inf!r} "
                    f"(registry: {', '.join(sorted(INFERENCE_REGISTRY))})",
                    line("analysis_plan", "inference"),
                )
            )

    return ColumnChecks(
        units=get("eligibility", "units"),
        threshold_pct=want_float("eligibility", "threshold_pct"),
        as_of_week=want_int("eligibility", "as_of_week"),
        exclusions=want_list("eligibility", "exclusions"),
        exposed=get("treatment_strategies", "exposed"),
        control=get("treatment_strategies", "control"),
        design_type=get("assignment", "design_type"),
        exchangeability=get("assignment", "exchangeability"),
        time_scale=get("follow_up", "time_scale"),
        study_start=start,
        study_end=end,
        excluded_weeks=want_int("follow_up", "excluded_weeks", lo=0),
        measure=get("outcomes", "measure"),
        aggregation=get("outcomes", "aggregation"),
        estimand=estimand,
        horizon=want_int("causal_contrast", "horizon", lo=1),
        group_weighting=get("causal_contrast", "group_weighting"),
        scale=get("causal_contrast", "scale"),
        flags=flags,
        estimator=estimator,
        inference=inference,
    )


# ---------------------------------------------------------------------------
# emission


def emit_source(doc: ProtocolDoc) -> str:
    """Canonical file form; parsing it reproduces the document."""
    lines = [f"protocol_version = {doc.version}", ""]
    for comp in COMPONENTS:
        for col in COLUMNS:
            lines.append(f"[{col}.{comp}]")
            block = doc.block(col, comp)
            for key in COMPONENT_KEYS[comp]:
                if key in block:
                    lines.append(f"{key} = {block[key]}")
            lines.append("")
    return "\n".join(lines)


def write_protocol(doc: ProtocolDoc, path) -> None:
    with atomic_write(path) as fh:
        fh.write(emit_source(doc))


def emit_comparison(doc: ProtocolDoc, width: int = 34) -> str:
    """Two-column, eight-row comparison table of the protocol."""
    label_width = max(len(f"{COMPONENT_NUMBER[c]}. {COMPONENT_TITLES[c]}") for c in COMPONENTS)
    header = (
        f"{'Component':<{label_width}} | "
        f"{COLUMN_TITLES['target_trial']:<{width}} | "
        f"{COLUMN_TITLES['emulation']}"
    )
    rule = "-" * label_width + "-+-" + "-" * width + "-+-" + "-" * width
    lines = [header, rule]
    for comp in COMPONENTS:
        cells = {}
        for col in COLUMNS:
            block = doc.block(col, comp)
            parts = []
            for key in COMPONENT_KEYS[comp]:
                if key in block and block[key] != "":
                    parts.append(block[key] if key == "text" else f"{key}={block[key]}")
            wrapped: list[str] = []
            for part in parts:
                wrapped.extend(textwrap.wrap(part, width=width) or [""])
            cells[col] = wrapped or [""]
        label = f"{COMPONENT_NUMBER[comp]}. {COMPONENT_TITLES[comp]}"
        height = max(len(cells["target_trial"]), len(cells["emulation"]))
        for r in range(height):
            left = cells["target_trial"][r] if r < len(cells["target_trial"]) else ""
            right = cells["emulation"][r] if r < len(cells["emulation"]) else ""
            row_label = label if r == 0 else ""
            lines.append(f"{row_label:<{label_width}} | {left:<{width}} | {right}")
        lines.append(rule)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# consistency checks


def check_consistency(
    doc: ProtocolDoc,
    schematic: DesignSchematic,
    panel: PanelDataset,
) -> list[Diagnostic]:
    """Compare the emulation column against the design and data.

    Checks, in component order: eligibility of every design cluster
    against the covariate data (1); positivity (3); follow-up range and
    washout rule agreement (4); horizon attainability per adoption group
    (6); and assumption-flag cautions (7).  Problems come back as
    diagnostics, never exceptions.
    """
    em = doc.emulation
    diags: list[Diagnostic] = []

    # (1) eligibility against covariate data
    if em.threshold_pct is None:
        diags.append(Diagnostic("warning", 1, "no eligibility threshold declared; eligibility not checked"))
    elif not panel.covariates:
        diags.append(Diagnostic("error", 1, "panel has no covariate profiles; eligibility cannot be verified"))
    else:
        cov = panel.covariate_map()
        if em.as_of_week is not None and panel.covariate_week is not None and em.as_of_week != panel.covariate_week:
            diags.append(
                Diagnostic(
                    "error",
                    1,
                    f"eligibility is declared as of week {em.as_of_week} but covariates were "
                    f"measured in week {panel.covariate_week}",
                )
            )
        for cid in schematic.cluster_ids:
            prof = cov.get(cid)
            if prof is None:
                diags.append(Diagnostic("error", 1, f"no covariate profile for design cluster {cid!r}"))
                continue
            if prof.already_vaccinated_pct >= em.threshold_pct:
                diags.append(
                    Diagnostic(
                        "error",
                        1,
                        f"cluster {cid!r} fails eligibility: coverage "
                        f"{prof.already_vaccinated_pct} >= threshold {em.threshold_pct}",
                    )
                )
            if cid in em.exclusions:
                diags.append(
                    Diagnostic("error", 1, f"cluster {cid!r} is in the design but named in the exclusion list")
                )

    # (3) positivity
    counts = schematic.status_counts()
    if counts[CellStatus.EXPOSED] == 0 or counts[CellStatus.CONTROL] == 0:
        diags.append(Diagnostic("error", 3, "positivity violated: design lacks exposed or control cells"))

    # (4) follow-up range and washout rule
    if em.study_start is not None and em.study_end is not None:
        declared = tuple(range(em.study_start, em.study_end + 1))
        if declared != schematic.periods:
            diags.append(
                Diagnostic(
                    "error",
                    4,
                    f"protocol follow-up weeks {em.study_start}..{em.study_end} do not match "
                    f"the design's weeks {schematic.periods[0]}..{schematic.periods[-1]}",
                )
            )
    if em.excluded_weeks is not None:
        for seq in schematic.rows:
            if seq.announcement_period is None:
                continue
            if seq.n_excluded != em.excluded_weeks:
                diags.append(
                    Diagnostic(
                        "error",
                        4,
                        f"cluster {seq.cluster_id!r} washes out {seq.n_excluded} week(s) but the "
                        f"protocol declares {em.excluded_weeks}",
                    )
                )

    # (6) horizon attainability
    horizon = em.horizon if em.horizon is not None else 3
    groups = timing_groups(schematic)
    attainable = False
    for g, members in groups.groups.items():
        durations = {
            cid: sum(
                1
                for st in schematic.grid[schematic.row_index(cid)]
                if st is CellStatus.EXPOSED
            )
            for cid in members
        }
        longest = max(durations.values())
        if longest >= horizon:
            attainable = True
        else:
            diags.append(
                Diagnostic(
                    "warning",
                    6,
                    f"adoption group first exposed in week {g} ({', '.join(sorted(members))}): "
                    f"only {longest} post-adoption week(s) observed for a horizon of {horizon}",
                )
            )
    if groups.groups and not attainable:
        diags.append(
            Diagnostic("error", 6, f"no adoption group observes {horizon} post-adoption weeks; horizon unattainable")
        )

    # (7) assumption-flag cautions
    if "parallel_trends" not in em.flags and "randomization" not in em.flags:
        diags.append(
            Diagnostic(
                "warning",
                7,
                "emulation declares neither parallel_trends nor randomization; "
                "the comparison has no stated identification basis",
            )
        )
    if not groups.never and groups.groups:
        spread = max(groups.groups) - min(groups.groups)
        if horizon > spread:
            diags.append(
                Diagnostic(
                    "warning",
                    7,
                    f"timing-only design: horizon {horizon} exceeds the {spread}-week adoption "
                    "spread, so late post-adoption weeks have no concurrent comparator",
                )
            )

    diags.sort(key=lambda d: (d.component if d.component is not None else 0))
    return diags

"""Cluster-period panel data: ingestion, eligibility, matched controls.

The unit of observation is one cluster in one week.  Outcomes are
percentages on their natural 0..100 scale; cluster-level covariates are a
fixed trio measured in a single snapshot week (cumulative first-dose
coverage, share of the population already excluded from persuasion, and
share considered persuadable).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .design import CellStatus, DesignSchematic
from .ioutil import atomic_write, open_text_source


class DataError(ValueError):
    """Raised for malformed or inconsistent panel inputs."""


@dataclass(frozen=True)
class PanelRecord:
    """One cluster-week outcome; ``outcome`` may be NaN for declared-missing."""

    cluster_id: str
    period: int
    outcome: float


#: Names of the cluster-level covariates, in canonical order.
COVARIATE_FIELDS = ("already_vaccinated_pct", "excluded_pct", "persuadable_pct")


@dataclass(frozen=True)
class CovariateProfile:
    """Cluster-level covariate snapshot (all on the 0..100 scale).

    ``excluded_pct`` counts people unavailable to persuasion (vaccinated
    plus firmly opposed), so it can never fall below
    ``already_vaccinated_pct``.
    """

    cluster_id: str
    already_vaccinated_pct: float
    excluded_pct: float
    persuadable_pct: float

    def __post_init__(self):
        for name in COVARIATE_FIELDS:
            v = getattr(self, name)
            if not math.isfinite(v) or not (0.0 <= v <= 100.0):
                raise DataError(f"cluster {self.cluster_id!r}: {name}={v!r} outside [0, 100]")
        if self.excluded_pct < self.already_vaccinated_pct:
            raise DataError(
                f"cluster {self.cluster_id!r}: excluded_pct ({self.excluded_pct}) cannot be "
                f"below already_vaccinated_pct ({self.already_vaccinated_pct})"
            )

    def values(self) -> tuple[float, float, float]:
        return tuple(getattr(self, name) for name in COVARIATE_FIELDS)


@dataclass(frozen=True)
class PanelDataset:
    """Records plus optional covariate profiles and snapshot week."""

    records: tuple[PanelRecord, ...]
    covariates: tuple[CovariateProfile, ...] = ()
    covariate_week: int | None = None

    def __post_init__(self):
        seen: set[tuple[str, int]] = set()
        for rec in self.records:
            key = (rec.cluster_id, rec.period)
            if key in seen:
                raise DataError(f"duplicate record for cluster {rec.cluster_id!r}, period {rec.period}")
            seen.add(key)
        cov_ids = [c.cluster_id for c in self.covariates]
        if len(set(cov_ids)) != len(cov_ids):
            raise DataError("duplicate covariate profiles")

    @property
    def cluster_ids(self) -> tuple[str, ...]:
        out: list[str] = []
        for rec in self.records:
            if rec.cluster_id not in out:
                out.append(rec.cluster_id)
        return tuple(out)

    def outcome_map(self) -> dict[tuple[str, int], float]:
        return {(r.cluster_id, r.period): r.outcome for r in self.records}

    def covariate_map(self) -> dict[str, CovariateProfile]:
        return {c.cluster_id: c for c in self.covariates}

    def with_covariates(self, covariates: Sequence[CovariateProfile], week: int | None = None) -> "PanelDataset":
        return PanelDataset(self.records, tuple(covariates), week if week is not None else self.covariate_week)


# ---------------------------------------------------------------------------
# ingestion

PANEL_CSV_HEADER = ["cluster", "period", "outcome"]
COVARIATE_CSV_HEADER = ["cluster", *COVARIATE_FIELDS]
_MISSING_TOKENS = {"", "na", "nan", "null"}


def ingest_panel_csv(
    source,
    column_map: Mapping[str, str] | None = None,
    strict_bounds: bool = True,
) -> PanelDataset:
    """Read cluster-week outcomes from delimited text.

    *column_map* renames source columns, e.g. ``{"cluster": "state"}``
    maps the ``state`` column onto the ``cluster`` field.  Outcomes must
    be finite and, when *strict_bounds* is set (the default for observed
    percentage data), within [0, 100]; blank/NA outcome fields become
    declared-missing NaN records.  Errors name the offending row and
    column.
    """
    colmap = {"cluster": "cluster", "period": "period", "outcome": "outcome"}
    if column_map:
        unknown = set(column_map) - set(colmap)
        if unknown:
            raise DataError(f"column_map keys must be cluster/period/outcome, got {sorted(unknown)}")
        colmap.update(column_map)

    fh = open_text_source(source)
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("panel CSV is empty") from None
    idx: dict[str, int] = {}
    for fieldname, colname in colmap.items():
        if colname not in header:
            raise DataError(f"panel CSV missing required column {colname!r} (for {fieldname})")
        idx[fieldname] = header.index(colname)

    records: list[PanelRecord] = []
    seen: set[tuple[str, int]] = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) < len(header):
            raise DataError(f"panel CSV row {lineno}: expected {len(header)} fields, got {len(rec)}")
        cid = rec[idx["cluster"]].strip()
        if not cid:
            raise DataError(f"panel CSV row {lineno}: blank cluster id")
        period_s = rec[idx["period"]].strip()
        try:
            period = int(period_s)
        except ValueError:
            raise DataError(
                f"panel CSV row {lineno}, column {colmap['period']!r}: {period_s!r} is not an integer"
            ) from None
        outcome_s = rec[idx["outcome"]].strip()
        if outcome_s.lower() in _MISSING_TOKENS:
            outcome = math.nan
        else:
            try:
                outcome = float(outcome_s)
            except ValueError:
                raise DataError(
                    f"panel CSV row {lineno}, column {colmap['outcome']!r}: {outcome_s!r} is not numeric"
                ) from None
            if not math.isfinite(outcome):
                raise DataError(f"panel CSV row {lineno}: outcome must be finite, got {outcome_s!r}")
            if strict_bounds and not (0.0 <= outcome <= 100.0):
                raise DataError(
                    f"panel CSV row {lineno}: outcome {outcome!r} outside [0, 100] "
                    "(pass strict_bounds=False for unclipped simulated panels)"
                )
        key = (cid, period)
        if key in seen:
            raise DataError(f"panel CSV row {lineno}: duplicate record for cluster {cid!r}, period {period}")
        seen.add(key)
        records.append(PanelRecord(cid, period, outcome))
    return PanelDataset(tuple(records))


def panel_to_csv(panel: PanelDataset) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PANEL_CSV_HEADER)
    for rec in panel.records:
        out = "" if math.isnan(rec.outcome) else repr(rec.outcome)
        writer.writerow([rec.cluster_id, rec.period, out])
    return buf.getvalue()


def write_panel_csv(panel: PanelDataset, path) -> None:
    with atomic_write(path) as fh:
        fh.write(panel_to_csv(panel))


def ingest_covariates_csv(source, week: int | None = None) -> tuple[CovariateProfile, ...]:
    """Read cluster covariate profiles (``cluster``, then the three fields)."""
    fh = open_text_source(source)
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("covariate CSV is empty") from None
    idx: dict[str, int] = {}
    for colname in COVARIATE_CSV_HEADER:
        if colname not in header:
            raise DataError(f"covariate CSV missing required column {colname!r}")
        idx[colname] = header.index(colname)
    profiles: list[CovariateProfile] = []
    seen: set[str] = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        cid = rec[idx["cluster"]].strip()
        if cid in seen:
            raise DataError(f"covariate CSV row {lineno}: duplicate cluster id {cid!r}")
        seen.add(cid)
        vals = {}
        for name in COVARIATE_FIELDS:
            raw = rec[idx[name]].strip()
            try:
                vals[name] = float(raw)
            except ValueError:
                raise DataError(
                    f"covariate CSV row {lineno}, column {name!r}: {raw!r} is not numeric"
                ) from None
        try:
            profiles.append(CovariateProfile(cid, **vals))
        except DataError as exc:
            raise DataError(f"covariate CSV row {lineno}: {exc}") from None
    if not profiles:
        raise DataError("covariate CSV has no data rows")
    return tuple(profiles)


def covariates_to_csv(profiles: Sequence[CovariateProfile]) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COVARIATE_CSV_HEADER)
    for prof in profiles:
        writer.writerow([prof.cluster_id, *(repr(v) for v in prof.values())])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# selection helpers


def select_records(
    panel: PanelDataset,
    schematic: DesignSchematic,
    statuses: Iterable[CellStatus],
) -> list[PanelRecord]:
    """Records whose cell carries one of the given statuses.

    Declared-missing (NaN) records are dropped.  Records for clusters or
    periods outside the schematic are ignored.
    """
    wanted = set(statuses)
    cluster_set = set(schematic.cluster_ids)
    period_set = set(schematic.periods)
    out = []
    for rec in panel.records:
        if rec.cluster_id not in cluster_set or rec.period not in period_set:
            continue
        if math.isnan(rec.outcome):
            continue
        if schematic.status(rec.cluster_id, rec.period) in wanted:
            out.append(rec)
    return out


def apply_eligibility(
    panel: PanelDataset,
    threshold_pct: float,
    as_of: int,
    exclusions: Iterable[str] = (),
) -> set[str]:
    """Clusters whose cumulative coverage is strictly below the threshold.

    Coverage is the ``already_vaccinated_pct`` covariate; a cluster at
    exactly the threshold is NOT eligible.  *as_of* must match the
    dataset's declared covariate snapshot week when one is present.
    Clusters named in *exclusions* are removed regardless of coverage.
    """
    if not panel.covariates:
        raise DataError("eligibility requires covariate profiles on the panel")
    if panel.covariate_week is not None and panel.covariate_week != as_of:
        raise DataError(
            f"covariates were measured in week {panel.covariate_week}, not requested week {as_of}"
        )
    excluded = set(exclusions)
    cov = panel.covariate_map()
    missing = [cid for cid in panel.cluster_ids if cid not in cov]
    if missing:
        raise DataError(f"no covariate profile for cluster(s): {', '.join(sorted(missing))}")
    eligible = set()
    for cid, prof in cov.items():
        if cid in excluded:
            continue
        if prof.already_vaccinated_pct < threshold_pct:
            eligible.add(cid)
    return eligible


def match_controls(
    treated: Sequence[str],
    pool: Sequence[str],
    covariates: Sequence[CovariateProfile],
    with_replacement: bool = False,
    standardize: bool = False,
) -> dict[str, str]:
    """Greedy nearest-neighbour control matching on the covariate trio.

    Distance is the unstandardized sum of squared covariate differences
    (set *standardize* to scale each covariate by its pooled standard
    deviation first).  Treated clusters are matched in input order; by
    default each control is used at most once.  Ties are broken by pool
    order, with a warning.
    """
    cov = {c.cluster_id: c for c in covariates}
    for cid in list(treated) + list(pool):
        if cid not in cov:
            raise DataError(f"no covariate profile for cluster {cid!r}")
    overlap = set(treated) & set(pool)
    if overlap:
        raise DataError(f"cluster(s) in both treated and pool: {', '.join(sorted(overlap))}")
    if not with_replacement and len(pool) < len(treated):
        raise DataError(
            f"pool of {len(pool)} controls cannot cover {len(treated)} treated clusters without replacement"
        )

    scale = [1.0, 1.0, 1.0]
    if standardize:
        import statistics

        everyone = [cov[cid].values() for cid in list(treated) + list(pool)]
        for k in range(3):
            col = [v[k] for v in everyone]
            sd = statistics.pstdev(col)
            scale[k] = sd if sd > 0 else 1.0

    available = list(pool)
    matches: dict[str, str] = {}
    for t in treated:
        tv = cov[t].values()
        best: str | None = None
        best_d = math.inf
        tied = False
        for c in available:
            cv = cov[c].values()
            d = sum(((a - b) / s) ** 2 for a, b, s in zip(tv, cv, scale))
            if d < best_d - 1e-12:
                best, best_d, tied = c, d, False
            elif abs(d - best_d) <= 1e-12:
                tied = True
        if best is None:
            raise DataError(f"no control available for treated cluster {t!r}")
        if tied:
            warnings.warn(
                f"matching tie for treated cluster {t!r}; keeping first pool-order candidate {best!r}",
                stacklevel=2,
            )
        matches[t] = best
        if not with_replacement:
            available.remove(best)
    return matches


def matches_to_csv(matches: Mapping[str, str]) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["treated", "control"])
    for t, c in matches.items():
        writer.writerow([t, c])
    return buf.getvalue()

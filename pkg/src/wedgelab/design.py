"""Staggered-adoption design schematics.

A schematic is an immutable clusters-by-weeks grid of cell statuses.  Each
cluster either never adopts the intervention or announces it in some week;
the announcement week(s) can be washed out of the analysis as *excluded*
cells, after which the cluster is *exposed* through the end of the study.

Statuses per cell:

``Control``   pre-adoption observation time ('.')
``Exposed``   post-adoption observation time ('X')
``Excluded``  washed-out announcement week(s) ('~')
``Absent``    cell not in the design (used only by derived grids, ' ')

Every constructor enforces the structural rules: exposure is monotone
(once exposed, exposed through the end), excluded cells sit contiguously
at the announcement, and the grid retains at least one exposed cell and
at least one non-excluded control cell (positivity).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .ioutil import atomic_write, open_text_source


class CellStatus(Enum):
    CONTROL = "control"
    EXPOSED = "exposed"
    EXCLUDED = "excluded"
    ABSENT = "absent"


GLYPHS = {
    CellStatus.CONTROL: ".",
    CellStatus.EXPOSED: "X",
    CellStatus.EXCLUDED: "~",
    CellStatus.ABSENT: " ",
}
_GLYPH_TO_STATUS = {glyph: status for status, glyph in GLYPHS.items()}

#: Policies for folding Excluded cells into a two-arm exposure coding.
EXCLUDED_POLICIES = ("drop", "as_control", "as_exposed")


class DesignError(ValueError):
    """A schematic (or a request against one) violates the design rules."""


@dataclass(frozen=True)
class ClusterSequence:
    """One cluster's adoption sequence.

    ``announcement_period is None`` means the cluster never adopts.
    ``n_excluded`` counts washed-out weeks starting at the announcement;
    ``None`` defers to the builder's default.
    """

    cluster_id: str
    announcement_period: int | None = None
    n_excluded: int | None = None

    def __post_init__(self):
        if not self.cluster_id or not str(self.cluster_id).strip():
            raise DesignError("cluster_id must be a non-empty string")
        if self.n_excluded is not None and self.n_excluded < 0:
            raise DesignError(
                f"cluster {self.cluster_id!r}: n_excluded must be >= 0, got {self.n_excluded}"
            )


@dataclass(frozen=True)
class DesignSchematic:
    """Immutable clusters-by-weeks status grid."""

    periods: tuple[int, ...]
    rows: tuple[ClusterSequence, ...]
    grid: tuple[tuple[CellStatus, ...], ...]

    # -- basic accessors ------------------------------------------------

    @property
    def cluster_ids(self) -> tuple[str, ...]:
        return tuple(seq.cluster_id for seq in self.rows)

    def row_index(self, cluster_id: str) -> int:
        for i, seq in enumerate(self.rows):
            if seq.cluster_id == cluster_id:
                return i
        raise DesignError(f"unknown cluster id: {cluster_id!r}")

    def status(self, cluster_id: str, period: int) -> CellStatus:
        i = self.row_index(cluster_id)
        try:
            j = self.periods.index(period)
        except ValueError:
            raise DesignError(f"period {period} not in study range") from None
        return self.grid[i][j]

    def first_exposed(self, cluster_id: str) -> int | None:
        """First period with Exposed status, or None if never exposed."""
        i = self.row_index(cluster_id)
        for j, st in enumerate(self.grid[i]):
            if st is CellStatus.EXPOSED:
                return self.periods[j]
        return None

    def exposure_time(self, cluster_id: str, period: int) -> int:
        """Number of Exposed cells in the row up to and including *period*.

        Excluded cells do not advance exposure time.
        """
        i = self.row_index(cluster_id)
        try:
            j = self.periods.index(period)
        except ValueError:
            raise DesignError(f"period {period} not in study range") from None
        return sum(1 for st in self.grid[i][: j + 1] if st is CellStatus.EXPOSED)

    def status_counts(self) -> dict[CellStatus, int]:
        counts = {st: 0 for st in CellStatus}
        for row in self.grid:
            for st in row:
                counts[st] += 1
        return counts

    @property
    def n_cells(self) -> int:
        return len(self.rows) * len(self.periods)


@dataclass(frozen=True)
class TimingGroups:
    """Clusters keyed by first-exposed week, plus the never-exposed set."""

    groups: dict[int, set[str]]
    never: set[str]


# ---------------------------------------------------------------------------
# construction


def build_schematic(
    sequences: Sequence[ClusterSequence],
    study_range: tuple[int, int],
    n_excluded: int = 1,
) -> DesignSchematic:
    """Build a validated schematic from adoption sequences.

    *study_range* is an inclusive (first_week, last_week) pair of integer
    week numbers.  Each announcing cluster contributes ``Control`` cells
    before its announcement, ``n_excluded`` washed-out ``Excluded`` cells
    starting at the announcement, and ``Exposed`` cells through the end of
    the study.  A per-sequence ``n_excluded`` overrides the builder-wide
    default.
    """
    lo, hi = study_range
    if lo > hi:
        raise DesignError(f"empty study range {lo}..{hi}")
    if n_excluded < 0:
        raise DesignError(f"n_excluded must be >= 0, got {n_excluded}")
    periods = tuple(range(lo, hi + 1))

    seen: set[str] = set()
    rows: list[ClusterSequence] = []
    grid_rows: list[tuple[CellStatus, ...]] = []
    for seq in sequences:
        if seq.cluster_id in seen:
            raise DesignError(f"duplicate cluster id: {seq.cluster_id!r}")
        seen.add(seq.cluster_id)
        k = seq.n_excluded if seq.n_excluded is not None else n_excluded
        ann = seq.announcement_period
        if ann is not None and not (lo <= ann <= hi):
            raise DesignError(
                f"cluster {seq.cluster_id!r}: announcement week {ann} outside study range {lo}..{hi}"
            )
        row = []
        for week in periods:
            if ann is None or week < ann:
                row.append(CellStatus.CONTROL)
            elif week < ann + k:
                row.append(CellStatus.EXCLUDED)
            else:
                row.append(CellStatus.EXPOSED)
        rows.append(ClusterSequence(seq.cluster_id, ann, k))
        grid_rows.append(tuple(row))

    schematic = DesignSchematic(periods, tuple(rows), tuple(grid_rows))
    validate_schematic(schematic)
    return schematic


def validate_schematic(schematic: DesignSchematic) -> None:
    """Check the structural rules; raise DesignError on violation.

    Rules: grid shape matches periods/rows; statuses along each row follow
    the pattern Control* Excluded* Exposed* over the present (non-Absent)
    cells; any Excluded run is contiguous and starts at the row's
    announcement; and the grid keeps at least one Exposed and at least one
    non-Excluded Control cell (positivity).
    """
    n_p = len(schematic.periods)
    if len(schematic.grid) != len(schematic.rows):
        raise DesignError("grid/rows length mismatch")
    if list(schematic.periods) != sorted(set(schematic.periods)):
        raise DesignError("periods must be strictly increasing")
    if any(b - a != 1 for a, b in zip(schematic.periods, schematic.periods[1:])):
        raise DesignError("study periods must be contiguous integers")

    for seq, row in zip(schematic.rows, schematic.grid):
        if len(row) != n_p:
            raise DesignError(f"cluster {seq.cluster_id!r}: row length != number of periods")
        present = [(schematic.periods[j], st) for j, st in enumerate(row) if st is not CellStatus.ABSENT]
        phase = 0  # 0=control, 1=excluded, 2=exposed
        order = {CellStatus.CONTROL: 0, CellStatus.EXCLUDED: 1, CellStatus.EXPOSED: 2}
        for week, st in present:
            if order[st] < phase:
                raise DesignError(
                    f"cluster {seq.cluster_id!r}: {st.value} cell at week {week} "
                    "breaks the control/excluded/exposed ordering (exposure must be monotone)"
                )
            phase = order[st]
        excl_weeks = [w for w, st in present if st is CellStatus.EXCLUDED]
        if excl_weeks:
            if seq.announcement_period is None:
                raise DesignError(
                    f"cluster {seq.cluster_id!r}: excluded cells but no announcement week"
                )
            span = list(range(excl_weeks[0], excl_weeks[-1] + 1))
            if excl_weeks != span or excl_weeks[0] != seq.announcement_period:
                raise DesignError(
                    f"cluster {seq.cluster_id!r}: excluded cells must sit contiguously "
                    f"at the announcement week {seq.announcement_period}"
                )

    counts = schematic.status_counts()
    if counts[CellStatus.EXPOSED] == 0:
        raise DesignError("positivity violated: design has no Exposed cell")
    if counts[CellStatus.CONTROL] == 0:
        raise DesignError("positivity violated: design has no non-Excluded Control cell")


def restrict_clusters(schematic: DesignSchematic, keep: Iterable[str]) -> DesignSchematic:
    """Keep only the named clusters; row order and periods are unchanged."""
    keep_set = set(keep)
    known = set(schematic.cluster_ids)
    unknown = sorted(keep_set - known)
    if unknown:
        raise DesignError(f"unknown cluster ids in restriction: {', '.join(unknown)}")
    if not keep_set:
        raise DesignError("restriction would keep no clusters")
    idx = [i for i, seq in enumerate(schematic.rows) if seq.cluster_id in keep_set]
    restricted = DesignSchematic(
        schematic.periods,
        tuple(schematic.rows[i] for i in idx),
        tuple(schematic.grid[i] for i in idx),
    )
    validate_schematic(restricted)
    return restricted


def timing_groups(schematic: DesignSchematic) -> TimingGroups:
    """Group clusters by their first Exposed week."""
    groups: dict[int, set[str]] = {}
    never: set[str] = set()
    for seq in schematic.rows:
        first = schematic.first_exposed(seq.cluster_id)
        if first is None:
            never.add(seq.cluster_id)
        else:
            groups.setdefault(first, set()).add(seq.cluster_id)
    return TimingGroups(dict(sorted(groups.items())), never)


def apply_excluded_policy(schematic: DesignSchematic, policy: str) -> DesignSchematic:
    """Fold Excluded cells into a two-arm design per *policy*.

    ``drop``        excluded cells become Absent (removed from the design)
    ``as_control``  excluded cells are recoded Control
    ``as_exposed``  excluded cells are recoded Exposed

    The returned schematic has no Excluded cells; row sequences are
    rewritten so announcement/washout metadata stays consistent with the
    new grid.
    """
    if policy not in EXCLUDED_POLICIES:
        raise DesignError(f"unknown excluded-cell policy {policy!r}; expected one of {EXCLUDED_POLICIES}")
    recode = {
        "drop": CellStatus.ABSENT,
        "as_control": CellStatus.CONTROL,
        "as_exposed": CellStatus.EXPOSED,
    }[policy]
    new_rows = []
    new_grid = []
    for seq, row in zip(schematic.rows, schematic.grid):
        new_row = tuple(recode if st is CellStatus.EXCLUDED else st for st in row)
        first = None
        for j, st in enumerate(new_row):
            if st is CellStatus.EXPOSED:
                first = schematic.periods[j]
                break
        new_rows.append(ClusterSequence(seq.cluster_id, first, 0))
        new_grid.append(new_row)
    out = DesignSchematic(schematic.periods, tuple(new_rows), tuple(new_grid))
    validate_schematic(out)
    return out


# ---------------------------------------------------------------------------
# rendering


def render_schematic(schematic: DesignSchematic) -> str:
    """ASCII rendering: stacked digit header rows, then one row per cluster."""
    id_width = max(len(cid) for cid in schematic.cluster_ids)
    digits = max(len(str(p)) for p in schematic.periods)
    lines = []
    for d in range(digits):
        header = []
        for p in schematic.periods:
            text = str(p).rjust(digits)
            header.append(text[d])
        lines.append(" " * id_width + " " + "".join(header))
    for seq, row in zip(schematic.rows, schematic.grid):
        glyphs = "".join(GLYPHS[st] for st in row)
        lines.append(f"{seq.cluster_id:<{id_width}} {glyphs}")
    return "\n".join(lines)


def parse_schematic_text(text: str) -> DesignSchematic:
    """Parse the output of :func:`render_schematic` back into a schematic.

    Only grids without Absent cells round-trip (an Absent glyph is a
    space, indistinguishable from padding).
    """
    lines = [ln.rstrip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DesignError("empty schematic text")
    header_lines: list[str] = []
    i = 0
    while i < len(lines) and set(lines[i]) <= set("0123456789 "):
        header_lines.append(lines[i])
        i += 1
    row_lines = lines[i:]
    if not header_lines or not row_lines:
        raise DesignError("schematic text needs a week-number header and at least one cluster row")

    ids = [ln.split(None, 1)[0] for ln in row_lines]
    glyph_start = max(len(cid) for cid in ids) + 1
    n_cols = len(row_lines[0]) - glyph_start
    if n_cols <= 0:
        raise DesignError("cluster rows have no status glyphs")

    periods = []
    for k in range(n_cols):
        col = "".join(
            ln[glyph_start + k] if len(ln) > glyph_start + k else " " for ln in header_lines
        ).strip()
        if not col.isdigit():
            raise DesignError("could not reconstruct week numbers from header")
        periods.append(int(col))

    grid = []
    for cid, ln in zip(ids, row_lines):
        glyphs = ln[glyph_start:]
        if len(glyphs) != n_cols:
            raise DesignError(f"cluster {cid!r}: expected {n_cols} cells, found {len(glyphs)}")
        try:
            grid.append(tuple(_GLYPH_TO_STATUS[g] for g in glyphs))
        except KeyError as exc:
            raise DesignError(f"cluster {cid!r}: unknown glyph {exc.args[0]!r}") from None

    rows = tuple(_sequence_from_row(cid, tuple(periods), row) for cid, row in zip(ids, grid))
    schematic = DesignSchematic(tuple(periods), rows, tuple(grid))
    validate_schematic(schematic)
    return schematic


def _sequence_from_row(cluster_id: str, periods: tuple[int, ...], row: tuple[CellStatus, ...]) -> ClusterSequence:
    excl = [periods[j] for j, st in enumerate(row) if st is CellStatus.EXCLUDED]
    exposed = [periods[j] for j, st in enumerate(row) if st is CellStatus.EXPOSED]
    if excl:
        return ClusterSequence(cluster_id, excl[0], len(excl))
    if exposed:
        return ClusterSequence(cluster_id, exposed[0], 0)
    return ClusterSequence(cluster_id, None, 0)


# ---------------------------------------------------------------------------
# delimited formats

DESIGN_CSV_HEADER = ["cluster", "period", "status"]
ANNOUNCEMENT_CSV_HEADER = ["cluster", "announce_week"]


def design_to_csv(schematic: DesignSchematic) -> str:
    """Canonical design CSV: one row per non-Absent cell, row-major."""
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DESIGN_CSV_HEADER)
    for seq, row in zip(schematic.rows, schematic.grid):
        for period, st in zip(schematic.periods, row):
            if st is CellStatus.ABSENT:
                continue
            writer.writerow([seq.cluster_id, period, st.value])
    return buf.getvalue()


def write_design_csv(schematic: DesignSchematic, path) -> None:
    with atomic_write(path) as fh:
        fh.write(design_to_csv(schematic))


def read_design_csv(source) -> DesignSchematic:
    """Read a ``cluster,period,status`` file back into a schematic.

    Cluster order follows first appearance; missing (cluster, period)
    combinations become Absent cells.
    """
    fh = open_text_source(source)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DesignError("design CSV is empty") from None
    if [h.strip() for h in header] != DESIGN_CSV_HEADER:
        raise DesignError(
            f"design CSV header must be {','.join(DESIGN_CSV_HEADER)!r}, got {','.join(header)!r}"
        )
    cells: dict[tuple[str, int], CellStatus] = {}
    order: list[str] = []
    weeks: set[int] = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != 3:
            raise DesignError(f"design CSV row {lineno}: expected 3 fields, got {len(rec)}")
        cid, period_s, status_s = (f.strip() for f in rec)
        try:
            period = int(period_s)
        except ValueError:
            raise DesignError(f"design CSV row {lineno}: period {period_s!r} is not an integer") from None
        try:
            st = CellStatus(status_s)
        except ValueError:
            raise DesignError(
                f"design CSV row {lineno}: status {status_s!r} not one of control/exposed/excluded"
            ) from None
        if st is CellStatus.ABSENT:
            raise DesignError(f"design CSV row {lineno}: 'absent' cells are implicit, not listed")
        if (cid, period) in cells:
            raise DesignError(f"design CSV row {lineno}: duplicate cell ({cid}, {period})")
        if cid not in order:
            order.append(cid)
        cells[(cid, period)] = st
        weeks.add(period)
    if not cells:
        raise DesignError("design CSV has no data rows")
    periods = tuple(range(min(weeks), max(weeks) + 1))
    grid = []
    rows = []
    for cid in order:
        statuses = tuple(cells.get((cid, p), CellStatus.ABSENT) for p in periods)
        grid.append(statuses)
        rows.append(_sequence_from_row(cid, periods, statuses))
    schematic = DesignSchematic(periods, tuple(rows), tuple(grid))
    validate_schematic(schematic)
    return schematic


def announcements_to_csv(sequences: Sequence[ClusterSequence]) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ANNOUNCEMENT_CSV_HEADER)
    for seq in sequences:
        ann = "" if seq.announcement_period is None else seq.announcement_period
        writer.writerow([seq.cluster_id, ann])
    return buf.getvalue()


def read_announcements_csv(source) -> list[ClusterSequence]:
    """Read a ``cluster,announce_week`` file (blank week = never adopts)."""
    fh = open_text_source(source)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DesignError("announcement CSV is empty") from None
    if [h.strip() for h in header] != ANNOUNCEMENT_CSV_HEADER:
        raise DesignError(
            f"announcement CSV header must be {','.join(ANNOUNCEMENT_CSV_HEADER)!r}, got {','.join(header)!r}"
        )
    out: list[ClusterSequence] = []
    seen: set[str] = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != 2:
            raise DesignError(f"announcement CSV row {lineno}: expected 2 fields, got {len(rec)}")
        cid, week_s = (f.strip() for f in rec)
        if cid in seen:
            raise DesignError(f"announcement CSV row {lineno}: duplicate cluster id {cid!r}")
        seen.add(cid)
        if week_s == "":
            out.append(ClusterSequence(cid, None))
        else:
            try:
                out.append(ClusterSequence(cid, int(week_s)))
            except ValueError:
                raise DesignError(
                    f"announcement CSV row {lineno}: announce_week {week_s!r} is not an integer"
                ) from None
    if not out:
        raise DesignError("announcement CSV has no data rows")
    return out

"""Staggered-adoption analyses on cluster-period panels.

Two estimation routes, deliberately kept separate so they can
cross-check each other:

* group-time effects ``ATT(g, t)`` comparing each adoption group's
  outcome change (from its anchor week to week t) against not-yet-treated
  clusters, with optional covariate adjustment (outcome regression,
  inverse-odds weighting, or the doubly robust combination), aggregated
  over a fixed post-adoption horizon;
* a random-intercept mixed model with exposure-time effects, averaging
  the first ``horizon`` exposure-week coefficients.

Inference never leans on the model alone: cluster bootstrap percentile
intervals, randomization (permutation of adoption sequences) p-values,
and pre-period placebo checks are all provided.

The anchor for group g is week ``g - 1 - anticipation``; the default
anticipation of 1 skips the washed-out announcement week, so differences
are taken from the last clean pre-announcement week.
"""

from __future__ import annotations

import csv
import math
import warnings as _warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .design import CellStatus, DesignSchematic
from .estimation import EstimationError, fit_random_intercept_gls
from .ioutil import atomic_write, open_text_source
from .panel import COVARIATE_FIELDS, DataError, PanelDataset
from .simulate import replicate_rng


class AnalysisError(ValueError):
    """Raised when an analysis is unidentified or its preconditions fail."""


ATT_MODES = ("unadjusted", "outcome_regression", "ipw", "doubly_robust")

_CODE = {
    CellStatus.CONTROL: 0,
    CellStatus.EXPOSED: 1,
    CellStatus.EXCLUDED: 2,
    CellStatus.ABSENT: 3,
}
_NEVER = -1


@dataclass(frozen=True)
class AttCell:
    group: int
    period: int
    att: float
    n_treated: int
    n_control: int


@dataclass(frozen=True)
class AttGrid:
    """Group-time effect estimates plus the anchor bookkeeping."""

    entries: tuple[AttCell, ...]
    base_period: dict[int, int] = field(default_factory=dict)
    anticipation: int = 1

    def groups(self) -> list[int]:
        seen: list[int] = []
        for e in self.entries:
            if e.group not in seen:
                seen.append(e.group)
        return sorted(seen)

    def for_group(self, group: int) -> list[AttCell]:
        return sorted((e for e in self.entries if e.group == group), key=lambda e: e.period)


ATT_CSV_HEADER = ["group", "period", "att", "n_treated", "n_control"]


def att_grid_to_csv(grid: AttGrid) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ATT_CSV_HEADER)
    for e in sorted(grid.entries, key=lambda e: (e.group, e.period)):
        writer.writerow([e.group, e.period, repr(e.att), e.n_treated, e.n_control])
    return buf.getvalue()


def write_att_grid_csv(grid: AttGrid, path) -> None:
    with atomic_write(path) as fh:
        fh.write(att_grid_to_csv(grid))


def read_att_grid_csv(source, anticipation: int = 1) -> AttGrid:
    fh = open_text_source(source)
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise AnalysisError("effect-grid CSV is empty") from None
    if header != ATT_CSV_HEADER:
        raise AnalysisError(
            f"effect-grid CSV header must be {','.join(ATT_CSV_HEADER)!r}, got {','.join(header)!r}"
        )
    entries = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != 5:
            raise AnalysisError(f"effect-grid CSV row {lineno}: expected 5 fields")
        try:
            entries.append(
                AttCell(int(rec[0]), int(rec[1]), float(rec[2]), int(rec[3]), int(rec[4]))
            )
        except ValueError as exc:
            raise AnalysisError(f"effect-grid CSV row {lineno}: {exc}") from None
    return AttGrid(tuple(entries), anticipation=anticipation)


@dataclass
class InferenceResult:
    """Point estimate plus the uncertainty summary for one analysis."""

    estimate: float
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    p_value: float | None = None
    method: str = "model"
    n_draws: int | None = None
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "method": self.method,
            "B_or_nperms": self.n_draws,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator resampling procedures should recompute.

    ``estimator`` is ``att_gt`` (aggregated group-time effects) or
    ``mixed_model`` (exposure-time mixed model).  ``covariate`` of None
    defaults to ``excluded_pct`` for the adjusted modes.
    """

    estimator: str = "att_gt"
    mode: str = "doubly_robust"
    covariate: str | None = None
    anticipation: int = 1
    horizon: int = 3
    group_weighting: str = "equal"
    strict: bool = True

    def __post_init__(self):
        if self.estimator not in ("att_gt", "mixed_model"):
            raise AnalysisError(f"unknown estimator {self.estimator!r}")
        if self.mode not in ATT_MODES:
            raise AnalysisError(f"unknown adjustment mode {self.mode!r}; expected one of {ATT_MODES}")
        if self.anticipation < 0:
            raise AnalysisError("anticipation must be >= 0")
        if self.horizon < 1:
            raise AnalysisError("horizon must be >= 1")
        if self.group_weighting not in ("equal", "size"):
            raise AnalysisError("group_weighting must be 'equal' or 'size'")


# ---------------------------------------------------------------------------
# workspace


@dataclass
class _Workspace:
    cluster_ids: tuple[str, ...]
    periods: tuple[int, ...]
    pos: dict[int, int]
    Y: np.ndarray
    status: np.ndarray
    first_exposed: np.ndarray
    covariate: np.ndarray | None

    def take_rows(self, idx: np.ndarray) -> "_Workspace":
        return _Workspace(
            cluster_ids=tuple(self.cluster_ids[i] for i in idx),
            periods=self.periods,
            pos=self.pos,
            Y=self.Y[idx],
            status=self.status[idx],
            first_exposed=self.first_exposed[idx],
            covariate=None if self.covariate is None else self.covariate[idx],
        )

    def permute_assignment(self, perm: np.ndarray) -> "_Workspace":
        """Reassign adoption sequences across clusters; outcomes stay put."""
        return _Workspace(
            cluster_ids=self.cluster_ids,
            periods=self.periods,
            pos=self.pos,
            Y=self.Y,
            status=self.status[perm],
            first_exposed=self.first_exposed[perm],
            covariate=self.covariate,
        )


def _build_workspace(
    panel: PanelDataset,
    schematic: DesignSchematic,
    covariate: str | None = None,
) -> _Workspace:
    ids = schematic.cluster_ids
    periods = schematic.periods
    pos = {p: j for j, p in enumerate(periods)}
    I, T = len(ids), len(periods)
    Y = np.full((I, T), np.nan)
    row_of = {cid: i for i, cid in enumerate(ids)}
    for rec in panel.records:
        i = row_of.get(rec.cluster_id)
        j = pos.get(rec.period)
        if i is not None and j is not None:
            Y[i, j] = rec.outcome
    status = np.array([[_CODE[st] for st in row] for row in schematic.grid], dtype=np.int8)
    first = np.full(I, _NEVER, dtype=int)
    for i, cid in enumerate(ids):
        fe = schematic.first_exposed(cid)
        if fe is not None:
            first[i] = fe
    cov = None
    if covariate is not None:
        if covariate not in COVARIATE_FIELDS:
            raise DataError(f"unknown covariate {covariate!r}; expected one of {COVARIATE_FIELDS}")
        profiles = panel.covariate_map()
        missing = [cid for cid in ids if cid not in profiles]
        if missing:
            raise DataError(
                f"covariate {covariate!r} requested but no profile for cluster(s): "
                + ", ".join(missing)
            )
        cov = np.array([getattr(profiles[cid], covariate) for cid in ids], dtype=float)
    return _Workspace(ids, periods, pos, Y, status, first, cov)


# ---------------------------------------------------------------------------
# per-cell estimators


def _logistic_odds(x: np.ndarray, d: np.ndarray, context: str) -> np.ndarray:
    """Inverse-odds weights for the d == 0 rows of a scalar-covariate logit."""
    sd = x.std()
    xs = (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)
    X = np.column_stack([np.ones_like(xs), xs])
    beta = np.zeros(2)
    for _ in range(100):
        eta = np.clip(X @ beta, -35.0, 35.0)
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (d - p)
        if float(np.max(np.abs(grad))) < 1e-10:
            break
        w = np.maximum(p * (1.0 - p), 1e-12)
        H = X.T @ (w[:, None] * X)
        step, *_ = np.linalg.lstsq(H, grad, rcond=None)
        beta = beta + step
        if float(np.linalg.norm(beta)) > 1e4:
            raise AnalysisError(f"propensity separation (perfect prediction) at {context}")
    eta = np.clip(X @ beta, -35.0, 35.0)
    p = 1.0 / (1.0 + np.exp(-eta))
    if np.all(p[d == 1] > 1.0 - 1e-8) and np.all(p[d == 0] < 1e-8):
        raise AnalysisError(f"propensity separation (perfect prediction) at {context}")
    pc = p[d == 0]
    return pc / (1.0 - pc)


def _outcome_regression(xc: np.ndarray, dyc: np.ndarray):
    X = np.column_stack([np.ones_like(xc), xc])
    coef, *_ = np.linalg.lstsq(X, dyc, rcond=None)
    return lambda xx: coef[0] + coef[1] * xx


def _att_cell(ws: _Workspace, g: int, t: int, anchor: int, mode: str) -> tuple[float, int, int] | None:
    """One (g, t) contrast, or None when no admissible controls remain."""
    ja, jt = ws.pos[anchor], ws.pos[t]
    in_group = ws.first_exposed == g
    finite = np.isfinite(ws.Y[:, jt]) & np.isfinite(ws.Y[:, ja])
    treated = in_group & finite
    if t >= g:
        treated &= ws.status[:, jt] == _CODE[CellStatus.EXPOSED]
    else:
        treated &= ws.status[:, jt] == _CODE[CellStatus.CONTROL]
    treated &= ws.status[:, ja] == _CODE[CellStatus.CONTROL]
    not_yet = (ws.first_exposed == _NEVER) | (ws.first_exposed > t)
    controls = (
        ~in_group
        & not_yet
        & finite
        & (ws.status[:, jt] == _CODE[CellStatus.CONTROL])
        & (ws.status[:, ja] == _CODE[CellStatus.CONTROL])
    )
    n_t, n_c = int(treated.sum()), int(controls.sum())
    if n_t == 0:
        return None
    if n_c == 0:
        return None
    dy = ws.Y[:, jt] - ws.Y[:, ja]
    dyt, dyc = dy[treated], dy[controls]
    if mode == "unadjusted":
        att = float(dyt.mean() - dyc.mean())
        return att, n_t, n_c
    xt, xc = ws.covariate[treated], ws.covariate[controls]
    context = f"(g={g}, t={t})"
    if mode == "outcome_regression":
        m = _outcome_regression(xc, dyc)
        att = float(np.mean(dyt - m(xt)))
    elif mode == "ipw":
        x = np.concatenate([xt, xc])
        d = np.concatenate([np.ones(n_t), np.zeros(n_c)])
        odds = _logistic_odds(x, d, context)
        att = float(dyt.mean() - np.sum(odds * dyc) / np.sum(odds))
    elif mode == "doubly_robust":
        m = _outcome_regression(xc, dyc)
        x = np.concatenate([xt, xc])
        d = np.concatenate([np.ones(n_t), np.zeros(n_c)])
        odds = _logistic_odds(x, d, context)
        resid_c = dyc - m(xc)
        att = float(np.mean(dyt - m(xt)) - np.sum(odds * resid_c) / np.sum(odds))
    else:  # pragma: no cover - guarded by EstimatorSpec/estimate_att_gt
        raise AnalysisError(f"unknown adjustment mode {mode!r}")
    return att, n_t, n_c


def _anchors(ws: _Workspace, anticipation: int) -> dict[int, int]:
    groups = sorted({int(g) for g in ws.first_exposed if g != _NEVER})
    if not groups:
        raise AnalysisError("design has no exposed clusters; nothing to estimate")
    anchors: dict[int, int] = {}
    for g in groups:
        anchor = g - 1 - anticipation
        if anchor not in ws.pos:
            raise AnalysisError(
                f"group first exposed in week {g}: anchor week {anchor} "
                f"(anticipation {anticipation}) is outside the study range"
            )
        rows = np.flatnonzero(ws.first_exposed == g)
        ja = ws.pos[anchor]
        bad = [ws.cluster_ids[i] for i in rows if ws.status[i, ja] != _CODE[CellStatus.CONTROL]]
        if bad:
            raise AnalysisError(
                f"anchor week {anchor} for group {g} is not a control week for: " + ", ".join(bad)
            )
        anchors[g] = anchor
    return anchors


def _att_entries(
    ws: _Workspace,
    mode: str,
    anticipation: int,
    strict: bool,
    which: str = "post",
    horizon: int | None = None,
    max_pre: int | None = None,
) -> tuple[list[AttCell], dict[int, int], list[str]]:
    anchors = _anchors(ws, anticipation)
    notes: list[str] = []
    if mode != "unadjusted" and ws.covariate is None:
        raise DataError("adjusted modes need a cluster covariate; panel has no profiles")
    entries: list[AttCell] = []
    for g, anchor in anchors.items():
        if which == "post":
            ts = [t for t in ws.periods if t >= g]
            if horizon is not None:
                ts = ts[:horizon]
        else:
            ts = [t for t in ws.periods if t < anchor]
            if max_pre is not None:
                ts = ts[-max_pre:]
        for t in ts:
            cell = _att_cell(ws, g, t, anchor, mode)
            if cell is None:
                msg = f"no admissible treated/control comparison at (g={g}, t={t})"
                if strict:
                    raise AnalysisError(msg)
                notes.append(msg)
                continue
            att, n_t, n_c = cell
            entries.append(AttCell(g, t, att, n_t, n_c))
    return entries, anchors, notes


def estimate_att_gt(
    panel: PanelDataset,
    schematic: DesignSchematic,
    covariate: str | None = None,
    mode: str = "doubly_robust",
    anticipation: int = 1,
    strict: bool = True,
) -> AttGrid:
    """Group-time effects against not-yet-treated comparators.

    For each adoption group g and post week t, the outcome change from
    the group's anchor week to t is contrasted with the same change among
    clusters not yet exposed at t (their announcement washout weeks make
    them inadmissible).  Modes: ``unadjusted``, ``outcome_regression``,
    ``ipw`` (inverse-odds weights on controls), ``doubly_robust``.  The
    default covariate for the adjusted modes is ``excluded_pct``.

    With ``strict`` (default) a (g, t) cell with no admissible
    comparison raises; otherwise the cell is skipped.
    """
    if mode not in ATT_MODES:
        raise AnalysisError(f"unknown adjustment mode {mode!r}; expected one of {ATT_MODES}")
    if mode != "unadjusted" and covariate is None:
        covariate = "excluded_pct"
    ws = _build_workspace(panel, schematic, covariate if mode != "unadjusted" else None)
    groups = sorted({int(g) for g in ws.first_exposed if g != _NEVER})
    small = [g for g in groups if int((ws.first_exposed == g).sum()) < 2]
    if small:
        _warnings.warn(
            "adoption group(s) with fewer than 2 treated clusters: "
            + ", ".join(str(g) for g in small)
            + "; group-time estimates for these groups rest on a single cluster",
            stacklevel=2,
        )
    entries, anchors, notes = _att_entries(ws, mode, anticipation, strict, which="post")
    for msg in notes:
        _warnings.warn(msg, stacklevel=2)
    return AttGrid(tuple(entries), base_period=anchors, anticipation=anticipation)


def aggregate_att(
    grid: AttGrid,
    horizon: int = 3,
    group_weighting: str = "equal",
) -> InferenceResult:
    """Average the first *horizon* post-adoption effects across groups.

    Groups with fewer than *horizon* estimates contribute what they have
    and are flagged in the warnings.  ``group_weighting='size'`` weights
    groups by their treated-cluster counts instead of equally.
    """
    if group_weighting not in ("equal", "size"):
        raise AnalysisError("group_weighting must be 'equal' or 'size'")
    if horizon < 1:
        raise AnalysisError("horizon must be >= 1")
    groups = grid.groups()
    if not groups:
        raise AnalysisError("effect grid has no entries to aggregate")
    warnings_out: list[str] = []
    means, weights = [], []
    for g in groups:
        cells = grid.for_group(g)[:horizon]
        if len(cells) < horizon:
            warnings_out.append(
                f"group {g}: only {len(cells)} of {horizon} post-period estimates available; truncated"
            )
        means.append(float(np.mean([c.att for c in cells])))
        weights.append(max(c.n_treated for c in cells) if group_weighting == "size" else 1.0)
    estimate = float(np.average(means, weights=weights))
    return InferenceResult(estimate=estimate, method="att_aggregate", warnings=warnings_out)


# ---------------------------------------------------------------------------
# estimator dispatch for resampling procedures


def _estimate_workspace(ws: _Workspace, spec: EstimatorSpec) -> float:
    if spec.estimator == "att_gt":
        entries, _, _ = _att_entries(
            ws, spec.mode, spec.anticipation, spec.strict, which="post", horizon=spec.horizon
        )
        grid = AttGrid(tuple(entries), anticipation=spec.anticipation)
        return aggregate_att(grid, spec.horizon, spec.group_weighting).estimate
    return _mixed_model_workspace(ws, spec.horizon)[0]


def _workspace_for_spec(panel: PanelDataset, schematic: DesignSchematic, spec: EstimatorSpec) -> _Workspace:
    needs_cov = spec.estimator == "att_gt" and spec.mode != "unadjusted"
    cov = (spec.covariate or "excluded_pct") if needs_cov else None
    return _build_workspace(panel, schematic, cov)


# ---------------------------------------------------------------------------
# cluster bootstrap


def cluster_bootstrap(
    panel: PanelDataset,
    schematic: DesignSchematic,
    spec: EstimatorSpec | None = None,
    B: int = 1000,
    seed: int | None = None,
    ci_level: float = 0.95,
) -> InferenceResult:
    """Percentile CI from resampling whole clusters with replacement.

    Each resampled cluster keeps its own adoption sequence; duplicated
    clusters enter as independent copies.  Degenerate resamples (the
    estimator has no treated group or no admissible comparison) are
    redrawn and counted; more than 20% degenerate aborts.
    """
    if spec is None:
        spec = EstimatorSpec()
    if B < 200:
        raise AnalysisError(f"bootstrap needs B >= 200 for stable percentiles, got B={B}")
    if seed is None:
        raise AnalysisError("cluster_bootstrap requires an explicit seed")
    ws = _workspace_for_spec(panel, schematic, spec)
    I = len(ws.cluster_ids)
    point = _estimate_workspace(ws, spec)

    estimates = np.empty(B)
    n_redraws = 0
    max_total_redraws = int(0.2 * B)
    for b in range(B):
        rng = replicate_rng(seed, b)
        while True:
            idx = rng.integers(0, I, size=I)
            try:
                estimates[b] = _estimate_workspace(ws.take_rows(idx), spec)
                break
            except (AnalysisError, EstimationError):
                n_redraws += 1
                if n_redraws > max_total_redraws:
                    raise AnalysisError(
                        f"more than 20% of bootstrap resamples were degenerate "
                        f"({n_redraws} redraws in {b + 1} replicates); the design has too "
                        "few clusters per arm to bootstrap"
                    ) from None

    alpha = 1.0 - ci_level
    ci_low, ci_high = np.quantile(estimates, [alpha / 2.0, 1.0 - alpha / 2.0])
    p_low = float(np.mean(estimates <= 0.0))
    p_high = float(np.mean(estimates >= 0.0))
    p_value = min(1.0, 2.0 * min(p_low, p_high))
    notes = []
    if n_redraws:
        notes.append(f"{n_redraws} degenerate resamples redrawn")
    singles = _singleton_groups(ws)
    if singles:
        notes.append(
            "group(s) first exposed in week "
            + ", ".join(str(g) for g in singles)
            + " have a single treated cluster: resampling cannot vary their treated side, "
            "so the interval is anti-conservative"
        )
    return InferenceResult(
        estimate=point,
        se=float(np.std(estimates, ddof=1)),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_value=p_value,
        method="cluster_bootstrap",
        n_draws=B,
        seed=seed,
        warnings=notes,
    )


def _singleton_groups(ws: _Workspace) -> list[int]:
    groups = sorted({int(g) for g in ws.first_exposed if g != _NEVER})
    return [g for g in groups if int((ws.first_exposed == g).sum()) < 2]


# ---------------------------------------------------------------------------
# permutation test


def _unique_permutations(pattern_ids: list[int]):
    """Yield distinct orderings of a multiset of pattern ids."""
    counts: dict[int, int] = {}
    for pid in pattern_ids:
        counts[pid] = counts.get(pid, 0) + 1
    n = len(pattern_ids)
    out: list[int] = []

    def rec():
        if len(out) == n:
            yield tuple(out)
            return
        for pid in sorted(counts):
            if counts[pid] > 0:
                counts[pid] -= 1
                out.append(pid)
                yield from rec()
                out.pop()
                counts[pid] += 1

    yield from rec()


def _assignment_count(pattern_ids: list[int]) -> int:
    counts: dict[int, int] = {}
    for pid in pattern_ids:
        counts[pid] = counts.get(pid, 0) + 1
    total = math.factorial(len(pattern_ids))
    for c in counts.values():
        total //= math.factorial(c)
    return total


EXHAUSTIVE_LIMIT = 10_000


def permutation_test(
    panel: PanelDataset,
    schematic: DesignSchematic,
    spec: EstimatorSpec | None = None,
    n_perms: int = 1000,
    seed: int | None = None,
    mode: str = "sampled",
) -> InferenceResult:
    """Randomization p-value from permuting adoption sequences.

    The multiset of adoption sequences is reassigned across clusters and
    the estimator recomputed; the two-sided p-value counts permuted
    statistics at least as extreme as the observed one.  Sampled mode
    uses the (1 + count) / (1 + n_perms) convention; exhaustive mode
    enumerates all distinct assignments (the observed one is part of the
    enumeration, which plays the +1 role) and requires their number to be
    at most 10,000.
    """
    if spec is None:
        spec = EstimatorSpec()
    if mode not in ("sampled", "exhaustive"):
        raise AnalysisError(f"permutation mode must be 'sampled' or 'exhaustive', got {mode!r}")
    ws = _workspace_for_spec(panel, schematic, spec)
    I = len(ws.cluster_ids)

    pattern_key = [tuple(ws.status[i].tolist()) for i in range(I)]
    distinct = sorted(set(pattern_key))
    if len(distinct) < 2:
        raise AnalysisError("all adoption sequences are identical; permutation has no randomness")
    t_obs = _estimate_workspace(ws, spec)
    abs_obs = abs(t_obs) - 1e-12

    if mode == "sampled":
        if seed is None:
            raise AnalysisError("sampled permutation requires an explicit seed")
        if n_perms < 1:
            raise AnalysisError("n_perms must be >= 1")
        count = 0
        for k in range(n_perms):
            rng = replicate_rng(seed, k)
            perm = rng.permutation(I)
            t_k = _estimate_workspace(ws.permute_assignment(perm), spec)
            if abs(t_k) >= abs_obs:
                count += 1
        p = (1 + count) / (1 + n_perms)
        n_draws = n_perms
    else:
        pid_of = {key: k for k, key in enumerate(distinct)}
        pattern_ids = [pid_of[key] for key in pattern_key]
        n_assign = _assignment_count(pattern_ids)
        if n_assign > EXHAUSTIVE_LIMIT:
            raise AnalysisError(
                f"{n_assign} distinct assignments exceed the exhaustive limit "
                f"({EXHAUSTIVE_LIMIT}); use sampled mode"
            )
        rows_of = {pid: pattern_ids.index(pid) for pid in set(pattern_ids)}
        count = 0
        total = 0
        for arrangement in _unique_permutations(pattern_ids):
            perm = np.array([rows_of[pid] for pid in arrangement])
            t_k = _estimate_workspace(ws.permute_assignment(perm), spec)
            total += 1
            if abs(t_k) >= abs_obs:
                count += 1
        p = count / total
        n_draws = total

    return InferenceResult(
        estimate=t_obs,
        p_value=p,
        method="permutation",
        n_draws=n_draws,
        seed=seed,
        warnings=[],
    )


# ---------------------------------------------------------------------------
# placebo pre-trends


@dataclass
class PlaceboResult:
    grid: AttGrid
    intervals: tuple[tuple[int, int, float, float], ...]
    summary: InferenceResult
    passed: bool


def placebo_pretrends(
    panel: PanelDataset,
    schematic: DesignSchematic,
    covariate: str | None = None,
    mode: str = "doubly_robust",
    anticipation: int = 1,
    B: int = 500,
    seed: int | None = None,
    ci_level: float = 0.95,
    max_pre: int | None = None,
) -> PlaceboResult:
    """Pre-period pseudo-effects with per-entry bootstrap intervals.

    Applies the group-time machinery to weeks before each group's anchor
    (pseudo-treatment at t, differenced from the same anchor).  Every
    group needs at least 2 pre-anchor weeks.  ``passed`` is True when
    every interval covers zero; intervals are per-entry percentile CIs
    with no multiplicity correction.
    """
    if mode not in ATT_MODES:
        raise AnalysisError(f"unknown adjustment mode {mode!r}")
    if seed is None:
        raise AnalysisError("placebo_pretrends requires an explicit seed")
    if mode != "unadjusted" and covariate is None:
        covariate = "excluded_pct"
    ws = _build_workspace(panel, schematic, covariate if mode != "unadjusted" else None)
    anchors = _anchors(ws, anticipation)
    for g, anchor in anchors.items():
        n_pre = sum(1 for t in ws.periods if t < anchor)
        if n_pre < 2:
            raise AnalysisError(
                f"group first exposed in week {g}: only {n_pre} week(s) before its anchor "
                f"{anchor}; placebo pre-trends need at least 2"
            )
    entries, anchors, _ = _att_entries(
        ws, mode, anticipation, strict=True, which="pre", max_pre=max_pre
    )
    grid = AttGrid(tuple(entries), base_period=anchors, anticipation=anticipation)
    keys = [(e.group, e.period) for e in entries]

    # Each resample contributes whichever entries it reproduces: a group
    # absent from the resample (common when a group has one treated
    # cluster) simply leaves NaN in its column, and that entry's interval
    # comes from the resamples that do contain it.  Only resamples
    # reproducing no entry at all are redrawn.
    draws = np.full((B, len(entries)), np.nan)
    I = len(ws.cluster_ids)
    n_redraws = 0
    max_total_redraws = int(0.2 * B)
    for b in range(B):
        rng = replicate_rng(seed, b)
        while True:
            idx = rng.integers(0, I, size=I)
            try:
                sub_entries, _, _ = _att_entries(
                    ws.take_rows(idx), mode, anticipation, strict=False, which="pre", max_pre=max_pre
                )
            except (AnalysisError, EstimationError):
                sub_entries = []
            if sub_entries:
                got = {(e.group, e.period): e.att for e in sub_entries}
                draws[b] = [got.get(k, np.nan) for k in keys]
                break
            n_redraws += 1
            if n_redraws > max_total_redraws:
                raise AnalysisError(
                    "more than 20% of placebo bootstrap resamples were degenerate"
                ) from None

    n_eff = np.sum(np.isfinite(draws), axis=0)
    min_eff = max(50, B // 10)
    short = [k for k, n in zip(keys, n_eff) if n < min_eff]
    if short:
        listing = ", ".join(f"(g={g}, t={t})" for g, t in short)
        raise AnalysisError(
            f"too few bootstrap resamples contain entry {listing} "
            f"(fewer than {min_eff} of {B}); intervals would be unreliable"
        )
    alpha = 1.0 - ci_level
    lo = np.nanquantile(draws, alpha / 2.0, axis=0)
    hi = np.nanquantile(draws, 1.0 - alpha / 2.0, axis=0)
    intervals = tuple((g, t, float(l), float(h)) for (g, t), l, h in zip(keys, lo, hi))
    passed = all(l <= 0.0 <= h for _, _, l, h in intervals)
    worst = max(entries, key=lambda e: abs(e.att)) if entries else None
    notes = [] if not n_redraws else [f"{n_redraws} degenerate resamples redrawn"]
    if int(n_eff.min()) < B:
        notes.append(
            f"entry intervals rest on {int(n_eff.min())}-{int(n_eff.max())} of {B} resamples "
            "(resamples can omit a group's only treated cluster)"
        )
    singles = _singleton_groups(ws)
    if singles:
        notes.append(
            "group(s) first exposed in week "
            + ", ".join(str(g) for g in singles)
            + " have a single treated cluster: their placebo intervals are anti-conservative"
        )
    notes.append("per-entry 95% intervals, no multiplicity correction")
    summary = InferenceResult(
        estimate=float(worst.att) if worst is not None else math.nan,
        method="placebo_pretrends",
        n_draws=B,
        seed=seed,
        warnings=notes,
    )
    return PlaceboResult(grid=grid, intervals=intervals, summary=summary, passed=passed)


# ---------------------------------------------------------------------------
# exposure-time mixed model


def _mixed_model_workspace(ws: _Workspace, horizon: int):
    """REML mixed-model fit; returns (estimate, se, per-theta cell counts, fit)."""
    T = len(ws.periods)
    exposure_time = np.zeros_like(ws.status, dtype=int)
    for i in range(ws.status.shape[0]):
        k = 0
        for j in range(T):
            if ws.status[i, j] == _CODE[CellStatus.EXPOSED]:
                k += 1
                exposure_time[i, j] = k
    K = int(exposure_time.max())
    if K == 0:
        raise AnalysisError("design has no exposed cells; nothing to estimate")
    if K < horizon:
        raise AnalysisError(
            f"horizon {horizon} includes exposure week(s) beyond the longest observed "
            f"exposure ({K}); those effects are unidentified"
        )
    usable = (
        np.isfinite(ws.Y)
        & (
            (ws.status == _CODE[CellStatus.CONTROL])
            | (ws.status == _CODE[CellStatus.EXPOSED])
        )
    )
    p = T + K
    y_groups, Z_groups = [], []
    for i in range(ws.status.shape[0]):
        js = np.flatnonzero(usable[i])
        if js.size == 0:
            continue
        Z = np.zeros((js.size, p))
        for r, j in enumerate(js):
            Z[r, j] = 1.0
            k = exposure_time[i, j]
            if k > 0:
                Z[r, T + k - 1] = 1.0
        y_groups.append(ws.Y[i, js])
        Z_groups.append(Z)
    names = tuple(f"week[{w}]" for w in ws.periods) + tuple(
        f"exposure[{k}]" for k in range(1, K + 1)
    )
    fit = fit_random_intercept_gls(y_groups, Z_groups, names=names)
    contrast = np.zeros(p)
    contrast[T : T + horizon] = 1.0 / horizon
    estimate = float(contrast @ fit.beta)
    var = float(contrast @ fit.cov_beta @ contrast)
    se = math.sqrt(max(var, 0.0))
    counts = {k: int((exposure_time == k).sum()) for k in range(1, K + 1)}
    return estimate, se, counts, fit


def fit_trial_mixed_model(
    panel: PanelDataset,
    schematic: DesignSchematic,
    horizon: int = 3,
) -> InferenceResult:
    """Random-intercept model with exposure-time effects.

    Fits week means plus one coefficient per exposure week (Excluded
    cells are dropped), REML for the variance split, and reports the mean
    of the first *horizon* exposure-week coefficients with its Wald
    normal interval.
    """
    ws = _build_workspace(panel, schematic, None)
    estimate, se, counts, fit = _mixed_model_workspace(ws, horizon)
    z975 = norm.ppf(0.975)
    if se > 0:
        z = estimate / se
        p_value = float(2.0 * norm.sf(abs(z)))
    else:
        p_value = 0.0 if estimate != 0 else 1.0
    notes = [
        "cells per exposure week: "
        + ", ".join(f"week {k}: {counts[k]}" for k in sorted(counts))
    ]
    return InferenceResult(
        estimate=estimate,
        se=se,
        ci_low=estimate - z975 * se,
        ci_high=estimate + z975 * se,
        p_value=p_value,
        method="mixed_model",
        warnings=notes,
    )

"""The 2021 Midwest vaccine-lottery study: constants and built-in designs.

Four Midwest states announced cash-prize vaccination lotteries in
mid-2021 (Ohio first, then Illinois, Michigan, Missouri); eight
neighboring states never did.  Everything downstream — schematics,
matched comparisons, power targets — derives from the announcement
dates, the epidemiological-week calendar, and published variance
summaries, all collected here so the rest of the package stays
example-agnostic.
"""

from __future__ import annotations

from datetime import date

from .design import ClusterSequence, DesignSchematic, build_schematic, restrict_clusters
from .estimation import TrendFit, VarianceComponents
from .mmwr import mmwr_week

#: States that announced a lottery, in announcement order.
LOTTERY_STATES = ("OH", "IL", "MI", "MO")

#: Midwest states with no lottery through the study window.
NEVER_LOTTERY_STATES = ("IA", "IN", "KS", "MN", "ND", "NE", "SD", "WI")

MIDWEST_STATES = LOTTERY_STATES + NEVER_LOTTERY_STATES

ANNOUNCEMENT_DATES = {
    "OH": date(2021, 5, 12),
    "IL": date(2021, 6, 17),
    "MI": date(2021, 6, 30),
    "MO": date(2021, 7, 21),
}

#: Epidemiological week of each announcement: OH 19, IL 24, MI 26, MO 29.
ANNOUNCEMENT_WEEKS = {state: mmwr_week(day) for state, day in ANNOUNCEMENT_DATES.items()}

#: Study window, weeks 15 through 30 of 2021 (mid-April to end of July).
STUDY_RANGE = (15, 30)
STUDY_WEEKS = tuple(range(STUDY_RANGE[0], STUDY_RANGE[1] + 1))

#: The announcement week itself is washed out of each adopting state.
N_EXCLUDED_WEEKS = 1

#: Covariate-matched comparison state for each adopter (week-18 profiles).
MATCHED_PAIRS = (("OH", "ND"), ("IL", "MN"), ("MI", "KS"), ("MO", "IN"))
MATCHED_CONTROL_FOR = dict(MATCHED_PAIRS)

#: Week the matching covariates were measured.
COVARIATE_WEEK = 18

# Published summaries: weekly first-dose percentage among state residents.
MEAN_RESPONSE_START = 3.39  # control mean at week 15
MEAN_RESPONSE_END_CONTROL = 0.48  # control mean at week 30
MEAN_RESPONSE_END_EXPOSED = 0.81  # exposed mean at week 30
DEFAULT_CHANGEPOINT = 20

#: Weekly effect of a lottery on the first-dose rate, in percentage points.
DEFAULT_EFFECT = MEAN_RESPONSE_END_EXPOSED - MEAN_RESPONSE_END_CONTROL  # 0.33

DEFAULT_ALPHA = 0.05

FULL_DESIGN = "midwest_full"
MATCHED_DESIGN = "matched_pairs"
ADOPTERS_DESIGN = "adopters_only"
DESIGN_IDS = (FULL_DESIGN, MATCHED_DESIGN, ADOPTERS_DESIGN)

#: Published variance summaries (marginal variance, intracluster correlation)
#: for the comparison set behind each design.
DESIGN_PARAMETERS = {
    FULL_DESIGN: VarianceComponents.from_marginal(0.26, 0.39),
    MATCHED_DESIGN: VarianceComponents.from_marginal(0.35, 0.42),
    ADOPTERS_DESIGN: VarianceComponents.from_marginal(0.35, 0.42),
}

#: Published power for each design at the default effect and alpha.
TARGET_POWERS = {FULL_DESIGN: 0.78, MATCHED_DESIGN: 0.61, ADOPTERS_DESIGN: 0.38}


def announcement_sequences() -> list[ClusterSequence]:
    """One sequence per Midwest state; never-announcing states stay control."""
    rows = [
        ClusterSequence(state, ANNOUNCEMENT_WEEKS[state], n_excluded=N_EXCLUDED_WEEKS)
        for state in LOTTERY_STATES
    ]
    rows.extend(ClusterSequence(state) for state in NEVER_LOTTERY_STATES)
    return rows


def build_full_design() -> DesignSchematic:
    """All 12 states over weeks 15-30: 192 cells, 8 never-exposed rows."""
    return build_schematic(announcement_sequences(), STUDY_RANGE)


def build_matched_design() -> DesignSchematic:
    """Adopters plus their four matched controls: 8 rows, 128 cells."""
    keep = LOTTERY_STATES + tuple(MATCHED_CONTROL_FOR.values())
    return restrict_clusters(build_full_design(), keep)


def build_adopters_only_design() -> DesignSchematic:
    """Timing-only comparison among the four adopters: 64 cells."""
    return restrict_clusters(build_full_design(), LOTTERY_STATES)


_BUILDERS = {
    FULL_DESIGN: build_full_design,
    MATCHED_DESIGN: build_matched_design,
    ADOPTERS_DESIGN: build_adopters_only_design,
}


def builtin_designs() -> dict[str, DesignSchematic]:
    return {name: build() for name, build in _BUILDERS.items()}


def get_design(design_id: str) -> DesignSchematic:
    try:
        build = _BUILDERS[design_id]
    except KeyError:
        raise KeyError(
            f"unknown built-in design {design_id!r} (choose from {', '.join(DESIGN_IDS)})"
        ) from None
    return build()


def default_trend() -> TrendFit:
    """Linear decline in the control-arm mean from week 15 to week 30.

    Used as the default background when simulating panels without data;
    the analytic power results do not depend on it.
    """
    slope = (MEAN_RESPONSE_END_CONTROL - MEAN_RESPONSE_START) / (
        STUDY_RANGE[1] - STUDY_RANGE[0]
    )
    return TrendFit(
        intercept=MEAN_RESPONSE_START,
        slope_pre=slope,
        slope_change=0.0,
        changepoint=DEFAULT_CHANGEPOINT,
        origin=STUDY_RANGE[0],
    )

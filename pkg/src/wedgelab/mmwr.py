"""Static 2021 MMWR (epidemiological) week lookup.

MMWR weeks run Sunday through Saturday.  Week 1 of 2021 is Jan 3-9 (the
week containing Jan 1-2 has fewer than four days in the new year and so
belongs to 2020 as week 53).  Only 2021 is covered: the design tooling
takes week numbers as input, and this table exists so the command line
can translate calendar announcement dates for the 2021 worked example.
"""

from __future__ import annotations

from datetime import date, timedelta

_WEEK1_END = date(2021, 1, 9)

#: Saturday week-ending date for each 2021 MMWR week (1..52).
WEEK_ENDING_2021: dict[int, date] = {
    week: _WEEK1_END + timedelta(weeks=week - 1) for week in range(1, 53)
}


def week_ending(week: int) -> date:
    """Saturday on which 2021 MMWR week *week* ends."""
    try:
        return WEEK_ENDING_2021[week]
    except KeyError:
        raise ValueError(f"week {week} outside the 2021 MMWR calendar (1..52)") from None


def mmwr_week(day: date) -> int:
    """2021 MMWR week number containing calendar date *day*."""
    first_day = WEEK_ENDING_2021[1] - timedelta(days=6)
    last_day = WEEK_ENDING_2021[52]
    if not (first_day <= day <= last_day):
        raise ValueError(f"{day.isoformat()} outside the 2021 MMWR calendar")
    return (day - first_day).days // 7 + 1

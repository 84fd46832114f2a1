"""Synthetic panel generation under the random-intercept model.

Outcomes are drawn as

    Y_ij = m_j + a_i + e_ij + effect(exposure_time_ij)

where ``m_j`` are per-week means, ``a_i`` a cluster intercept and
``e_ij`` independent noise.  The effect applies only to Exposed cells;
Excluded (washed-out) cells receive no effect and do not advance a
cluster's exposure clock.  Outcomes are not clipped to the percentage
scale unless asked, so the generated panels follow the model exactly.

Draw order is fixed (cluster intercepts in row order, then cell noise in
row-major order), making every panel a deterministic function of the
seed.  Replicate streams derive from ``[seed, replicate]`` seed pairs,
so distinct replicate indices give independent streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .design import CellStatus, DesignSchematic
from .estimation import VarianceComponents
from .panel import PanelDataset, PanelRecord


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class EffectProfile:
    """Treatment effect as a function of exposure time (1-based weeks).

    ``constant(delta)`` applies the same shift to every exposed cell;
    ``by_exposure_time([d1, d2, ...])`` applies ``d_k`` in the k-th week
    of exposure and requires the vector to cover the longest exposure in
    the design.
    """

    values: tuple[float, ...]
    is_constant: bool

    @classmethod
    def constant(cls, delta: float) -> "EffectProfile":
        return cls(values=(float(delta),), is_constant=True)

    @classmethod
    def by_exposure_time(cls, deltas: Sequence[float]) -> "EffectProfile":
        if len(deltas) == 0:
            raise SimulationError("exposure-time effect vector must be non-empty")
        return cls(values=tuple(float(d) for d in deltas), is_constant=False)

    def effect_at(self, exposure_time: int) -> float:
        if exposure_time < 1:
            return 0.0
        if self.is_constant:
            return self.values[0]
        if exposure_time > len(self.values):
            raise SimulationError(
                f"effect vector of length {len(self.values)} does not cover exposure time {exposure_time}"
            )
        return self.values[exposure_time - 1]


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent deterministic stream for one replicate of a run."""
    return np.random.default_rng([seed, replicate])


def _period_means_vector(period_means, periods) -> np.ndarray:
    if hasattr(period_means, "mean") and callable(period_means.mean):
        return np.array([period_means.mean(p) for p in periods], dtype=float)
    if isinstance(period_means, Mapping):
        missing = [p for p in periods if p not in period_means]
        if missing:
            raise SimulationError(f"period means missing for weeks {missing}")
        return np.array([float(period_means[p]) for p in periods], dtype=float)
    raise SimulationError("period_means must be a mapping week->mean or expose .mean(week)")


def simulate_matrix(
    schematic: DesignSchematic,
    vc: VarianceComponents,
    period_means,
    effect: EffectProfile,
    rng: np.random.Generator,
) -> np.ndarray:
    """Outcome matrix (clusters x weeks) with NaN at Absent cells."""
    I = len(schematic.rows)
    T = len(schematic.periods)
    m = _period_means_vector(period_means, schematic.periods)
    alpha = rng.normal(0.0, np.sqrt(vc.tau2), size=I)
    eps = rng.normal(0.0, np.sqrt(vc.sigma2_resid), size=(I, T))
    Y = m[None, :] + alpha[:, None] + eps
    for i, row in enumerate(schematic.grid):
        exposure = 0
        for j, st in enumerate(row):
            if st is CellStatus.EXPOSED:
                exposure += 1
                Y[i, j] += effect.effect_at(exposure)
            elif st is CellStatus.ABSENT:
                Y[i, j] = np.nan
    return Y


def generate_panel(
    schematic: DesignSchematic,
    vc: VarianceComponents,
    period_means,
    effect: EffectProfile,
    seed: int | Sequence[int],
    clip: bool = False,
) -> PanelDataset:
    """Generate one synthetic panel for the given design.

    *period_means* is a mapping week -> mean or a trend object with a
    ``mean(week)`` method.  Identical seeds reproduce the panel
    bit-for-bit.  With *clip*, outcomes are truncated to [0, 100] after
    generation (off by default).
    """
    rng = np.random.default_rng(seed)
    Y = simulate_matrix(schematic, vc, period_means, effect, rng)
    if clip:
        Y = np.clip(Y, 0.0, 100.0)
    records = []
    for i, seq in enumerate(schematic.rows):
        for j, period in enumerate(schematic.periods):
            if schematic.grid[i][j] is CellStatus.ABSENT:
                continue
            records.append(PanelRecord(seq.cluster_id, period, float(Y[i, j])))
    return PanelDataset(tuple(records))

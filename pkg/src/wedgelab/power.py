"""Design power for the cluster random-intercept GLS model.

The analysis model for a two-arm exposure coding is

    Y_ij = mu + beta_j + theta * X_ij + a_i + e_ij

with a cluster random intercept.  The GLS information for theta
accumulates cluster by cluster,

    A = sum_i Z_i' V_i^{-1} Z_i,
    V_i^{-1} = (1/sigma2) * (I - tau2 / (sigma2 + T_i tau2) * J),

where Z_i stacks an intercept, week dummies and the exposure column; the
variance of theta-hat is the last diagonal entry of A^{-1}.  For complete
grids this equals the classical closed form

    Var(theta-hat) = I sigma2 (sigma2 + T tau2) /
        ((I U - W) sigma2 + (U^2 + I T U - T W - I V) tau2)

with U the total count of exposed cells, W the sum of squared week
totals, and V the sum of squared cluster totals.  Power for a two-sided
Wald test is Phi(|delta|/se - z_{1-alpha/2}); at delta = 0 this is
alpha/2 by construction.

Washout (Excluded) cells must be folded into the two-arm coding first;
the policy is an explicit argument because the choice is empirically
calibrated (see ``calibrate_excluded``), not a modelling default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .design import (
    CellStatus,
    DesignSchematic,
    EXCLUDED_POLICIES,
    apply_excluded_policy,
)
from .estimation import EstimationError, VarianceComponents, fit_random_intercept_gls
from .simulate import EffectProfile, replicate_rng, simulate_matrix


class PowerError(ValueError):
    """Raised for designs or requests that cannot yield a power number."""


@dataclass(frozen=True)
class PowerSpec:
    """Effect size, variance components and test level for a power run."""

    delta: float
    vc: VarianceComponents
    alpha: float = 0.05

    def __post_init__(self):
        if not math.isfinite(self.delta):
            raise PowerError(f"delta must be finite, got {self.delta}")
        if not (0.0 < self.alpha < 1.0):
            raise PowerError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.vc.sigma2_resid <= 0:
            raise PowerError("residual variance must be positive for power analysis")


@dataclass
class PowerResult:
    variance: float
    se: float
    power: float
    method: str
    excluded_policy: str
    spec: PowerSpec
    design_id: str | None = None
    n_sims: int | None = None
    seed: int | None = None
    mc_se: float | None = None
    n_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "design_id": self.design_id,
            "delta": self.spec.delta,
            "sigma2": self.spec.vc.sigma2_marginal,
            "icc": self.spec.vc.icc,
            "alpha": self.spec.alpha,
            "excluded_policy": self.excluded_policy,
            "variance": self.variance,
            "se": self.se,
            "power": self.power,
            "method": self.method,
            "n_sims": self.n_sims,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# exposure coding


def _check_policy(policy: str) -> None:
    if policy not in EXCLUDED_POLICIES:
        raise PowerError(
            f"unknown excluded-cell policy {policy!r}; expected one of {EXCLUDED_POLICIES}"
        )


def _two_arm_blocks(schematic: DesignSchematic, policy: str):
    """Per-cluster (period indices, 0/1 exposure) after folding Excluded cells."""
    _check_policy(policy)
    effective = apply_excluded_policy(schematic, policy)
    blocks = []
    n_exposed = n_control = 0
    for row in effective.grid:
        js = [j for j, st in enumerate(row) if st is not CellStatus.ABSENT]
        x = np.array([1.0 if row[j] is CellStatus.EXPOSED else 0.0 for j in js])
        n_exposed += int(x.sum())
        n_control += len(js) - int(x.sum())
        blocks.append((js, x))
    if n_exposed == 0:
        raise PowerError("no exposed cells remain after applying the excluded-cell policy")
    if n_control == 0:
        raise PowerError("no control cells remain after applying the excluded-cell policy")
    return effective, blocks


def _information_matrix(schematic: DesignSchematic, blocks, vc: VarianceComponents) -> np.ndarray:
    T = len(schematic.periods)
    p = T + 1  # intercept, T-1 week dummies, exposure column
    A = np.zeros((p, p))
    sigma2, tau2 = vc.sigma2_resid, vc.tau2
    for js, x in blocks:
        Ti = len(js)
        if Ti == 0:
            continue
        Z = np.zeros((Ti, p))
        Z[:, 0] = 1.0
        for r, j in enumerate(js):
            if j > 0:
                Z[r, j] = 1.0
        Z[:, p - 1] = x
        shrink = tau2 / (sigma2 + Ti * tau2)
        Vinv = (np.eye(Ti) - shrink * np.ones((Ti, Ti))) / sigma2
        A += Z.T @ Vinv @ Z
    return A


def gls_treatment_variance(
    schematic: DesignSchematic,
    vc: VarianceComponents,
    excluded_policy: str,
) -> float:
    """Variance of the GLS treatment estimate under the given coding."""
    effective, blocks = _two_arm_blocks(schematic, excluded_policy)
    A = _information_matrix(effective, blocks, vc)
    p = A.shape[0]
    try:
        factor = cho_factor(A)
    except np.linalg.LinAlgError:
        raise PowerError(
            "singular information matrix: the exposure indicator is collinear with week "
            "effects (for example, every cluster exposed in exactly the same weeks)"
        ) from None
    e = np.zeros(p)
    e[p - 1] = 1.0
    return float(cho_solve(factor, e)[p - 1])


def closed_form_variance(
    schematic: DesignSchematic,
    vc: VarianceComponents,
    excluded_policy: str,
) -> float:
    """Closed-form treatment variance for complete grids.

    Valid only when every cluster observes every week after the policy is
    applied (so not for ``drop`` on designs with washout cells).
    """
    effective, blocks = _two_arm_blocks(schematic, excluded_policy)
    T = len(effective.periods)
    if any(len(js) != T for js, _ in blocks):
        raise PowerError(
            "closed form requires a complete grid; the excluded-cell policy left gaps "
            "(use gls_treatment_variance instead)"
        )
    X = np.array([x for _, x in blocks])
    I = X.shape[0]
    U = float(X.sum())
    W = float((X.sum(axis=0) ** 2).sum())
    V = float((X.sum(axis=1) ** 2).sum())
    sigma2, tau2 = vc.sigma2_resid, vc.tau2
    denom = (I * U - W) * sigma2 + (U * U + I * T * U - T * W - I * V) * tau2
    if denom <= 0:
        raise PowerError(
            "singular information matrix: the exposure indicator is collinear with week "
            "effects (for example, every cluster exposed in exactly the same weeks)"
        )
    return I * sigma2 * (sigma2 + T * tau2) / denom


def wald_power(delta: float, se: float, alpha: float, exact_two_sided: bool = False) -> float:
    """Two-sided Wald rejection probability at effect *delta*."""
    z_crit = norm.ppf(1.0 - alpha / 2.0)
    z = abs(delta) / se
    p = norm.cdf(z - z_crit)
    if exact_two_sided:
        p += norm.cdf(-z - z_crit)
    return float(p)


def analytic_power(
    schematic: DesignSchematic,
    spec: PowerSpec,
    excluded_policy: str,
    design_id: str | None = None,
    exact_two_sided: bool = False,
) -> PowerResult:
    """Normal-approximation power for the GLS treatment test."""
    variance = gls_treatment_variance(schematic, spec.vc, excluded_policy)
    se = math.sqrt(variance)
    power = wald_power(spec.delta, se, spec.alpha, exact_two_sided)
    return PowerResult(
        variance=variance,
        se=se,
        power=power,
        method="analytic",
        excluded_policy=excluded_policy,
        spec=spec,
        design_id=design_id,
    )


# ---------------------------------------------------------------------------
# simulation


def simulated_power(
    schematic: DesignSchematic,
    spec: PowerSpec,
    trend,
    n_sims: int,
    seed: int,
    excluded_policy: str,
    vc_mode: str = "reml",
    design_id: str | None = None,
) -> PowerResult:
    """Monte Carlo power under the same model the analytic formula assumes.

    Panels are generated with the trend as week means and a constant
    effect ``spec.delta`` on the cells coded exposed by the policy; each
    replicate is analysed by GLS with the variance components either
    re-estimated by REML (``vc_mode='reml'``, the default) or fixed at
    ``spec.vc`` (``'known'``).  Replicates whose fit fails are
    counted; more than 1% failures aborts the run.
    """
    if n_sims < 100:
        raise PowerError(f"n_sims must be at least 100 for a stable estimate, got {n_sims}")
    if vc_mode not in ("reml", "known"):
        raise PowerError(f"vc_mode must be 'reml' or 'known', got {vc_mode!r}")
    effective, blocks = _two_arm_blocks(schematic, excluded_policy)
    T = len(effective.periods)
    p = T + 1

    # fixed design pieces shared by every replicate
    Z_groups = []
    for js, x in blocks:
        Z = np.zeros((len(js), p))
        Z[:, 0] = 1.0
        for r, j in enumerate(js):
            if j > 0:
                Z[r, j] = 1.0
        Z[:, p - 1] = x
        Z_groups.append(Z)

    z_crit = norm.ppf(1.0 - spec.alpha / 2.0)
    analytic_var = gls_treatment_variance(schematic, spec.vc, excluded_policy)

    known_solver = None
    if vc_mode == "known":
        sigma2, tau2 = spec.vc.sigma2_resid, spec.vc.tau2
        Vinv_groups = []
        A = np.zeros((p, p))
        for (js, _), Z in zip(blocks, Z_groups):
            Ti = len(js)
            shrink = tau2 / (sigma2 + Ti * tau2)
            Vinv = (np.eye(Ti) - shrink * np.ones((Ti, Ti))) / sigma2
            Vinv_groups.append(Vinv)
            A += Z.T @ Vinv @ Z
        try:
            factor = cho_factor(A)
        except np.linalg.LinAlgError:
            raise PowerError(
                "singular information matrix: the exposure indicator is collinear with week effects"
            ) from None
        e = np.zeros(p)
        e[p - 1] = 1.0
        se_known = math.sqrt(float(cho_solve(factor, e)[p - 1]))
        known_solver = (Vinv_groups, factor, se_known)

    effect = EffectProfile.constant(spec.delta)
    rejections = 0
    failures = 0
    for rep in range(n_sims):
        rng = replicate_rng(seed, rep)
        Y = simulate_matrix(effective, spec.vc, trend, effect, rng)
        y_groups = [Y[i, js] for i, (js, _) in enumerate(blocks)]
        try:
            if known_solver is not None:
                Vinv_groups, factor, se_known = known_solver
                rhs = np.zeros(p)
                for y, Z, Vinv in zip(y_groups, Z_groups, Vinv_groups):
                    rhs += Z.T @ (Vinv @ y)
                theta = float(cho_solve(factor, rhs)[p - 1])
                se = se_known
            else:
                fit = fit_random_intercept_gls(y_groups, Z_groups)
                theta = float(fit.beta[p - 1])
                se = float(np.sqrt(max(fit.cov_beta[p - 1, p - 1], 0.0)))
            if se <= 0:
                failures += 1
                continue
            if abs(theta) / se >= z_crit:
                rejections += 1
        except (EstimationError, np.linalg.LinAlgError):
            failures += 1
    if failures > 0.01 * n_sims:
        raise PowerError(
            f"{failures} of {n_sims} simulation replicates failed to fit (>1%); "
            "the design is too fragile for simulated power"
        )
    n_ok = n_sims - failures
    phat = rejections / n_ok
    return PowerResult(
        variance=analytic_var,
        se=math.sqrt(analytic_var),
        power=phat,
        method="simulated",
        excluded_policy=excluded_policy,
        spec=spec,
        design_id=design_id,
        n_sims=n_sims,
        seed=seed,
        mc_se=math.sqrt(phat * (1.0 - phat) / n_ok) if n_ok else math.nan,
        n_failures=failures,
    )


# ---------------------------------------------------------------------------
# excluded-cell calibration


@dataclass
class CalibrationResult:
    """Per-policy power table and the policy selected against the targets."""

    table: dict[str, dict[str, float]]
    max_abs_deviation: dict[str, float]
    selected: str | None
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "table": self.table,
            "max_abs_deviation": self.max_abs_deviation,
            "selected": self.selected,
            "tolerance": self.tolerance,
        }


def calibrate_excluded(
    schematics: Mapping[str, DesignSchematic],
    specs: Mapping[str, PowerSpec],
    targets: Mapping[str, float],
    tolerance: float = 0.02,
) -> CalibrationResult:
    """Choose the excluded-cell policy that reproduces the target powers.

    Computes analytic power for every design under every policy and
    selects the policy whose worst absolute deviation from the targets is
    smallest; ``selected`` is None when no policy lands every design
    within *tolerance*.
    """
    ids = list(schematics)
    missing = [d for d in ids if d not in specs or d not in targets]
    if missing:
        raise PowerError(f"no spec/target for design(s): {', '.join(missing)}")
    table: dict[str, dict[str, float]] = {}
    max_dev: dict[str, float] = {}
    for policy in EXCLUDED_POLICIES:
        row = {}
        dev = 0.0
        for d in ids:
            pw = analytic_power(schematics[d], specs[d], policy, design_id=d).power
            row[d] = pw
            dev = max(dev, abs(pw - targets[d]))
        table[policy] = row
        max_dev[policy] = dev
    best = min(EXCLUDED_POLICIES, key=lambda pol: max_dev[pol])
    selected = best if max_dev[best] <= tolerance else None
    return CalibrationResult(
        table=table,
        max_abs_deviation=max_dev,
        selected=selected,
        tolerance=tolerance,
    )

"""Control-arm estimation: interrupted linear trend and variance components.

The variance-component model is a cluster random intercept over weekly
observations,

    Y_ij = beta_j + a_i + e_ij,   a_i ~ N(0, tau2),  e_ij ~ N(0, sigma2),

fitted by REML.  Writing lambda = tau2/sigma2, each cluster's covariance
is sigma2 * (I + lambda * J), so sigma2 profiles out in closed form and
the REML criterion reduces to a one-dimensional search over lambda:

    -2 l_R(lambda) = (n-p) log sigma2_hat(lambda)
                     + sum_i log(1 + T_i lambda)
                     + log det( Z' H(lambda)^-1 Z )      (+ const)

with H the block-diagonal correlation and sigma2_hat the GLS residual
quadratic form divided by the residual degrees of freedom n - p.  The
search is a golden-section bracket on log(lambda); the same engine also
fits models with extra fixed-effect columns (treatment indicators,
exposure-time dummies) for the power and analysis modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .panel import PanelRecord


class EstimationError(ValueError):
    """Raised for unidentifiable or non-convergent estimation problems."""


# ---------------------------------------------------------------------------
# interrupted linear trend


@dataclass(frozen=True)
class TrendFit:
    """Piecewise-linear weekly trend with a slope change at ``changepoint``.

    ``mean(week) = intercept + slope_pre * (week - origin)
                   + slope_change * max(0, week - changepoint)
                   + jump * 1{week > changepoint}``

    The default *hinge* fit keeps the segments joined (``jump == 0``); the
    *segmented* variant allows a level shift at the changepoint.
    """

    intercept: float
    slope_pre: float
    slope_change: float
    changepoint: int
    origin: int
    jump: float = 0.0
    mode: str = "hinge"

    def mean(self, week: float) -> float:
        m = self.intercept + self.slope_pre * (week - self.origin)
        m += self.slope_change * max(0.0, week - self.changepoint)
        if week > self.changepoint:
            m += self.jump
        return m

    def period_means(self, weeks: Sequence[int]) -> dict[int, float]:
        return {w: self.mean(w) for w in weeks}

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "slope_pre": self.slope_pre,
            "slope_change": self.slope_change,
            "changepoint": self.changepoint,
            "origin": self.origin,
            "jump": self.jump,
            "mode": self.mode,
        }


def fit_interrupted_trend(
    control_obs: Sequence[PanelRecord],
    changepoint: int,
    mode: str = "hinge",
) -> TrendFit:
    """Least-squares interrupted trend over control observations.

    Requires at least four observations with weeks on both sides of the
    changepoint; otherwise the slope-change column is collinear and the
    fit raises.
    """
    if mode not in ("hinge", "segmented"):
        raise EstimationError(f"unknown trend mode {mode!r}")
    obs = [r for r in control_obs if not math.isnan(r.outcome)]
    if len(obs) < 4:
        raise EstimationError(f"need at least 4 observations to fit a trend, got {len(obs)}")
    t = np.array([r.period for r in obs], dtype=float)
    y = np.array([r.outcome for r in obs], dtype=float)
    origin = int(t.min())
    if not ((t <= changepoint).any() and (t > changepoint).any()):
        raise EstimationError(
            f"all observations on one side of changepoint {changepoint}; slope change unidentified"
        )
    cols = [np.ones_like(t), t - origin, np.maximum(0.0, t - changepoint)]
    if mode == "segmented":
        cols.append((t > changepoint).astype(float))
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise EstimationError("trend design matrix is rank deficient for these observation weeks")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    jump = float(coef[3]) if mode == "segmented" else 0.0
    return TrendFit(
        intercept=float(coef[0]),
        slope_pre=float(coef[1]),
        slope_change=float(coef[2]),
        changepoint=changepoint,
        origin=origin,
        jump=jump,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# variance components


@dataclass(frozen=True)
class VarianceComponents:
    """Random-intercept variance split: marginal = tau2 + sigma2_resid."""

    tau2: float
    sigma2_resid: float
    converged: bool = True
    iterations: int = 0
    boundary: bool = False

    def __post_init__(self):
        if self.tau2 < 0 or self.sigma2_resid < 0:
            raise EstimationError("variance components must be non-negative")

    @property
    def sigma2_marginal(self) -> float:
        return self.tau2 + self.sigma2_resid

    @property
    def icc(self) -> float:
        m = self.sigma2_marginal
        return self.tau2 / m if m > 0 else 0.0

    @classmethod
    def from_marginal(cls, sigma2_marginal: float, icc: float) -> "VarianceComponents":
        """Build from a marginal variance and intra-cluster correlation."""
        if sigma2_marginal <= 0:
            raise EstimationError(f"sigma2_marginal must be positive, got {sigma2_marginal}")
        if not (0.0 <= icc < 1.0):
            raise EstimationError(f"icc must lie in [0, 1), got {icc}")
        return cls(tau2=sigma2_marginal * icc, sigma2_resid=sigma2_marginal * (1.0 - icc))

    def to_dict(self) -> dict:
        return {
            "tau2": self.tau2,
            "sigma2_resid": self.sigma2_resid,
            "sigma2_marginal": self.sigma2_marginal,
            "icc": self.icc,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass
class MixedFit:
    """GLS fit of a random-intercept model at the REML variance estimates."""

    names: tuple[str, ...]
    beta: np.ndarray
    cov_beta: np.ndarray
    vc: VarianceComponents
    objective_trace: tuple[float, ...]
    n_obs: int
    n_params: int

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def se(self, name: str) -> float:
        k = self.names.index(name)
        return float(np.sqrt(max(self.cov_beta[k, k], 0.0)))


class _ProfileStats:
    """Sufficient statistics for the profiled REML criterion."""

    def __init__(self, y_groups, Z_groups):
        p = Z_groups[0].shape[1]
        self.p = p
        self.G = np.zeros((p, p))
        self.g = np.zeros(p)
        self.q = 0.0
        S, u, T = [], [], []
        n = 0
        for y, Z in zip(y_groups, Z_groups):
            y = np.asarray(y, dtype=float)
            Z = np.asarray(Z, dtype=float)
            if Z.shape[0] != y.shape[0]:
                raise EstimationError("group design/outcome length mismatch")
            if Z.shape[1] != p:
                raise EstimationError("all groups must share the same fixed-effect columns")
            self.G += Z.T @ Z
            self.g += Z.T @ y
            self.q += float(y @ y)
            S.append(Z.sum(axis=0))
            u.append(float(y.sum()))
            T.append(len(y))
            n += len(y)
        self.S = np.array(S)
        self.u = np.array(u)
        self.T = np.array(T, dtype=float)
        self.n = n

    def evaluate(self, lam: float):
        """Return (-2 profiled REML objective, sigma2_hat, beta_hat, A)."""
        c = lam / (1.0 + self.T * lam)
        A = self.G - (self.S * c[:, None]).T @ self.S
        b = self.g - self.S.T @ (c * self.u)
        r = self.q - float(np.sum(c * self.u * self.u))
        try:
            factor = cho_factor(A)
        except np.linalg.LinAlgError:
            return math.inf, math.nan, None, A
        beta = cho_solve(factor, b)
        rss = max(r - float(b @ beta), 0.0)
        dof = self.n - self.p
        sigma2 = rss / dof
        logdet_A = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        obj = dof * math.log(max(sigma2, 1e-300)) + float(np.sum(np.log1p(self.T * lam))) + logdet_A
        return obj, sigma2, beta, A


def evaluate_reml_profile(y_groups, Z_groups, lam: float) -> tuple[float, float, np.ndarray]:
    """Profiled REML criterion at a fixed variance ratio (for cross-checks)."""
    stats = _ProfileStats(y_groups, Z_groups)
    obj, sigma2, beta, _ = stats.evaluate(lam)
    return obj, sigma2, beta


def fit_random_intercept_gls(
    y_groups: Sequence[np.ndarray],
    Z_groups: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
    lam_bounds: tuple[float, float] = (1e-8, 1e6),
    lam_tol: float = 1e-9,
    max_iter: int = 200,
) -> MixedFit:
    """REML fit of a random-intercept GLS model on grouped data.

    Groups are clusters: ``y_groups[i]`` holds cluster *i*'s outcomes and
    ``Z_groups[i]`` its fixed-effect rows.  The variance ratio is found by
    golden-section search on log(lambda) over *lam_bounds*; the recorded
    objective trace is the best criterion value after each iteration and
    is non-increasing by construction.
    """
    if len(y_groups) != len(Z_groups):
        raise EstimationError("y_groups and Z_groups differ in length")
    if len(y_groups) < 2:
        raise EstimationError(f"need at least 2 clusters, got {len(y_groups)}")
    stats = _ProfileStats(y_groups, Z_groups)
    if stats.n <= stats.p:
        raise EstimationError(
            f"{stats.n} observations cannot identify {stats.p} fixed effects plus variances"
        )
    Z_full = np.vstack([np.asarray(Z, dtype=float) for Z in Z_groups])
    if np.linalg.matrix_rank(Z_full) < stats.p:
        raise EstimationError(
            "fixed-effect design is rank deficient (collinear columns); "
            "check for unobserved periods or a treatment column confounded with time"
        )

    lo, hi = lam_bounds
    a, b = math.log(lo), math.log(hi)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1 = stats.evaluate(math.exp(x1))[0]
    f2 = stats.evaluate(math.exp(x2))[0]
    trace = [min(f1, f2)]
    iterations = 0
    converged = False
    while iterations < max_iter:
        if (math.exp(b) - math.exp(a)) < lam_tol or (b - a) < 1e-12:
            converged = True
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = stats.evaluate(math.exp(x1))[0]
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = stats.evaluate(math.exp(x2))[0]
        iterations += 1
        trace.append(min(trace[-1], f1, f2))
    if not converged:
        raise EstimationError(f"REML search did not converge within {max_iter} iterations")

    lam_hat = math.exp(0.5 * (a + b))
    _, sigma2, beta, A = stats.evaluate(lam_hat)
    boundary = lam_hat <= lo * 1.5
    tau2 = 0.0 if boundary else lam_hat * sigma2
    vc = VarianceComponents(
        tau2=tau2,
        sigma2_resid=sigma2,
        converged=converged,
        iterations=iterations,
        boundary=boundary,
    )
    cov_beta = sigma2 * np.linalg.inv(A)
    if names is None:
        names = tuple(f"b{k}" for k in range(stats.p))
    return MixedFit(
        names=tuple(names),
        beta=np.asarray(beta, dtype=float),
        cov_beta=cov_beta,
        vc=vc,
        objective_trace=tuple(trace),
        n_obs=stats.n,
        n_params=stats.p,
    )


def _period_dummy_groups(records: Sequence[PanelRecord]):
    """Group records by cluster with full period-dummy design matrices."""
    clean = [r for r in records if not math.isnan(r.outcome)]
    periods = sorted({r.period for r in clean})
    order: list[str] = []
    by_cluster: dict[str, list[PanelRecord]] = {}
    for r in clean:
        if r.cluster_id not in by_cluster:
            order.append(r.cluster_id)
            by_cluster[r.cluster_id] = []
        by_cluster[r.cluster_id].append(r)
    pos = {p: j for j, p in enumerate(periods)}
    y_groups, Z_groups = [], []
    for cid in order:
        rs = by_cluster[cid]
        y = np.array([r.outcome for r in rs], dtype=float)
        Z = np.zeros((len(rs), len(periods)))
        for k, r in enumerate(rs):
            Z[k, pos[r.period]] = 1.0
        y_groups.append(y)
        Z_groups.append(Z)
    names = tuple(f"week[{p}]" for p in periods)
    return y_groups, Z_groups, names, order, periods


def control_model_fit(control_obs: Sequence[PanelRecord]) -> MixedFit:
    """Random-intercept fit of week means on control observations."""
    y_groups, Z_groups, names, order, periods = _period_dummy_groups(control_obs)
    if len(order) < 2:
        raise EstimationError(f"need at least 2 clusters, got {len(order)}")
    if len(periods) < 2:
        raise EstimationError(f"need at least 2 periods, got {len(periods)}")
    return fit_random_intercept_gls(y_groups, Z_groups, names=names)


def fit_variance_components(control_obs: Sequence[PanelRecord]) -> VarianceComponents:
    """REML variance components from control observations.

    A boundary solution (between-cluster variance pinned at zero) is
    reported as ``tau2 == 0`` with ``boundary`` set, not as an error.
    """
    return control_model_fit(control_obs).vc

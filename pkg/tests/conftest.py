import numpy as np
import pytest

from wedgelab.design import CellStatus, ClusterSequence, DesignSchematic, build_schematic
from wedgelab.estimation import VarianceComponents
from wedgelab.lottery import build_adopters_only_design, build_full_design, build_matched_design
from wedgelab.panel import CovariateProfile
from wedgelab.simulate import EffectProfile, generate_panel


@pytest.fixture(scope="session")
def full_design():
    return build_full_design()


@pytest.fixture(scope="session")
def matched_design():
    return build_matched_design()


@pytest.fixture(scope="session")
def adopters_design():
    return build_adopters_only_design()


# Overlapping covariate values so a single treated cluster is never
# perfectly separable from the pool on any one covariate.
_EXCLUDED_PCT = {
    "OH": 56.0, "IL": 59.5, "MI": 54.0, "MO": 61.0,
    "IA": 57.5, "IN": 53.0, "KS": 60.0, "MN": 55.5,
    "ND": 58.0, "NE": 62.0, "SD": 56.5, "WI": 59.0,
}


@pytest.fixture(scope="session")
def lottery_covariates():
    profiles = []
    for state, excl in _EXCLUDED_PCT.items():
        already = round(excl * 0.6, 1)
        profiles.append(
            CovariateProfile(
                cluster_id=state,
                already_vaccinated_pct=already,
                excluded_pct=excl,
                persuadable_pct=round(100.0 - excl, 1),
            )
        )
    return tuple(profiles)


@pytest.fixture
def hh_vc():
    """Variance split used in the synthetic-recovery exercises."""
    return VarianceComponents(tau2=0.14, sigma2_resid=0.21, converged=True, iterations=0, boundary=False)


def make_all_control_design(n_clusters: int, n_periods: int) -> DesignSchematic:
    rows = tuple(ClusterSequence(f"c{k:03d}") for k in range(n_clusters))
    grid = ((CellStatus.CONTROL,) * n_periods,) * n_clusters
    return DesignSchematic(tuple(range(1, n_periods + 1)), rows, grid)


def make_two_group_design(n_per_group: int = 16, n_never: int = 16) -> DesignSchematic:
    """Adoption at weeks 4 and 6 over weeks 1-9, with never-exposed rows."""
    seqs = [ClusterSequence(f"c{k:03d}", 4) for k in range(n_per_group)]
    seqs += [ClusterSequence(f"c{k:03d}", 6) for k in range(n_per_group, 2 * n_per_group)]
    seqs += [
        ClusterSequence(f"c{k:03d}")
        for k in range(2 * n_per_group, 2 * n_per_group + n_never)
    ]
    return build_schematic(seqs, (1, 9))


def flat_panel(schematic, vc, delta, seed, level=1.0):
    means = {t: level for t in schematic.periods}
    return generate_panel(schematic, vc, means, EffectProfile.constant(delta), seed=seed)


def dense_gls_variance(schematic, vc, excluded_policy):
    """Brute-force GLS variance of the exposure coefficient.

    Builds the full stacked covariance (block exchangeable within each
    cluster) and the [intercept, week dummies, exposure] design, then
    reads the exposure entry of the inverse information.  Slow but
    direct; the production code must agree with this.
    """
    from wedgelab.design import apply_excluded_policy

    eff = apply_excluded_policy(schematic, excluded_policy)
    T = len(eff.periods)
    p = T + 1
    blocks = []
    X_rows = []
    for i, seq in enumerate(eff.rows):
        js = [j for j in range(T) if eff.grid[i][j] is not CellStatus.ABSENT]
        n_i = len(js)
        V = vc.sigma2_resid * np.eye(n_i) + vc.tau2 * np.ones((n_i, n_i))
        blocks.append(np.linalg.inv(V))
        Xi = np.zeros((n_i, p))
        Xi[:, 0] = 1.0
        for r, j in enumerate(js):
            if j > 0:
                Xi[r, j] = 1.0
            Xi[r, p - 1] = 1.0 if eff.grid[i][j] is CellStatus.EXPOSED else 0.0
        X_rows.append(Xi)
    A = np.zeros((p, p))
    for Vinv, Xi in zip(blocks, X_rows):
        A += Xi.T @ Vinv @ Xi
    return float(np.linalg.inv(A)[p - 1, p - 1])

"""Moment estimation on a resampled price grid and long-only maximum-Sharpe
portfolio weights.

Trade histories are irregular, so covariance is estimated on a regular
grid: each asset's price is carried forward (last observation) onto grid
points spaced ``grid_period_seconds`` apart over the window shared by all
assets, per-period simple returns are taken on that grid, and the sample
mean and covariance (n-1 denominator) of those returns form the moment
estimate.

The portfolio step maximizes the Sharpe ratio

    (E[R_p] - R_f) / sigma_p,   R_p = w . mu,   sigma_p = sqrt(w' Sigma w)

over the simplex (weights sum to one, no shorting) by minimizing the
negative Sharpe ratio from an equal-weight start.  The SQP iterations
stop when the objective improves by less than ``objective_tolerance`` or
after ``max_iterations``; the result is then polished with the
closed-form tangency solution restricted to the active support, kept
only when it is feasible and not worse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .model import MomentEstimate, PipelineError, PortfolioAllocation, PriceSeries, TokenRef
from .returns import InsufficientDataError

logger = logging.getLogger(__name__)

# Covariance below this eigenvalue floor counts as degenerate and gets the ridge.
_PSD_TOL = 1e-12


class DegeneratePortfolioError(PipelineError):
    """Portfolio variance is zero; the Sharpe ratio is undefined."""


class NoFeasibleTangencyError(PipelineError):
    """No asset earns more than the risk-free rate, so every long-only
    portfolio has non-positive excess return."""


@dataclass(frozen=True)
class OptimizerConfig:
    risk_free_rate: float = 0.0
    top_k: int = 10
    grid_period_seconds: int = 86400
    ridge_epsilon: float = 1e-10
    max_iterations: int = 1000
    objective_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.grid_period_seconds <= 0:
            raise ValueError("grid_period_seconds must be positive")
        if self.ridge_epsilon < 0 or self.max_iterations < 1 or self.objective_tolerance <= 0:
            raise ValueError("ridge_epsilon/max_iterations/objective_tolerance out of range")


def select_assets(series_list: list[PriceSeries], k: int) -> list[PriceSeries]:
    """Pick the k most-traded series; ties break by ascending token string."""
    ranked = sorted(series_list, key=lambda s: (-len(s), s.token.token))
    return ranked[:k]


def resample_to_grid(series: PriceSeries, period_seconds: int, window: tuple[int, int]) -> np.ndarray:
    """Last-observation-carried-forward prices at grid points
    start, start+period, ... <= end.

    Grid points before the first trade take the first traded price, so the
    caller should start the window at or after that trade.
    """
    if len(series) == 0:
        raise InsufficientDataError(f"{series.token.token}: cannot resample an empty series")
    start, end = window
    if end < start:
        raise ValueError(f"window end {end} precedes start {start}")
    n_points = (end - start) // period_seconds + 1
    grid = start + period_seconds * np.arange(n_points, dtype=np.int64)
    ts = np.asarray(series.timestamps, dtype=np.int64)
    idx = np.searchsorted(ts, grid, side="right") - 1
    idx = np.clip(idx, 0, len(ts) - 1)
    return np.asarray(series.prices, dtype=float)[idx]


def estimate_moments(
    assets: list[PriceSeries],
    config: OptimizerConfig,
    window_end: int | None = None,
) -> MomentEstimate:
    """Mean vector and sample covariance of per-period grid returns.

    The common window runs from the latest first-trade among the assets to
    ``window_end`` (default: the latest trade observed on any asset) and
    must contain at least three grid points, i.e. two return periods.
    Near-singular covariance (smallest eigenvalue under 1e-12) gets
    ``ridge_epsilon`` added to its diagonal so downstream volatility stays
    positive.
    """
    if len(assets) < 2:
        raise InsufficientDataError(f"need at least 2 assets, have {len(assets)}")
    for s in assets:
        if len(s) < 2:
            raise InsufficientDataError(f"{s.token.token}: need at least 2 trades, have {len(s)}")
    start = max(s.timestamps[0] for s in assets)
    end = max(s.timestamps[-1] for s in assets) if window_end is None else int(window_end)
    period = config.grid_period_seconds
    n_points = (end - start) // period + 1 if end >= start else 0
    if n_points < 3:
        raise InsufficientDataError(
            f"common window [{start}, {end}] holds {n_points} grid point(s) "
            f"at {period}s; need at least 3"
        )
    prices = np.column_stack([resample_to_grid(s, period, (start, end)) for s in assets])
    rets = prices[1:] / prices[:-1] - 1.0
    mu = rets.mean(axis=0)
    sigma = np.cov(rets, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    rf = config.risk_free_rate
    for i, s in enumerate(assets):
        if sigma[i, i] == 0.0 and mu[i] - rf == 0.0:
            logger.warning(
                "asset=%s flag=zero-variance-zero-excess-return", s.token.token
            )
    if np.linalg.eigvalsh((sigma + sigma.T) / 2.0).min() < _PSD_TOL:
        sigma = sigma + config.ridge_epsilon * np.eye(len(assets))
    return MomentEstimate(
        assets=tuple(s.token for s in assets),
        mean_returns=mu,
        covariance=sigma,
        grid_period_seconds=period,
    )


def neg_sharpe(
    weights: np.ndarray,
    mean_returns: np.ndarray,
    covariance: np.ndarray,
    risk_free_rate: float = 0.0,
) -> float:
    """Negative Sharpe ratio of a weight vector (minimization objective)."""
    w = np.asarray(weights, dtype=float)
    portfolio_return = float(np.dot(w, mean_returns))
    variance = float(w @ covariance @ w)
    volatility = np.sqrt(max(variance, 0.0))
    if volatility == 0.0:
        raise DegeneratePortfolioError("portfolio volatility is zero; Sharpe undefined")
    return -(portfolio_return - risk_free_rate) / volatility


def _restricted_tangency(
    mu: np.ndarray, sigma: np.ndarray, rf: float, support: np.ndarray
) -> np.ndarray | None:
    """Closed-form tangency weights on a support set, or None when the
    solution leaves the simplex or the system is singular."""
    idx = np.flatnonzero(support)
    if idx.size == 0:
        return None
    try:
        y = np.linalg.solve(sigma[np.ix_(idx, idx)], mu[idx] - rf)
    except np.linalg.LinAlgError:
        return None
    total = y.sum()
    if not np.isfinite(y).all() or total <= 0 or (y / total < -1e-12).any():
        return None
    w = np.zeros(len(mu))
    w[idx] = y / total
    return w


def max_sharpe_weights(moments: MomentEstimate, config: OptimizerConfig) -> PortfolioAllocation:
    """Long-only weights maximizing the Sharpe ratio of the moment estimate.

    Runs SQP from equal weights under sum-to-one and [0, 1] bounds, then
    compares a handful of feasible candidates (the SQP point, closed-form
    tangency solutions on its support and on every asset, equal weights
    and the best single asset) and keeps the best.  Raises
    NoFeasibleTangencyError when no asset beats the risk-free rate.
    """
    mu = moments.mean_returns
    sigma = moments.covariance
    rf = config.risk_free_rate
    n = len(moments.assets)
    if n == 0:
        raise InsufficientDataError("no assets to allocate")
    if float(mu.max()) <= rf:
        raise NoFeasibleTangencyError(
            f"no asset return exceeds the risk-free rate {rf}; tangency portfolio undefined"
        )

    def objective(w: np.ndarray) -> float:
        variance = float(w @ sigma @ w)
        if variance <= 0.0:
            return 1e18  # degenerate corner; push the iterate away
        return -(float(np.dot(w, mu)) - rf) / np.sqrt(variance)

    candidates: list[np.ndarray] = [np.full(n, 1.0 / n)]
    diag = np.diag(sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        single = np.where(diag > 0, (mu - rf) / np.sqrt(diag), -np.inf)
    best_single = int(np.argmax(single))
    unit = np.zeros(n)
    unit[best_single] = 1.0
    candidates.append(unit)

    if n == 1:
        w = np.array([1.0])
    else:
        result = minimize(
            objective,
            np.full(n, 1.0 / n),
            method="SLSQP",
            bounds=tuple((0.0, 1.0) for _ in range(n)),
            constraints=({"type": "eq", "fun": lambda w: np.sum(w) - 1.0},),
            options={"ftol": config.objective_tolerance, "maxiter": config.max_iterations},
        )
        w = np.clip(np.asarray(result.x, dtype=float), 0.0, None)
        if w.sum() > 0:
            candidates.append(w / w.sum())
        polish = _restricted_tangency(mu, sigma, rf, w > 1e-9)
        if polish is not None:
            candidates.append(polish)
        full = _restricted_tangency(mu, sigma, rf, np.ones(n, dtype=bool))
        if full is not None:
            candidates.append(full)

    best_w: np.ndarray | None = None
    best_obj = np.inf
    for cand in candidates:
        cand = np.clip(cand, 0.0, None)
        total = cand.sum()
        if total <= 0:
            continue
        cand = cand / total
        obj = objective(cand)
        if obj < best_obj:
            best_obj, best_w = obj, cand
    if best_w is None or not np.isfinite(best_obj):
        raise DegeneratePortfolioError("no candidate portfolio has positive volatility")
    return PortfolioAllocation(
        assets=moments.assets,
        weights=tuple(float(x) for x in best_w),
        sharpe=-best_obj,
        risk_free_rate=rf,
    )


def grid_sharpe_oracle(
    moments: MomentEstimate, resolution: float = 0.01, risk_free_rate: float = 0.0
) -> tuple[tuple[float, ...], float]:
    """Exhaustive simplex-lattice Sharpe maximizer for cross-checking.

    Enumerates every weight vector whose components are multiples of
    ``resolution`` and sum to one, in lexicographic order, and returns the
    best (ties keep the lexicographically smallest vector).  Deliberately
    refuses more than four assets; the lattice grows too fast beyond that.
    """
    n = len(moments.assets)
    if n == 0:
        raise ValueError("no assets")
    if n > 4:
        raise ValueError(f"grid oracle supports at most 4 assets, got {n}")
    steps = round(1.0 / resolution)
    if abs(steps * resolution - 1.0) > 1e-9 or steps < 1:
        raise ValueError(f"resolution {resolution} does not evenly divide 1")

    def compositions(total: int, parts: int):
        if parts == 1:
            yield (total,)
            return
        for head in range(total + 1):
            for rest in compositions(total - head, parts - 1):
                yield (head, *rest)

    lattice = np.array(list(compositions(steps, n)), dtype=float) / steps
    mu = moments.mean_returns
    sigma = moments.covariance
    rets = lattice @ mu
    variances = np.einsum("ki,ij,kj->k", lattice, sigma, lattice)
    with np.errstate(divide="ignore", invalid="ignore"):
        sharpes = np.where(
            variances > 0, (rets - risk_free_rate) / np.sqrt(np.maximum(variances, 0)), -np.inf
        )
    best = int(np.argmax(sharpes))  # argmax keeps the first (lex smallest) on ties
    if not np.isfinite(sharpes[best]):
        raise DegeneratePortfolioError("every lattice point has zero volatility")
    return tuple(float(x) for x in lattice[best]), float(sharpes[best])

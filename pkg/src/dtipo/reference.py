"""Closed-form continuous-time mean-variance strategy for jump-free markets.

With ρ = (b - r1)ᵀ(σσᵀ)⁻¹(b - r1) the pre-commitment optimum of
E[x_T] - λ Var[x_T] is

    γ        = x₀ e^{rT} + e^{ρT} / (2λ)
    E[x*_T]  = x₀ e^{rT} + (e^{ρT} - 1) / (2λ)
    Var[x*_T] = (e^{ρT} - 1) / (4λ²)
    U*       = x₀ e^{rT} + (e^{ρT} - 1) / (4λ)

and the optimal currency amount held in the stocks is
``(σσᵀ)⁻¹(b - r1) (γ e^{-r(T-t)} - x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor
from .market import MarketParams, PathBatch
from .policy import StrategyOutcome, TradingConstraints, per_stock_costs, run_allocation

PAPER_LAMBDA = 1.104
PAPER_OPTIMUM = 1.1637


class AnalyticValidationError(AssertionError):
    pass


@dataclass(frozen=True)
class MvAnalytic:
    rho: float
    gamma: float
    lam: float
    x0: float
    r: float
    T: float
    direction: np.ndarray
    theoretical_mean: float
    theoretical_var: float
    theoretical_objective: float


def _excess_direction(params: MarketParams) -> tuple[np.ndarray, float]:
    cov = params.sigma @ params.sigma.T
    excess = params.b - params.r
    try:
        direction = np.linalg.solve(cov, excess)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("sigma sigma^T is singular") from exc
    if np.linalg.cond(cov) > 1e12:
        raise np.linalg.LinAlgError("sigma sigma^T is singular")
    return direction, float(excess @ direction)


def analytic_solution(params: MarketParams, lam: float, x0: float = 1.0) -> MvAnalytic:
    if params.has_jumps:
        raise ValueError("the closed form only holds without jumps")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    direction, rho = _excess_direction(params)
    T, r = params.T, params.r
    growth = np.exp(rho * T)
    gamma = x0 * np.exp(r * T) + growth / (2 * lam)
    mean = x0 * np.exp(r * T) + (growth - 1) / (2 * lam)
    var = (growth - 1) / (4 * lam ** 2)
    return MvAnalytic(rho=rho, gamma=gamma, lam=lam, x0=x0, r=r, T=T, direction=direction,
                      theoretical_mean=mean, theoretical_var=var, theoretical_objective=mean - lam * var)


def validate_against_paper(analytic: MvAnalytic, expected: float = PAPER_OPTIMUM, tol: float = 5e-4) -> None:
    """Abort loudly if the closed form does not reproduce the published optimum."""
    if abs(analytic.theoretical_objective - expected) > tol:
        raise AnalyticValidationError(
            f"closed-form optimum {analytic.theoretical_objective:.6f} differs from {expected} by more than {tol}")


def feedback_allocation(analytic: MvAnalytic, t, x) -> np.ndarray:
    """Currency amount per stock at time ``t`` and wealth ``x`` (broadcasts over x)."""
    gap = analytic.gamma * np.exp(-analytic.r * (analytic.T - np.asarray(t))) - np.asarray(x, dtype=float)
    return np.multiply.outer(gap, analytic.direction)


def mv_baseline_for_target_mean(params: MarketParams, target_mean: float, x0: float = 1.0) -> MvAnalytic:
    """Closed-form strategy whose theoretical mean terminal wealth equals ``target_mean``."""
    jump_free = replace(params, jump_intensity=np.zeros_like(params.jump_intensity))
    _, rho = _excess_direction(jump_free)
    floor = x0 * np.exp(params.r * params.T)
    if not target_mean > floor or rho <= 0:
        raise ValueError(f"target mean {target_mean} is not attainable (must exceed {floor:.6f})")
    lam = (np.exp(rho * params.T) - 1) / (2 * (target_mean - floor))
    return analytic_solution(jump_free, lam, x0)


def simulate_feedback(analytic: MvAnalytic, batch: PathBatch, constraints: TradingConstraints,
                      x0_IC: float = 1.0) -> StrategyOutcome:
    """Apply the closed-form rule at the trading dates of ``batch``."""
    grid = batch.grid

    def dynamic(n, x, S_n):
        value = feedback_allocation(analytic, grid[n], x.values)
        with np.errstate(divide="ignore", invalid="ignore"):
            units = np.where(S_n > 0, value / np.where(S_n > 0, S_n, 1.0), 0.0)
        return Tensor(units)

    value0 = feedback_allocation(analytic, 0.0, x0_IC)
    units0 = value0 / batch.stocks[0, 0]
    xN, cost, rec = run_allocation(batch, Tensor(x0_IC), Tensor(units0), dynamic, constraints)
    R_SB = xN.values - x0_IC - cost.values
    M = batch.M
    return StrategyOutcome(
        returns=Tensor(R_SB), wealth=rec["wealth"], units=rec["units"], bond_units=rec["bond_units"],
        beta=np.zeros(0), strikes=np.zeros(0), option_prices=np.zeros(0), y0=0.0, yT=np.zeros(M),
        option_pnl=np.zeros((M, 0)),
        tc=per_stock_costs(rec["units"], batch.stocks, batch.grid, batch.bond, constraints),
        R_SB=R_SB, R_O=np.zeros(M), x0_hat=x0_IC,
    )


class AnalyticStrategy:
    """Adapter so the closed-form rule can be evaluated like a trained policy."""

    def __init__(self, analytic: MvAnalytic, label: str = "mv"):
        self.analytic = analytic
        self.label = label

    def simulate(self, batch: PathBatch, constraints: TradingConstraints, x0_IC: float = 1.0) -> StrategyOutcome:
        return simulate_feedback(self.analytic, batch, constraints, x0_IC)


__all__ = ["MvAnalytic", "analytic_solution", "feedback_allocation", "mv_baseline_for_target_mean",
           "simulate_feedback", "validate_against_paper", "AnalyticStrategy"]

"""Domain types and evaluation primitives for the data-contribution game.

An instance couples n agents (each choosing a contribution level s_i inside a
box [0, s_i_max]) with a center that maintains a shared parameter vector w.
Agent utility is accuracy minus cost plus an optional transfer payment; social
welfare sums accuracies only, so transfers cancel out of the planner's view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .models import AccuracyModel, CostModel

# Absolute tolerance for comparisons against box bounds.
BOUND_TOL = 1e-12


class GameError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(GameError):
    """Invalid configuration or violated precondition."""


class NumericError(GameError):
    """A non-finite value appeared during evaluation."""


class ModelEvalError(GameError):
    """An accuracy model could not be evaluated (e.g. singular denominator)."""


class FederationError(GameError):
    """A remote agent failed the protocol: timeout, disconnect, bad frame."""


@dataclass(frozen=True)
class PaymentRule:
    """Transfer scheme applied on top of accuracy and cost.

    kind "none" disables transfers.  kind "linear" pays agent i
    beta * (s_i - mean of the other agents' contributions), which sums to
    zero over agents by construction and therefore never injects or burns
    value.  Linear transfers need at least two agents.
    """

    kind: str = "none"
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "linear"):
            raise ConfigError(f"unknown payment rule {self.kind!r}")
        if not np.isfinite(self.beta) or self.beta < 0.0:
            raise ConfigError("beta must be finite and nonnegative")
        if self.kind == "none" and self.beta != 0.0:
            raise ConfigError("payment rule 'none' cannot carry a beta")

    @classmethod
    def none(cls) -> "PaymentRule":
        return cls("none", 0.0)

    @classmethod
    def linear(cls, beta: float) -> "PaymentRule":
        return cls("linear", float(beta))


@dataclass(frozen=True)
class AgentSpec:
    """Static description of one agent: identity, box bound, starting point."""

    id: int
    s_max: float
    initial_s: float = 0.0

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ConfigError("agent ids must be nonnegative")
        if not np.isfinite(self.s_max) or self.s_max <= 0.0:
            raise ConfigError(f"agent {self.id}: s_max must be positive")
        if not (-BOUND_TOL <= self.initial_s <= self.s_max + BOUND_TOL):
            raise ConfigError(f"agent {self.id}: initial_s outside [0, s_max]")


@dataclass(frozen=True, eq=False)
class GameInstance:
    """One complete game: agents, shared accuracy family, costs, transfers."""

    agents: tuple[AgentSpec, ...]
    accuracy: "AccuracyModel"
    cost: "CostModel"
    payment: PaymentRule
    m: int

    def __post_init__(self) -> None:
        n = len(self.agents)
        if n < 1:
            raise ConfigError("need at least one agent")
        if self.m < 1:
            raise ConfigError("parameter dimension m must be >= 1")
        if tuple(a.id for a in self.agents) != tuple(range(n)):
            raise ConfigError("agent ids must be 0..n-1 in order")
        if self.accuracy.n_agents != n:
            raise ConfigError("accuracy model agent count does not match n")
        if self.accuracy.dim != self.m:
            raise ConfigError("accuracy model parameter dimension does not match m")
        if self.cost.n_agents != n:
            raise ConfigError("cost model agent count does not match n")
        if self.payment.kind == "linear" and n < 2:
            raise ConfigError("linear transfers require at least two agents")

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def s_max(self) -> np.ndarray:
        return np.array([a.s_max for a in self.agents], dtype=float)

    @property
    def initial_s(self) -> np.ndarray:
        return np.array([a.initial_s for a in self.agents], dtype=float)


@dataclass(frozen=True)
class UtilityReport:
    """Per-agent breakdown; utility is the exact sum of the stored parts."""

    accuracy: float
    cost: float
    payment: float
    utility: float

    @classmethod
    def build(cls, accuracy: float, cost: float, payment: float) -> "UtilityReport":
        return cls(accuracy, cost, payment, accuracy - cost + payment)


def _as_profile(s: np.ndarray | list | tuple) -> np.ndarray:
    arr = np.asarray(s, dtype=float)
    if arr.ndim != 1:
        raise ConfigError("strategy profile must be a 1-d vector")
    return arr


def payment(rule: PaymentRule, s: np.ndarray, i: int) -> float:
    """Transfer to agent i under `rule` at profile s.

    Linear rule: beta * (s_i - sum_{j != i} s_j / (n - 1)).
    """
    s = _as_profile(s)
    n = s.shape[0]
    if not 0 <= i < n:
        raise ConfigError(f"agent index {i} out of range for n={n}")
    if rule.kind == "none":
        return 0.0
    if n < 2:
        raise ConfigError("linear transfers require at least two agents")
    others = (float(s.sum()) - float(s[i])) / (n - 1)
    return rule.beta * (float(s[i]) - others)


def payment_vector(rule: PaymentRule, s: np.ndarray) -> np.ndarray:
    return np.array([payment(rule, s, i) for i in range(len(s))], dtype=float)


def utility(g: GameInstance, i: int, w: np.ndarray, s: np.ndarray) -> UtilityReport:
    """Accuracy, cost, payment and their signed sum for agent i at (w, s)."""
    s = _as_profile(s)
    if not 0 <= i < g.n:
        raise ConfigError(f"agent index {i} out of range for n={g.n}")
    acc = g.accuracy.value(i, w, s)
    cost = g.cost.value(i, float(s[i]))
    pay = payment(g.payment, s, i)
    rep = UtilityReport.build(acc, cost, pay)
    if not np.isfinite(rep.utility):
        raise NumericError(f"non-finite utility for agent {i}")
    return rep


def social_welfare(g: GameInstance, w: np.ndarray, s: np.ndarray) -> float:
    """Sum of accuracies over agents.  Costs and transfers are excluded."""
    s = _as_profile(s)
    total = 0.0
    for i in range(g.n):
        total += g.accuracy.value(i, w, s)
    return total


def raw_strategy_derivatives(g: GameInstance, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Uncorrected per-agent derivative of own utility in own contribution."""
    s = _as_profile(s)
    beta_term = g.payment.beta if g.payment.kind == "linear" else 0.0
    out = np.empty(g.n, dtype=float)
    for i in range(g.n):
        out[i] = g.accuracy.dsi(i, w, s) - g.cost.deriv(i, float(s[i])) + beta_term
    return out


def mu_correct(raw: np.ndarray, s: np.ndarray, s_max: np.ndarray) -> np.ndarray:
    """Zero derivative components that push outward at an active box bound."""
    out = np.array(raw, dtype=float)
    at_lo = np.abs(s) <= BOUND_TOL
    at_hi = np.abs(s - s_max) <= BOUND_TOL
    out[at_lo & (out < 0.0)] = 0.0
    out[at_hi & (out > 0.0)] = 0.0
    return out


def strategy_gradient(g: GameInstance, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Boundary-corrected strategy update direction, one entry per agent.

    Component i is d u_i / d s_i, forced to zero when it points out of the
    box (negative at s_i = 0 or positive at s_i = s_i_max).
    """
    raw = raw_strategy_derivatives(g, w, s)
    if not np.all(np.isfinite(raw)):
        bad = int(np.flatnonzero(~np.isfinite(raw))[0])
        raise NumericError(f"non-finite strategy derivative for agent {bad}")
    return mu_correct(raw, _as_profile(s), g.s_max)


def welfare_gradient(g: GameInstance, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Mean over agents of the accuracy gradient in w."""
    s = _as_profile(s)
    total = np.zeros(g.m, dtype=float)
    for i in range(g.n):
        total += g.accuracy.grad_w(i, w, s)
    out = total / g.n
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite welfare gradient")
    return out


def clamp_profile(s_raw: np.ndarray, g: GameInstance) -> np.ndarray:
    """Project a raw profile back onto the contribution box."""
    s_raw = _as_profile(s_raw)
    if s_raw.shape[0] != g.n:
        raise ConfigError("profile length does not match agent count")
    return np.clip(s_raw, 0.0, g.s_max)

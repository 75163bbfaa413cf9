"""Simultaneous and two-phase contribution dynamics.

Four dynamics share the same per-round agent computation (AgentWorker):

* upbred_run: agents ascend their boundary-corrected utility derivative while
  the center ascends mean accuracy, both every round.
* two_phase_run: contributions are driven to the box ceiling first (model
  frozen), then the center trains on full contributions.
* fedavg_run: mechanism-free baseline, contributions pinned at the ceiling.
* fedavg_strategic_run: contribution loop at the frozen start model until no
  agent gains by moving, then training with contributions frozen.

A pool object hides where agents live; LocalPool calls workers in process,
the federation module supplies a transport-backed drop-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import ceil, log, sqrt
from typing import Sequence

import numpy as np

from .core import (
    BOUND_TOL,
    ConfigError,
    FederationError,
    GameInstance,
    ModelEvalError,
    NumericError,
    PaymentRule,
    UtilityReport,
    clamp_profile,
    payment_vector,
    social_welfare,
    strategy_gradient,
    utility,
    welfare_gradient,
)
from .traceio import game_manifest, instance_digest

UPDATERS = ("analytic", "empirical")
W_GRAD_CHOICES = ("updated", "current")
ALGORITHMS = ("upbred", "2p-upbred", "fedavg", "fedavg-strategic")

# Guard for the difference-quotient denominator in the empirical updater.
QUOTIENT_DS_MIN = 1e-9


@dataclass(frozen=True)
class RunConfig:
    """Step sizes, horizons and tolerances for one run.

    rounds bounds the simultaneous loop (or the training phase of the
    two-phase dynamics); phase1_cap bounds the contribution phase and
    defaults to ten times the predicted phase length when that is
    computable, 10^5 otherwise.
    """

    gamma: float
    eta: float
    rounds: int
    eps: float = 1e-6
    eps_s: float = 1e-9
    phase1_cap: int | None = None
    seed: int = 0
    updater: str = "analytic"
    w_grad_at: str = "updated"
    learn_rate: float = 0.1

    def __post_init__(self) -> None:
        for name in ("gamma", "eta", "eps", "eps_s", "learn_rate"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ConfigError(f"{name} must be finite and positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.phase1_cap is not None and self.phase1_cap < 1:
            raise ConfigError("phase1_cap must be >= 1 when given")
        if self.updater not in UPDATERS:
            raise ConfigError(f"unknown updater {self.updater!r}")
        if self.w_grad_at not in W_GRAD_CHOICES:
            raise ConfigError(f"unknown w_grad_at {self.w_grad_at!r}")


@dataclass(frozen=True)
class RoundRecord:
    """State snapshot at the start of round t, before that round's update."""

    t: int
    phase: str  # "1", "2" or "single"
    s: np.ndarray
    w: np.ndarray
    reports: tuple[UtilityReport, ...]
    welfare: float
    g_norm: float
    gt_norm: float


@dataclass
class Trace:
    config: RunConfig
    instance: dict
    records: list[RoundRecord]
    outcome: str  # "Converged", "MaxRounds" or "Error"
    error: str | None = None

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


@dataclass(frozen=True)
class AgentReply:
    agent_id: int
    s_next: float | None
    d: np.ndarray | None


class AgentWorker:
    """Round computations for one agent; uses only that agent's own data.

    The worker keeps the small amount of state the numerical contribution
    updater needs (previous contribution and last finite difference
    quotient); analytic updates are stateless.
    """

    def __init__(self, game: GameInstance, agent_id: int, cfg: RunConfig) -> None:
        if not 0 <= agent_id < game.n:
            raise ConfigError(f"agent id {agent_id} out of range")
        self.game = game
        self.i = agent_id
        self.cfg = cfg
        self._prev_s: float | None = None
        self._last_quotient: float | None = None

    def _analytic_step(self, w: np.ndarray, s: np.ndarray) -> float:
        g = self.game
        i = self.i
        s_i = float(s[i])
        s_hi = g.agents[i].s_max
        beta_term = g.payment.beta if g.payment.kind == "linear" else 0.0
        raw = g.accuracy.dsi(i, w, s) - g.cost.deriv(i, s_i) + beta_term
        if not np.isfinite(raw):
            raise NumericError(f"non-finite strategy derivative for agent {i}")
        if abs(s_i) <= BOUND_TOL and raw < 0.0:
            raw = 0.0
        elif abs(s_i - s_hi) <= BOUND_TOL and raw > 0.0:
            raw = 0.0
        return float(min(max(s_i + self.cfg.gamma * raw, 0.0), s_hi))

    def _empirical_step(self, w: np.ndarray, s: np.ndarray) -> float:
        g = self.game
        i = self.i
        s_i = float(s[i])
        s_hi = g.agents[i].s_max
        loss_before = g.accuracy.test_loss(i, w)
        local = g.accuracy.local_training_step(i, w, s_i, self.cfg.learn_rate)
        loss_after = g.accuracy.test_loss(i, local.w)
        if self._prev_s is None or abs(s_i - self._prev_s) < QUOTIENT_DS_MIN:
            quotient = self._last_quotient if self._last_quotient is not None else 0.0
        else:
            quotient = (loss_after - loss_before) / (s_i - self._prev_s)
        if np.isfinite(quotient):
            self._last_quotient = quotient
        else:
            quotient = self._last_quotient if self._last_quotient is not None else 0.0
        beta_term = g.payment.beta if g.payment.kind == "linear" else 0.0
        nxt = s_i - quotient - g.cost.deriv(i, s_i) + beta_term
        self._prev_s = s_i
        return float(min(max(nxt, 0.0), s_hi))

    def _local_gradient(self, w: np.ndarray, s: np.ndarray) -> np.ndarray:
        d = np.asarray(self.game.accuracy.grad_w(self.i, w, s), dtype=float)
        if not np.all(np.isfinite(d)):
            raise NumericError(f"non-finite local gradient for agent {self.i}")
        return d

    def step(self, t: int, phase: str, w: np.ndarray, s: np.ndarray) -> AgentReply:
        w = np.asarray(w, dtype=float)
        s = np.asarray(s, dtype=float)
        if phase == "1":
            return AgentReply(self.i, self._analytic_step(w, s), None)
        if phase == "2":
            return AgentReply(self.i, None, self._local_gradient(w, s))
        if phase != "single":
            raise ConfigError(f"unknown round phase {phase!r}")
        if self.cfg.updater == "empirical":
            s_next = self._empirical_step(w, s)
        else:
            s_next = self._analytic_step(w, s)
        if self.cfg.w_grad_at == "updated":
            s_eval = np.array(s)
            s_eval[self.i] = s_next
        else:
            s_eval = s
        return AgentReply(self.i, s_next, self._local_gradient(w, s_eval))


class LocalPool:
    """In-process pool calling one worker per agent, in ascending id order."""

    def __init__(self, game: GameInstance, cfg: RunConfig) -> None:
        self.workers = [AgentWorker(game, i, cfg) for i in range(game.n)]

    def step(self, t: int, phase: str, w: np.ndarray, s: np.ndarray) -> list[AgentReply]:
        return [wk.step(t, phase, w, s) for wk in self.workers]

    def close(self, ok: bool = True) -> None:
        pass


def _aggregate_w(g: GameInstance, cfg: RunConfig, w: np.ndarray, replies: Sequence[AgentReply]) -> np.ndarray:
    total = np.zeros(g.m, dtype=float)
    for rep in sorted(replies, key=lambda r: r.agent_id):
        if rep.d is None:
            raise NumericError(f"agent {rep.agent_id} sent no gradient")
        total = total + rep.d
    return w + cfg.eta * (total / g.n)


def _next_profile(g: GameInstance, replies: Sequence[AgentReply]) -> np.ndarray:
    out = np.empty(g.n, dtype=float)
    for rep in sorted(replies, key=lambda r: r.agent_id):
        if rep.s_next is None:
            raise NumericError(f"agent {rep.agent_id} sent no contribution")
        out[rep.agent_id] = rep.s_next
    return clamp_profile(out, g)


def _round_record(
    g: GameInstance, t: int, phase: str, w: np.ndarray, s: np.ndarray
) -> RoundRecord:
    reports = tuple(utility(g, i, w, s) for i in range(g.n))
    gv = strategy_gradient(g, w, s)
    gt = welfare_gradient(g, w, s)
    return RoundRecord(
        t=t,
        phase=phase,
        s=np.array(s),
        w=np.array(w),
        reports=reports,
        welfare=social_welfare(g, w, s),
        g_norm=float(np.linalg.norm(gv)),
        gt_norm=float(np.linalg.norm(gt)),
    )


def _trace_instance(g: GameInstance) -> dict:
    info = game_manifest(g)
    info["digest"] = instance_digest(g)
    return info


def _init_state(
    g: GameInstance, w0: np.ndarray | None, s0: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    w = np.zeros(g.m) if w0 is None else np.array(w0, dtype=float)
    s = g.initial_s if s0 is None else np.array(s0, dtype=float)
    if w.shape != (g.m,):
        raise ConfigError("w0 has the wrong dimension")
    if s.shape != (g.n,):
        raise ConfigError("s0 has the wrong dimension")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(s))):
        raise ConfigError("initial state must be finite")
    if np.any(s < -BOUND_TOL) or np.any(s > g.s_max + BOUND_TOL):
        raise ConfigError("s0 outside the contribution box")
    return w, clamp_profile(s, g)


def _state_finite(w: np.ndarray, s: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(w)) and np.all(np.isfinite(s)))


def predicted_phase1_rounds(
    g: GameInstance, cfg: RunConfig, s0: np.ndarray
) -> int | None:
    """Worst-case round count for the contribution phase, when defined."""
    if g.payment.kind != "linear":
        return None
    derivs = np.array([g.cost.deriv(i, g.agents[i].s_max) for i in range(g.n)])
    deltas = g.payment.beta - derivs
    if np.any(deltas <= 0.0):
        return None
    gaps = g.s_max - np.asarray(s0, dtype=float)
    return int(max(_ceil_guarded(gap / (cfg.gamma * d)) for gap, d in zip(gaps, deltas)))


def _phase1_cap(g: GameInstance, cfg: RunConfig, s0: np.ndarray) -> int:
    if cfg.phase1_cap is not None:
        return cfg.phase1_cap
    kappa = predicted_phase1_rounds(g, cfg, s0)
    if kappa is not None:
        return max(10 * kappa, 1)
    return 100_000


def upbred_run(
    g: GameInstance,
    cfg: RunConfig,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    pool=None,
) -> Trace:
    """Simultaneous contribution/training updates until both update
    directions fall below eps in norm, or the round budget runs out."""
    w, s = _init_state(g, w0, s0)
    pool = pool if pool is not None else LocalPool(g, cfg)
    records: list[RoundRecord] = []
    outcome, err = "MaxRounds", None
    t = 0
    try:
        while True:
            rec = _round_record(g, t, "single", w, s)
            records.append(rec)
            if rec.g_norm < cfg.eps and rec.gt_norm < cfg.eps:
                outcome = "Converged"
                break
            if t >= cfg.rounds:
                outcome = "MaxRounds"
                break
            replies = pool.step(t, "single", w, s)
            s_new = _next_profile(g, replies)
            w_new = _aggregate_w(g, cfg, w, replies)
            if not _state_finite(w_new, s_new):
                raise NumericError("non-finite joint state")
            s, w = s_new, w_new
            t += 1
    except (NumericError, ModelEvalError, FederationError) as exc:
        outcome, err = "Error", f"round {t}: {exc}"
    return Trace(cfg, _trace_instance(g), records, outcome, err)


def _training_phase(
    g: GameInstance,
    cfg: RunConfig,
    pool,
    records: list[RoundRecord],
    t: int,
    w: np.ndarray,
    s: np.ndarray,
) -> tuple[str, str | None]:
    """Shared gradient-ascent tail: w moves, s stays fixed."""
    updates = 0
    try:
        while True:
            rec = _round_record(g, t, "2", w, s)
            records.append(rec)
            if rec.gt_norm < cfg.eps:
                return "Converged", None
            if updates >= cfg.rounds:
                return "MaxRounds", None
            replies = pool.step(t, "2", w, s)
            w_new = _aggregate_w(g, cfg, w, replies)
            if not _state_finite(w_new, s):
                raise NumericError("non-finite model parameters")
            w = w_new
            t += 1
            updates += 1
    except (NumericError, ModelEvalError, FederationError) as exc:
        return "Error", f"round {t}: {exc}"


def two_phase_run(
    g: GameInstance,
    cfg: RunConfig,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    pool=None,
    strict: bool = True,
) -> Trace:
    """Drive contributions to the ceiling at a frozen model, then train.

    Requires a linear transfer rule.  With strict=True the transfer level
    must exceed every agent's marginal cost at the ceiling, which guarantees
    the first phase finishes; strict=False allows exploratory sub-threshold
    runs, which end with an Error outcome when the cap is hit.
    """
    if g.payment.kind != "linear":
        raise ConfigError("two-phase dynamic requires a linear transfer rule")
    zeta = g.cost.max_deriv(g.s_max)
    if strict and g.payment.beta <= zeta:
        raise ConfigError(
            f"two-phase precondition failed: beta={g.payment.beta} must exceed "
            f"the largest marginal cost at the ceiling ({zeta})"
        )
    w, s = _init_state(g, w0, s0)
    pool = pool if pool is not None else LocalPool(g, cfg)
    cap = _phase1_cap(g, cfg, s)
    records: list[RoundRecord] = []
    outcome, err = "MaxRounds", None
    t = 0
    try:
        updates = 0
        while True:
            gaps = g.s_max - s
            if float(np.max(gaps)) <= cfg.eps_s:
                s = g.s_max  # snap exactly once within tolerance
                break
            records.append(_round_record(g, t, "1", w, s))
            if updates >= cap:
                lagger = int(np.argmax(gaps))
                raise NumericError(
                    f"contribution phase exceeded its cap of {cap} rounds; "
                    f"agent {lagger} is not increasing (gap {gaps[lagger]:.6g})"
                )
            replies = pool.step(t, "1", w, s)
            s = _next_profile(g, replies)
            if not _state_finite(w, s):
                raise NumericError("non-finite contribution profile")
            t += 1
            updates += 1
        outcome, err = _training_phase(g, cfg, pool, records, t, w, s)
    except (NumericError, ModelEvalError, FederationError) as exc:
        outcome, err = "Error", f"round {t}: {exc}"
    return Trace(cfg, _trace_instance(g), records, outcome, err)


def fedavg_run(
    g: GameInstance,
    cfg: RunConfig,
    w0: np.ndarray | None = None,
    pool=None,
) -> Trace:
    """Mechanism-free baseline: contributions pinned at the ceiling."""
    g_free = replace(g, payment=PaymentRule.none())
    w, _ = _init_state(g_free, w0, None)
    s = g_free.s_max
    pool = pool if pool is not None else LocalPool(g_free, cfg)
    records: list[RoundRecord] = []
    outcome, err = "MaxRounds", None
    t = 0
    try:
        updates = 0
        while True:
            rec = _round_record(g_free, t, "single", w, s)
            records.append(rec)
            if rec.gt_norm < cfg.eps:
                outcome = "Converged"
                break
            if updates >= cfg.rounds:
                outcome = "MaxRounds"
                break
            replies = pool.step(t, "2", w, s)
            w_new = _aggregate_w(g_free, cfg, w, replies)
            if not _state_finite(w_new, s):
                raise NumericError("non-finite model parameters")
            w = w_new
            t += 1
            updates += 1
    except (NumericError, ModelEvalError, FederationError) as exc:
        outcome, err = "Error", f"round {t}: {exc}"
    return Trace(cfg, _trace_instance(g_free), records, outcome, err)


def fedavg_strategic_run(
    g: GameInstance,
    cfg: RunConfig,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    pool=None,
) -> Trace:
    """Contribution loop at the frozen start model until no agent still has a
    strictly positive corrected derivative, then training with contributions
    frozen at the phase-one outcome."""
    w, s = _init_state(g, w0, s0)
    pool = pool if pool is not None else LocalPool(g, cfg)
    cap = _phase1_cap(g, cfg, s)
    records: list[RoundRecord] = []
    outcome, err = "MaxRounds", None
    t = 0
    try:
        updates = 0
        while True:
            gv = strategy_gradient(g, w, s)
            if float(np.max(gv)) <= cfg.eps:
                break
            records.append(_round_record(g, t, "1", w, s))
            if updates >= cap:
                pusher = int(np.argmax(gv))
                raise NumericError(
                    f"contribution phase exceeded its cap of {cap} rounds; "
                    f"agent {pusher} still improving (derivative {gv[pusher]:.6g})"
                )
            replies = pool.step(t, "1", w, s)
            s = _next_profile(g, replies)
            if not _state_finite(w, s):
                raise NumericError("non-finite contribution profile")
            t += 1
            updates += 1
        outcome, err = _training_phase(g, cfg, pool, records, t, w, s)
    except (NumericError, ModelEvalError, FederationError) as exc:
        outcome, err = "Error", f"round {t}: {exc}"
    return Trace(cfg, _trace_instance(g), records, outcome, err)


def run_dynamic(
    g: GameInstance,
    cfg: RunConfig,
    algorithm: str,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    pool=None,
    strict: bool = True,
) -> Trace:
    """Dispatch by algorithm name; see ALGORITHMS."""
    if algorithm == "upbred":
        return upbred_run(g, cfg, w0, s0, pool=pool)
    if algorithm == "2p-upbred":
        return two_phase_run(g, cfg, w0, s0, pool=pool, strict=strict)
    if algorithm == "fedavg":
        return fedavg_run(g, cfg, w0, pool=pool)
    if algorithm == "fedavg-strategic":
        return fedavg_strategic_run(g, cfg, w0, s0, pool=pool)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def empirical_strategy_update(
    s_prev: np.ndarray,
    s_curr: np.ndarray,
    loss_prev: np.ndarray,
    loss_curr: np.ndarray,
    marginal_costs: np.ndarray,
    beta: float,
    s_max: np.ndarray,
    last_quotients: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pure form of the difference-quotient contribution update.

    next_i = clamp(curr_i - (loss_curr_i - loss_prev_i)/(curr_i - prev_i)
                   - marginal_cost_i + beta).
    Denominators below 1e-9 in magnitude fall back to the last finite
    quotient (zero when none exists yet).  Returns (next profile, quotients).
    """
    s_prev = np.asarray(s_prev, dtype=float)
    s_curr = np.asarray(s_curr, dtype=float)
    ds = s_curr - s_prev
    dl = np.asarray(loss_curr, dtype=float) - np.asarray(loss_prev, dtype=float)
    fallback = (
        np.zeros_like(s_curr) if last_quotients is None else np.asarray(last_quotients, dtype=float)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = dl / ds
    usable = (np.abs(ds) >= QUOTIENT_DS_MIN) & np.isfinite(raw)
    quotients = np.where(usable, raw, fallback)
    nxt = s_curr - quotients - np.asarray(marginal_costs, dtype=float) + beta
    return np.clip(nxt, 0.0, np.asarray(s_max, dtype=float)), quotients


# ---------------------------------------------------------------------------
# Convergence-rate arithmetic.


def contraction_factor(
    gamma: float,
    eta: float,
    n: int,
    m: int,
    L: float,
    L_tilde: float,
    lam: float,
    lam_tilde: float,
    P: float,
    P_tilde: float,
) -> tuple[float, float, float]:
    """Per-round contraction factors (W1, W2, W) of the joint update norms.

    W1 = sqrt(1 + gamma^2 n^2 L^2 - 2 gamma lam) + P_tilde * gamma
    W2 = sqrt(1 + eta^2 m^2 L_tilde^2 - 2 eta lam_tilde) + P * eta
    W  = max(W1, W2)
    """
    a = 1.0 + gamma**2 * n**2 * L**2 - 2.0 * gamma * lam
    b = 1.0 + eta**2 * m**2 * L_tilde**2 - 2.0 * eta * lam_tilde
    if a < 0.0 or b < 0.0:
        raise NumericError("contraction radicand negative for these step sizes")
    w1 = sqrt(a) + P_tilde * gamma
    w2 = sqrt(b) + P * eta
    return w1, w2, max(w1, w2)


def iteration_bound_T0(E: float, eps: float, W: float) -> int:
    """Rounds needed to shrink an initial update norm E below eps at rate W."""
    if eps <= 0.0 or not np.isfinite(eps):
        raise ConfigError("eps must be finite and positive")
    if E < 0.0:
        raise ConfigError("E must be nonnegative")
    if E <= eps:
        return 0
    if W >= 1.0:
        raise NumericError(f"no contraction: W={W} >= 1")
    if W <= 0.0:
        return 1
    return _ceil_guarded(log(E / eps) / log(1.0 / W))


def iteration_bounds_two_phase(
    s0: np.ndarray,
    s_max: np.ndarray,
    beta: float,
    cost_derivs_at_max: np.ndarray,
    c: float,
    f0: float,
    f_opt: float,
    eps: float,
    M: float,
    nu: float,
) -> tuple[int, int]:
    """(kappa, T0): phase-one round bound and training-phase round bound.

    kappa = max_i ceil((s_max_i - s0_i) / (c * (beta - cost_deriv_i))), the
    number of steps of size c times the worst-case margin each agent needs.
    T0 bounds gradient descent with step 1/M on an M-smooth, nu-strongly
    convex objective from value gap f0 - f_opt down to eps.
    """
    s0 = np.asarray(s0, dtype=float)
    s_max = np.asarray(s_max, dtype=float)
    derivs = np.asarray(cost_derivs_at_max, dtype=float)
    if c <= 0.0:
        raise ConfigError("phase-one step size must be positive")
    deltas = beta - derivs
    if np.any(deltas <= 0.0):
        bad = int(np.argmin(deltas))
        raise ConfigError(
            f"transfer margin nonpositive for agent {bad}: beta={beta}, "
            f"marginal cost {derivs[bad]}"
        )
    gaps = np.maximum(s_max - s0, 0.0)
    kappa = int(max((_ceil_guarded(gap / (c * d)) for gap, d in zip(gaps, deltas)), default=0))
    if eps <= 0.0:
        raise ConfigError("eps must be positive")
    if not 0.0 < nu <= M:
        raise ConfigError("need 0 < nu <= M")
    gap = max(f0 - f_opt, 0.0)
    if gap <= eps:
        t0 = 0
    elif nu == M:
        t0 = 1  # rate 1 - nu/M degenerates to an exact single step
    else:
        t0 = _ceil_guarded(log(gap / eps) / log(1.0 / (1.0 - nu / M)))
    return kappa, t0


def corollary_bound(w0_dist: float, eps: float, M: float, nu: float) -> int:
    """Iterate-distance analogue of T0 for gradient descent with step
    2/(M + nu): rounds to bring |w0 - w_opt| below eps."""
    if eps <= 0.0:
        raise ConfigError("eps must be positive")
    if not 0.0 < nu <= M:
        raise ConfigError("need 0 < nu <= M")
    if w0_dist <= eps:
        return 0
    if nu == M:
        return 1
    ratio = (1.0 + nu / M) / (1.0 - nu / M)
    return _ceil_guarded(log(w0_dist / eps) / log(ratio))


def _ceil_guarded(x: float) -> int:
    """Ceiling with protection against float dust just above an integer."""
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return int(ceil(x))

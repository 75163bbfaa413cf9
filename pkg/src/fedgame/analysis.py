"""Equilibrium certification and curvature diagnostics.

Certification is deliberately independent of any gradient machinery: each
agent's best response is found by a uniform scan plus golden-section
refinement of its own utility, so a certificate does not inherit assumptions
from the dynamics under test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import inf, isnan, sqrt

import numpy as np
from scipy.stats import qmc

from .core import (
    BOUND_TOL,
    ConfigError,
    GameInstance,
    ModelEvalError,
    NumericError,
    PaymentRule,
    payment,
    social_welfare,
    welfare_gradient,
)

REGRET_FLOOR = -1e-12
GOLDEN_XTOL = 1e-8
NSD_TOL = 1e-9


def _own_utility(g: GameInstance, i: int, w: np.ndarray, s: np.ndarray, x: float) -> float:
    """Agent i's utility at contribution x, others fixed.

    A singular accuracy denominator is scored -inf (the correct limit for a
    maximizer to avoid); any NaN propagates as an error.
    """
    trial = np.array(s, dtype=float)
    trial[i] = x
    try:
        a = g.accuracy.value(i, w, trial)
    except ModelEvalError:
        return -inf
    u = a - g.cost.value(i, x) + payment(g.payment, trial, i)
    if isnan(u):
        raise NumericError(f"utility is NaN for agent {i} at s_i={x}")
    return u


def _golden_max(f, lo: float, hi: float, xtol: float) -> tuple[float, float]:
    """Golden-section maximization; ties resolve toward the left endpoint."""
    invphi = (sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def best_response(
    g: GameInstance,
    w: np.ndarray,
    s: np.ndarray,
    i: int,
    grid_points: int = 201,
    xtol: float = GOLDEN_XTOL,
) -> tuple[float, float]:
    """(argmax, max) of agent i's utility over its contribution interval."""
    if grid_points < 3:
        raise ConfigError("grid_points must be >= 3")
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    hi = g.agents[i].s_max

    def f(x: float) -> float:
        return _own_utility(g, i, w, s, x)

    xs = np.linspace(0.0, hi, grid_points)
    vals = [f(x) for x in xs]
    best = 0
    for k in range(1, grid_points):
        if vals[k] > vals[best]:  # strict: ties keep the smaller contribution
            best = k
    lo_b = xs[max(best - 1, 0)]
    hi_b = xs[min(best + 1, grid_points - 1)]
    x_ref, v_ref = _golden_max(f, float(lo_b), float(hi_b), xtol)
    if v_ref > vals[best]:
        return x_ref, v_ref
    return float(xs[best]), vals[best]


@dataclass(frozen=True)
class EquilibriumCertificate:
    verdict: str  # "Certified" or "Refuted"
    eps: float
    regrets: tuple[float, ...]
    best_responses: tuple[float, ...]
    worst_agent: int
    worst_gain: float

    @property
    def certified(self) -> bool:
        return self.verdict == "Certified"

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "eps": self.eps,
            "regrets": list(self.regrets),
            "best_responses": list(self.best_responses),
            "worst_agent": self.worst_agent,
            "worst_gain": self.worst_gain,
        }


def certify_nash(
    g: GameInstance,
    w: np.ndarray,
    s: np.ndarray,
    eps: float,
    grid_points: int = 201,
) -> EquilibriumCertificate:
    """Per-agent regret check: profile is an eps-equilibrium iff no agent can
    gain more than eps by unilaterally moving its own contribution."""
    if not np.isfinite(eps) or eps <= 0.0:
        raise ConfigError("certification tolerance must be finite and positive")
    s = np.asarray(s, dtype=float)
    if np.any(s < -BOUND_TOL) or np.any(s > g.s_max + BOUND_TOL):
        raise ConfigError("profile lies outside the contribution box")
    regrets = []
    brs = []
    for i in range(g.n):
        br, u_br = best_response(g, w, s, i, grid_points)
        u_cur = _own_utility(g, i, np.asarray(w, dtype=float), s, float(s[i]))
        regrets.append(u_br - u_cur)
        brs.append(br)
    worst = int(np.argmax(regrets))
    verdict = "Certified" if all(r <= eps for r in regrets) else "Refuted"
    return EquilibriumCertificate(
        verdict=verdict,
        eps=eps,
        regrets=tuple(regrets),
        best_responses=tuple(brs),
        worst_agent=worst,
        worst_gain=float(regrets[worst]),
    )


@dataclass(frozen=True)
class BudgetAudit:
    passed: bool
    max_abs_sum: float
    threshold: float
    vacuous: bool  # True when the rule moves no money

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_sum": self.max_abs_sum,
            "threshold": self.threshold,
            "vacuous": self.vacuous,
        }


def audit_budget_balance(rule: PaymentRule, profiles) -> BudgetAudit:
    """Check that transfers sum to zero on every profile, to rounding."""
    profiles = [np.asarray(p, dtype=float) for p in profiles]
    if not profiles:
        raise ConfigError("budget audit needs at least one profile")
    if rule.kind == "none":
        return BudgetAudit(True, 0.0, 0.0, vacuous=True)
    scale = max(float(np.sum(np.abs(p))) for p in profiles)
    threshold = 1e-9 * rule.beta * scale
    worst = 0.0
    for p in profiles:
        total = sum(payment(rule, p, i) for i in range(len(p)))
        worst = max(worst, abs(total))
    return BudgetAudit(worst <= threshold, worst, threshold, vacuous=False)


# ---------------------------------------------------------------------------
# Curvature estimation by central differences.


@dataclass(frozen=True)
class Matrices:
    """Second-derivative blocks of the game at one interior point.

    G: own-utility curvature in contributions (n x n rows d^2 u_i / ds_i ds_j)
    G_tilde: mean-accuracy Hessian in the model (m x m)
    H: d^2 u_i / dw_k ds_i (n x m)
    H_tilde: d^2 (sum_i a_i) / ds_j dw_k (m x n)
    """

    G: np.ndarray
    G_tilde: np.ndarray
    H: np.ndarray
    H_tilde: np.ndarray


def _fd_steps(x: np.ndarray, fd_step: float | None) -> np.ndarray:
    if fd_step is not None:
        if fd_step <= 0.0:
            raise ConfigError("fd_step must be positive")
        return np.full(len(x), float(fd_step))
    return np.array([1e-4 * max(1.0, abs(float(v))) for v in x])


def estimate_matrices(
    g: GameInstance,
    w: np.ndarray,
    s: np.ndarray,
    fd_step: float | None = None,
) -> Matrices:
    """Central-difference estimates of the four curvature blocks.

    The profile must be strictly interior; steps in contribution coordinates
    shrink as needed so that every stencil point stays inside the box
    (one-sided differences are out of scope).
    """
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0.0) or np.any(s >= g.s_max):
        raise ConfigError("curvature estimation requires a strictly interior profile")
    hs = _fd_steps(s, fd_step)
    hs = np.minimum(hs, np.minimum(s, g.s_max - s) / 2.0)
    if np.any(hs <= 0.0):
        raise ConfigError("profile too close to the boundary for two-sided differences")
    hw = _fd_steps(w, fd_step)
    n, m = g.n, g.m

    def u_i(i: int, wv: np.ndarray, sv: np.ndarray) -> float:
        a = g.accuracy.value(i, wv, sv)
        return a - g.cost.value(i, float(sv[i])) + payment(g.payment, sv, i)

    def acc_sum(wv: np.ndarray, sv: np.ndarray) -> float:
        return sum(g.accuracy.value(i, wv, sv) for i in range(n))

    def shift(vec: np.ndarray, k: int, delta: float) -> np.ndarray:
        out = np.array(vec)
        out[k] += delta
        return out

    G = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                hi = hs[i]
                G[i, j] = (
                    u_i(i, w, shift(s, i, hi)) - 2.0 * u_i(i, w, s) + u_i(i, w, shift(s, i, -hi))
                ) / hi**2
            else:
                hi, hj = hs[i], hs[j]
                pp = u_i(i, w, shift(shift(s, i, hi), j, hj))
                pm = u_i(i, w, shift(shift(s, i, hi), j, -hj))
                mp = u_i(i, w, shift(shift(s, i, -hi), j, hj))
                mm = u_i(i, w, shift(shift(s, i, -hi), j, -hj))
                G[i, j] = (pp - pm - mp + mm) / (4.0 * hi * hj)

    Gt = np.empty((m, m))
    for k in range(m):
        for l in range(m):
            if k == l:
                hk = hw[k]
                Gt[k, l] = (
                    acc_sum(shift(w, k, hk), s) - 2.0 * acc_sum(w, s) + acc_sum(shift(w, k, -hk), s)
                ) / hk**2
            else:
                hk, hl = hw[k], hw[l]
                pp = acc_sum(shift(shift(w, k, hk), l, hl), s)
                pm = acc_sum(shift(shift(w, k, hk), l, -hl), s)
                mp = acc_sum(shift(shift(w, k, -hk), l, hl), s)
                mm = acc_sum(shift(shift(w, k, -hk), l, -hl), s)
                Gt[k, l] = (pp - pm - mp + mm) / (4.0 * hk * hl)
    Gt /= n

    H = np.empty((n, m))
    for i in range(n):
        hi = hs[i]
        for k in range(m):
            hk = hw[k]
            pp = u_i(i, shift(w, k, hk), shift(s, i, hi))
            pm = u_i(i, shift(w, k, hk), shift(s, i, -hi))
            mp = u_i(i, shift(w, k, -hk), shift(s, i, hi))
            mm = u_i(i, shift(w, k, -hk), shift(s, i, -hi))
            H[i, k] = (pp - pm - mp + mm) / (4.0 * hk * hi)

    Ht = np.empty((m, n))
    for k in range(m):
        hk = hw[k]
        for j in range(n):
            hj = hs[j]
            pp = acc_sum(shift(w, k, hk), shift(s, j, hj))
            pm = acc_sum(shift(w, k, hk), shift(s, j, -hj))
            mp = acc_sum(shift(w, k, -hk), shift(s, j, hj))
            mm = acc_sum(shift(w, k, -hk), shift(s, j, -hj))
            Ht[k, j] = (pp - pm - mp + mm) / (4.0 * hk * hj)

    for name, arr in (("G", G), ("G_tilde", Gt), ("H", H), ("H_tilde", Ht)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in estimated {name}")
    return Matrices(G=G, G_tilde=Gt, H=H, H_tilde=Ht)


def quadratic_matrices(g: GameInstance, w: np.ndarray, s: np.ndarray) -> Matrices:
    """Closed-form curvature blocks for the quadratic accuracy family.

    With D = |w - theta|^2 and sigma = sigma0 + sum(s):
    G_ij = -2 D / sigma^3 - [i=j] c_i''(s_i), G_tilde = -(2/sigma) I,
    H_ik = 2 (w - theta)_k / sigma^2, H_tilde = n H^T-pattern (every column j
    carries the same 2 n (w - theta) / sigma^2 vector).
    """
    acc = g.accuracy
    theta = np.asarray(acc.theta, dtype=float)
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    sigma = acc.sigma0 + float(np.sum(s))
    if sigma <= 0.0:
        raise ModelEvalError("singular denominator in closed-form curvature")
    diff = w - theta
    D = float(diff @ diff)
    n, m = g.n, g.m
    G = np.full((n, n), -2.0 * D / sigma**3)
    for i in range(n):
        G[i, i] -= g.cost.second_deriv(i, float(s[i]))
    Gt = (-2.0 / sigma) * np.eye(m)
    H = np.tile(2.0 * diff / sigma**2, (n, 1))
    Ht = np.tile((2.0 * n / sigma**2) * diff.reshape(m, 1), (1, n))
    return Matrices(G=G, G_tilde=Gt, H=H, H_tilde=Ht)


def assumption_samples(
    g: GameInstance,
    count: int = 64,
    w_center: np.ndarray | None = None,
    w_radius: float = 1.0,
    interior_margin: float = 0.05,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic low-discrepancy sample of interior (w, s) points.

    Contributions are mapped into [margin, s_max - margin] per agent so all
    points admit two-sided difference stencils.
    """
    if count < 1:
        raise ConfigError("sample count must be >= 1")
    n, m = g.n, g.m
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pts = qmc.Sobol(d=n + m, scramble=False).random(count)
    center = np.zeros(m) if w_center is None else np.asarray(w_center, dtype=float)
    out = []
    for row in pts:
        sv = np.empty(n)
        for i in range(n):
            hi = g.agents[i].s_max
            lo_i, hi_i = interior_margin * hi, (1.0 - interior_margin) * hi
            sv[i] = lo_i + row[i] * (hi_i - lo_i)
        wv = center + (2.0 * row[n:] - 1.0) * w_radius
        out.append((wv, sv))
    return out


@dataclass(frozen=True)
class AssumptionEstimates:
    lam: float
    lam_tilde: float
    L: float
    L_tilde: float
    P: float
    P_tilde: float
    sample_count: int
    nsd_strategy: bool  # G + lam I negative semidefinite on all samples
    nsd_params: bool

    @property
    def certified(self) -> bool:
        return self.nsd_strategy and self.nsd_params

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "lambda_tilde": self.lam_tilde,
            "L": self.L,
            "L_tilde": self.L_tilde,
            "P": self.P,
            "P_tilde": self.P_tilde,
            "sample_count": self.sample_count,
            "nsd_strategy": self.nsd_strategy,
            "nsd_params": self.nsd_params,
            "certified": self.certified,
        }


def _sym_max_eig(a: np.ndarray) -> float:
    sym = 0.5 * (a + a.T)
    return float(np.max(np.linalg.eigvalsh(sym)))


def check_assumption1(
    samples,
    g: GameInstance,
    lam: float = 0.0,
    lam_tilde: float = 0.0,
    fd_step: float | None = None,
) -> AssumptionEstimates:
    """Estimate curvature constants over a point sample and test the claimed
    strong-concavity levels against the symmetric parts of G and G_tilde."""
    samples = list(samples)
    if not samples:
        raise ConfigError("need at least one sample point")
    if lam < 0.0 or lam_tilde < 0.0:
        raise ConfigError("concavity levels must be nonnegative")
    lam_est = inf
    lamt_est = inf
    L = Lt = P = Pt = 0.0
    nsd_s = nsd_p = True
    for wv, sv in samples:
        est = estimate_matrices(g, wv, sv, fd_step)
        top = _sym_max_eig(est.G)
        topt = _sym_max_eig(est.G_tilde)
        lam_est = min(lam_est, -top)
        lamt_est = min(lamt_est, -topt)
        nsd_s = nsd_s and (top + lam <= NSD_TOL)
        nsd_p = nsd_p and (topt + lam_tilde <= NSD_TOL)
        L = max(L, float(np.max(np.abs(est.G))))
        Lt = max(Lt, float(np.max(np.abs(est.G_tilde))))
        P = max(P, float(np.linalg.norm(est.H, 2)))
        Pt = max(Pt, float(np.linalg.norm(est.H_tilde, 2)))
    return AssumptionEstimates(
        lam=max(lam_est, 0.0),
        lam_tilde=max(lamt_est, 0.0),
        L=L,
        L_tilde=Lt,
        P=P,
        P_tilde=Pt,
        sample_count=len(samples),
        nsd_strategy=nsd_s,
        nsd_params=nsd_p,
    )


@dataclass(frozen=True)
class FeasibleStepRegion:
    gamma_max: float
    eta_max: float
    gamma_ok: bool  # lam strictly dominates the coupling term P_tilde
    eta_ok: bool

    @property
    def empty(self) -> bool:
        return not (self.gamma_ok and self.eta_ok and self.gamma_max > 0.0 and self.eta_max > 0.0)

    def as_dict(self) -> dict:
        return {
            "gamma_max": self.gamma_max,
            "eta_max": self.eta_max,
            "gamma_ok": self.gamma_ok,
            "eta_ok": self.eta_ok,
            "empty": self.empty,
        }


def _axis_step_cap(dim: int, L: float, lam: float, coupling: float) -> float:
    """min over {1, 1/coupling, 2 lam/(dim L)^2 ... } with zero-denominator
    terms dropped; callers guarantee lam > coupling."""
    terms = [1.0]
    if coupling > 0.0:
        terms.append(1.0 / coupling)
    d2 = float(dim) ** 2 * L**2
    if d2 > 0.0:
        terms.append(2.0 * lam / d2)
    denom = d2 - coupling**2
    if denom != 0.0:
        terms.append((lam - coupling) / denom)
    return min(terms)


def feasible_steps(
    n: int,
    m: int,
    L: float,
    L_tilde: float,
    lam: float,
    lam_tilde: float,
    P: float,
    P_tilde: float,
) -> FeasibleStepRegion:
    """Largest step sizes for which the joint update provably contracts.

    The contribution step cap needs lam > P_tilde and the training step cap
    needs lam_tilde > P; otherwise the corresponding axis (and therefore the
    whole region) is flagged empty.
    """
    for name, v in (
        ("L", L), ("L_tilde", L_tilde), ("lam", lam), ("lam_tilde", lam_tilde),
        ("P", P), ("P_tilde", P_tilde),
    ):
        if v < 0.0 or not np.isfinite(v):
            raise ConfigError(f"{name} must be finite and nonnegative")
    if n < 1 or m < 1:
        raise ConfigError("need n >= 1 and m >= 1")
    gamma_ok = lam > P_tilde
    eta_ok = lam_tilde > P
    gamma_max = _axis_step_cap(n, L, lam, P_tilde) if gamma_ok else 0.0
    eta_max = _axis_step_cap(m, L_tilde, lam_tilde, P) if eta_ok else 0.0
    if gamma_max <= 0.0:
        gamma_ok, gamma_max = False, 0.0
    if eta_max <= 0.0:
        eta_ok, eta_max = False, 0.0
    return FeasibleStepRegion(gamma_max, eta_max, gamma_ok, eta_ok)


# ---------------------------------------------------------------------------
# Welfare benchmark and trace diagnostics.


@dataclass(frozen=True)
class WelfareOptResult:
    w_opt: np.ndarray
    welfare: float
    grad_norm: float
    iterations: int
    converged: bool


def compute_w_opt(
    g: GameInstance,
    tol: float = 1e-6,
    max_iters: int = 10000,
    step0: float = 1.0,
) -> WelfareOptResult:
    """Benchmark model: gradient ascent on welfare at full contributions,
    with backtracking line search, started from the zero model."""
    s = g.s_max
    w = np.zeros(g.m)
    lr = step0

    def value(wv: np.ndarray) -> float:
        return social_welfare(g, wv, s)

    f = value(w)
    it = 0
    converged = False
    while it < max_iters:
        grad = g.n * welfare_gradient(g, w, s)  # welfare gradient, not the mean
        gn = float(np.linalg.norm(grad))
        if gn < tol:
            converged = True
            break
        for _ in range(60):
            trial = w + lr * grad
            try:
                f_trial = value(trial)
            except ModelEvalError:
                f_trial = -inf
            if f_trial >= f + 1e-4 * lr * gn**2:
                w, f = trial, f_trial
                lr = min(lr * 2.0, 1e6)
                break
            lr *= 0.5
        else:
            break  # step underflow: treat current point as the answer
        it += 1
    grad = g.n * welfare_gradient(g, w, s)
    return WelfareOptResult(
        w_opt=w,
        welfare=f,
        grad_norm=float(np.linalg.norm(grad)),
        iterations=it,
        converged=converged or float(np.linalg.norm(grad)) < tol,
    )


@dataclass(frozen=True)
class ContractionReport:
    ratios: np.ndarray  # per-round combined-norm ratios, skipped rounds omitted
    rounds: np.ndarray  # round index of each ratio's numerator
    max_ratio: float
    geo_mean: float

    def as_dict(self) -> dict:
        return {
            "ratios": [float(r) for r in self.ratios],
            "rounds": [int(t) for t in self.rounds],
            "max_ratio": self.max_ratio,
            "geo_mean": self.geo_mean,
        }


DENOM_FLOOR = 1e-14


def contraction_diagnostic(trace) -> ContractionReport:
    """Empirical per-round contraction of |g| + |g_tilde| along a trace.

    Accepts a Trace or any iterable of (g_norm, gt_norm, t) triples; rounds
    whose denominator falls below 1e-14 are skipped to avoid noise blowups.
    """
    if hasattr(trace, "records"):
        seq = [(rec.g_norm, rec.gt_norm, rec.t) for rec in trace.records]
    else:
        seq = [(float(a), float(b), int(t)) for a, b, t in trace]
    if len(seq) < 2:
        raise ConfigError("contraction diagnostic needs at least two recorded rounds")
    combined = [a + b for a, b, _ in seq]
    ratios, rounds = [], []
    for k in range(1, len(seq)):
        if combined[k - 1] < DENOM_FLOOR:
            continue
        ratios.append(combined[k] / combined[k - 1])
        rounds.append(seq[k][2])
    arr = np.array(ratios)  # may be empty: a fixed-point trace has no usable rounds
    positive = arr[arr > 0.0]
    geo = float(np.exp(np.mean(np.log(positive)))) if len(positive) else 0.0
    return ContractionReport(
        ratios=arr,
        rounds=np.array(rounds, dtype=int),
        max_ratio=float(np.max(arr)) if len(arr) else 0.0,
        geo_mean=geo,
    )

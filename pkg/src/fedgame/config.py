"""Scenario files: INI schema, typed parsing, canonical rendering.

The scenario format has four sections: [instance] (the game), [run] (the
dynamic and its knobs), [init] (starting point) and [output].  Unknown
sections or keys are rejected rather than ignored so typos cannot silently
change an experiment.  render() emits every key in canonical form and
parse_scenario(render_scenario(cfg)) reproduces cfg exactly.

All run randomness (random cost draws, random starting points, dataset
synthesis) flows from the single [run] seed.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace
from math import ceil, isfinite

import numpy as np

from .core import AgentSpec, ConfigError, GameInstance, PaymentRule
from .dynamics import ALGORITHMS, RunConfig, UPDATERS, W_GRAD_CHOICES
from .models import CostModel, EmpiricalAccuracy, QuadraticAccuracy, synth_dataset

ACCURACY_FAMILIES = ("quadratic", "empirical")
COST_KINDS = ("linear", "polynomial", "random-linear")
PAYMENT_KINDS = ("none", "linear")
OUTPUT_FORMATS = ("csv", "json")

_SCHEMA: dict[str, tuple[str, ...]] = {
    "instance": (
        "n", "m", "accuracy", "theta", "r", "sigma0",
        "features", "classes", "separation", "test_size", "data_seed",
        "cost", "cost_coeffs", "cost_scale", "s_max", "payment", "beta",
    ),
    "run": (
        "algorithm", "gamma", "eta", "rounds", "eps", "eps_s",
        "phase1_cap", "seed", "updater", "w_grad_at", "learn_rate",
    ),
    "init": ("w0", "w0_scale", "s0", "s0_lo", "s0_hi"),
    "output": ("out_dir", "formats"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Typed, fully resolved scenario.  Vector-valued fields are per-agent
    tuples even when the file used scalar broadcast shorthand."""

    # [instance]
    n: int
    m: int
    accuracy: str
    s_max: tuple[float, ...]
    r: tuple[float, ...]
    theta: tuple[float, ...] | None = None
    sigma0: float = 1e-6
    features: int = 2
    classes: int = 2
    separation: float = 3.0
    test_size: int = 200
    data_seed: int | None = None
    cost: str = "linear"
    cost_coeffs: tuple = ()
    cost_scale: float = 0.1
    payment: str = "none"
    beta: float = 0.0
    # [run]
    algorithm: str = "upbred"
    gamma: float = 0.5
    eta: float = 0.25
    rounds: int = 1000
    eps: float = 1e-6
    eps_s: float = 1e-9
    phase1_cap: int | None = None
    seed: int = 0
    updater: str = "analytic"
    w_grad_at: str = "updated"
    learn_rate: float = 0.1
    # [init]
    w0: tuple[float, ...] | str = "zeros"
    w0_scale: float = 1.0
    s0: tuple[float, ...] | str = "random"
    s0_lo: float = 1.0 / 3.0
    s0_hi: float = 2.0 / 3.0
    # [output]
    out_dir: str = "out"
    formats: tuple[str, ...] = ("csv", "json")


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad float list {text!r}: {exc}") from None


def _broadcast(vals: tuple[float, ...], n: int, what: str) -> tuple[float, ...]:
    if len(vals) == 1:
        return vals * n
    if len(vals) != n:
        raise ConfigError(f"{what} needs 1 or {n} entries, got {len(vals)}")
    return vals


def _fmt_floats(vals) -> str:
    return ",".join(repr(float(v)) for v in vals)


def _get(section, key: str, default: str | None = None) -> str | None:
    if section is None or key not in section:
        return default
    return section[key].strip()


def _typed_float(raw: str, key: str, positive: bool = False, nonneg: bool = False) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None
    if not isfinite(v):
        raise ConfigError(f"{key} must be finite, got {raw!r}")
    if positive and v <= 0.0:
        raise ConfigError(f"{key} must be positive")
    if nonneg and v < 0.0:
        raise ConfigError(f"{key} must be nonnegative")
    return v


def _typed_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from None


def parse_scenario(text: str, overrides: list[str] | None = None) -> ScenarioConfig:
    """Parse scenario text, apply key=value overrides, validate everything."""
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    for sec in parser.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key in parser[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        dotted, value = ov.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        sec, key = dotted.split(".", 1)
        sec, key = sec.strip(), key.strip()
        if sec not in _SCHEMA or key not in _SCHEMA[sec]:
            raise ConfigError(f"unknown override target {sec}.{key}")
        if sec not in parser:
            parser.add_section(sec)
        parser[sec][key] = value.strip()
    return _typify(parser)


def _typify(parser: configparser.ConfigParser) -> ScenarioConfig:
    inst = parser["instance"] if "instance" in parser else None
    run = parser["run"] if "run" in parser else None
    init = parser["init"] if "init" in parser else None
    outp = parser["output"] if "output" in parser else None
    if inst is None:
        raise ConfigError("missing required section [instance]")

    n_raw = _get(inst, "n")
    if n_raw is None:
        raise ConfigError("instance.n is required")
    n = _typed_int(n_raw, "instance.n")
    if n < 1:
        raise ConfigError("instance.n must be >= 1")

    accuracy = _get(inst, "accuracy", "quadratic")
    if accuracy not in ACCURACY_FAMILIES:
        raise ConfigError(f"unknown accuracy family {accuracy!r}")

    features = classes = None
    sigma0 = 1e-6
    separation, test_size = 3.0, 200
    data_seed: int | None = None
    theta: tuple[float, ...] | None = None

    if accuracy == "quadratic":
        for bad in ("features", "classes", "separation", "test_size", "data_seed"):
            if _get(inst, bad) is not None:
                raise ConfigError(f"instance.{bad} only applies to the empirical family")
        m_raw = _get(inst, "m")
        if m_raw is None:
            raise ConfigError("instance.m is required for the quadratic family")
        m = _typed_int(m_raw, "instance.m")
        theta_raw = _get(inst, "theta")
        if theta_raw is None:
            raise ConfigError("instance.theta is required for the quadratic family")
        theta = _parse_floats(theta_raw)
        if len(theta) != m:
            raise ConfigError(f"theta needs {m} entries, got {len(theta)}")
        sigma0 = _typed_float(_get(inst, "sigma0", repr(1e-6)), "instance.sigma0", nonneg=True)
        r = _broadcast(_parse_floats(_get(inst, "r", "1.0")), n, "instance.r")
        features, classes = 2, 2  # unused placeholders kept at defaults
    else:
        for bad in ("theta", "sigma0"):
            if _get(inst, bad) is not None:
                raise ConfigError(f"instance.{bad} only applies to the quadratic family")
        features = _typed_int(_get(inst, "features", "2"), "instance.features")
        classes = _typed_int(_get(inst, "classes", "2"), "instance.classes")
        if features < 1:
            raise ConfigError("instance.features must be >= 1")
        if classes < 2:
            raise ConfigError("instance.classes must be >= 2")
        expected_m = features * classes
        m_raw = _get(inst, "m")
        m = _typed_int(m_raw, "instance.m") if m_raw is not None else expected_m
        if m != expected_m:
            raise ConfigError(
                f"instance.m={m} conflicts with classes*features={expected_m}"
            )
        separation = _typed_float(_get(inst, "separation", "3.0"), "instance.separation", positive=True)
        test_size = _typed_int(_get(inst, "test_size", "200"), "instance.test_size")
        if test_size < 1:
            raise ConfigError("instance.test_size must be >= 1")
        ds_raw = _get(inst, "data_seed", "none")
        data_seed = None if ds_raw == "none" else _typed_int(ds_raw, "instance.data_seed")
        r_default = _fmt_floats([float(np.log(classes))])
        r = _broadcast(_parse_floats(_get(inst, "r", r_default)), n, "instance.r")
    if m < 1:
        raise ConfigError("instance.m must be >= 1")

    s_max = _broadcast(_parse_floats(_get(inst, "s_max", "1.0")), n, "instance.s_max")
    if any(v <= 0.0 or not isfinite(v) for v in s_max):
        raise ConfigError("instance.s_max entries must be finite and positive")

    cost = _get(inst, "cost", "linear")
    if cost not in COST_KINDS:
        raise ConfigError(f"unknown cost kind {cost!r}")
    cost_scale = 0.1
    cost_coeffs: tuple = ()
    if cost == "random-linear":
        if _get(inst, "cost_coeffs") is not None:
            raise ConfigError("cost_coeffs cannot be combined with random-linear costs")
        cost_scale = _typed_float(_get(inst, "cost_scale", "0.1"), "instance.cost_scale", positive=True)
    else:
        if _get(inst, "cost_scale") is not None:
            raise ConfigError("instance.cost_scale only applies to random-linear costs")
        raw = _get(inst, "cost_coeffs")
        if raw is None:
            raise ConfigError("instance.cost_coeffs is required for explicit costs")
        if cost == "linear":
            cost_coeffs = _broadcast(_parse_floats(raw), n, "instance.cost_coeffs")
        else:
            groups = tuple(_parse_floats(g) for g in raw.split(";"))
            if len(groups) == 1:
                groups = groups * n
            if len(groups) != n:
                raise ConfigError(f"cost_coeffs needs 1 or {n} groups, got {len(groups)}")
            cost_coeffs = groups

    payment = _get(inst, "payment", "none")
    if payment not in PAYMENT_KINDS:
        raise ConfigError(f"unknown payment kind {payment!r}")
    beta = _typed_float(_get(inst, "beta", "0.0"), "instance.beta", nonneg=True)
    if payment == "none" and beta != 0.0:
        raise ConfigError("beta must be 0 when payment = none")
    if payment == "linear" and n < 2:
        raise ConfigError("linear transfers need at least two agents")

    algorithm = _get(run, "algorithm", "upbred")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    gamma = _typed_float(_get(run, "gamma", "0.5"), "run.gamma", positive=True)
    eta = _typed_float(_get(run, "eta", "0.25"), "run.eta", positive=True)
    rounds = _typed_int(_get(run, "rounds", "1000"), "run.rounds")
    if rounds < 0:
        raise ConfigError("run.rounds must be >= 0")
    eps = _typed_float(_get(run, "eps", repr(1e-6)), "run.eps", positive=True)
    eps_s = _typed_float(_get(run, "eps_s", repr(1e-9)), "run.eps_s", positive=True)
    cap_raw = _get(run, "phase1_cap", "none")
    phase1_cap = None if cap_raw == "none" else _typed_int(cap_raw, "run.phase1_cap")
    if phase1_cap is not None and phase1_cap < 1:
        raise ConfigError("run.phase1_cap must be >= 1 when given")
    seed = _typed_int(_get(run, "seed", "0"), "run.seed")
    updater = _get(run, "updater", "analytic")
    if updater not in UPDATERS:
        raise ConfigError(f"unknown updater {updater!r}")
    if updater == "empirical" and accuracy != "empirical":
        raise ConfigError("the empirical updater requires the empirical accuracy family")
    w_grad_at = _get(run, "w_grad_at", "updated")
    if w_grad_at not in W_GRAD_CHOICES:
        raise ConfigError(f"unknown w_grad_at {w_grad_at!r}")
    learn_rate = _typed_float(_get(run, "learn_rate", "0.1"), "run.learn_rate", positive=True)

    w0_raw = _get(init, "w0", "zeros")
    w0: tuple[float, ...] | str
    if w0_raw in ("zeros", "random"):
        w0 = w0_raw
    else:
        w0 = _parse_floats(w0_raw)
        if len(w0) != m:
            raise ConfigError(f"init.w0 needs {m} entries, got {len(w0)}")
    w0_scale = _typed_float(_get(init, "w0_scale", "1.0"), "init.w0_scale", positive=True)
    s0_raw = _get(init, "s0", "random")
    s0: tuple[float, ...] | str
    if s0_raw == "random":
        s0 = "random"
    else:
        s0 = _broadcast(_parse_floats(s0_raw), n, "init.s0")
        for v, hi in zip(s0, s_max):
            if v < 0.0 or v > hi:
                raise ConfigError("init.s0 outside the contribution box")
    s0_lo = _typed_float(_get(init, "s0_lo", repr(1.0 / 3.0)), "init.s0_lo", nonneg=True)
    s0_hi = _typed_float(_get(init, "s0_hi", repr(2.0 / 3.0)), "init.s0_hi", nonneg=True)
    if not (s0_lo <= s0_hi <= 1.0):
        raise ConfigError("need 0 <= s0_lo <= s0_hi <= 1")

    out_dir = _get(outp, "out_dir", "out")
    formats = tuple(tok.strip() for tok in _get(outp, "formats", "csv,json").split(","))
    for f in formats:
        if f not in OUTPUT_FORMATS:
            raise ConfigError(f"unknown output format {f!r}")

    return ScenarioConfig(
        n=n, m=m, accuracy=accuracy, s_max=s_max, r=r, theta=theta, sigma0=sigma0,
        features=features, classes=classes, separation=separation,
        test_size=test_size, data_seed=data_seed,
        cost=cost, cost_coeffs=cost_coeffs, cost_scale=cost_scale,
        payment=payment, beta=beta,
        algorithm=algorithm, gamma=gamma, eta=eta, rounds=rounds, eps=eps,
        eps_s=eps_s, phase1_cap=phase1_cap, seed=seed, updater=updater,
        w_grad_at=w_grad_at, learn_rate=learn_rate,
        w0=w0, w0_scale=w0_scale, s0=s0, s0_lo=s0_lo, s0_hi=s0_hi,
        out_dir=out_dir, formats=formats,
    )


def render_scenario(cfg: ScenarioConfig) -> str:
    """Canonical INI text; every relevant key appears explicitly."""
    parser = configparser.ConfigParser(interpolation=None)
    inst: dict[str, str] = {
        "n": str(cfg.n),
        "m": str(cfg.m),
        "accuracy": cfg.accuracy,
    }
    if cfg.accuracy == "quadratic":
        inst["theta"] = _fmt_floats(cfg.theta)
        inst["sigma0"] = repr(cfg.sigma0)
    else:
        inst["features"] = str(cfg.features)
        inst["classes"] = str(cfg.classes)
        inst["separation"] = repr(cfg.separation)
        inst["test_size"] = str(cfg.test_size)
        inst["data_seed"] = "none" if cfg.data_seed is None else str(cfg.data_seed)
    inst["r"] = _fmt_floats(cfg.r)
    inst["s_max"] = _fmt_floats(cfg.s_max)
    inst["cost"] = cfg.cost
    if cfg.cost == "random-linear":
        inst["cost_scale"] = repr(cfg.cost_scale)
    elif cfg.cost == "linear":
        inst["cost_coeffs"] = _fmt_floats(cfg.cost_coeffs)
    else:
        inst["cost_coeffs"] = ";".join(_fmt_floats(g) for g in cfg.cost_coeffs)
    inst["payment"] = cfg.payment
    inst["beta"] = repr(cfg.beta)
    parser["instance"] = inst
    parser["run"] = {
        "algorithm": cfg.algorithm,
        "gamma": repr(cfg.gamma),
        "eta": repr(cfg.eta),
        "rounds": str(cfg.rounds),
        "eps": repr(cfg.eps),
        "eps_s": repr(cfg.eps_s),
        "phase1_cap": "none" if cfg.phase1_cap is None else str(cfg.phase1_cap),
        "seed": str(cfg.seed),
        "updater": cfg.updater,
        "w_grad_at": cfg.w_grad_at,
        "learn_rate": repr(cfg.learn_rate),
    }
    parser["init"] = {
        "w0": cfg.w0 if isinstance(cfg.w0, str) else _fmt_floats(cfg.w0),
        "w0_scale": repr(cfg.w0_scale),
        "s0": cfg.s0 if isinstance(cfg.s0, str) else _fmt_floats(cfg.s0),
        "s0_lo": repr(cfg.s0_lo),
        "s0_hi": repr(cfg.s0_hi),
    }
    parser["output"] = {
        "out_dir": cfg.out_dir,
        "formats": ",".join(cfg.formats),
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


@dataclass
class BuiltScenario:
    game: GameInstance
    run: RunConfig
    algorithm: str
    w0: np.ndarray
    s0: np.ndarray
    cfg: ScenarioConfig


def build_scenario(cfg: ScenarioConfig) -> BuiltScenario:
    """Materialize a scenario: RNG children are drawn from the run seed in a
    fixed order (costs, then w0, then s0) so adding randomness in one place
    never shifts another."""
    k_cost, k_w0, k_s0 = np.random.SeedSequence(cfg.seed).spawn(3)

    if cfg.cost == "linear":
        cost = CostModel.linear(cfg.cost_coeffs)
    elif cfg.cost == "polynomial":
        cost = CostModel.polynomial(cfg.cost_coeffs)
    else:
        draws = np.random.default_rng(k_cost).uniform(0.0, 1.0, cfg.n) * cfg.cost_scale
        cost = CostModel.linear(draws)

    if cfg.accuracy == "quadratic":
        accuracy = QuadraticAccuracy(np.array(cfg.theta), np.array(cfg.r), cfg.sigma0)
    else:
        data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        train, test = synth_dataset(
            data_seed,
            cfg.n,
            [int(ceil(v)) for v in cfg.s_max],
            cfg.test_size,
            cfg.features,
            cfg.classes,
            cfg.separation,
        )
        accuracy = EmpiricalAccuracy(train, test, np.array(cfg.r), cfg.classes, data_seed)

    if isinstance(cfg.w0, str) and cfg.w0 == "zeros":
        w0 = np.zeros(cfg.m)
    elif isinstance(cfg.w0, str):
        w0 = np.random.default_rng(k_w0).standard_normal(cfg.m) * cfg.w0_scale
    else:
        w0 = np.array(cfg.w0, dtype=float)

    s_max = np.array(cfg.s_max)
    if isinstance(cfg.s0, str):
        frac = np.random.default_rng(k_s0).uniform(cfg.s0_lo, cfg.s0_hi, cfg.n)
        s0 = frac * s_max
    else:
        s0 = np.array(cfg.s0, dtype=float)

    payment = PaymentRule.linear(cfg.beta) if cfg.payment == "linear" else PaymentRule.none()
    agents = tuple(
        AgentSpec(i, float(s_max[i]), float(s0[i])) for i in range(cfg.n)
    )
    game = GameInstance(agents=agents, accuracy=accuracy, cost=cost, payment=payment, m=cfg.m)
    run = RunConfig(
        gamma=cfg.gamma, eta=cfg.eta, rounds=cfg.rounds, eps=cfg.eps,
        eps_s=cfg.eps_s, phase1_cap=cfg.phase1_cap, seed=cfg.seed,
        updater=cfg.updater, w_grad_at=cfg.w_grad_at, learn_rate=cfg.learn_rate,
    )
    return BuiltScenario(game=game, run=run, algorithm=cfg.algorithm, w0=w0, s0=s0, cfg=cfg)


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    """Typed replace() that re-validates through the text round trip."""
    return parse_scenario(render_scenario(replace(cfg, **kw)))

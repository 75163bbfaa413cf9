"""Command-line front end.

Commands: run, sweep, certify, bounds, diagnose, serve, agent.
Exit codes: 0 success/Certified, 1 validation error, 2 runtime error,
3 Refuted / empty feasibility region.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from math import isfinite

import numpy as np

from . import analysis, federation, scenarios, traceio
from .config import BuiltScenario, build_scenario, parse_scenario
from .core import ConfigError, FederationError, GameError, payment
from .dynamics import run_dynamic
from .models import QuadraticAccuracy

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_REFUTED = 3


def _load_config_text(name_or_path: str) -> tuple[str, str]:
    """Returns (text, stem).  Filesystem paths win over bundled names."""
    if os.path.isfile(name_or_path):
        with open(name_or_path) as fh:
            text = fh.read()
        stem = os.path.splitext(os.path.basename(name_or_path))[0]
        return text, stem
    text = scenarios.builtin_text(name_or_path)
    stem = name_or_path[:-4] if name_or_path.endswith(".cfg") else name_or_path
    return text, stem


def _overrides(args) -> list[str]:
    ovs = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        ovs.append(f"run.seed={args.seed}")
    return ovs


def _built(args) -> tuple[BuiltScenario, str, str]:
    text, stem = _load_config_text(args.config)
    cfg = parse_scenario(text, _overrides(args))
    return build_scenario(cfg), text, stem


def _out_dir(args, built: BuiltScenario) -> str:
    out = args.out if getattr(args, "out", None) else built.cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _parse_hostport(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {value!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {value!r}") from None


def _write_outputs(trace, built: BuiltScenario, out: str, stem: str, config_text: str) -> list[str]:
    paths = []
    if "csv" in built.cfg.formats:
        path = os.path.join(out, f"{stem}.csv")
        traceio.write_trace_csv(trace, path)
        paths.append(path)
    if "json" in built.cfg.formats:
        path = os.path.join(out, f"{stem}.json")
        traceio.write_run_manifest(
            trace, path, config_text, extra={"algorithm": built.algorithm}
        )
        paths.append(path)
    return paths


def _summary_line(trace) -> str:
    final = trace.final
    msg = (
        f"outcome={trace.outcome} rounds={final.t} "
        f"welfare={final.welfare!r} g_norm={final.g_norm!r} gt_norm={final.gt_norm!r}"
    )
    if trace.error:
        msg += f" error={trace.error!r}"
    return msg


def cmd_run(args) -> int:
    built, text, stem = _built(args)
    if args.connect:
        if args.agent_id is None:
            raise ConfigError("--connect requires --agent-id")
        host, port = _parse_hostport(args.connect)
        status = federation.connect_agent(
            built.game, args.agent_id, built.run, host, port, timeout=args.timeout
        )
        return EXIT_OK if status == 0 else EXIT_RUNTIME
    if args.listen:
        host, port = _parse_hostport(args.listen)
        listener = federation.open_listener(host, port)
        actual = listener.getsockname()[1]
        # flush so a piped supervisor can read the port before we block in accept
        print(f"listening on {host}:{actual}, waiting for {built.game.n} agent(s)",
              flush=True)
        try:
            channels = federation.accept_agents(listener, built.game.n, args.timeout)
        finally:
            listener.close()
        trace = federation.serve_center(
            built.game, built.run, built.algorithm, channels,
            built.w0, built.s0, timeout=args.timeout,
        )
    else:
        trace = run_dynamic(built.game, built.run, built.algorithm, built.w0, built.s0)
    out = _out_dir(args, built)
    paths = _write_outputs(trace, built, out, stem, text)
    print(_summary_line(trace))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK if trace.outcome != "Error" else EXIT_RUNTIME


def cmd_serve(args) -> int:
    if not args.listen:
        raise ConfigError("serve requires --listen host:port")
    return cmd_run(args)


def cmd_agent(args) -> int:
    if not args.connect:
        raise ConfigError("agent requires --connect host:port")
    if args.agent_id is None:
        raise ConfigError("agent requires --agent-id")
    built, _text, _stem = _built(args)
    host, port = _parse_hostport(args.connect)
    status = federation.connect_agent(
        built.game, args.agent_id, built.run, host, port, timeout=args.timeout,
        notify=lambda msg: print(f"error: {msg}", file=sys.stderr),
    )
    return EXIT_OK if status == 0 else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    text, stem = _load_config_text(args.config)
    base_overrides = _overrides(args)
    base_cfg = parse_scenario(text, base_overrides)  # fail fast on bad config
    axis = args.axis
    raw_values = [tok.strip() for tok in args.values.split(",") if tok.strip()]
    if not raw_values:
        raise ConfigError("sweep needs a nonempty --values list")
    if axis in ("agents", "seed"):
        values = [int(v) for v in raw_values]
    else:
        values = [float(v) for v in raw_values]
        if any(not isfinite(v) for v in values):
            raise ConfigError("sweep values must be finite")
    if args.replicates < 1:
        raise ConfigError("--replicates must be >= 1")

    rows = []
    for value in values:
        for rep in range(args.replicates):
            seed = (value + rep) if axis == "seed" else (base_cfg.seed + rep)
            ovs = list(base_overrides)
            if axis == "beta":
                ovs.append(f"instance.beta={value!r}")
            elif axis == "agents":
                ovs.append(f"instance.n={value}")
            ovs.append(f"run.seed={seed}")
            started = time.perf_counter()
            outcome, welfare, total_s, rounds, error = "Error", "", "", "", ""
            try:
                built = build_scenario(parse_scenario(text, ovs))
                trace = run_dynamic(
                    built.game, built.run, built.algorithm,
                    built.w0, built.s0, strict=False,
                )
                outcome = trace.outcome
                final = trace.final
                welfare = repr(final.welfare)
                total_s = repr(float(np.sum(final.s)))
                rounds = str(final.t)
                if trace.error:
                    error = trace.error
            except GameError as exc:
                error = str(exc)
            wall = time.perf_counter() - started
            rows.append(
                [axis, repr(value), str(rep), outcome, welfare, total_s, rounds,
                 repr(wall), error]
            )

    out = args.out or base_cfg.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"{stem}.sweep.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["axis", "value", "replicate", "outcome", "welfare", "total_s",
             "rounds", "wall_time_s", "error"]
        )
        writer.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def _vector_arg(raw: str, length: int, what: str) -> np.ndarray:
    try:
        vec = np.array([float(tok) for tok in raw.split(",")])
    except ValueError:
        raise ConfigError(f"bad {what}: {raw!r}") from None
    if len(vec) != length:
        raise ConfigError(f"{what} needs {length} entries, got {len(vec)}")
    return vec


def cmd_certify(args) -> int:
    if not isfinite(args.eps) or args.eps <= 0.0:
        raise ConfigError("--eps must be finite and positive")
    built, _text, stem = _built(args)
    if args.trace:
        if args.w or args.s:
            raise ConfigError("give either --trace or --w/--s, not both")
        table = traceio.read_trace_csv(args.trace)
        w = table.w[-1]
        s = table.s[-1]
    else:
        if not (args.w and args.s):
            raise ConfigError("certify needs --trace or both --w and --s")
        w = _vector_arg(args.w, built.game.m, "--w")
        s = _vector_arg(args.s, built.game.n, "--s")
    cert = analysis.certify_nash(built.game, w, s, args.eps, args.grid)
    doc = cert.as_dict()
    doc["w"] = [float(v) for v in w]
    doc["s"] = [float(v) for v in s]
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"{stem}.certificate.json")
        with open(path, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK if cert.certified else EXIT_REFUTED


def cmd_bounds(args) -> int:
    built, _text, stem = _built(args)
    g = built.game
    cfg = built.run
    doc: dict = {"n": g.n, "m": g.m, "gamma": cfg.gamma, "eta": cfg.eta, "eps": cfg.eps}

    if args.constants == "explicit":
        needed = {"lam": args.lam, "lam_tilde": args.lam_tilde, "L": args.L,
                  "L_tilde": args.L_tilde, "P": args.P, "P_tilde": args.P_tilde}
        missing = [k for k, v in needed.items() if v is None]
        if missing:
            raise ConfigError(f"explicit constants require --{', --'.join(missing)}")
        lam, lam_tilde = args.lam, args.lam_tilde
        L, L_tilde, P, P_tilde = args.L, args.L_tilde, args.P, args.P_tilde
        doc["constants_source"] = "explicit"
    else:
        given = {"lam": args.lam, "lam_tilde": args.lam_tilde, "L": args.L,
                 "L_tilde": args.L_tilde, "P": args.P, "P_tilde": args.P_tilde}
        stray = [k for k, v in given.items() if v is not None]
        if stray:
            raise ConfigError(
                f"--{', --'.join(stray)} require --constants explicit"
            )
        samples = analysis.assumption_samples(
            g, count=args.samples, w_radius=args.w_radius
        )
        est = analysis.check_assumption1(samples, g)
        lam, lam_tilde = est.lam, est.lam_tilde
        L, L_tilde, P, P_tilde = est.L, est.L_tilde, est.P, est.P_tilde
        doc["constants_source"] = "estimated"
        doc["estimates"] = est.as_dict()
    doc["constants"] = {
        "lambda": lam, "lambda_tilde": lam_tilde, "L": L, "L_tilde": L_tilde,
        "P": P, "P_tilde": P_tilde,
    }

    region = analysis.feasible_steps(g.n, g.m, L, L_tilde, lam, lam_tilde, P, P_tilde)
    doc["feasible_steps"] = region.as_dict()

    from .core import strategy_gradient, welfare_gradient
    from .dynamics import contraction_factor, corollary_bound, iteration_bound_T0, \
        iteration_bounds_two_phase

    E = float(
        np.linalg.norm(strategy_gradient(g, built.w0, built.s0))
        + np.linalg.norm(welfare_gradient(g, built.w0, built.s0))
    )
    doc["E"] = E
    try:
        w1, w2, W = contraction_factor(
            cfg.gamma, cfg.eta, g.n, g.m, L, L_tilde, lam, lam_tilde, P, P_tilde
        )
        doc["W"] = {"W1": w1, "W2": w2, "W": W}
        doc["T0"] = iteration_bound_T0(E, cfg.eps, W) if W < 1.0 else None
    except GameError as exc:
        doc["W"] = None
        doc["T0"] = None
        doc["W_note"] = str(exc)

    M = args.M
    nu = args.nu
    if M is None and isinstance(g.accuracy, QuadraticAccuracy):
        M = nu = 2.0 / (g.accuracy.sigma0 + float(np.sum(g.s_max)))
    if nu is None:
        nu = M
    doc["M"] = M
    doc["nu"] = nu

    doc["kappa"] = None
    doc["T0_two_phase"] = None
    doc["T0_corollary"] = None
    if M is not None:
        if nu is None or not 0.0 < nu <= M:
            raise ConfigError("need 0 < nu <= M")
        opt = analysis.compute_w_opt(g)
        if g.payment.kind == "linear":
            derivs = np.array([g.cost.deriv(i, g.agents[i].s_max) for i in range(g.n)])
            if np.all(g.payment.beta - derivs > 0.0):
                f0 = (opt.welfare - analysis.social_welfare(g, built.w0, g.s_max)) / g.n
                kappa, t0 = iteration_bounds_two_phase(
                    built.s0, g.s_max, g.payment.beta, derivs, cfg.gamma,
                    f0, 0.0, cfg.eps, M, nu,
                )
                doc["kappa"] = kappa
                doc["T0_two_phase"] = t0
        doc["T0_corollary"] = corollary_bound(
            float(np.linalg.norm(built.w0 - opt.w_opt)), cfg.eps, M, nu
        )

    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"{stem}.bounds.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_REFUTED if region.empty else EXIT_OK


def cmd_diagnose(args) -> int:
    table = traceio.read_trace_csv(args.trace)
    try:
        report = analysis.contraction_diagnostic(
            list(zip(table.g_norm, table.gt_norm, table.t))
        )
        ratios = list(zip(report.rounds, report.ratios))
        max_ratio = report.max_ratio if len(report.ratios) else None
    except ConfigError:
        ratios, max_ratio = [], None

    out = args.out or os.path.dirname(args.trace) or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.trace))[0]
    path = os.path.join(out, f"{stem}.ratios.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "ratio"])
        for t, ratio in ratios:
            writer.writerow([str(int(t)), repr(float(ratio))])

    final = table.rounds - 1
    print(f"rounds={table.rounds} final_t={int(table.t[final])} "
          f"max_ratio={'n/a' if max_ratio is None else repr(max_ratio)}")
    print(f"wrote {path}")
    print(f"{'agent':>5} {'s_i':>12} {'payment':>12} {'utility':>12}")
    order = np.argsort(table.s[final], kind="stable")
    for i in order:
        print(
            f"{i:>5} {table.s[final][i]:>12.6g} "
            f"{table.p[final][i]:>12.6g} {table.u[final][i]:>12.6g}"
        )
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required,
                   help="scenario file path or bundled name")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="output directory (default from config)")


def _add_net(p: argparse.ArgumentParser) -> None:
    p.add_argument("--listen", metavar="HOST:PORT", help="serve rounds to remote agents")
    p.add_argument("--connect", metavar="HOST:PORT", help="join a remote center")
    p.add_argument("--agent-id", type=int, help="agent id when connecting")
    p.add_argument("--timeout", type=float, default=federation.DEFAULT_TIMEOUT,
                   help="per-round protocol timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgame",
        description="Incentive-aware federated data-contribution games: "
                    "dynamics, certification, bounds, federation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write trace files")
    _add_common(p)
    _add_net(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of values with replicates")
    _add_common(p)
    p.add_argument("--axis", choices=("beta", "agents", "seed"), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--replicates", type=int, default=10)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("certify", help="equilibrium certificate for a profile")
    _add_common(p)
    p.add_argument("--trace", help="trace CSV; certifies its final round")
    p.add_argument("--w", help="explicit model parameters, comma-separated")
    p.add_argument("--s", help="explicit contribution profile, comma-separated")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--grid", type=int, default=201)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("bounds", help="step-size region and iteration bounds")
    _add_common(p)
    p.add_argument("--constants", choices=("estimated", "explicit"), default="estimated")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--w-radius", type=float, default=1.0)
    for name in ("lam", "lam-tilde", "L", "L-tilde", "P", "P-tilde", "M", "nu"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("diagnose", help="contraction ratios and final-round table")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", help="directory for the ratio CSV")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("serve", help="run as the center for remote agents")
    _add_common(p)
    _add_net(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("agent", help="join a center as one agent")
    _add_common(p)
    _add_net(p)
    p.set_defaults(func=cmd_agent)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GameError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

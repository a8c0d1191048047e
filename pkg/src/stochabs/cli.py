"""Batch front end: certify -> plan -> build -> synth -> sim -> bounds.

Stages talk only through files in the output directory (plan.json,
abstraction.ssym, controller.sctl, sim.csv), so each can be rerun on its own.
Each command also leaves its printed report in <command>.txt.
Exit codes: 0 ok, 2 certificate rejected, 3 missing artifact,
4 unrealizable spec, 5 infeasible quantization plan.
"""

from __future__ import annotations

import argparse
import json
import sys as _sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import abstraction as ab
from . import probounds as pb
from . import quantizer as qz
from . import stochsim as ss
from . import synthesis as sy
from .certificate import (DerivedGains, certificate_gains, check_lmi, check_nonlinear_condition,
                          h_general, h_linear, h_quadratic, hess_sup, max_lmi_rate,
                          second_to_qth_moment)
from .config import ProjectConfig, bundled, load_config
from .model import BoxUnion, grid_points, span

EXIT_OK, EXIT_CERT, EXIT_MISSING, EXIT_UNREALIZABLE, EXIT_PLAN = 0, 2, 3, 4, 5
STAGES = ("certify", "plan", "build", "synth", "sim", "bounds")


class MissingArtifact(Exception):
    pass


class Context:
    def __init__(self, cfg: ProjectConfig, out: Path, threads: int, seed: int | None,
                 timings: bool, stream=None):
        self.cfg, self.out, self.threads, self.timings = cfg, out, threads, timings
        self.seed = cfg.sim.master_seed if seed is None else seed
        self.stream = stream or _sys.stdout
        self.lines: list[str] = []
        self.system = cfg.system.spec()
        self.cert = cfg.certificate.certificate()
        self.gains = certificate_gains(self.cert, self.system, cfg.certificate.gamma_hat)
        out.mkdir(parents=True, exist_ok=True)

    def say(self, line: str = "") -> None:
        print(line, file=self.stream)
        self.lines.append(line)

    def timed(self, label: str, seconds: float, extra: str = "") -> None:
        if self.timings:
            self.say(f"{label}: {seconds:.2f} s{extra}")

    def path(self, name: str, must_exist: bool = False) -> Path:
        p = self.out / name
        if must_exist and not p.exists():
            raise MissingArtifact(f"missing artifact {p}; run the earlier stage first")
        return p


def _fmt_gain(g) -> str:
    return f"{g.c:.6g}*r^{g.p:g}"


def _gains_lines(g: DerivedGains) -> list[str]:
    return [
        f"alpha_lo(r) = {_fmt_gain(g.alpha_lo)}",
        f"alpha_hi(r) = {_fmt_gain(g.alpha_hi)}",
        f"kappa = {g.kappa:.6g}",
        f"rho(r) = {_fmt_gain(g.rho)}",
        f"gamma_hat(r) = {_fmt_gain(g.gamma_hat)}",
        f"beta(r,s) = {g.beta.c:.6g}*r^{g.beta.p:g}*exp(-{g.beta.kappa:.6g}*s)",
        f"gamma(r) = {_fmt_gain(g.gamma)}",
    ]


# ------------------------------------------------------------------ stages

def cmd_certify(ctx: Context) -> int:
    c, sysm, cert = ctx.cfg.certificate, ctx.system, ctx.cert
    ctx.say(f"certificate: {cert.form}, q={cert.q}, verify={c.verify}, gamma_hat={c.gamma_hat}")
    accepted = True
    if c.verify == "lmi":
        if sysm.drift != "linear":
            ctx.say("LMI verification needs a linear drift")
            return EXIT_CERT
        kh = cert.kappa_hat if cert.kappa_hat is not None else 2 * cert.k_tilde / cert.q
        accepted = check_lmi(sysm.A, sysm.B, sysm.sigmas, cert.P, kh)
        ctx.say(f"LMI route: kappa_hat = {kh:g}, largest exact rate = {max_lmi_rate(sysm.A, sysm.sigmas, cert.P):.6g}")
        ctx.say(f"LMI holds: {accepted}")
    else:
        rep = check_nonlinear_condition(sysm, cert.scaled_P, cert.q, cert.k_tilde, c.samples, c.seed)
        ctx.say(f"sampled condition: {rep.samples} samples, worst margin {rep.worst_margin:.6g}, "
                f"violation found: {not rep.ok}")
        if rep.witness:
            w = rep.witness
            ctx.say(f"witness: x={w['x']}, x'={w['x_prime']}, z={w['z']}, u={w['u']}")
        if c.verify == "sampled":
            accepted = rep.ok
        elif not rep.ok:
            ctx.say("WARNING: gains are taken as given (verify=assume) although the sampled check fails")
    for line in _gains_lines(ctx.gains):
        ctx.say(line)
    (ctx.path("certificate.json")).write_text(json.dumps({
        "accepted": bool(accepted), "verify": c.verify,
        "kappa": ctx.gains.kappa, "alpha_lo": ctx.gains.alpha_lo.c, "alpha_hi": ctx.gains.alpha_hi.c,
        "rho": [ctx.gains.rho.c, ctx.gains.rho.p], "gamma_hat": ctx.gains.gamma_hat.c,
        "beta": [ctx.gains.beta.c, ctx.gains.beta.kappa], "gamma": ctx.gains.gamma.c}, indent=2) + "\n")
    ctx.say("certificate " + ("accepted" if accepted else "REJECTED"))
    return EXIT_OK if accepted else EXIT_CERT


def h_at(ctx: Context, t: float, route: str | None = None, input_term: bool | None = None) -> float:
    """q-th moment bound on the noisy/nominal gap at time t for the configured route."""
    p, sysm, cert = ctx.cfg.plan, ctx.system, ctx.cert
    route = route or p.h_route
    inp = p.input_term if input_term is None else input_term
    if route == "linear":
        kh = cert.kappa_hat if cert.kappa_hat is not None else 2 * cert.k_tilde / cert.q
        h2 = h_linear(sysm.A, sysm.B, sysm.sigmas, cert.P, kh, sysm, t, p.quad_steps, inp)
        return second_to_qth_moment(h2, cert.q)
    if route == "quadratic":
        h2 = h_quadratic(cert.scaled_P, cert.q, cert.k_tilde, sysm, t, inp)
        return second_to_qth_moment(h2, cert.q)
    return h_general(ctx.gains, hess_sup(cert), sysm, cert.q, t, p.quad_steps, inp)


def cmd_plan(ctx: Context) -> int:
    p, sysm, g, q = ctx.cfg.plan, ctx.system, ctx.gains, ctx.cert.q
    h = h_at(ctx, p.tau)
    ctx.say(f"h route: {p.h_route} (input term {'on' if p.input_term else 'off'}), "
            f"h(tau={p.tau:g}) = {h:.6g} (q-th moment)")
    for route in qz.ROUTES:
        try:
            lb = qz.lower_bound(route, g, h, p.tau, q)
            ctx.say(f"eps lower bound [{route}] = {lb:.6g}")
        except qz.InfeasibleError as exc:
            ctx.say(f"eps lower bound [{route}]: {exc} (needs tau > {qz.min_feasible_tau_thm53(g.beta, q):.4g})")
    try:
        # the input set is always quantized to a finite list
        plan = qz.plan(p.eps, p.tau, p.route, True, g, h, q, sysm.domain,
                       sysm.input_set, p.eta, p.mu)
    except qz.InfeasibleError as exc:
        ctx.say(f"plan infeasible: {exc}")
        return EXIT_PLAN
    eta_max = qz.max_feasible_eta(p.route, p.eps, p.tau, plan.mu, g, h, q, span(sysm.domain))
    ctx.say(f"plan: route={plan.route} eps={plan.eps:g} tau={plan.tau:g} eta={plan.eta:g} "
            f"mu={plan.mu:g} (largest feasible eta {eta_max:.6g})")
    ctx.path("plan.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _load_plan(ctx: Context) -> qz.QuantizationPlan:
    return qz.QuantizationPlan(**json.loads(ctx.path("plan.json", True).read_text()))


def _inputs(ctx: Context, plan: qz.QuantizationPlan) -> np.ndarray:
    if plan.mu > 0:
        return grid_points(ctx.system.input_set, plan.mu)
    return ctx.cfg.system.input_list()


def cmd_build(ctx: Context) -> int:
    plan = _load_plan(ctx)
    if not qz.validate(plan, ctx.gains):
        ctx.say("plan.json does not satisfy its route condition")
        return EXIT_PLAN
    t0 = time.perf_counter()
    a = ab.build(ctx.system, ctx.system.domain, _inputs(ctx, plan), plan.tau, plan.eta,
                 plan.eps, plan.q, ctx.cfg.plan.substeps, workers=ctx.threads)
    dt = time.perf_counter() - t0
    ab.save(a, ctx.path("abstraction.ssym"))
    ctx.say(f"states: {a.num_states} ({' x '.join(map(str, a.grid.shape))}), inputs: {a.num_inputs}")
    ctx.say(f"sink transitions: {ab.sink_fraction(a):.4%}")
    ctx.timed("build time", dt, f" ({ab.throughput(a.num_states, dt):.0f} states/s)")
    return EXIT_OK


def _spec(ctx: Context) -> sy.SpecTemplate:
    s = ctx.cfg.spec
    return sy.SpecTemplate(s.template, tuple(ctx.cfg.box(n) for n in s.args),
                           tuple(s.shrink) if s.shrink else ())


def _initial(ctx: Context, a: ab.Abstraction) -> np.ndarray:
    init = np.zeros(a.num_states, dtype=bool)
    for x in ctx.cfg.spec.initial_states:
        s = int(a.grid.locate(np.array(x, dtype=float)))
        if s < 0:
            raise ValueError(f"initial state {x} is outside the grid")
        init[s] = True
    return init


def cmd_synth(ctx: Context) -> int:
    a = ab.load(ctx.path("abstraction.ssym", True))
    t0 = time.perf_counter()
    try:
        c = sy.solve_spec(a, _spec(ctx), _initial(ctx, a))
    except sy.UnrealizableError as exc:
        ctx.say(str(exc))
        return EXIT_UNREALIZABLE
    dt = time.perf_counter() - t0
    sy.save_controller(c, ctx.path("controller.sctl"))
    for i, ph in enumerate(c.phases):
        ctx.say(f"phase {i}: winning {int(ph.winning.sum())} states, trigger {int(ph.trigger.sum())}")
    ctx.say(f"closure check: {sy.check_closure(a, c)}")
    ctx.timed("synthesis time", dt)
    return EXIT_OK


def cmd_sim(ctx: Context) -> int:
    a = ab.load(ctx.path("abstraction.ssym", True))
    c = replace(sy.load_controller(ctx.path("controller.sctl", True)), inputs=a.inputs)
    s = ctx.cfg.sim
    cfg = ss.SimConfig(s.dt or ss.default_dt(a.tau), s.runs, s.horizon, ctx.seed, s.record_stride)
    sets = {n: ctx.cfg.box(n) for n in s.report_sets}
    x0 = np.array(ctx.cfg.spec.initial_states[0], dtype=float)
    t0 = time.perf_counter()
    stats = ss.monte_carlo(ctx.system, c, a.inputs, x0, cfg, sets, a.q, a.tau)
    dt = time.perf_counter() - t0
    stats.write_csv(ctx.path("sim.csv"))
    ctx.say(f"runs: {cfg.runs}, dt = {cfg.dt:g}, horizon = {cfg.horizon:g}, seed = {cfg.master_seed}")
    for n in sets:
        root = stats.root(n)
        ctx.say(f"{n}: terminal (E||x||_{n}^{a.q})^(1/{a.q}) = {root[-1]:.6g}, max over t = {root.max():.6g}")
    ctx.say(f"runs in final phase at horizon: {stats.final_phase_fraction[-1]:.2%}")
    ctx.say(f"left-winning-region events per switch: {stats.left_rate:.4g}")
    ctx.timed("simulation time", dt)
    return EXIT_OK


def cmd_bounds(ctx: Context) -> int:
    b, plan_cfg, g, cert = ctx.cfg.bounds, ctx.cfg.plan, ctx.gains, ctx.cert
    eps = plan_cfg.eps
    for e in b.epsilon_pointwise:
        v = pb.markov_pointwise(eps, e)
        ctx.say(f"pointwise: P(deviation >= {e:g}) <= {v:.4f} (satisfaction >= {1 - v:.2%})")
    if b.epsilon_finite is not None and b.N is not None:
        region = (BoxUnion(tuple(tuple(x) for x in b.finite_region)) if b.finite_region
                  else ctx.system.domain)
        al = pb.alpha_sup(cert, ctx.system, region)
        alpha = al.get(b.alpha_convention)
        ctx.say(f"alpha: paper convention {al.paper:.6g}, vertex maximum {al.vertex:.6g}; using {b.alpha_convention}")
        v = pb.bound_finite_horizon(alpha, g.kappa, g.alpha_lo, cert.q, b.epsilon_finite, b.N, plan_cfg.tau)
        ctx.say(f"finite horizon N={b.N}, tau={plan_cfg.tau:g}, epsilon={b.epsilon_finite:g}: "
                f"violation <= {v:.4f} (satisfaction >= {1 - v:.2%})")
    if b.epsilon_infinite is not None:
        if b.phi_x0 is not None:
            phi = b.phi_x0
        else:
            phi = pb.sbf_from_certificate(cert, ctx.system).at_start(np.array(ctx.cfg.spec.initial_states[0]))
        e_inf = b.eps_infinite if b.eps_infinite is not None else eps
        v = pb.bound_infinite_horizon(phi, e_inf, b.epsilon_infinite)
        ctx.say(f"infinite horizon: phi={phi:.6g}, eps={e_inf:g}, epsilon={b.epsilon_infinite:g}: "
                f"violation <= {v:.4f} (satisfaction >= {1 - v:.2%})")
    return EXIT_OK


COMMANDS = {
    "certify": cmd_certify, "plan": cmd_plan, "build": cmd_build,
    "synth": cmd_synth, "sim": cmd_sim, "bounds": cmd_bounds,
}


def cmd_pipeline(ctx: Context) -> int:
    for stage in STAGES:
        ctx.say(f"== {stage}")
        rc = COMMANDS[stage](ctx)
        if rc:
            return rc
    return EXIT_OK


def _config_path(value: str) -> Path:
    p = Path(value)
    if not p.exists() and value in ("pendulum", "dcmotor"):
        return bundled(value)
    return p


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochabs", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=[*STAGES, "pipeline"])
    ap.add_argument("--config", required=True,
                    help="JSON config path, or 'pendulum' / 'dcmotor' for the bundled examples")
    ap.add_argument("--out", default="out", help="artifact directory")
    ap.add_argument("--threads", type=int, default=1, help="worker cap for the abstraction build")
    ap.add_argument("--seed", type=int, default=None, help="override sim.master_seed")
    ap.add_argument("--no-timings", action="store_true", help="omit timings from reports")
    return ap


def main(argv: list[str] | None = None, stream=None) -> int:
    args = parser().parse_args(argv)
    try:
        cfg = load_config(_config_path(args.config))
    except FileNotFoundError:
        print(f"missing config {args.config}", file=stream or _sys.stderr)
        return EXIT_MISSING
    ctx = Context(cfg, Path(args.out), max(1, args.threads), args.seed, not args.no_timings, stream)
    fn = cmd_pipeline if args.command == "pipeline" else COMMANDS[args.command]
    try:
        rc = fn(ctx)
    except MissingArtifact as exc:
        ctx.say(str(exc))
        rc = EXIT_MISSING
    # The report is an artifact too; --no-timings makes it reproducible.
    ctx.say(f"exit code {rc}")
    ctx.path(f"{args.command}.txt").write_text("\n".join(ctx.lines) + "\n")
    return rc


if __name__ == "__main__":
    raise SystemExit(main())

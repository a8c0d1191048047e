"""Euler-Maruyama simulation, closed-loop Monte Carlo and empirical probes.

Every run draws its Brownian increments from a Philox stream keyed by
``(master_seed, run_id)``, so results do not depend on batching, worker count
or execution order.  Runs are advanced together as a batch; all per-run
arithmetic is elementwise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .abstraction import SINK, Abstraction, _drift
from .certificate import Certificate, DerivedGains
from .model import BoxUnion, SystemSpec, distance_to_set, sample_boxes
from .synthesis import NONE, Controller, refine_batch


def default_dt(tau: float) -> float:
    return tau / 100 if tau <= 0.1 else tau / 1000


@dataclass(frozen=True)
class SimConfig:
    dt: float
    runs: int
    horizon: float
    master_seed: int = 0
    record_stride: int = 1

    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def steps_per(self, tau: float) -> int:
        ratio = tau / self.dt
        k = int(round(ratio))
        if self.dt > tau / 10 * (1 + 1e-12) or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError("dt must divide tau and be at most tau/10")
        return k


def normals(master_seed: int, run_id: int, count: int) -> np.ndarray:
    """Standard normals for one run: Box-Muller on a Philox stream."""
    gen = np.random.Generator(np.random.Philox(key=(int(master_seed) << 64) | int(run_id)))
    pairs = (count + 1) // 2
    # Interleaved draws keep the stream prefix-stable in ``count``.
    u = gen.random(2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2 * math.pi * u2)
    z[1::2] = r * np.sin(2 * math.pi * u2)
    return z[:count]


def increments(master_seed: int, run_ids: Sequence[int], steps: int, p: int, dt: float) -> np.ndarray:
    """Brownian increments, shape (runs, steps, p)."""
    out = np.empty((len(run_ids), steps, p))
    for i, rid in enumerate(run_ids):
        out[i] = normals(master_seed, rid, steps * p).reshape(steps, p)
    return out * math.sqrt(dt)


def diffusion_term(sys: SystemSpec, x: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """sum_k sigma_k x dW_k, elementwise over the batch."""
    out = np.zeros_like(x)
    for k in range(sys.p):
        s = sys.sigmas[k]
        for i in range(sys.n):
            acc = 0.0
            for j in range(sys.n):
                if s[i, j] != 0.0:
                    acc = acc + s[i, j] * x[:, j]
            out[:, i] += acc * dW[:, k]
    return out


def euler_maruyama(drift: Callable, diffusion: Callable, x0: np.ndarray, dt: float,
                   dW: np.ndarray) -> np.ndarray:
    """Generic batch EM: x_{k+1} = x_k + f(x_k) dt + g(x_k, dW_k); returns (runs, steps+1, n)."""
    x = np.array(x0, dtype=float)
    path = np.empty((x.shape[0], dW.shape[1] + 1, x.shape[1]))
    path[:, 0] = x
    for k in range(dW.shape[1]):
        x = x + drift(x) * dt + diffusion(x, dW[:, k])
        path[:, k + 1] = x
    return path


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (records, n)
    inputs: np.ndarray  # (records, m)
    phases: np.ndarray
    left_events: int


@dataclass
class Batch:
    times: np.ndarray
    states: np.ndarray  # (runs, records, n)
    inputs: np.ndarray  # (runs, records, m)
    phases: np.ndarray  # (runs, records)
    left_events: np.ndarray  # (runs,)


def simulate_batch(sys: SystemSpec, controller: Controller | None, inputs: np.ndarray,
                   x0: np.ndarray, cfg: SimConfig, run_ids: Sequence[int], tau: float,
                   fixed_input: np.ndarray | None = None) -> Batch:
    """Closed-loop (or fixed-input) EM for the given runs from x0 (n,) or (runs, n)."""
    steps = cfg.steps()
    per = cfg.steps_per(tau)
    R = len(run_ids)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (R, sys.n)).copy()
    dW = increments(cfg.master_seed, run_ids, steps, sys.p, cfg.dt)
    f = _drift(sys)
    phase = np.zeros(R, dtype=np.int64)
    left = np.zeros(R, dtype=np.int64)
    if fixed_input is not None:
        u = np.broadcast_to(np.asarray(fixed_input, dtype=float), (R, sys.m)).copy()
    elif inputs is not None:
        u = np.broadcast_to(inputs[0], (R, sys.m)).copy()
    else:
        u = np.zeros((R, sys.m))
    rec = list(range(0, steps + 1, cfg.record_stride))
    if rec[-1] != steps:
        rec.append(steps)
    states = np.empty((R, len(rec), sys.n))
    us = np.empty((R, len(rec), sys.m))
    phs = np.empty((R, len(rec)), dtype=np.int64)
    ri = 0
    for k in range(steps + 1):
        if controller is not None and k % per == 0 and k < steps:
            idx, phase = refine_batch(controller, x, phase)
            bad = idx < 0
            left += bad
            u = np.where(bad[:, None], u, inputs[np.maximum(idx, 0)])
        if ri < len(rec) and rec[ri] == k:
            states[:, ri], us[:, ri], phs[:, ri] = x, u, phase
            ri += 1
        if k == steps:
            break
        x = x + f(x, u) * cfg.dt + diffusion_term(sys, x, dW[:, k])
        if not np.all(np.isfinite(x)):
            bad_run = int(np.asarray(run_ids)[~np.all(np.isfinite(x), axis=1)][0])
            raise FloatingPointError(f"non-finite state at step {k + 1} in run {bad_run}")
    times = np.asarray(rec) * cfg.dt
    return Batch(times, states, us, phs, left)


def simulate_run(sys: SystemSpec, controller: Controller | None, inputs: np.ndarray,
                 x0: np.ndarray, cfg: SimConfig, run_id: int, tau: float,
                 fixed_input: np.ndarray | None = None) -> Trajectory:
    b = simulate_batch(sys, controller, inputs, x0, cfg, [run_id], tau, fixed_input)
    return Trajectory(b.times, b.states[0], b.inputs[0], b.phases[0], int(b.left_events[0]))


@dataclass
class TraceStats:
    times: np.ndarray
    q: int
    mean: dict[str, np.ndarray]  # E[||xi(t)||_W^q]
    stderr: dict[str, np.ndarray]
    final_phase_fraction: np.ndarray
    left_rate: float
    runs: int
    paths: np.ndarray | None = field(default=None, repr=False)

    def root(self, name: str) -> np.ndarray:
        return np.power(self.mean[name], 1.0 / self.q)

    def rows(self):
        for i, t in enumerate(self.times):
            for name in self.mean:
                yield (t, name, f"mean_dist_pow{self.q}", self.mean[name][i])
                yield (t, name, f"root_mean_dist_pow{self.q}", self.root(name)[i])
                yield (t, name, "stderr", self.stderr[name][i])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "set_name", "metric", "value"])
            for t, name, metric, value in self.rows():
                w.writerow([f"{t:.6g}", name, metric, f"{value:.10g}"])


def monte_carlo(sys: SystemSpec, controller: Controller | None, inputs: np.ndarray,
                x0: np.ndarray, cfg: SimConfig, sets: dict[str, BoxUnion], q: int,
                tau: float, chunk: int = 256, keep_paths: bool = False,
                fixed_input: np.ndarray | None = None) -> TraceStats:
    """Moments of the distance to each set over runs 0..runs-1.

    Per-run values are reduced once, in run order, after all chunks finish, so
    the chunk size never changes the result.
    """
    if cfg.runs < 1:
        raise ValueError("runs must be >= 1")
    dist = {k: [] for k in sets}
    final, left, paths, times = [], [], [], None
    last = controller.num_phases - 1 if controller else 0
    for start in range(0, cfg.runs, chunk):
        ids = list(range(start, min(start + chunk, cfg.runs)))
        try:
            b = simulate_batch(sys, controller, inputs, x0, cfg, ids, tau, fixed_input)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} (runs {ids[0]}..{ids[-1]})") from exc
        times = b.times
        for name, bu in sets.items():
            dist[name].append(distance_to_set(b.states, bu) ** q)
        final.append(b.phases == last)
        left.append(b.left_events)
        if keep_paths:
            paths.append(b.states)
    n = cfg.runs
    mean, se = {}, {}
    for k in sets:
        d = np.concatenate(dist[k])
        mean[k] = d.mean(axis=0)
        se[k] = d.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean[k])
    switches = max(1, int(cfg.horizon / tau + 1e-9))
    return TraceStats(times, q, mean, se, np.concatenate(final).mean(axis=0),
                      float(np.concatenate(left).sum()) / (n * switches), n,
                      np.concatenate(paths) if keep_paths else None)


# ------------------------------------------------------------------ probes

@dataclass
class ProbeReport:
    max_estimate: float
    max_stderr: float
    eps: float
    flagged: bool
    estimates: np.ndarray
    stderrs: np.ndarray


def empirical_bisim_probe(sys: SystemSpec, a: Abstraction, samples: int, seed: int,
                          runs: int = 500, eps: float | None = None, dt: float | None = None,
                          chunk: int = 8192) -> ProbeReport:
    """(E||xi_{x_q u}(tau) - x'_q||^q)^(1/q) for sampled (x_q, u) with non-sink successor x'_q.

    Flags when the largest estimate exceeds eps + 3 standard errors.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    eps = a.eps if eps is None else eps
    dt = default_dt(a.tau) if dt is None else dt
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < samples:
        s = int(rng.integers(a.num_states))
        j = int(rng.integers(a.num_inputs))
        if a.successors[s, j] != SINK:
            pairs.append((s, j))
    q = a.q
    est = np.empty(samples)
    se = np.empty(samples)
    cfg = SimConfig(dt, runs, a.tau, master_seed=seed, record_stride=10 ** 9)
    per = max(1, chunk // runs)
    for start in range(0, samples, per):
        block = pairs[start:start + per]
        x0 = np.concatenate([np.repeat(a.grid.coords(s)[None], runs, 0) for s, _ in block])
        u = np.concatenate([np.repeat(a.inputs[j][None], runs, 0) for _, j in block])
        tgt = np.concatenate([np.repeat(a.grid.coords(int(a.successors[s, j]))[None], runs, 0)
                              for s, j in block])
        ids = [(start + i) * runs + r for i in range(len(block)) for r in range(runs)]
        b = simulate_batch(sys, None, a.inputs, x0, cfg, ids, a.tau, fixed_input=u)
        d = np.abs(b.states[:, -1] - tgt).max(axis=1) ** q
        d = d.reshape(len(block), runs)
        m = d.mean(axis=1)
        sm = d.std(axis=1, ddof=1) / math.sqrt(runs)
        root = np.power(m, 1.0 / q)
        # Delta method for the q-th root.
        est[start:start + len(block)] = root
        se[start:start + len(block)] = sm / (q * np.maximum(root, 1e-300) ** (q - 1))
    i = int(np.argmax(est))
    flagged = bool(np.any(est > eps + 3 * se))
    return ProbeReport(float(est[i]), float(se[i]), float(eps), flagged, est, se)


@dataclass
class ContractionProbe:
    lhs: np.ndarray  # Monte-Carlo E[V(xi(t), xi'(t))]
    stderr: np.ndarray
    rhs: np.ndarray  # V(a, a') e^{-kappa t} + rho(|u - u'|)/(e kappa)

    @property
    def ok(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs + 3 * self.stderr))


def contraction_probe(sys: SystemSpec, cert: Certificate, gains: DerivedGains, t: float,
                      pairs: int, runs: int, seed: int, dt: float | None = None,
                      same_input: bool = False, region: BoxUnion | None = None) -> ContractionProbe:
    """Integrated Lyapunov decay over one period, both copies driven by the same noise."""
    rng = np.random.default_rng(seed)
    region = region or sys.domain
    a0 = sample_boxes(region, pairs, rng)
    a1 = sample_boxes(region, pairs, rng)
    u0 = sample_boxes(sys.input_set, pairs, rng)
    u1 = u0 if same_input else sample_boxes(sys.input_set, pairs, rng)
    dt = default_dt(t) if dt is None else dt
    cfg = SimConfig(dt, runs, t, master_seed=seed, record_stride=10 ** 9)
    ids = [i * runs + r for i in range(pairs) for r in range(runs)]
    rep = lambda v: np.repeat(v, runs, axis=0)
    b0 = simulate_batch(sys, None, None, rep(a0), cfg, ids, t, fixed_input=rep(u0))
    b1 = simulate_batch(sys, None, None, rep(a1), cfg, ids, t, fixed_input=rep(u1))
    v = cert.V(b0.states[:, -1], b1.states[:, -1]).reshape(pairs, runs)
    du = np.abs(u0 - u1).max(axis=1)
    rhs = cert.V(a0, a1) * math.exp(-gains.kappa * t) + gains.rho(du) / (math.e * gains.kappa)
    return ContractionProbe(v.mean(axis=1), v.std(axis=1, ddof=1) / math.sqrt(runs), rhs)


def abstract_run(a: Abstraction, c: Controller, x0: np.ndarray, steps: int) -> np.ndarray:
    """Closed-loop run of the symbolic model from the state nearest x0 (coordinates)."""
    s = int(a.grid.locate(np.asarray(x0, dtype=float)))
    phase = 0
    out = [a.grid.coords(s)]
    for _ in range(steps):
        while phase + 1 < c.num_phases and c.phases[phase].trigger[s]:
            phase += 1
        j = c.phases[phase].choice[s]
        if j == NONE or a.successors[s, j] == SINK:
            break
        s = int(a.successors[s, j])
        out.append(a.grid.coords(s))
    return np.array(out)


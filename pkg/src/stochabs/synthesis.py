"""Safety and reachability games on the symbolic model, spec templates and refinement."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import SINK, Abstraction, FormatError, _Reader
from .model import BoxUnion, Grid, GridAxis, axis_range

NONE = np.uint16(0xFFFF)
MAGIC = b"SCTL"
VERSION = 1


class UnrealizableError(RuntimeError):
    def __init__(self, message: str, phase: int):
        super().__init__(f"unrealizable from requested initial region (phase {phase}): {message}")
        self.phase = phase


# ------------------------------------------------------------------ labels

def label_states(a: Abstraction, bu: BoxUnion, shrink: float = 0.0) -> np.ndarray:
    """Grid states inside ``bu``; with shrink > 0, at least that deep inside."""
    if shrink < 0:
        raise ValueError("shrink must be >= 0")
    return label_grid(a.grid, bu, shrink)


def label_grid(grid: Grid, bu: BoxUnion, shrink: float = 0.0) -> np.ndarray:
    """Membership bitmap; depth for shrink > 0 is measured inside single boxes."""
    out = np.zeros(grid.size, dtype=bool)
    for box in bu.boxes:
        # Integer ranges avoid rounding trouble on faces that are grid lines.
        ranges = []
        for ax, (lo, hi) in zip(grid.axes, box):
            kmin, kmax = axis_range(lo + shrink, hi - shrink, grid.spacing)
            kmin, kmax = max(kmin, ax.kmin), min(kmax, ax.kmax)
            if kmin > kmax:
                break
            ranges.append(np.arange(kmin - ax.kmin, kmax - ax.kmin + 1))
        else:
            idx = np.ix_(*ranges)
            out.reshape(grid.shape)[idx] = True
    return out


# ------------------------------------------------------------------ solvers

@dataclass
class _Reverse:
    """Predecessor pairs grouped by target state (CSR)."""

    indptr: np.ndarray
    pair: np.ndarray  # flat pair index s * M + j, sorted by target

    @classmethod
    def of(cls, succ: np.ndarray) -> _Reverse:
        N = succ.shape[0]
        flat = succ.ravel()
        keep = np.flatnonzero(flat != SINK)
        tgt = flat[keep].astype(np.int64)
        order = np.argsort(tgt, kind="stable")
        counts = np.bincount(tgt, minlength=N)
        indptr = np.concatenate(([0], np.cumsum(counts)))
        return cls(indptr, keep[order])

    def preds(self, nodes: np.ndarray) -> np.ndarray:
        """Flat pair indices of all predecessors of ``nodes``."""
        if len(nodes) == 0:
            return np.empty(0, dtype=np.int64)
        starts, ends = self.indptr[nodes], self.indptr[nodes + 1]
        lens = ends - starts
        total = int(lens.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64)
        offs = np.repeat(starts - np.cumsum(lens) + lens, lens)
        return self.pair[offs + np.arange(total)]


def _in(mask: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """mask[succ] with SINK mapped to False."""
    ext = np.append(mask, False)
    idx = np.where(succ == SINK, len(mask), succ).astype(np.int64)
    return ext[idx]


def _first_true(ok: np.ndarray) -> np.ndarray:
    return np.where(ok.any(axis=1), ok.argmax(axis=1), -1)


def solve_safety(a: Abstraction | np.ndarray, safe: np.ndarray,
                 rev: _Reverse | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greatest fixed point nu X. safe & Pre(X); choice = smallest input staying in X."""
    succ = _table(a)
    N, M = succ.shape
    rev = rev or _Reverse.of(succ)
    win = np.asarray(safe, dtype=bool).copy()
    count = _in(win, succ).sum(axis=1)
    dead = np.flatnonzero(win & (count == 0))
    while len(dead):
        win[dead] = False
        src = rev.preds(dead) // M
        src = src[win[src]]
        count -= np.bincount(src, minlength=N)
        cand = np.unique(src)
        dead = cand[count[cand] == 0]
    choice = np.where(win, _first_true(_in(win, succ)), -1)
    return win, choice


def solve_reach(a: Abstraction | np.ndarray, target: np.ndarray, within: np.ndarray,
                rev: _Reverse | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least fixed point mu X. target | (within & Pre(X)).

    Returns (winning, choice, rank); rank counts steps to the target (-1 if
    losing) and choice is the smallest input that lowers the rank (-1 on
    target and losing states).
    """
    succ = _table(a)
    N, M = succ.shape
    rev = rev or _Reverse.of(succ)
    within = np.asarray(within, dtype=bool)
    rank = np.full(N, -1, dtype=np.int64)
    frontier = np.flatnonzero(target)
    rank[frontier] = 0
    k = 0
    while len(frontier):
        k += 1
        src = np.unique(rev.preds(frontier) // M)
        src = src[(rank[src] < 0) & within[src]]
        rank[src] = k
        frontier = src
    win = rank >= 0
    ext = np.append(rank, -1)
    rs = ext[np.where(succ == SINK, N, succ).astype(np.int64)]
    lower = (rs >= 0) & (rs < rank[:, None])
    choice = np.where(win & (rank > 0), _first_true(lower), -1)
    return win, choice, rank


def _table(a) -> np.ndarray:
    return a.successors if isinstance(a, Abstraction) else np.asarray(a, dtype=np.uint32)


# ------------------------------------------------------------------- specs

@dataclass(frozen=True)
class SpecTemplate:
    """One of SAFE, REACH, REACH_STAY, REACH_STAY_WHILE, SEQ_THEN_STAY."""

    variant: str
    sets: tuple[BoxUnion, ...]
    shrink: tuple[float, ...] = ()

    VARIANTS = ("SAFE", "REACH", "REACH_STAY", "REACH_STAY_WHILE", "SEQ_THEN_STAY")

    def __post_init__(self) -> None:
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown spec template {self.variant!r}")
        need = {"SAFE": 1, "REACH": 1, "REACH_STAY": 1, "REACH_STAY_WHILE": 2}
        if self.variant in need and len(self.sets) != need[self.variant]:
            raise ValueError(f"{self.variant} takes {need[self.variant]} set(s)")
        if self.variant == "SEQ_THEN_STAY" and len(self.sets) < 2:
            raise ValueError("SEQ_THEN_STAY takes at least one waypoint and a final set")
        if self.shrink and len(self.shrink) != len(self.sets):
            raise ValueError("one shrink margin per set")


@dataclass(frozen=True)
class Phase:
    winning: np.ndarray
    choice: np.ndarray  # uint16 input index, NONE off the winning set
    trigger: np.ndarray  # states that advance to the next phase


@dataclass(frozen=True)
class Controller:
    tau: float
    eta: float
    eps: float
    q: int
    grid: Grid
    phases: tuple[Phase, ...]
    inputs: np.ndarray | None = field(default=None, compare=False)

    @property
    def num_phases(self) -> int:
        return len(self.phases)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Controller):
            return NotImplemented
        same = (self.tau, self.eta, self.eps, self.q, self.grid) == (
            other.tau, other.eta, other.eps, other.q, other.grid)
        return same and len(self.phases) == len(other.phases) and all(
            np.array_equal(p.winning, o.winning) and np.array_equal(p.choice, o.choice)
            and np.array_equal(p.trigger, o.trigger) for p, o in zip(self.phases, other.phases))

    __hash__ = None  # type: ignore[assignment]


def _phase(win: np.ndarray, choice: np.ndarray, trigger: np.ndarray) -> Phase:
    c = np.where(win & (choice >= 0), choice, int(NONE)).astype(np.uint16)
    return Phase(win, c, trigger & win)


def _reach_stay(a, rev, W: np.ndarray, within: np.ndarray):
    safe_win, safe_choice = solve_safety(a, W, rev)
    win, choice, _ = solve_reach(a, safe_win, within, rev)
    choice = np.where(safe_win, safe_choice, choice)
    return win, choice


def solve_spec(a: Abstraction, spec: SpecTemplate, initial: np.ndarray | None = None) -> Controller:
    """Controller for the template; ``initial`` is a bitmap of required start states."""
    rev = _Reverse.of(a.successors)
    N = a.num_states
    shrink = spec.shrink or (0.0,) * len(spec.sets)
    labels = [label_states(a, s, r) for s, r in zip(spec.sets, shrink)]
    everywhere = np.ones(N, dtype=bool)
    nothing = np.zeros(N, dtype=bool)
    v = spec.variant
    if v == "SAFE":
        win, choice = solve_safety(a, labels[0], rev)
        phases = [_phase(win, choice, nothing)]
    elif v == "REACH":
        win, choice, rank = solve_reach(a, labels[0], everywhere, rev)
        at_target = win & (rank == 0)
        # Any non-sink input will do once the target is hit.
        choice = np.where(at_target, np.maximum(_first_true(a.successors != SINK), 0), choice)
        phases = [_phase(win, choice, labels[0])]
    elif v == "REACH_STAY":
        win, choice = _reach_stay(a, rev, labels[0], everywhere)
        phases = [_phase(win, choice, nothing)]
    elif v == "REACH_STAY_WHILE":
        z_win, _ = solve_safety(a, labels[1], rev)
        win, choice = _reach_stay(a, rev, labels[0] & labels[1], z_win)
        phases = [_phase(win, choice, nothing)]
    else:
        win, choice = _reach_stay(a, rev, labels[-1], everywhere)
        phases = [_phase(win, choice, nothing)]
        for i in range(len(labels) - 2, -1, -1):
            nxt = phases[0]
            if not nxt.winning.any():
                raise UnrealizableError("empty winning set", i + 1)
            trig = labels[i] & nxt.winning
            w, c, rank = solve_reach(a, trig, everywhere, rev)
            c = np.where(trig, nxt.choice.astype(np.int64), c)
            phases.insert(0, _phase(w, c, trig))
    for i, ph in enumerate(phases):
        if not ph.winning.any():
            raise UnrealizableError("empty winning set", i)
    if initial is not None:
        missing = np.asarray(initial, dtype=bool) & ~phases[0].winning
        if missing.any():
            raise UnrealizableError(f"{int(missing.sum())} initial state(s) outside the winning set", 0)
    return Controller(a.tau, a.eta, a.eps, a.q, a.grid, tuple(phases), a.inputs)


def check_closure(a: Abstraction, c: Controller) -> bool:
    """One sweep: each winning state's chosen successor stays winning.

    Trigger states are checked against the next phase, which refinement
    switches to before choosing an input; triggers of the last phase mark a
    satisfied reach objective and need no successor.
    """
    for i, ph in enumerate(c.phases):
        last = i + 1 == c.num_phases
        if not last and np.any(ph.trigger & ~c.phases[i + 1].winning):
            return False
        states = np.flatnonzero(ph.winning & ~ph.trigger)
        choice = ph.choice[states]
        if np.any(choice == NONE):
            return False
        succ = a.successors[states, choice.astype(np.int64)]
        if not np.all(_in(ph.winning, succ)):
            return False
    return True


# -------------------------------------------------------------- refinement

class LeftWinningRegion(RuntimeError):
    def __init__(self, state: int, phase: int):
        super().__init__(f"left winning region at state {state} in phase {phase}")
        self.state, self.phase = state, phase


def abstract_state(c: Controller, x: np.ndarray) -> int:
    return int(c.grid.locate(np.asarray(x, dtype=float)))


def refine(c: Controller, x: np.ndarray, phase: int) -> tuple[np.ndarray, int]:
    """(input vector, next phase) for concrete state x; raises LeftWinningRegion."""
    if c.inputs is None:
        raise ValueError("controller has no input list attached")
    j, phase = refine_index(c, x, phase)
    return c.inputs[j], phase


def refine_index(c: Controller, x: np.ndarray, phase: int) -> tuple[int, int]:
    """(input index, next phase) for concrete state x."""
    s = abstract_state(c, x)
    if s < 0:
        raise LeftWinningRegion(s, phase)
    while phase + 1 < c.num_phases and c.phases[phase].trigger[s]:
        phase += 1
    ph = c.phases[phase]
    if not ph.winning[s] or ph.choice[s] == NONE:
        raise LeftWinningRegion(s, phase)
    return int(ph.choice[s]), phase


def refine_batch(c: Controller, x: np.ndarray, phase: np.ndarray):
    """Vectorized refine; returns (input index or -1, next phase)."""
    s = c.grid.locate(x)
    phase = np.asarray(phase, dtype=np.int64).copy()
    ok = s >= 0
    sv = np.where(ok, s, 0)
    for _ in range(c.num_phases):
        trig = np.zeros(len(s), dtype=bool)
        for i in range(c.num_phases - 1):
            sel = ok & (phase == i)
            trig[sel] = c.phases[i].trigger[sv[sel]]
        if not trig.any():
            break
        phase[trig] += 1
    idx = np.full(len(s), -1, dtype=np.int64)
    for i, ph in enumerate(c.phases):
        sel = ok & (phase == i)
        ch = ph.choice[sv[sel]].astype(np.int64)
        idx[sel] = np.where(ch == int(NONE), -1, ch)
    return idx, phase


# ------------------------------------------------------------------ file I/O

def save_controller(c: Controller, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIdddI", MAGIC, VERSION, c.tau, c.eta, c.eps, c.q))
        fh.write(struct.pack("<I", c.grid.n))
        for ax in c.grid.axes:
            fh.write(struct.pack("<qI", ax.kmin, ax.count))
        fh.write(struct.pack("<II", c.num_phases, c.grid.size))
        for ph in c.phases:
            fh.write(np.packbits(ph.winning, bitorder="little").tobytes())
            fh.write(np.packbits(ph.trigger, bitorder="little").tobytes())
            fh.write(np.ascontiguousarray(ph.choice, dtype="<u2").tobytes())


def load_controller(path) -> Controller:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError("bad_magic", f"{path} is not an SCTL file")
    r = _Reader(data)
    _, version, tau, eta, eps, q = r.take("<4sIdddI")
    if version != VERSION:
        raise FormatError("version", f"unsupported SCTL version {version}")
    (n,) = r.take("<I")
    axes = tuple(GridAxis(int(k), int(cnt)) for k, cnt in (r.take("<qI") for _ in range(n)))
    phases_n, size = r.take("<II")
    grid = Grid(float(eta), axes)
    if grid.size != size:
        raise FormatError("truncated", "state count disagrees with the grid")
    nbytes = (size + 7) // 8
    phases = []
    for _ in range(phases_n):
        win = np.unpackbits(r.array("u1", nbytes), count=size, bitorder="little").astype(bool)
        trig = np.unpackbits(r.array("u1", nbytes), count=size, bitorder="little").astype(bool)
        choice = r.array("<u2", size)
        phases.append(Phase(win, choice, trig))
    if r.pos != len(data):
        raise FormatError("trailing", "unexpected bytes after the last phase")
    return Controller(float(tau), float(eta), float(eps), int(q), grid, tuple(phases))

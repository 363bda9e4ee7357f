"""Synthetic mobility: exploration and preferential return on top of a weekly routine.

Weekdays: home at night, work during office hours, free evenings. Weekends:
home at night, free roaming in the day. Free time is a chain of stays whose
destinations come from :func:`epr_next`; stay lengths are geometric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo_vocab import RegionVocabulary
from .seeding import derive_seed, rng_for
from .trajectory import (
    MISSING, WINDOW_SECONDS, WINDOWS_PER_DAY, WINDOWS_PER_WEEK, LbsRecord, TrajectorySequence,
)


@dataclass
class AgentState:
    home: int
    work: int
    visit_counts: dict = field(default_factory=dict)
    current: int | None = None

    @property
    def S(self) -> int:
        return len(self.visit_counts)

    def visit(self, token: int) -> None:
        self.visit_counts[token] = self.visit_counts.get(token, 0) + 1
        self.current = token


@dataclass(frozen=True)
class EprParams:
    rho: float = 0.6
    gamma: float = 0.21
    alpha: float = 2.0
    # schedule, in 30-minute slots of the day (slot 18 = 09:00)
    leave_home: tuple[int, int] = (15, 18)   # weekday departure to work, inclusive range
    leave_work: tuple[int, int] = (34, 37)
    bedtime: tuple[int, int] = (42, 46)
    weekend_wake: tuple[int, int] = (16, 22)
    mean_stay: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if self.gamma < 0 or self.alpha < 0:
            raise ValueError("gamma and alpha must be non-negative")
        if self.mean_stay < 1:
            raise ValueError("mean_stay must be >= 1 window")


def distance_matrix(world: RegionVocabulary) -> np.ndarray:
    c = world.centroids()
    return np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))


def explore_probability(S: int, params: EprParams) -> float:
    return params.rho * float(S) ** (-params.gamma)


def epr_next(state: AgentState, params: EprParams, world: RegionVocabulary,
             rng: np.random.Generator, distances: np.ndarray | None = None) -> int:
    """Explore an unvisited region (prob. rho * S**-gamma) or return to a visited one.

    Exploration targets are weighted by distance**-alpha from the current region;
    returns are weighted by visit count. Updates ``state`` in place.
    """
    if state.S == 0 or state.current is None:
        raise ValueError("agent state needs at least the home region visited")
    n = world.n_regions
    explore = rng.random() < explore_probability(state.S, params)
    if explore and state.S < n:
        visited = np.zeros(n, dtype=bool)
        visited[list(state.visit_counts)] = True
        if distances is None:
            c = world.centroids()
            d = np.sqrt(((c - c[state.current]) ** 2).sum(-1))
        else:
            d = distances[state.current]
        cand = np.flatnonzero(~visited)
        w = d[cand] ** (-params.alpha)
        nxt = int(cand[rng.choice(len(cand), p=w / w.sum())])
    else:
        keys = np.fromiter(state.visit_counts.keys(), dtype=np.int64)
        counts = np.fromiter(state.visit_counts.values(), dtype=np.float64)
        nxt = int(keys[rng.choice(len(keys), p=counts / counts.sum())])
    state.visit(nxt)
    return nxt


def _pick_anchors(world: RegionVocabulary, params: EprParams, rng, distances) -> tuple[int, int]:
    pop = world.populations()
    home = int(rng.choice(world.n_regions, p=pop / pop.sum()))
    if world.n_regions == 1:
        return home, home
    d = distances[home].copy()
    d[home] = np.inf
    w = pop * d ** (-params.alpha)
    work = int(rng.choice(world.n_regions, p=w / w.sum()))
    return home, work


def simulate_agent(world: RegionVocabulary, params: EprParams, span: tuple[int, int],
                   seed: int, user_id: str = "u0", phase_offset: int = 0,
                   distances: np.ndarray | None = None) -> TrajectorySequence:
    """Fully observed sequence for one agent; window 0 sits ``phase_offset`` slots after Monday 00:00."""
    start, end = int(span[0]), int(span[1])
    if (end - start) % WINDOW_SECONDS or end <= start:
        raise ValueError("span must be a positive multiple of 30 minutes")
    T = (end - start) // WINDOW_SECONDS
    if distances is None:
        distances = distance_matrix(world)
    rng = np.random.default_rng(seed)
    home, work = _pick_anchors(world, params, rng, distances)
    state = AgentState(home, work)
    state.visit(home)

    tokens = np.empty(T, dtype=np.int64)
    stay_left = 0
    day_plan = None
    for t in range(T):
        w = (t + phase_offset) % WINDOWS_PER_WEEK
        day, slot = divmod(w, WINDOWS_PER_DAY)
        if day_plan is None or day_plan[0] != (t + phase_offset) // WINDOWS_PER_DAY:
            lo, hi = (params.leave_home if day < 5 else params.weekend_wake)
            day_plan = (
                (t + phase_offset) // WINDOWS_PER_DAY,
                int(rng.integers(lo, hi + 1)),
                int(rng.integers(params.leave_work[0], params.leave_work[1] + 1)),
                int(rng.integers(params.bedtime[0], params.bedtime[1] + 1)),
            )
        _, wake, off_work, bed = day_plan
        if slot < wake or slot >= bed:
            phase = "home"
        elif day < 5 and slot < off_work:
            phase = "work"
        else:
            phase = "free"

        if phase == "home":
            if state.current != home:
                state.visit(home)
            stay_left = 0
        elif phase == "work":
            if state.current != work:
                state.visit(work)
            stay_left = 0
        else:
            if stay_left <= 0:
                epr_next(state, params, world, rng, distances)
                stay_left = int(rng.geometric(1.0 / params.mean_stay))
            stay_left -= 1
        tokens[t] = state.current
    return TrajectorySequence(user_id, start, tokens)


def thin_observations(seq: TrajectorySequence, target_occupancy: float, burst_length: float,
                      seed: int, arrival_bias: float = 0.0) -> TrajectorySequence:
    """Drop observations in geometric-length bursts so occupancy is near ``target_occupancy``.

    Observed and missing runs alternate with geometric lengths whose means are in
    ratio ``target : 1 - target`` (missing runs average ``burst_length`` windows
    unless the target forces longer gaps). ``arrival_bias`` > 0 makes a gap more
    likely to start right after the agent changes region. The unthinned tokens are
    kept in ``truth``.
    """
    if not 0.0 < target_occupancy <= 1.0:
        raise ValueError("target_occupancy must be in (0, 1]")
    if burst_length < 1:
        raise ValueError("burst_length must be >= 1")
    truth = np.array(seq.truth if seq.truth is not None else seq.tokens, dtype=np.int64)
    tokens = np.array(seq.tokens, dtype=np.int64)
    if target_occupancy >= 1.0:
        return TrajectorySequence(seq.user_id, seq.start_epoch, tokens, seq.window_minutes, truth)
    mean_off = float(burst_length)
    mean_on = target_occupancy * mean_off / (1.0 - target_occupancy)
    if mean_on < 1.0:
        mean_on = 1.0
        mean_off = (1.0 - target_occupancy) / target_occupancy
    rng = np.random.default_rng(seed)
    T = len(tokens)
    observed = np.zeros(T, dtype=bool)
    on = rng.random() < target_occupancy
    t = 0
    while t < T:
        mean = mean_on if on else mean_off
        run = int(rng.geometric(1.0 / mean))
        if on and arrival_bias > 0:
            # cut an observed run short at the first arrival with probability arrival_bias
            for k in range(1, run):
                if t + k < T and truth[t + k] != truth[t + k - 1] and rng.random() < arrival_bias:
                    run = k + 1
                    break
        observed[t:t + run] = on
        t += run
        on = not on
    tokens[~observed] = MISSING
    return TrajectorySequence(seq.user_id, seq.start_epoch, tokens, seq.window_minutes, truth)


def simulate_population(world: RegionVocabulary, params: EprParams, n_agents: int,
                        span: tuple[int, int], seed: int, target_occupancy: float = 0.75,
                        burst_length: float = 4.0, phase_offset: int = 0,
                        arrival_bias: float = 0.0) -> list[TrajectorySequence]:
    """Thinned sequences (with ``truth``) for ``n_agents`` independently seeded agents."""
    distances = distance_matrix(world)
    out = []
    for i in range(n_agents):
        uid = f"u{i:05d}"
        full = simulate_agent(world, params, span, derive_seed(seed, "agent", uid), uid,
                              phase_offset, distances)
        out.append(thin_observations(full, target_occupancy, burst_length,
                                     derive_seed(seed, "thin", uid), arrival_bias))
    return out


def emit_records(seqs: list[TrajectorySequence], world: RegionVocabulary, seed: int,
                 max_per_window: int = 3) -> list[LbsRecord]:
    """Raw LBS-style points for every observed window, all inside the window's cell."""
    g = world.grid
    if g is None:
        raise ValueError("world has no grid geometry")
    records = []
    for s in seqs:
        rng = rng_for(seed, "records", s.user_id)
        for t in np.flatnonzero(s.tokens != MISSING):
            tok = int(s.tokens[t])
            cx, cy = world.regions[tok].centroid
            k = int(rng.integers(1, max_per_window + 1))
            offsets = np.sort(rng.choice(WINDOW_SECONDS, size=k, replace=False))
            for off in offsets:
                dx, dy = rng.uniform(-0.49, 0.49, 2) * g.cell_size
                records.append(LbsRecord(s.user_id, int(s.start_epoch + t * WINDOW_SECONDS + off),
                                         float(cx + dx), float(cy + dy)))
    return records

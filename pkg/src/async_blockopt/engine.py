"""
Tick-based simulation of asynchronous block updates with stale local copies.

Every agent i keeps its own copy x^i of the whole ensemble vector. At each tick:

    1. the tick counter advances to k
    2. communication coins fire (and, in queued mode, due messages arrive)
    3. update coins fire and agent i replaces its own block with a projected
       gradient step taken at its possibly stale copy x^i

All randomness comes from one seeded numpy Generator drawn in a fixed order,
so (seed, schedule, x0) determines the event log and final state bit for bit.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from async_blockopt.errors import DimensionError, FeasibilityError, LayoutError, PreconditionError
from async_blockopt.problem import BlockLayout, FloatArray, Problem, Regularization, grad_f_A_block

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]

# ticks resolved per batch in instant mode
CHUNK_TICKS = 4096


# ========== Schedule ==========

class DelayMode(str, Enum):
    INSTANT = "instant"
    QUEUED = "queued"


@dataclass(frozen=True)
class DelayModel:
    """Instant hands over the sender's latest block; Queued adds bounded random latency."""

    mode: DelayMode = DelayMode.INSTANT
    max_latency: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DelayMode(self.mode))
        if self.max_latency < 0:
            raise ValueError(f"max_latency must be >= 0, got {self.max_latency}")

    @classmethod
    def instant(cls) -> "DelayModel":
        return cls(DelayMode.INSTANT, 0)

    @classmethod
    def queued(cls, max_latency: int) -> "DelayModel":
        return cls(DelayMode.QUEUED, max_latency)


@dataclass(frozen=True)
class ScheduleConfig:
    p_update: float = 0.1
    p_comm: float = 0.1
    delay: DelayModel = field(default_factory=DelayModel.instant)

    def __post_init__(self) -> None:
        for name in ("p_update", "p_comm"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


# ========== Events ==========

@dataclass(frozen=True, slots=True)
class UpdateEvent:
    tick: int
    agent: int
    clamped: bool = False


@dataclass(frozen=True, slots=True)
class DeliverEvent:
    tick: int
    sender: int
    receiver: int
    tau: int


Event = Union[UpdateEvent, DeliverEvent]


@dataclass(frozen=True, eq=False)
class Message:
    sender: int
    receiver: int
    value: FloatArray
    tau: int
    sent: int
    due: int


@dataclass(frozen=True, eq=False)
class AgentView:
    """Agent i's own block plus its (value, tau) copy of every other block."""

    agent: int
    own: FloatArray
    tau_own: int
    copies: Dict[int, Tuple[FloatArray, int]]


# ========== World ==========

@dataclass(eq=False)
class World:
    """
    Mutable simulation state for one run.

    `history` holds every block each agent has computed, keyed by tick, so
    in-flight payloads and stale copies stay checkable. It grows by one entry
    per update for the life of the World.
    """

    problem: Problem
    reg: Regularization
    x0: FloatArray
    seed: int
    schedule: ScheduleConfig
    rng: np.random.Generator
    views: FloatArray  # (N, n): row i is agent i's copy x^i
    taus: IntArray  # (N, N): taus[i, j] is the tick at which j computed the copy held by i
    history: List[Dict[int, FloatArray]]  # history[j][t] is the block j computed at tick t
    tick: int = 0
    events: List[Event] = field(default_factory=list)
    clamp_count: int = 0
    in_flight: Dict[Tuple[int, int], Deque[Message]] = field(default_factory=dict)
    _last_due: Dict[Tuple[int, int], int] = field(default_factory=dict, repr=False)
    _senders: Optional[np.ndarray] = field(default=None, repr=False)
    _receivers: Optional[np.ndarray] = field(default=None, repr=False)
    _slices: Tuple[slice, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        n_agents = self.problem.num_agents
        pairs = [(j, i) for j in range(n_agents) for i in range(n_agents) if i != j]
        self._senders = np.array([p[0] for p in pairs], dtype=np.int64)
        self._receivers = np.array([p[1] for p in pairs], dtype=np.int64)
        self._slices = self.problem.layout.slices()

    @property
    def layout(self) -> BlockLayout:
        return self.problem.layout

    @property
    def num_agents(self) -> int:
        return self.problem.num_agents

    @property
    def last_update(self) -> IntArray:
        """Tick of each agent's latest own update (0 if never updated)."""
        return np.diagonal(self.taus).copy()

    def view(self, i: int) -> AgentView:
        sl = self.layout.slices()
        copies = {j: (self.views[i, sl[j]].copy(), int(self.taus[i, j])) for j in range(self.num_agents) if j != i}
        return AgentView(agent=i, own=self.views[i, sl[i]].copy(), tau_own=int(self.taus[i, i]), copies=copies)

    def pending_messages(self) -> int:
        return sum(len(q) for q in self.in_flight.values())


def init_world(
    problem: Problem,
    reg: Regularization,
    layout: BlockLayout,
    x0: ArrayLike,
    seed: int,
    schedule: ScheduleConfig,
) -> World:
    """Every agent starts from x0 with all taus at 0."""
    if layout != problem.layout:
        raise LayoutError("Layout does not match the problem's layout")
    if reg.num_agents != problem.num_agents:
        raise DimensionError(f"{reg.num_agents} alphas for {problem.num_agents} agents")
    start = np.array(x0, dtype=float)
    if start.shape != (problem.n,):
        raise DimensionError(f"x0 must have length {problem.n}, got shape {start.shape}")
    if not np.all(np.isfinite(start)):
        raise FeasibilityError("x0 contains non-finite values")
    outside = np.flatnonzero((start < problem.lower) | (start > problem.upper))
    if outside.size:
        raise FeasibilityError(f"x0 lies outside the box at coordinates {outside.tolist()}")
    start.setflags(write=False)

    n_agents = problem.num_agents
    history = [{0: start[sl].copy()} for sl in layout.slices()]
    world = World(
        problem=problem,
        reg=reg,
        x0=start,
        seed=seed,
        schedule=schedule,
        rng=np.random.default_rng(seed),
        views=np.tile(start, (n_agents, 1)),
        taus=np.zeros((n_agents, n_agents), dtype=np.int64),
        history=history,
    )
    logger.debug("Initialized world: agents=%d n=%d seed=%d", n_agents, problem.n, seed)
    return world


# ========== Transitions ==========

def _projected_step(world: World, local: FloatArray, i: int, sl: slice) -> Tuple[FloatArray, bool]:
    """Agent i's new block from its copy `local`, and whether the box clipped it."""
    problem = world.problem
    raw = local[sl] - world.reg.gamma * grad_f_A_block(problem, world.reg, local, i, validate=False)
    new = np.minimum(np.maximum(raw, problem.lower[sl]), problem.upper[sl])
    return new, bool(np.any(new != raw))


def agent_compute(world: World, i: int) -> World:
    """
    x_i^i ← clamp(x_i^i − γ·∇_i f_A(x^i)) at agent i's own copy.

    Logs an UpdateEvent flagged `clamped` when the box changed the step.
    """
    if not 0 <= i < world.num_agents:
        raise IndexError(f"Agent index {i} out of range for {world.num_agents} agents")
    sl = world._slices[i]
    new, clamped = _projected_step(world, world.views[i], i, sl)

    world.views[i, sl] = new
    world.taus[i, i] = world.tick
    world.history[i][world.tick] = new
    world.events.append(UpdateEvent(world.tick, i, clamped))
    if clamped:
        world.clamp_count += 1
    return world


def _apply_delivery(world: World, j: int, i: int, value: FloatArray, tau: int) -> None:
    world.views[i, world._slices[j]] = value
    world.taus[i, j] = tau
    world.events.append(DeliverEvent(world.tick, j, i, tau))


def deliver(
    world: World,
    j: int,
    i: int,
    *,
    value: Optional[ArrayLike] = None,
    tau: Optional[int] = None,
) -> World:
    """
    Hand agent j's block to agent i.

    Without an explicit payload this is an instant delivery of j's latest
    computed block, carrying the tick at which j computed it.
    """
    if i == j:
        raise PreconditionError(f"Agent {i} cannot message itself")
    for idx in (i, j):
        if not 0 <= idx < world.num_agents:
            raise IndexError(f"Agent index {idx} out of range for {world.num_agents} agents")
    if value is None:
        payload = world.views[j, world._slices[j]].copy()
        stamp = int(world.taus[j, j])
    else:
        if tau is None:
            raise PreconditionError("An explicit payload needs its tau")
        payload = np.asarray(value, dtype=float)
        stamp = int(tau)
    if stamp > world.tick:
        raise PreconditionError(f"tau={stamp} lies in the future of tick {world.tick}")
    _apply_delivery(world, j, i, payload, stamp)
    return world


def _enqueue(world: World, j: int, i: int, latency: int) -> None:
    k = world.tick
    pair = (j, i)
    due = max(k + latency, world._last_due.get(pair, k))
    world._last_due[pair] = due
    msg = Message(
        sender=j,
        receiver=i,
        value=world.views[j, world._slices[j]].copy(),
        tau=int(world.taus[j, j]),
        sent=k,
        due=due,
    )
    world.in_flight.setdefault(pair, deque()).append(msg)


def _advance_instant(world: World, ticks: int, snap_at: IntArray) -> FloatArray:
    """
    Advance an instant-delivery world by `ticks` ticks in one pass.

    With instant delivery the coins alone fix every event and every tau, so
    the schedule is resolved with array operations and only the block
    updates run one by one, in log order. Blocks live in a flat store: the
    starting views first, then each agent's new blocks in update order.

    Returns the views after each relative tick in `snap_at` (values in
    1..ticks), shape (len(snap_at), N, n).
    """
    problem = world.problem
    n_agents, n = world.num_agents, problem.n
    senders, receivers = world._senders, world._receivers
    agents = np.arange(n_agents)
    sizes = np.asarray(problem.layout.sizes, dtype=np.int64)
    offsets = np.asarray(problem.layout.offsets[:-1], dtype=np.int64)
    within = np.concatenate([np.arange(s) for s in sizes])
    k0 = world.tick
    steps = np.arange(1, ticks + 1, dtype=np.int64)

    coins = world.rng.random((ticks, n_agents + senders.size))
    upd = coins[:, :n_agents] < world.schedule.p_update
    comm = coins[:, n_agents:] < world.schedule.p_comm

    # row r describes the state after relative tick r; row 0 is the starting state
    counts = np.vstack([np.zeros((1, n_agents), dtype=np.int64), np.cumsum(upd, axis=0)])
    own_tau = np.maximum.accumulate(
        np.vstack([np.diagonal(world.taus)[None, :], np.where(upd, k0 + steps[:, None], -1)]), axis=0
    )
    last_sent = np.maximum.accumulate(
        np.vstack([np.zeros((1, senders.size), dtype=np.int64), np.where(comm, steps[:, None], 0)]), axis=0
    )

    totals = counts[-1]
    base = n_agents * n + np.concatenate([[0], np.cumsum(totals * sizes)[:-1]])
    store = np.empty(n_agents * n + int(np.sum(totals * sizes)))
    store[: n_agents * n] = world.views.ravel()

    def own_start(j: IntArray, pos: IntArray) -> IntArray:
        # position 0 is the block held at the start, in row j of the starting views
        return np.where(pos == 0, j * n + offsets[j], base[j] + (pos - 1) * sizes[j])

    def gather(own_rows: IntArray, copy_rows: IntArray) -> IntArray:
        """Store indices of every copy, shape (R, N, n)."""
        starts = np.empty((own_rows.size, n_agents, n_agents), dtype=np.int64)
        starts[:, agents, agents] = own_start(agents, counts[own_rows])
        sent = last_sent[copy_rows]
        delivered = own_start(senders, counts[np.maximum(sent - 1, 0), senders])
        starts[:, receivers, senders] = np.where(sent > 0, delivered, receivers * n + offsets[senders])
        return np.repeat(starts, sizes, axis=2) + within

    # updates at relative tick r read their own block after r-1 and copies after the tick-r deliveries
    upd_rows, upd_agents = np.nonzero(upd)
    reads = gather(upd_rows, upd_rows + 1)[np.arange(upd_rows.size), upd_agents]
    dests = base[upd_agents] + (counts[upd_rows + 1, upd_agents] - 1) * sizes[upd_agents]
    clamped = np.zeros(upd_rows.size, dtype=bool)
    for u, (i, dest, idx) in enumerate(zip(upd_agents.tolist(), dests.tolist(), reads)):
        sl = world._slices[i]
        new, clamped[u] = _projected_step(world, store[idx], i, sl)
        store[dest : dest + new.size] = new

    d_rows, d_pairs = np.nonzero(comm)
    d_senders, d_receivers = senders[d_pairs], receivers[d_pairs]
    d_taus = own_tau[d_rows, d_senders]
    logged: List[Event] = [
        DeliverEvent(t, j, i, tau)
        for t, j, i, tau in zip((k0 + 1 + d_rows).tolist(), d_senders.tolist(), d_receivers.tolist(), d_taus.tolist())
    ]
    logged += [
        UpdateEvent(t, i, c) for t, i, c in zip((k0 + 1 + upd_rows).tolist(), upd_agents.tolist(), clamped.tolist())
    ]
    order = np.argsort(np.concatenate([2 * d_rows, 2 * upd_rows + 1]), kind="stable")
    world.events.extend(logged[k] for k in order.tolist())

    end = np.array([ticks])
    world.views[:] = store[gather(end, end)[0]]
    sent = last_sent[ticks]
    world.taus[receivers, senders] = np.where(
        sent > 0, own_tau[np.maximum(sent - 1, 0), senders], world.taus[receivers, senders]
    )
    world.taus[agents, agents] = own_tau[ticks]
    for t, i, dest in zip((k0 + 1 + upd_rows).tolist(), upd_agents.tolist(), dests.tolist()):
        world.history[i][t] = store[dest : dest + int(sizes[i])].copy()
    world.clamp_count += int(np.count_nonzero(clamped))
    world.tick = k0 + ticks

    return store[gather(snap_at, snap_at)]


def _deliver_due(world: World) -> None:
    for pair in sorted(world.in_flight):
        queue = world.in_flight[pair]
        while queue and queue[0].due <= world.tick:
            msg = queue.popleft()
            _apply_delivery(world, msg.sender, msg.receiver, msg.value, msg.tau)


def step_world(world: World) -> World:
    """
    Advance one tick: communication first, then computations, both in
    canonical order (pairs lexicographic by (sender, receiver), agents ascending).
    """
    schedule = world.schedule
    if schedule.delay.mode is DelayMode.INSTANT:
        _advance_instant(world, 1, np.empty(0, dtype=np.int64))
        return world

    world.tick += 1
    n_agents = world.num_agents
    coins = world.rng.random(n_agents + len(world._senders))
    updaters = np.flatnonzero(coins[:n_agents] < schedule.p_update)
    fired = np.flatnonzero(coins[n_agents:] < schedule.p_comm)

    if fired.size:
        latencies = world.rng.integers(0, schedule.delay.max_latency + 1, size=fired.size)
        for idx, lat in zip(fired, latencies):
            _enqueue(world, int(world._senders[idx]), int(world._receivers[idx]), int(lat))
    _deliver_due(world)

    for i in updaters:
        agent_compute(world, int(i))
    return world


# ========== Runs ==========

@dataclass(frozen=True, eq=False)
class Snapshot:
    tick: int
    views: FloatArray  # (N, n)


@dataclass(frozen=True, eq=False)
class Trace:
    """Immutable record of a run: snapshots, the event log and the final world."""

    seed: int
    schedule: ScheduleConfig
    layout: BlockLayout
    gamma: float
    alphas: FloatArray
    x0: FloatArray
    start_tick: int
    end_tick: int
    stride: int
    snapshots: Tuple[Snapshot, ...]
    events: Tuple[Event, ...]
    clamp_count: int
    final: Optional[World] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_agents(self) -> int:
        return self.layout.num_blocks

    def snapshot_ticks(self) -> np.ndarray:
        return np.array([s.tick for s in self.snapshots], dtype=np.int64)

    def snapshot_views(self) -> FloatArray:
        """Stacked snapshot views, shape (T, N, n)."""
        return np.stack([s.views for s in self.snapshots])

    def digest(self) -> str:
        from async_blockopt.trace_io import trace_digest

        return trace_digest(self)


def run(world: World, ticks: int, *, stride: int = 1, metadata: Optional[Dict[str, Any]] = None) -> Trace:
    """
    Step the world `ticks` times, snapshotting every `stride` ticks.

    The starting tick and the final tick are always snapshotted.
    """
    if ticks < 0:
        raise ValueError(f"ticks must be >= 0, got {ticks}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    start = world.tick
    first_event = len(world.events)
    snapshots = [Snapshot(start, _frozen(world.views))]
    if world.schedule.delay.mode is DelayMode.INSTANT:
        done = 0
        while done < ticks:
            chunk = min(CHUNK_TICKS, ticks - done)
            rel = np.arange(1, chunk + 1, dtype=np.int64)
            want = rel[((done + rel) % stride == 0) | (done + rel == ticks)]
            views = _advance_instant(world, chunk, want)
            views.setflags(write=False)
            snapshots.extend(Snapshot(start + done + int(r), v) for r, v in zip(want, views))
            done += chunk
    else:
        for step in range(1, ticks + 1):
            step_world(world)
            if step % stride == 0 or step == ticks:
                snapshots.append(Snapshot(world.tick, _frozen(world.views)))

    logger.info(
        "Ran %d ticks: %d events, %d clamped updates",
        ticks,
        len(world.events) - first_event,
        world.clamp_count,
    )
    return Trace(
        seed=world.seed,
        schedule=world.schedule,
        layout=world.layout,
        gamma=world.reg.gamma,
        alphas=world.reg.alphas,
        x0=world.x0,
        start_tick=start,
        end_tick=world.tick,
        stride=stride,
        snapshots=tuple(snapshots),
        events=tuple(world.events[first_event:]),
        clamp_count=world.clamp_count,
        final=world,
        metadata=dict(metadata or {}),
    )


def _frozen(arr: FloatArray) -> FloatArray:
    out = arr.copy()
    out.setflags(write=False)
    return out


# ========== Replay ==========

def replay(
    problem: Problem,
    reg: Regularization,
    x0: ArrayLike,
    events: Iterable[Event],
) -> World:
    """
    Rebuild every agent's copy from an event log alone.

    Updates are recomputed from the replayed copies; deliveries hand over the
    block the sender computed at the logged tau. A delivery whose tau has no
    matching update raises PreconditionError.
    """
    world = init_world(problem, reg, problem.layout, x0, seed=0, schedule=ScheduleConfig(0.0, 0.0))
    for event in events:
        if event.tick < world.tick:
            raise PreconditionError(f"Event at tick {event.tick} follows tick {world.tick}")
        world.tick = event.tick
        if isinstance(event, UpdateEvent):
            agent_compute(world, event.agent)
        else:
            computed = world.history[event.sender].get(event.tau)
            if computed is None:
                raise PreconditionError(
                    f"Agent {event.sender} has no block computed at tick {event.tau} to deliver"
                )
            deliver(world, event.sender, event.receiver, value=computed.copy(), tau=event.tau)
    return world


def check_staleness(world: World) -> List[Tuple[int, int]]:
    """
    Pairs (i, j) whose copy x_j^i differs from the block j computed at tick tau_j^i.

    An empty list means every copy is an exact, possibly old, value of its owner.
    """
    bad: List[Tuple[int, int]] = []
    slices = world.layout.slices()
    for i in range(world.num_agents):
        for j in range(world.num_agents):
            tau = int(world.taus[i, j])
            computed = world.history[j].get(tau)
            if tau > world.tick or computed is None or not np.array_equal(world.views[i, slices[j]], computed):
                bad.append((i, j))
    return bad


def events_ordered(events: Sequence[Event]) -> bool:
    return all(a.tick <= b.tick for a, b in zip(events, events[1:]))

"""Discrete-event model of one CTA running the attention mainloop.

Agents are generator processes: a producer streaming Q/K/V blocks through
s-stage circular buffers, W consumer warpgroups issuing GEMMs and softmax, and
(for the backward pass) a dQ writer. Shared hardware is modeled as

* tensor cores and the exponential unit (MUFU): processor sharing across
  warpgroups, in order within one warpgroup;
* the load path: a FIFO channel of fixed bandwidth followed by a fixed latency;
* an fp8 V-tile transpose unit and a dQ accumulation unit: FIFO.

Time is in cycles. The schedule is idealized (no issue latency, no bank
conflicts); only orderings between variants are meant to be meaningful.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

__all__ = [
    "ResourceModel",
    "ScheduleKind",
    "PRESETS",
    "SimShape",
    "TraceEvent",
    "SimReport",
    "WorkModel",
    "DeadlockError",
    "work_model",
    "register_footprint",
    "simulate",
    "simulate_backward",
    "validate_trace",
    "load_resource_model",
    "RESOURCE_SCHEMA",
]

RESOURCE_SCHEMA = "flashlab.resource_model/1"

_CLOCK_HZ = 1.83e9
_SMS = 132


@dataclass(frozen=True)
class ResourceModel:
    """Per-SM rates in units per cycle.

    Defaults: 989.4 TFLOPS fp16 dense matmul and 3.9 TFLOPS of exponentials over
    132 SMs at 1.83 GHz give 4096 FLOP/cycle and 16 exp/cycle. K/V blocks are
    shared by every query-tile CTA of a head, so loads are served from L2
    (~12 TB/s chip-wide, ~49.7 B/cycle per SM); the latency is an assumed value.
    """

    tensor_rate: float = 4096.0
    mufu_rate: float = 16.0
    load_bandwidth: float = 12e12 / _SMS / _CLOCK_HZ
    load_latency: float = 600.0
    warpgroups: int = 2
    stages: int = 2
    bytes_per_elem: int = 2
    transpose_rate: float = 64.0  # bytes/cycle of the fp8 in-SMEM V transpose
    dq_atomic_bandwidth: float = 32.0  # bytes/cycle into the global dQ accumulator
    register_budget: int = 128 * 240 * 4  # bytes of registers per consumer warpgroup

    def __post_init__(self):
        for f in ("tensor_rate", "mufu_rate", "load_bandwidth", "transpose_rate", "dq_atomic_bandwidth"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.load_latency < 0:
            raise ValueError("load_latency must be >= 0")
        if self.warpgroups < 1 or self.stages < 1 or self.bytes_per_elem < 1:
            raise ValueError("warpgroups, stages and bytes_per_elem must be >= 1")

    def to_dict(self) -> dict:
        return {"schema": RESOURCE_SCHEMA, **asdict(self)}


def load_resource_model(source) -> ResourceModel:
    """Build a model from a JSON file path or a dict; unspecified keys keep defaults."""
    if isinstance(source, dict):
        doc = dict(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    schema = doc.pop("schema", RESOURCE_SCHEMA)
    if schema != RESOURCE_SCHEMA:
        raise ValueError(f"unsupported resource model schema {schema!r}")
    known = {f.name for f in fields(ResourceModel)}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown resource model keys: {sorted(extra)}")
    return ResourceModel(**doc)


@dataclass(frozen=True)
class ScheduleKind:
    warp_specialized: bool = True
    pingpong: bool = True
    depth: int = 2  # 1: no intra-warpgroup overlap, 2: two-stage, 3: three-stage
    fp8: bool = False

    def __post_init__(self):
        if self.depth not in (1, 2, 3):
            raise ValueError(f"depth must be 1, 2 or 3, got {self.depth}")
        if self.pingpong and not self.warp_specialized:
            raise ValueError("pingpong needs warp-specialized consumers")

    def with_fp8(self, fp8: bool = True) -> "ScheduleKind":
        return replace(self, fp8=fp8)


PRESETS = {
    "serial": ScheduleKind(warp_specialized=False, pingpong=False, depth=1),
    "ws-only": ScheduleKind(warp_specialized=True, pingpong=False, depth=1),
    "pingpong": ScheduleKind(warp_specialized=True, pingpong=True, depth=1),
    "overlap-only": ScheduleKind(warp_specialized=False, pingpong=False, depth=2),
    "full": ScheduleKind(warp_specialized=True, pingpong=True, depth=2),
    "3stage": ScheduleKind(warp_specialized=True, pingpong=True, depth=3),
}


@dataclass(frozen=True)
class SimShape:
    seqlen: int
    headdim: int
    block_rows: int = 128
    block_cols: int = 128
    tiles: int = 1  # query tiles processed back to back by this CTA

    def __post_init__(self):
        for f in ("seqlen", "headdim", "block_rows", "block_cols", "tiles"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")

    @property
    def t_r(self) -> int:
        return math.ceil(self.seqlen / self.block_rows)

    @property
    def t_c(self) -> int:
        return math.ceil(self.seqlen / self.block_cols)

    def cols(self, j: int) -> int:
        return min(self.block_cols, self.seqlen - j * self.block_cols)


class TraceEvent(NamedTuple):
    time: float
    agent: str
    action: str
    block: int
    stage: int
    buffer: str


@dataclass
class SimReport:
    makespan: float
    busy: dict
    utilization: dict
    trace: list
    stages: int
    feasible: bool
    kind: ScheduleKind | None = None
    shape: SimShape | None = None
    notes: list = field(default_factory=list)

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "makespan": self.makespan,
            "busy": dict(sorted(self.busy.items())),
            "utilization": dict(sorted(self.utilization.items())),
            "stages": self.stages,
            "feasible": self.feasible,
            "kind": asdict(self.kind) if self.kind else None,
            "shape": asdict(self.shape) if self.shape else None,
            "events": len(self.trace),
        }
        if include_trace:
            out["trace"] = [list(e) for e in self.trace]
        return out


class DeadlockError(RuntimeError):
    """No event left to run while agents are still blocked."""

    def __init__(self, edges: list[tuple[str, str]]):
        self.edges = edges
        self.edge = edges[0] if edges else None
        desc = "; ".join(f"{a} waits on {w}" for a, w in edges)
        super().__init__(f"deadlock: {desc}")


class WorkModel(NamedTuple):
    matmul_flops_per_exp: int
    softmax_cycle_fraction: float  # exp time relative to matmul time
    exp_share_of_total: float  # exp time / (matmul + exp time)


def work_model(seqlen: int, headdim: int, fmt: str = "fp16", model: ResourceModel | None = None) -> WorkModel:
    """Per score entry: two GEMMs spend 4d FLOPs and the softmax one exponential."""
    if seqlen < 1 or headdim < 1:
        raise ValueError("seqlen and headdim must be positive")
    if fmt not in ("fp16", "bf16", "fp8", "fp8e4m3"):
        raise ValueError(f"unsupported format {fmt!r}")
    model = model or ResourceModel()
    rate = model.tensor_rate * (2 if fmt.startswith("fp8") else 1)
    flops = 4 * headdim
    t_mm = flops / rate
    t_exp = 1.0 / model.mufu_rate
    return WorkModel(flops, t_exp / t_mm, t_exp / (t_mm + t_exp))


def register_footprint(shape: SimShape, kind: ScheduleKind, model: ResourceModel) -> int:
    """Bytes of registers one consumer warpgroup holds in the mainloop: the fp32 O
    and S tiles, plus S_next for two stages, plus a P tile and the rescale vector
    for three stages."""
    rows = shape.block_rows / model.warpgroups
    s_tile = rows * shape.block_cols * 4
    total = rows * shape.headdim * 4 + s_tile
    if kind.depth >= 2:
        total += s_tile
    if kind.depth >= 3:
        total += rows * shape.block_cols * 2 + rows * 4
    return int(math.ceil(total))


# ---------------------------------------------------------------- engine


class _Event:
    __slots__ = ("env", "name", "owner", "done", "callbacks")

    def __init__(self, env, name: str, owner: str = ""):
        self.env = env
        self.name = name
        self.owner = owner
        self.done = False
        self.callbacks = []

    def succeed(self):
        if self.done:
            raise RuntimeError(f"event {self.name} triggered twice")
        self.done = True
        for cb in self.callbacks:
            self.env.schedule(0.0, cb)
        self.callbacks = []


class _Env:
    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = 0
        self.trace: list[TraceEvent] = []
        self.blocked: dict[str, str] = {}
        self.alive: set[str] = set()

    def schedule(self, delay: float, fn):
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, fn))

    def event(self, name: str, owner: str = "") -> _Event:
        return _Event(self, name, owner)

    def timeout(self, delay: float, name: str = "timeout") -> _Event:
        ev = self.event(name)
        self.schedule(delay, ev.succeed)
        return ev

    def all_of(self, events, name: str) -> _Event:
        out = self.event(name)
        pending = [e for e in events if not e.done]
        if not pending:
            self.schedule(0.0, out.succeed)
            return out
        count = [len(pending)]

        def one():
            count[0] -= 1
            if count[0] == 0:
                out.succeed()

        for e in pending:
            e.callbacks.append(one)
        return out

    def process(self, name: str, gen):
        self.alive.add(name)

        def step(value=None):
            try:
                ev = gen.send(value)
            except StopIteration:
                self.alive.discard(name)
                self.blocked.pop(name, None)
                return
            if ev.done:
                self.blocked.pop(name, None)
                self.schedule(0.0, step)
            else:
                self.blocked[name] = ev.name
                ev.callbacks.append(step)

        self.schedule(0.0, step)

    def record(self, agent, action, block=-1, stage=-1, buffer=""):
        self.trace.append(TraceEvent(self.now, agent, action, block, stage, buffer))

    def run(self):
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()
        if self.alive:
            edges = sorted((a, self.blocked.get(a, "?")) for a in self.alive)
            raise DeadlockError(edges)


class _SharedUnit:
    """Processor-sharing server; jobs of one owner are served in submission order."""

    def __init__(self, env: _Env, rate: float, name: str):
        self.env = env
        self.rate = rate
        self.name = name
        self.queues: dict[str, list] = {}
        self.busy = 0.0
        self._last = 0.0
        self._version = 0

    def _active(self):
        return [q[0] for q in self.queues.values() if q]

    def _advance(self):
        now = self.env.now
        active = self._active()
        if active and now > self._last:
            share = (now - self._last) * self.rate / len(active)
            for job in active:
                job[0] -= share
            self.busy += now - self._last
        self._last = now

    def _reschedule(self):
        self._version += 1
        active = self._active()
        if not active:
            return
        version = self._version
        dt = min(j[0] for j in active) * len(active) / self.rate
        self.env.schedule(max(dt, 0.0), lambda: self._complete(version))

    def _complete(self, version):
        if version != self._version:
            return
        self._advance()
        active = self._active()
        low = min(j[0] for j in active)
        for owner, q in self.queues.items():
            if q and q[0][0] <= low + 1e-9 * max(1.0, q[0][2]):
                job = q.pop(0)
                job[1].succeed()
        self._reschedule()

    def submit(self, owner: str, work: float, name: str) -> _Event:
        ev = self.env.event(f"{self.name}:{name}", owner)
        if work <= 0:
            self.env.schedule(0.0, ev.succeed)
            return ev
        self._advance()
        self.queues.setdefault(owner, []).append([float(work), ev, float(work)])
        self._reschedule()
        return ev


class _FifoUnit:
    """Serial server with an optional fixed latency after each job."""

    def __init__(self, env: _Env, rate: float, latency: float, name: str):
        self.env = env
        self.rate = rate
        self.latency = latency
        self.name = name
        self.free_at = 0.0
        self.busy = 0.0

    def submit(self, amount: float, name: str, owner: str = "") -> _Event:
        start = max(self.env.now, self.free_at)
        dur = amount / self.rate if math.isfinite(self.rate) else 0.0
        self.free_at = start + dur
        self.busy += dur
        ev = self.env.event(f"{self.name}:{name}", owner)
        self.env.schedule(self.free_at + self.latency - self.env.now, ev.succeed)
        return ev


class _Buffer:
    """s-stage circular buffer; block b lives in stage b % s."""

    def __init__(self, env: _Env, name: str, stages: int, consumers: int):
        self.env = env
        self.name = name
        self.stages = stages
        self.consumers = consumers
        self.commits: dict[int, _Event] = {}
        self.frees: dict[int, _Event] = {}
        self.released: dict[int, int] = {}

    def stage(self, b: int) -> int:
        return b % self.stages

    def commit_event(self, b: int) -> _Event:
        if b not in self.commits:
            self.commits[b] = self.env.event(f"{self.name}[{b}] commit (stage {self.stage(b)})")
        return self.commits[b]

    def free_event(self, b: int) -> _Event:
        if b not in self.frees:
            self.frees[b] = self.env.event(f"{self.name} stage {self.stage(b)} release of block {b}")
        return self.frees[b]

    def slot_ready(self, b: int) -> _Event | None:
        return self.free_event(b - self.stages) if b >= self.stages else None

    def issue(self, agent: str, b: int):
        self.env.record(agent, "issue", b, self.stage(b), self.name)

    def commit(self, agent: str, b: int):
        self.env.record(agent, "commit", b, self.stage(b), self.name)
        self.commit_event(b).succeed()

    def consume(self, agent: str, b: int):
        self.env.record(agent, "consume", b, self.stage(b), self.name)

    def release(self, agent: str, b: int):
        self.env.record(agent, "release", b, self.stage(b), self.name)
        n = self.released.get(b, 0) + 1
        self.released[b] = n
        if n == self.consumers:
            self.env.record(agent, "free", b, self.stage(b), self.name)
            self.free_event(b).succeed()


class _Token:
    """Round-robin turn passed between consumer warpgroups."""

    def __init__(self, env: _Env, agents: list[str]):
        self.env = env
        self.agents = agents
        self.turn = 0
        self.count = 0
        self.waiting: dict[str, _Event] = {}

    def acquire(self, agent: str) -> _Event:
        ev = self.env.event(f"pingpong turn (held by {self.agents[self.turn]})", agent)
        if self.agents[self.turn] == agent:
            self.env.schedule(0.0, ev.succeed)
        else:
            self.waiting[agent] = ev
        return ev

    def acquired(self, agent: str):
        self.env.record(agent, "token_acquire", self.count, -1, "token")

    def release(self, agent: str):
        self.env.record(agent, "token_release", self.count, -1, "token")
        self.count += 1
        self.turn = (self.turn + 1) % len(self.agents)
        nxt = self.agents[self.turn]
        ev = self.waiting.pop(nxt, None)
        if ev is not None:
            ev.succeed()


# ------------------------------------------------------------ forward pass


def _iteration_ops(t: int, t_c: int, depth: int):
    """(gemms, softmax block, softmax waits on) for consumer iteration t."""
    g0 = [("G0", t)] if t < t_c else []
    lag = 2 if depth == 3 else 1
    g1 = [("G1", t - lag)] if 0 <= t - lag < t_c else []
    if depth == 1:
        return g1 + g0, (t if t < t_c else None), "gemms"
    if depth == 2:
        return g0 + g1, (t if t < t_c else None), "G0"
    sm = t - 1 if 0 <= t - 1 < t_c else None
    return g0 + g1, sm, "start"


def _effective_depth(kind: ScheduleKind, t_c: int) -> int:
    if kind.depth == 2 and t_c < 2:
        return 1
    if kind.depth == 3 and t_c < 4:
        return 1
    return kind.depth


def simulate(shape: SimShape, model: ResourceModel | None = None, kind: ScheduleKind | None = None) -> SimReport:
    """Run the forward mainloop of one CTA and return its makespan and trace.

    Raises :class:`DeadlockError` if the agents ever end up waiting on each other,
    naming every blocked agent and the event it waits for.
    """
    model = model or ResourceModel()
    kind = kind or PRESETS["full"]
    env = _Env()
    W = model.warpgroups
    S = model.stages
    t_c = shape.t_c
    depth = _effective_depth(kind, t_c)
    ebytes = 1 if kind.fp8 else model.bytes_per_elem
    rate = model.tensor_rate * (2 if kind.fp8 else 1)
    rows = shape.block_rows / W
    d = shape.headdim

    tensor = _SharedUnit(env, rate, "tensor")
    mufu = _SharedUnit(env, model.mufu_rate, "mufu")
    mem = _FifoUnit(env, model.load_bandwidth, model.load_latency, "load")
    xpose = _FifoUnit(env, model.transpose_rate, 0.0, "transpose")
    consumers = [f"consumer{w}" for w in range(W)]
    qbuf = _Buffer(env, "Q", 1, W)
    kbuf = _Buffer(env, "K", S, W)
    vbuf = _Buffer(env, "V", S, W)
    token = _Token(env, consumers) if kind.pingpong else None

    def kv_block(tile, j):
        return tile * t_c + j

    def load(agent, buf, b, nbytes, transpose=False):
        """Generator: wait for the slot, stream the block in, commit it."""
        slot = buf.slot_ready(b)
        if slot is not None:
            yield slot
        buf.issue(agent, b)
        arrived = mem.submit(nbytes, f"{buf.name}[{b}]", agent)
        if transpose:
            yield arrived
            arrived = xpose.submit(nbytes, f"V[{b}]", agent)
        yield arrived
        buf.commit(agent, b)

    def load_order(tile):
        # blocks are streamed in the order the consumers issue their GEMMs, so a
        # pipelined consumer gets K_{j+1} ahead of V_j
        yield qbuf, tile, shape.block_rows * d * ebytes, False
        for t in range(t_c + (2 if depth == 3 else 1)):
            for op, j in _iteration_ops(t, t_c, depth)[0]:
                nb = shape.cols(j) * d * ebytes
                if op == "G0":
                    yield kbuf, kv_block(tile, j), nb, False
                else:
                    yield vbuf, kv_block(tile, j), nb, kind.fp8

    def producer():
        agent = "producer"
        for tile in range(shape.tiles):
            for buf, b, nb, tr in load_order(tile):
                if buf is qbuf:
                    yield from load(agent, buf, b, nb)
                    continue
                slot = buf.slot_ready(b)
                if slot is not None:
                    yield slot
                buf.issue(agent, b)
                arrived = mem.submit(nb, f"{buf.name}[{b}]", agent)
                if tr:
                    env.process(f"transpose[{b}]", _finish_transpose(arrived, buf, b, nb))
                else:
                    env.process(f"commit:{buf.name}[{b}]", _finish_load(arrived, buf, b))

    def _finish_load(arrived, buf, b):
        yield arrived
        buf.commit("producer", b)

    def _finish_transpose(arrived, buf, b, nb):
        yield arrived
        yield xpose.submit(nb, f"V[{b}]", "producer")
        buf.commit("producer", b)

    # inline loading without warp specialization: the leader loads, everyone waits
    gates: dict = {}
    arrivals: dict = {}
    arrived: dict = {}

    def barrier(agent, key, needs):
        if key not in gates:
            gates[key] = env.event(f"CTA barrier {key}")
            arrivals[key] = env.event(f"all warpgroups at {key}")
            arrived[key] = 0
        g, arr = gates[key], arrivals[key]
        arrived[key] += 1
        if arrived[key] == W:
            arr.succeed()
        if agent == consumers[0]:
            yield arr
            for buf, b, nb, tr in needs:
                if b in buf.commits and buf.commits[b].done:
                    continue
                yield from load(agent, buf, b, nb, tr)
            g.succeed()
        else:
            yield g

    def gemm_work(j):
        return 2.0 * rows * shape.cols(j) * d

    def release_when(done, agent, buf, b):
        yield done
        buf.release(agent, b)

    def consumer(w):
        agent = consumers[w]
        for tile in range(shape.tiles):
            if not kind.warp_specialized:
                yield from barrier(agent, (tile, "Q"), [(qbuf, tile, shape.block_rows * d * ebytes, False)])
            yield qbuf.commit_event(tile)
            qbuf.consume(agent, tile)
            n_iter = t_c + (2 if depth == 3 else 1)
            for t in range(n_iter):
                gemms, sm, sm_after = _iteration_ops(t, t_c, depth)
                if not gemms and sm is None:
                    continue
                if not kind.warp_specialized:
                    needs = []
                    for op, j in gemms:
                        buf = kbuf if op == "G0" else vbuf
                        needs.append((buf, kv_block(tile, j), shape.cols(j) * d * ebytes, kind.fp8 and buf is vbuf))
                    yield from barrier(agent, (tile, t), needs)
                if token is not None and gemms:
                    yield token.acquire(agent)
                    token.acquired(agent)
                done = {}
                for op, j in gemms:
                    buf = kbuf if op == "G0" else vbuf
                    b = kv_block(tile, j)
                    yield buf.commit_event(b)
                    buf.consume(agent, b)
                    done[op] = tensor.submit(agent, gemm_work(j), f"{op}[{b}] by {agent}")
                    env.process(f"{agent}:release {buf.name}[{b}]", release_when(done[op], agent, buf, b))
                waits = list(done.values())
                sm_ev = None
                if sm is not None and sm_after == "start":
                    sm_ev = mufu.submit(agent, rows * shape.cols(sm), f"softmax[{sm}] by {agent}")
                if sm is not None and sm_after == "G0":
                    yield done["G0"]
                    sm_ev = mufu.submit(agent, rows * shape.cols(sm), f"softmax[{sm}] by {agent}")
                if waits:
                    yield env.all_of(waits, f"{agent} GEMMs of iteration {t}")
                if token is not None and gemms:
                    token.release(agent)
                if sm is not None and sm_after == "gemms":
                    sm_ev = mufu.submit(agent, rows * shape.cols(sm), f"softmax[{sm}] by {agent}")
                if sm_ev is not None:
                    yield sm_ev
            qbuf.release(agent, tile)

    if kind.warp_specialized:
        env.process("producer", producer())
    for w in range(W):
        env.process(consumers[w], consumer(w))
    env.run()

    feasible = register_footprint(shape, kind, model) <= model.register_budget
    busy = {"tensor": tensor.busy, "mufu": mufu.busy, "load": mem.busy}
    if kind.fp8:
        busy["transpose"] = xpose.busy
    return _report(env, busy, S, feasible, kind, shape, depth)


def _report(env, busy, stages, feasible, kind, shape, depth=None) -> SimReport:
    makespan = env.now
    util = {k: (v / makespan if makespan > 0 else 0.0) for k, v in busy.items()}
    notes = []
    if depth is not None and kind is not None and depth != kind.depth:
        notes.append(f"fell back to depth {depth}: too few key blocks")
    if not feasible:
        notes.append("register footprint exceeds the budget")
    return SimReport(makespan, busy, util, env.trace, stages, feasible, kind, shape, notes)


# ----------------------------------------------------------- backward pass


def simulate_backward(shape: SimShape, model: ResourceModel | None = None, kind: ScheduleKind | None = None) -> SimReport:
    """One CTA owning one K/V block: stream (Q_i, dO_i) blocks, run five GEMMs and
    one exponential per element, and hand each dQ_i partial to a writer agent that
    adds it into global dQ through a serialized accumulation unit.

    ``block_cols`` rows of K/V are split across the consumer warpgroups; each
    warpgroup has one dQ staging slot, so a slow writer stalls its consumer.
    """
    model = model or ResourceModel()
    kind = kind or PRESETS["full"]
    env = _Env()
    W = model.warpgroups
    S = model.stages
    ebytes = 1 if kind.fp8 else model.bytes_per_elem
    rate = model.tensor_rate * (2 if kind.fp8 else 1)
    d = shape.headdim
    cols = shape.block_cols / W
    t_r = shape.t_r

    tensor = _SharedUnit(env, rate, "tensor")
    mufu = _SharedUnit(env, model.mufu_rate, "mufu")
    mem = _FifoUnit(env, model.load_bandwidth, model.load_latency, "load")
    accum = _FifoUnit(env, model.dq_atomic_bandwidth, 0.0, "dq_accum")
    consumers = [f"consumer{w}" for w in range(W)]
    kvbuf = _Buffer(env, "KV", 1, W)
    qbuf = _Buffer(env, "QdO", S, W)
    dqbuf = {w: _Buffer(env, f"dQ{w}", 1, 1) for w in range(W)}

    def rows_of(i):
        return min(shape.block_rows, shape.seqlen - i * shape.block_rows)

    def qbytes(i):
        # Q_i and dO_i plus the fp32 L_i and D_i vectors
        return 2 * rows_of(i) * d * ebytes + 2 * rows_of(i) * 4

    def do_load(agent, buf, b, nbytes):
        slot = buf.slot_ready(b)
        if slot is not None:
            yield slot
        buf.issue(agent, b)
        yield mem.submit(nbytes, f"{buf.name}[{b}]", agent)
        buf.commit(agent, b)

    def finish(arrived, buf, b):
        yield arrived
        buf.commit("producer", b)

    def producer():
        yield from do_load("producer", kvbuf, 0, 2 * shape.block_cols * d * ebytes)
        for i in range(t_r):
            slot = qbuf.slot_ready(i)
            if slot is not None:
                yield slot
            qbuf.issue("producer", i)
            env.process(f"commit:QdO[{i}]", finish(mem.submit(qbytes(i), f"QdO[{i}]", "producer"), qbuf, i))

    def writer(w):
        agent = f"dq_writer{w}"
        buf = dqbuf[w]
        for i in range(t_r):
            yield buf.commit_event(i)
            buf.consume(agent, i)
            yield accum.submit(rows_of(i) * d * 4, f"dQ[{i}] from consumer{w}", agent)
            buf.release(agent, i)

    leader_loaded = {}

    def inline(agent, key, buf, b, nbytes):
        if agent == consumers[0]:
            yield from do_load(agent, buf, b, nbytes)
            leader_loaded[key].succeed()
        else:
            yield leader_loaded[key]

    def consumer(w):
        agent = consumers[w]
        if not kind.warp_specialized:
            leader_loaded.setdefault("kv", env.event("KV inline load"))
            yield from inline(agent, "kv", kvbuf, 0, 2 * shape.block_cols * d * ebytes)
        yield kvbuf.commit_event(0)
        kvbuf.consume(agent, 0)
        for i in range(t_r):
            if not kind.warp_specialized:
                leader_loaded.setdefault(i, env.event(f"QdO[{i}] inline load"))
                yield from inline(agent, i, qbuf, i, qbytes(i))
            yield qbuf.commit_event(i)
            qbuf.consume(agent, i)
            work = 2.0 * cols * rows_of(i) * d
            s_done = tensor.submit(agent, work, f"S[{i}] by {agent}")
            dp_done = tensor.submit(agent, work, f"dP[{i}] by {agent}")
            yield s_done
            yield mufu.submit(agent, cols * rows_of(i), f"exp[{i}] by {agent}")
            yield dp_done
            dv = tensor.submit(agent, work, f"dV[{i}] by {agent}")
            dk = tensor.submit(agent, work, f"dK[{i}] by {agent}")
            dq = tensor.submit(agent, work, f"dQ[{i}] by {agent}")
            yield env.all_of([dv, dk, dq], f"{agent} GEMMs of block {i}")
            qbuf.release(agent, i)
            buf = dqbuf[w]
            slot = buf.slot_ready(i)
            if slot is not None:
                yield slot
            buf.issue(agent, i)
            buf.commit(agent, i)
        kvbuf.release(agent, 0)

    if kind.warp_specialized:
        env.process("producer", producer())
    for w in range(W):
        env.process(consumers[w], consumer(w))
        env.process(f"dq_writer{w}", writer(w))
    env.run()
    busy = {"tensor": tensor.busy, "mufu": mufu.busy, "load": mem.busy, "dq_accum": accum.busy}
    return _report(env, busy, S, True, kind, shape)


# ------------------------------------------------------------- validation


def validate_trace(report, stages: int | None = None) -> list[str]:
    """Check buffer and pingpong protocol rules on a trace; returns violations.

    Accepts a :class:`SimReport` or a bare list of trace tuples (then ``stages``
    gives the K/V buffer depth; without it the stage-count rules are skipped).
    """
    trace = report.trace if isinstance(report, SimReport) else report
    stages_default = report.stages if isinstance(report, SimReport) else stages
    out: list[str] = []
    last_time = -math.inf
    committed: set = set()
    freed: set = set()
    issued: dict = {}
    consumed: set = set()
    in_flight: dict = {}
    token_seq: list = []
    holder = None

    def stages_of(buf):
        if buf in ("Q", "KV") or buf.startswith("dQ"):
            return 1
        return stages_default

    for n, ev in enumerate(trace):
        try:
            time, agent, action, block, stage, buf = ev
        except (TypeError, ValueError):
            out.append(f"event {n}: malformed")
            continue
        if time < last_time:
            out.append(f"event {n}: time {time} goes backwards from {last_time}")
        last_time = max(last_time, time)
        key = (buf, block)
        s = stages_of(buf)
        where = f"{buf}[{block}] (stage {stage})"
        if action == "issue":
            if s is not None and block >= s and (buf, block - s) not in freed:
                out.append(f"event {n}: {where} refilled before block {block - s} was released")
            if s is not None and stage != block % s:
                out.append(f"event {n}: {where} loaded into the wrong stage")
            issued[key] = n
            in_flight[buf] = in_flight.get(buf, 0) + 1
            if s is not None and in_flight[buf] > s:
                out.append(f"event {n}: {in_flight[buf]} blocks of {buf} in flight with {s} stages")
        elif action == "commit":
            if key not in issued:
                out.append(f"event {n}: {where} committed before being issued")
            committed.add(key)
        elif action == "consume":
            if key not in committed:
                out.append(f"event {n}: consume of {where} by {agent} before its commit")
            consumed.add((buf, block, agent))
        elif action == "release":
            if (buf, block, agent) not in consumed:
                out.append(f"event {n}: {agent} released {where} without consuming it")
        elif action == "free":
            freed.add(key)
            in_flight[buf] = in_flight.get(buf, 0) - 1
        elif action == "token_acquire":
            if holder is not None:
                out.append(f"event {n}: {agent} took the pingpong turn while {holder} held it")
            holder = agent
            token_seq.append((n, agent))
        elif action == "token_release":
            if holder != agent:
                out.append(f"event {n}: {agent} released a pingpong turn it did not hold")
            holder = None
    if token_seq:
        agents = []
        for _, a in token_seq:
            if a in agents:
                break
            agents.append(a)
        period = len(agents)
        for k, (n, a) in enumerate(token_seq):
            if a != agents[k % period]:
                out.append(f"event {n}: pingpong turn went to {a}, expected {agents[k % period]}")
                break
    return out

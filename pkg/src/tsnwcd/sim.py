"""Event-driven shaper simulator for CBS and CQF egress ports.

The simulator is the empirical oracle for the analytical bounds: observed
end-to-end delays must never exceed them.  Time is exact (Fraction), the
event queue breaks ties deterministically (arrivals, then transmission
completions, then credit wakeups; among flows by ascending id), and for a
fixed (test case, config, seed) the report is bit-identical across runs.

Conventions shared with the analytical modules: cut-through forwarding
enqueues a frame at the next switch one propagation plus one switching
delay after upstream transmission starts (CQF is store-and-forward: one
propagation plus one switching delay after it ends), delivery at the
listener is one propagation after the final transmission ends, and the
synchronization error is added once to every reported delay.  Clock skew
itself is not simulated.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional

from .errors import CapacityError, HorizonError, ValidationError
from .minplus import frac
from .netmodel import (
    CBS,
    CQF,
    MTU_BYTES,
    TestCase,
    frame_bits,
    json_num,
    validate_testcase,
)

RELEASE_SYNCHRONIZED = "synchronized"
RELEASE_JITTERED = "jittered"
_POLICIES = (RELEASE_SYNCHRONIZED, RELEASE_JITTERED)

_RANK_ARRIVE = 0
_RANK_TX_END = 1
_RANK_WAKE = 2
_DELIVERY_PORT = 10 ** 9
_BE_CLS = -1
_NO_FLOW = -1


@dataclass(frozen=True)
class SimConfig:
    horizon: Fraction
    seed: int = 0
    release_policy: str = RELEASE_SYNCHRONIZED
    be_saturate: bool = False                 # back-to-back MTU frames on every port
    trace_ports: tuple = ()                   # (node, next_node) ports to trace
    phases: Optional[dict] = None             # flow id -> release offset override

    def __post_init__(self):
        object.__setattr__(self, "horizon", frac(self.horizon))
        if self.horizon <= 0:
            raise ValidationError("horizon must be > 0")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValidationError("seed must be an integer")
        if self.release_policy not in _POLICIES:
            raise ValidationError(f"unknown release policy {self.release_policy!r}")
        object.__setattr__(self, "trace_ports",
                           tuple(tuple(p) for p in self.trace_ports))
        if self.phases is not None:
            object.__setattr__(
                self, "phases",
                {fid: frac(v) for fid, v in self.phases.items()})


@dataclass
class SimReport:
    testcase: str
    mechanism: str
    seed: int
    horizon: Fraction
    release_policy: str
    per_flow_max_delay: dict
    per_flow_frame_count: dict
    credit_trace: Optional[list] = None       # (t, port, credit bits)


# credit-based shaper port

class _Queue:
    __slots__ = ("idle", "send", "credit", "slope", "t0", "fifo")

    def __init__(self, idle, send):
        self.idle = idle
        self.send = send
        self.credit = Fraction(0)
        self.slope = Fraction(0)
        self.t0 = Fraction(0)
        self.fifo = []


class _CbsPort:
    """One egress port: N credit queues in strict priority over one BE queue.

    Credit of a queue rises at idle_slope while a frame waits or the credit
    is negative, falls at send_slope while the queue transmits, and snaps to
    zero the moment it is positive with nothing waiting.  Eligibility is
    credit >= 0; transmission is non-preemptive.
    """

    def __init__(self, idx, key, rate, slopes, be_bits, traced):
        self.idx = idx
        self.key = key
        self.rate = rate
        self.queues = [_Queue(a, b) for a, b in slopes]
        self.be_fifo = []
        self.be_bits = be_bits            # synthetic saturating frame, or None
        self.traced = traced
        self.busy = None                  # (cls, flow, seq, hop) or (None,) for BE
        self.trace = []                   # (t, cls, credit)

    def _emit(self, t, cls):
        if self.traced:
            self.trace.append((t, cls, self.queues[cls].credit))

    def _set_slope(self, t, cls, slope):
        q = self.queues[cls]
        if slope != q.slope:
            self._emit(t, cls)
            q.slope = slope

    def _transmitting(self, cls):
        return self.busy is not None and self.busy[0] == cls

    def _update(self, t, cls):
        q = self.queues[cls]
        if q.slope != 0 and t > q.t0:
            new = q.credit + q.slope * (t - q.t0)
            if (q.slope > 0 and new >= 0 and not q.fifo
                    and not self._transmitting(cls)):
                # recovery with an empty queue pegs at zero
                cross = q.t0 + -q.credit / q.slope
                q.t0 = cross
                q.credit = Fraction(0)
                self._set_slope(cross, cls, Fraction(0))
            else:
                q.credit = new
        q.t0 = t

    def enqueue(self, t, cls, item):
        self._update(t, cls)
        self.queues[cls].fifo.append(item)
        if not self._transmitting(cls):
            self._set_slope(t, cls, self.queues[cls].idle)


class _CbsEngine:
    """Shared event loop; on_start wires transmissions into the network and
    returns the transmission duration."""

    def __init__(self, ports, on_start: Callable, horizon=None,
                 on_be_start: Optional[Callable] = None):
        self.ports = ports
        self.on_start = on_start
        self.on_be_start = on_be_start
        self.horizon = horizon
        self.heap = []
        self.deliveries = []              # (t, flow, seq)
        self.be_payload = {}              # (flow, seq) -> (bits, tag)
        self._serial = 0

    def push(self, entry):
        heapq.heappush(self.heap, entry)

    def run(self):
        # all events at one instant settle before any port picks its next
        # frame: arrivals, then completions, then wakeups
        while self.heap:
            t = self.heap[0][0]
            touched = set()
            while self.heap and self.heap[0][0] == t:
                _, rank, pidx, cls, flow, seq, hop = heapq.heappop(self.heap)
                if pidx == _DELIVERY_PORT:
                    self.deliveries.append((t, flow, seq))
                    continue
                port = self.ports[pidx]
                touched.add(pidx)
                if rank == _RANK_ARRIVE:
                    if cls == _BE_CLS:
                        port.be_fifo.append(self.be_payload[(flow, seq)])
                    else:
                        port.enqueue(t, cls, (flow, seq, hop))
                elif rank == _RANK_TX_END:
                    self._tx_end(port, t)
                else:
                    port._update(t, cls)
            for pidx in sorted(touched):
                self._kick(self.ports[pidx], t)

    def _tx_end(self, port, t):
        cls = port.busy[0]
        port.busy = None
        if cls is None:
            return                        # best-effort frame, no credit
        q = port.queues[cls]
        port._update(t, cls)
        if q.fifo:
            port._set_slope(t, cls, q.idle)
        elif q.credit > 0:
            port._emit(t, cls)            # reset discontinuity: down to zero
            q.credit = Fraction(0)
            port._set_slope(t, cls, Fraction(0))
            port._emit(t, cls)
        elif q.credit < 0:
            port._set_slope(t, cls, q.idle)
            self.push((t + -q.credit / q.idle, _RANK_WAKE, port.idx, cls,
                       _NO_FLOW, -1, 0))
        else:
            port._set_slope(t, cls, Fraction(0))

    def _kick(self, port, t):
        if port.busy is not None:
            return
        for cls, q in enumerate(port.queues):
            if not q.fifo:
                continue
            port._update(t, cls)
            if q.credit >= 0:
                self._start(port, t, cls, q.fifo.pop(0))
                return
        saturating = (port.be_bits is not None
                      and (self.horizon is None or t < self.horizon))
        if port.be_fifo or saturating:
            if port.be_fifo:
                bits, tag = port.be_fifo.pop(0)
            else:
                bits, tag = port.be_bits, None
            port.busy = (None,)
            self._serial += 1
            self.push((t + bits / port.rate, _RANK_TX_END, port.idx, 0,
                       _NO_FLOW, -self._serial, 0))
            if self.on_be_start is not None:
                self.on_be_start(port, t, tag, bits / port.rate)
            return
        # idle: every waiting queue must be credit-blocked (work conservation)
        for cls, q in enumerate(port.queues):
            if q.fifo:
                assert q.credit < 0, "port idled with an eligible queue"
                self.push((t + -q.credit / q.idle, _RANK_WAKE, port.idx, cls,
                           _NO_FLOW, -1, 0))

    def _start(self, port, t, cls, item):
        flow, seq, hop = item
        port.busy = (cls, flow, seq, hop)
        port._set_slope(t, cls, port.queues[cls].send)
        duration = self.on_start(port, t, cls, item)
        self.push((t + duration, _RANK_TX_END, port.idx, cls, flow, seq, hop))


# release schedules

def _release_schedule(tc, cfg, rng, cycle=None):
    """(release time, flow, seq) triples up to horizon minus a drain margin."""
    max_period = max(f.period for f in tc.flows)
    if cfg.horizon < 10 * max_period:
        raise ValidationError(
            "horizon must be at least 10 times the longest flow period")
    release_end = cfg.horizon - 2 * max_period
    out = []
    for f in sorted(tc.flows, key=lambda f: f.id):
        if cfg.phases is not None and f.id in cfg.phases:
            phase = cfg.phases[f.id]
        elif cfg.release_policy == RELEASE_SYNCHRONIZED:
            phase = Fraction(0)
        elif cycle is None:
            phase = f.period * Fraction(rng.randrange(1_000_000), 1_000_000)
        else:
            phase = cycle * rng.randrange(int(f.period / cycle))
        k = 0
        while phase + k * f.period <= release_end:
            out.append((phase + k * f.period, f, k))
            k += 1
    return out


def _precheck(tc, mechanism):
    if tc.mechanism != mechanism:
        raise ValidationError(
            f"{tc.name}: simulator for {mechanism} got a {tc.mechanism} case")
    problems = validate_testcase(tc)
    if problems:
        raise ValidationError(f"{tc.name}: " + "; ".join(problems))


def _empty_report(tc, cfg):
    return SimReport(tc.name, tc.mechanism, cfg.seed, cfg.horizon,
                     cfg.release_policy, {}, {}, None)


def _fold_deliveries(tc, cfg, deliveries, release_of):
    sync = tc.constants.sync_error
    max_delay = {f.id: Fraction(0) for f in tc.flows}
    counts = {f.id: 0 for f in tc.flows}
    late = 0
    for t, flow, seq in sorted(deliveries):
        if t > cfg.horizon:
            late += 1
            continue
        delay = t - release_of[(flow, seq)] + sync
        counts[flow] += 1
        if delay > max_delay[flow]:
            max_delay[flow] = delay
    if late:
        raise HorizonError(
            f"{late} frame(s) not delivered within the horizon; extend it")
    return max_delay, counts


# network-level CBS simulation

def simulate_cbs(tc: TestCase, cfg: SimConfig) -> SimReport:
    """Event-driven credit-based shaper run; reports max delay per flow."""
    _precheck(tc, CBS)
    if not tc.flows:
        return _empty_report(tc, cfg)
    rng = random.Random(cfg.seed)
    C = tc.constants.link_rate
    idle = tc.constants.idle_slope_fraction * C
    slopes = [(idle, idle - C)]
    be_bits = (Fraction((MTU_BYTES + tc.constants.frame_overhead) * 8)
               if cfg.be_saturate else None)

    port_keys = sorted({p for r in tc.routes for p in r.ports})
    index = {k: i for i, k in enumerate(port_keys)}
    ports = [
        _CbsPort(i, k, C, slopes, be_bits, k in cfg.trace_ports)
        for i, k in enumerate(port_keys)
    ]
    routes = {r.flow_id: r for r in tc.routes}
    bits = {f.id: frame_bits(f, tc.constants) for f in tc.flows}
    prop = tc.constants.propagation
    switching = tc.constants.switching

    def on_start(port, t, cls, item):
        flow, seq, hop = item
        route = routes[flow]
        tx = bits[flow] / C
        nxt = route.hops[hop + 1]
        if tc.topology.is_switch(nxt):
            nxt_port = (nxt, route.hops[hop + 2])
            eng.push((t + prop + switching, _RANK_ARRIVE, index[nxt_port],
                      0, flow, seq, hop + 1))
        else:
            eng.push((t + tx + prop, _RANK_ARRIVE, _DELIVERY_PORT,
                      0, flow, seq, hop + 1))
        return tx

    eng = _CbsEngine(ports, on_start, cfg.horizon)
    if cfg.be_saturate:
        # wake every port at t=0 so the background source starts immediately
        for p in ports:
            eng.push((Fraction(0), _RANK_WAKE, p.idx, 0, _NO_FLOW, -1, 0))
    release_of = {}
    for r, f, seq in _release_schedule(tc, cfg, rng):
        release_of[(f.id, seq)] = r
        eng.push((r, _RANK_ARRIVE, index[routes[f.id].ports[0]], 0, f.id, seq, 0))
    eng.run()

    max_delay, counts = _fold_deliveries(tc, cfg, eng.deliveries, release_of)
    trace = None
    if cfg.trace_ports:
        trace = []
        for p in ports:
            trace.extend((t, p.key, c) for t, _cls, c in p.trace)
        trace.sort(key=lambda e: (e[0], e[1]))
    return SimReport(tc.name, CBS, cfg.seed, cfg.horizon, cfg.release_policy,
                     max_delay, counts, trace)


# single-port harness

def simulate_port(frames, rate, slopes):
    """Drive one CBS port directly, outside any topology.

    frames: (label, cls, bits, release) tuples; cls indexes a credit queue
    (0 is highest priority) or is None for best effort.
    slopes: one (idle_slope, send_slope) pair per credit queue.
    Returns (transmissions, traces): transmissions as (label, start, end)
    in port order, traces as queue index -> [(t, credit)].
    """
    rate = frac(rate)
    slopes = [(frac(a), frac(b)) for a, b in slopes]
    port = _CbsPort(0, ("port", "out"), rate, slopes, None, True)
    transmissions = []
    meta = {}

    def on_start(p, t, cls, item):
        flow, seq, hop = item
        label, bits = meta[(flow, seq)]
        tx = bits / rate
        transmissions.append((label, t, t + tx))
        return tx

    def on_be_start(p, t, tag, duration):
        transmissions.append((tag, t, t + duration))

    eng = _CbsEngine([port], on_start, on_be_start=on_be_start)
    for i, (label, cls, bits, release) in enumerate(frames):
        bits = frac(bits)
        if cls is None:
            eng.be_payload[(_NO_FLOW, i)] = (bits, label)
            eng.push((frac(release), _RANK_ARRIVE, 0, _BE_CLS, _NO_FLOW, i, 0))
        else:
            meta[(i, 0)] = (label, bits)
            eng.push((frac(release), _RANK_ARRIVE, 0, cls, i, 0, 0))
    eng.run()
    traces = {cls: [(t, c) for t, c2, c in port.trace if c2 == cls]
              for cls in range(len(slopes))}
    return transmissions, traces


# cyclic queuing and forwarding

def simulate_cqf(tc: TestCase, cfg: SimConfig) -> SimReport:
    """Ping-pong cycle simulation.

    A frame reaching a port during cycle k is transmitted during cycle k+1;
    injections exactly on a boundary use the cycle they open.  Cycle indices
    then advance one hop per switch.  Raises CapacityError when a cycle is
    asked to carry more serialization time than T.
    """
    _precheck(tc, CQF)
    if not tc.flows:
        return _empty_report(tc, cfg)
    T = tc.constants.cycle_T
    rng = random.Random(cfg.seed)
    if cfg.release_policy == RELEASE_JITTERED:
        for f in tc.flows:
            if (f.period / T).denominator != 1:
                raise ValidationError(
                    f"flow {f.id}: jittered release needs period divisible by T")
    C = tc.constants.link_rate
    prop = tc.constants.propagation
    switching = tc.constants.switching
    routes = {r.flow_id: r for r in tc.routes}
    bits = {f.id: frame_bits(f, tc.constants) for f in tc.flows}
    port_keys = sorted({p for r in tc.routes for p in r.ports})
    index = {k: i for i, k in enumerate(port_keys)}

    def ceil_div(x: Fraction) -> int:
        q = x / T
        n = q.numerator // q.denominator
        return n if n * q.denominator == q.numerator else n + 1

    load: dict = {}
    busy_until: dict = {}
    heap = []
    deliveries = []
    release_of = {}
    for r, f, seq in _release_schedule(tc, cfg, rng, cycle=T):
        release_of[(f.id, seq)] = r
        heapq.heappush(heap, (r, _RANK_ARRIVE, index[routes[f.id].ports[0]],
                              0, f.id, seq, 0))

    while heap:
        t, rank, pidx, cyc_hint, flow, seq, hop = heapq.heappop(heap)
        route = routes[flow]
        port = route.ports[hop]
        cycle = ceil_div(t) if hop == 0 else cyc_hint
        tx = bits[flow] / C
        key = (port, cycle)
        total = load.get(key, Fraction(0)) + tx
        if total > T:
            a, b = port
            raise CapacityError(
                f"port {a}->{b} cycle {cycle}: {float(total)}us of traffic "
                f"in a {float(T)}us cycle")
        load[key] = total
        start = max(cycle * T, busy_until.get(key, cycle * T))
        end = start + tx
        busy_until[key] = end
        nxt = route.hops[hop + 1]
        if tc.topology.is_switch(nxt):
            heapq.heappush(heap, (end + prop + switching, _RANK_ARRIVE,
                                  index[(nxt, route.hops[hop + 2])],
                                  cycle + 1, flow, seq, hop + 1))
        else:
            deliveries.append((end + prop, flow, seq))

    max_delay, counts = _fold_deliveries(tc, cfg, deliveries, release_of)
    return SimReport(tc.name, CQF, cfg.seed, cfg.horizon, cfg.release_policy,
                     max_delay, counts, None)


# tracing helpers

def credit_trace(tc: TestCase, cfg: SimConfig, port) -> list:
    """(t, credit) record for one port's class queue during a CBS run."""
    port = tuple(port)
    cfg = replace(cfg, trace_ports=(port,))
    report = simulate_cbs(tc, cfg)
    return [(t, c) for t, p, c in (report.credit_trace or []) if p == port]


def trace_to_csv(trace) -> str:
    lines = ["t_us,credit_bits"]
    for t, credit in trace:
        lines.append(f"{float(t)},{float(credit)}")
    return "\n".join(lines) + "\n"


def report_to_json(report: SimReport) -> str:
    flows = [
        {
            "id": fid,
            "frames": report.per_flow_frame_count[fid],
            "max_delay_us": json_num(report.per_flow_max_delay[fid]),
        }
        for fid in sorted(report.per_flow_max_delay)
    ]
    payload = {
        "testcase": report.testcase,
        "mechanism": report.mechanism,
        "seed": report.seed,
        "horizon_us": json_num(report.horizon),
        "release_policy": report.release_policy,
        "flows": flows,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"

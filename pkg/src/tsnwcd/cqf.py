"""Closed-form worst-case delay for Cyclic Queuing and Forwarding
(IEEE 802.1Qch).

Egress queues ping-pong on a global cycle of T microseconds: everything
received during one cycle is forwarded during the next.  A frame therefore
reaches the listener within (switch_count + 1) full cycles of its aligned
injection, plus the network constant term xi and the flow's injection offset.
The hypercycle is the least common multiple of the flow periods; T must
divide it for the schedule to repeat cleanly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .errors import ValidationError
from .minplus import frac
from .netmodel import (
    CQF,
    Flow,
    NetworkConstants,
    Route,
    TestCase,
    frame_bits,
    json_num,
    validate_testcase,
)

XI_PER_LINK_PROP_PLUS_SYNC = "per_link_prop_plus_sync"
XI_EXPLICIT = "explicit"


@dataclass(frozen=True)
class CqfConfig:
    T: Fraction
    offsets: dict = field(default_factory=dict)   # flow id -> us, default 0
    xi_policy: str = XI_PER_LINK_PROP_PLUS_SYNC
    explicit_xi: Optional[Fraction] = None

    def __post_init__(self):
        object.__setattr__(self, "T", frac(self.T))
        if self.T <= 0:
            raise ValidationError("cycle duration T must be > 0")
        object.__setattr__(
            self, "offsets",
            {fid: frac(v) for fid, v in self.offsets.items()})
        if any(v < 0 for v in self.offsets.values()):
            raise ValidationError("offsets must be >= 0")
        if self.xi_policy not in (XI_PER_LINK_PROP_PLUS_SYNC, XI_EXPLICIT):
            raise ValidationError(f"unknown xi policy {self.xi_policy!r}")
        if self.xi_policy == XI_EXPLICIT:
            if self.explicit_xi is None:
                raise ValidationError("explicit xi policy needs explicit_xi")
            object.__setattr__(self, "explicit_xi", frac(self.explicit_xi))

    def offset(self, flow_id: int) -> Fraction:
        return self.offsets.get(flow_id, Fraction(0))


def _lcm_frac(values: Sequence[Fraction]) -> Fraction:
    num = 1
    den = 0
    for v in values:
        num = math.lcm(num, v.numerator)
        den = math.gcd(den, v.denominator)
    return Fraction(num, den)


def hypercycle(flows: Sequence[Flow], T: Optional[Fraction] = None) -> Fraction:
    """Least common multiple of the flow periods.  When T is given, it must
    divide the result (whole number of cycles per hypercycle)."""
    if not flows:
        raise ValidationError("hypercycle needs at least one flow")
    h = _lcm_frac([f.period for f in flows])
    if T is not None:
        T = frac(T)
        if (h / T).denominator != 1:
            raise ValidationError(
                f"cycle duration {T} does not divide the hypercycle {h}")
    return h


def xi(route: Route, constants: NetworkConstants,
       cfg: Optional[CqfConfig] = None) -> Fraction:
    """Constant network term of the delay bound.  Default policy: one
    propagation delay per traversed link plus one synchronization error."""
    if cfg is not None and cfg.xi_policy == XI_EXPLICIT:
        return cfg.explicit_xi
    return constants.propagation * route.link_count + constants.sync_error


def cqf_wcd(flow: Flow, route: Route, cfg: CqfConfig,
            constants: NetworkConstants) -> Fraction:
    """offset + (switch_count + 1) * T + xi."""
    if route.flow_id != flow.id:
        raise ValidationError(
            f"route belongs to flow {route.flow_id}, not {flow.id}")
    return (cfg.offset(flow.id)
            + (route.switch_count + 1) * cfg.T
            + xi(route, constants, cfg))


@dataclass(frozen=True)
class CapacityDiagnostic:
    port: tuple[str, str]
    cycle_index: int
    load_us: Fraction
    limit_us: Fraction

    def __str__(self):
        a, b = self.port
        return (f"port {a}->{b} cycle {self.cycle_index}: "
                f"{float(self.load_us)}us scheduled into a {float(self.limit_us)}us cycle")


def cycle_capacity_check(tc: TestCase,
                         cfg: Optional[CqfConfig] = None
                         ) -> list[CapacityDiagnostic]:
    """Per-port, per-cycle transmission load over one hypercycle.

    A frame released at r is injected in cycle ceil(r/T) (boundary releases
    keep their own cycle) and advances one cycle per switch; any cycle asked
    to carry more serialization time than T is reported.
    """
    cfg = _effective_config(tc, cfg)
    if not tc.flows:
        return []
    h = hypercycle(tc.flows, cfg.T)
    slots = int(h / cfg.T)
    load: dict[tuple[tuple[str, str], int], Fraction] = {}
    for f in sorted(tc.flows, key=lambda f: f.id):
        route = tc.route_for(f.id)
        tx = frame_bits(f, tc.constants) / tc.constants.link_rate
        releases = int(h / f.period)
        for k in range(releases):
            r = cfg.offset(f.id) + k * f.period
            base = r / cfg.T
            inject = base.numerator // base.denominator
            if inject * base.denominator != base.numerator:
                inject += 1
            for j, port in enumerate(route.ports):
                slot = (inject + j) % slots
                key = (port, slot)
                load[key] = load.get(key, Fraction(0)) + tx
    return [
        CapacityDiagnostic(port, slot, total, cfg.T)
        for (port, slot), total in sorted(load.items())
        if total > cfg.T
    ]


@dataclass
class CqfReport:
    testcase: str
    T: Fraction
    hypercycle: Fraction
    per_flow: dict   # flow id -> {"sw_num", "xi_us", "wcd_us"}


def _effective_config(tc: TestCase, cfg: Optional[CqfConfig]) -> CqfConfig:
    if cfg is not None:
        return cfg
    if tc.constants.cycle_T is None:
        raise ValidationError(f"{tc.name}: no cycle_T configured")
    return CqfConfig(T=tc.constants.cycle_T)


def solve(tc: TestCase, cfg: Optional[CqfConfig] = None) -> CqfReport:
    """Closed-form per-flow worst-case delays for a CQF test case."""
    if tc.mechanism != CQF:
        raise ValidationError(f"{tc.name}: solve needs a CQF test case")
    problems = validate_testcase(tc)
    if problems:
        raise ValidationError(f"{tc.name}: " + "; ".join(problems))
    cfg = _effective_config(tc, cfg)
    h = hypercycle(tc.flows, cfg.T) if tc.flows else cfg.T
    for fid, off in cfg.offsets.items():
        if off >= h:
            raise ValidationError(
                f"offset of flow {fid} must lie inside the hypercycle")
    per_flow = {}
    for f in sorted(tc.flows, key=lambda f: f.id):
        route = tc.route_for(f.id)
        per_flow[f.id] = {
            "sw_num": route.switch_count,
            "xi_us": xi(route, tc.constants, cfg),
            "wcd_us": cqf_wcd(f, route, cfg, tc.constants),
        }
    return CqfReport(tc.name, cfg.T, h, per_flow)


def report_to_json(report: CqfReport) -> str:
    flows = [
        {
            "id": fid,
            "sw_num": report.per_flow[fid]["sw_num"],
            "xi_us": json_num(report.per_flow[fid]["xi_us"]),
            "wcd_us": json_num(report.per_flow[fid]["wcd_us"]),
        }
        for fid in sorted(report.per_flow)
    ]
    payload = {
        "testcase": report.testcase,
        "mechanism": "CQF",
        "T_us": json_num(report.T),
        "hypercycle_us": json_num(report.hypercycle),
        "flows": flows,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"

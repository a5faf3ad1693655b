"""Immutable network data model, case-file parsing, and validation.

Two input formats are supported: a MATPOWER subset (baseMVA, bus, gen,
branch tables) and a native JSON format that carries the fields MATPOWER
lacks (switched-shunt step sizes, tap control setpoints, AGC factors,
remote-controlled buses). All electrical quantities are stored per-unit
on the system MVA base.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from .errors import CaseParseError, CaseValidationError

SLACK = "slack"
PV = "pv"
PQ = "pq"

NATIVE_FORMAT_VERSION = 1

_MATPOWER_BUS_TYPES = {3: SLACK, 2: PV, 1: PQ}


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    kind: str  # slack | pv | pq
    v_init_real: float = 1.0
    v_init_imag: float = 0.0


@dataclass(frozen=True)
class TapControl:
    """Controllable turns ratio regulating a bus voltage.

    controlled_side selects which end's voltage is monitored: "primary"
    (the tapped from side; low voltage drives the ratio up) or
    "secondary" (the to side; the relation reverses). step_size, when
    present, defines the discrete ratio steps used by snapping.
    """

    tr_min: float
    tr_max: float
    v_set: float
    controlled_side: str = "primary"
    step_size: float | None = None


@dataclass(frozen=True)
class Branch:
    """Series pi-model branch. g + jb is the series admittance (per-unit);
    b_sh is the total line-charging susceptance; ratio is a fixed
    off-nominal turns ratio on the from side (1.0 for lines)."""

    from_bus: int
    to_bus: int
    g: float
    b: float
    b_sh: float = 0.0
    ratio: float = 1.0
    tap: TapControl | None = None


@dataclass(frozen=True)
class Generator:
    bus: int
    p_g: float
    v_set: float
    q_min: float
    q_max: float
    p_min: float
    p_max: float
    agc_factor: float = 0.0
    remote_bus: int | None = None
    remote_factor: float = 0.0


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class FixedShunt:
    """Constant admittance to ground (MATPOWER GS/BS columns)."""

    bus: int
    g: float
    b: float


@dataclass(frozen=True)
class SwitchedShunt:
    bus: int
    b_min: float
    b_max: float
    step_size: float
    v_set: float


@dataclass(frozen=True)
class RemoteControlGroup:
    """Generators jointly regulating one remote bus voltage.

    members are generator indices into NetworkCase.generators; factors
    are their participation shares, normalized to sum to 1.
    """

    controlled_bus: int
    v_set: float
    members: tuple[int, ...]
    factors: tuple[float, ...]


@dataclass(frozen=True)
class NetworkCase:
    s_base: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    fixed_shunts: tuple[FixedShunt, ...] = ()
    shunts: tuple[SwitchedShunt, ...] = ()
    remote_groups: tuple[RemoteControlGroup, ...] = ()
    agc_enabled: bool = False
    name: str = ""

    def __post_init__(self):
        # normalize container types and infer remote groups from generator
        # rows whose regulated bus differs from their own
        for name in ("buses", "branches", "generators", "loads",
                     "fixed_shunts", "shunts", "remote_groups"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.remote_groups:
            object.__setattr__(
                self,
                "remote_groups",
                _infer_remote_groups(self.generators, self.bus_index()),
            )

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def slack_bus(self) -> Bus:
        for b in self.buses:
            if b.kind == SLACK:
                return b
        raise CaseValidationError(["no slack bus"])

    def drop_generator(self, bus_id: int) -> "NetworkCase":
        """Case with the first generator at bus_id removed (contingency)."""
        hit = None
        for i, g in enumerate(self.generators):
            if g.bus == bus_id:
                hit = i
                break
        if hit is None:
            raise CaseValidationError([f"no generator at bus {bus_id} to drop"])
        gens = tuple(g for i, g in enumerate(self.generators) if i != hit)
        return replace(self, generators=gens, remote_groups=())


def _infer_remote_groups(generators, bus_pos) -> tuple[RemoteControlGroup, ...]:
    """Group generators whose regulated bus differs from their own bus.

    Factors are normalized to sum to 1 per group so the group request
    equals the sum of member outputs while every member is in its linear
    region.
    """
    by_bus: dict[int, list[int]] = {}
    for i, g in enumerate(generators):
        if g.remote_bus is not None and g.remote_bus != g.bus:
            by_bus.setdefault(g.remote_bus, []).append(i)
    groups = []
    for ctl_bus in sorted(by_bus, key=lambda b: bus_pos.get(b, 1 << 30)):
        members = by_bus[ctl_bus]
        raw = [generators[i].remote_factor for i in members]
        if any(f < 0 for f in raw):
            raise CaseValidationError(
                [f"negative remote factor in group controlling bus {ctl_bus}"]
            )
        total = sum(raw)
        if total <= 0.0:
            # unweighted group: share equally
            factors = [1.0 / len(members)] * len(members)
        else:
            factors = [f / total for f in raw]
        groups.append(
            RemoteControlGroup(
                controlled_bus=ctl_bus,
                v_set=generators[members[0]].v_set,
                members=tuple(members),
                factors=tuple(factors),
            )
        )
    return tuple(groups)


# ---------------------------------------------------------------------------
# MATPOWER format
# ---------------------------------------------------------------------------

def _matpower_tables(text: str) -> tuple[float, dict[str, list[tuple[int, list[float]]]]]:
    """Extract baseMVA and the numeric tables from MATPOWER case text.

    Returns rows as (line_number, values) so errors can name their line.
    """
    base = None
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9eE.+-]+)\s*;", text)
    if m:
        base = float(m.group(1))
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"mpc\.(\w+)\s*=\s*\[", line)
        if m:
            current = m.group(1)
            tables[current] = []
            line = line[m.end():].strip()
        if current is None:
            continue
        done = False
        if "]" in line:
            line = line.split("]", 1)[0].strip()
            done = True
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                values = [float(tok) for tok in chunk.split()]
            except ValueError:
                raise CaseParseError(f"malformed table row {chunk!r}", line=lineno)
            tables[current].append((lineno, values))
        if done:
            current = None
    if base is None:
        raise CaseParseError("missing mpc.baseMVA")
    if base <= 0:
        raise CaseParseError(f"baseMVA must be > 0, got {base}")
    return base, tables


def parse_matpower(text: str, name: str = "") -> NetworkCase:
    """Parse a MATPOWER-style case (baseMVA, bus, gen, branch tables).

    Quantities are converted to per-unit on baseMVA. Bus types 3/2/1 map
    to slack/pv/pq; GS/BS bus columns become fixed shunts; out-of-service
    rows are dropped. Raises CaseParseError with the offending line, or
    CaseValidationError for structural problems.
    """
    base, tables = _matpower_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseParseError(f"missing mpc.{required} table")

    buses = []
    fixed_shunts = []
    loads = []
    bus_kind = {}
    for lineno, row in tables["bus"]:
        if len(row) < 13:
            raise CaseParseError(
                f"bus row needs 13 columns, got {len(row)}", line=lineno
            )
        bus_id = int(row[0])
        btype = int(row[1])
        if btype == 4:
            raise CaseParseError(f"bus {bus_id} is isolated (type 4)", line=lineno)
        if btype not in _MATPOWER_BUS_TYPES:
            raise CaseParseError(f"bus {bus_id} has unknown type {btype}", line=lineno)
        kind = _MATPOWER_BUS_TYPES[btype]
        bus_kind[bus_id] = kind
        vm = row[7] if row[7] > 0 else 1.0
        buses.append(
            Bus(
                id=bus_id,
                base_kv=row[9] if row[9] > 0 else 1.0,
                kind=kind,
                v_init_real=vm if kind != PQ else 1.0,
                v_init_imag=0.0,
            )
        )
        pd, qd = row[2] / base, row[3] / base
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(bus=bus_id, p=pd, q=qd))
        gs, bs = row[4] / base, row[5] / base
        if gs != 0.0 or bs != 0.0:
            fixed_shunts.append(FixedShunt(bus=bus_id, g=gs, b=bs))

    generators = []
    for lineno, row in tables["gen"]:
        if len(row) < 10:
            raise CaseParseError(
                f"gen row needs 10 columns, got {len(row)}", line=lineno
            )
        if row[7] <= 0:  # GEN_STATUS
            continue
        bus_id = int(row[0])
        generators.append(
            Generator(
                bus=bus_id,
                p_g=row[1] / base,
                v_set=row[5] if row[5] > 0 else 1.0,
                q_min=row[4] / base,
                q_max=row[3] / base,
                p_min=row[9] / base,
                p_max=row[8] / base,
            )
        )

    branches = []
    for lineno, row in tables["branch"]:
        if len(row) < 11:
            raise CaseParseError(
                f"branch row needs 11 columns, got {len(row)}", line=lineno
            )
        if row[10] <= 0:  # BR_STATUS
            continue
        r, x = row[2], row[3]
        if r == 0.0 and x == 0.0:
            raise CaseParseError(
                f"zero-impedance branch {int(row[0])}-{int(row[1])}", line=lineno
            )
        if row[9] != 0.0:
            raise CaseParseError(
                f"phase-shifting branch {int(row[0])}-{int(row[1])} unsupported",
                line=lineno,
            )
        den = r * r + x * x
        ratio = row[8] if row[8] != 0.0 else 1.0
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                g=r / den,
                b=-x / den,
                b_sh=row[4],
                ratio=ratio,
            )
        )

    # PV buses start at their generator's setpoint
    vset_by_bus = {g.bus: g.v_set for g in generators}
    buses = [
        replace(b, v_init_real=vset_by_bus.get(b.id, b.v_init_real))
        if b.kind in (PV, SLACK) and b.id in vset_by_bus
        else b
        for b in buses
    ]

    case = NetworkCase(
        s_base=base,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        fixed_shunts=tuple(fixed_shunts),
        shunts=(),
        name=name,
    )
    problems = validate(case)
    if problems:
        raise CaseValidationError(problems)
    return case


# ---------------------------------------------------------------------------
# Native format (JSON)
# ---------------------------------------------------------------------------

def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise CaseParseError(f"{where}: missing field {key!r}")
    return obj[key]


def parse_native(text: str, name: str = "") -> NetworkCase:
    """Parse the native JSON case format (see serialize_native for schema)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseParseError("top-level document must be an object")
    version = _need(doc, "format_version", "case")
    if version != NATIVE_FORMAT_VERSION:
        raise CaseParseError(f"unsupported format_version {version}")
    s_base = float(_need(doc, "s_base", "case"))

    buses = []
    for i, b in enumerate(doc.get("buses", [])):
        where = f"buses[{i}]"
        v_init = b.get("v_init", [1.0, 0.0])
        buses.append(
            Bus(
                id=int(_need(b, "id", where)),
                base_kv=float(_need(b, "base_kv", where)),
                kind=str(_need(b, "kind", where)),
                v_init_real=float(v_init[0]),
                v_init_imag=float(v_init[1]),
            )
        )

    branches = []
    for i, br in enumerate(doc.get("branches", [])):
        where = f"branches[{i}]"
        tap = None
        if br.get("tap") is not None:
            t = br["tap"]
            step = t.get("step_size")
            tap = TapControl(
                tr_min=float(_need(t, "tr_min", where + ".tap")),
                tr_max=float(_need(t, "tr_max", where + ".tap")),
                v_set=float(_need(t, "v_set", where + ".tap")),
                controlled_side=t.get("controlled_side", "primary"),
                step_size=float(step) if step is not None else None,
            )
        branches.append(
            Branch(
                from_bus=int(_need(br, "from", where)),
                to_bus=int(_need(br, "to", where)),
                g=float(_need(br, "g", where)),
                b=float(_need(br, "b", where)),
                b_sh=float(br.get("b_sh", 0.0)),
                ratio=float(br.get("ratio", 1.0)),
                tap=tap,
            )
        )

    generators = []
    for i, g in enumerate(doc.get("generators", [])):
        where = f"generators[{i}]"
        remote = g.get("remote_bus")
        generators.append(
            Generator(
                bus=int(_need(g, "bus", where)),
                p_g=float(_need(g, "p_g", where)),
                v_set=float(_need(g, "v_set", where)),
                q_min=float(_need(g, "q_min", where)),
                q_max=float(_need(g, "q_max", where)),
                p_min=float(_need(g, "p_min", where)),
                p_max=float(_need(g, "p_max", where)),
                agc_factor=float(g.get("agc_factor", 0.0)),
                remote_bus=int(remote) if remote is not None else None,
                remote_factor=float(g.get("remote_factor", 0.0)),
            )
        )

    loads = [
        Load(
            bus=int(_need(l, "bus", f"loads[{i}]")),
            p=float(_need(l, "p", f"loads[{i}]")),
            q=float(_need(l, "q", f"loads[{i}]")),
        )
        for i, l in enumerate(doc.get("loads", []))
    ]
    fixed_shunts = [
        FixedShunt(
            bus=int(_need(s, "bus", f"fixed_shunts[{i}]")),
            g=float(s.get("g", 0.0)),
            b=float(s.get("b", 0.0)),
        )
        for i, s in enumerate(doc.get("fixed_shunts", []))
    ]
    shunts = [
        SwitchedShunt(
            bus=int(_need(s, "bus", f"shunts[{i}]")),
            b_min=float(_need(s, "b_min", f"shunts[{i}]")),
            b_max=float(_need(s, "b_max", f"shunts[{i}]")),
            step_size=float(_need(s, "step_size", f"shunts[{i}]")),
            v_set=float(_need(s, "v_set", f"shunts[{i}]")),
        )
        for i, s in enumerate(doc.get("shunts", []))
    ]

    case = NetworkCase(
        s_base=s_base,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        fixed_shunts=tuple(fixed_shunts),
        shunts=tuple(shunts),
        agc_enabled=bool(doc.get("agc_enabled", False)),
        name=name or doc.get("name", ""),
    )
    problems = validate(case)
    if problems:
        raise CaseValidationError(problems)
    return case


def serialize_native(case: NetworkCase) -> str:
    """Serialize to the native JSON format; parse_native round-trips it."""
    doc = {
        "format_version": NATIVE_FORMAT_VERSION,
        "name": case.name,
        "s_base": case.s_base,
        "agc_enabled": case.agc_enabled,
        "buses": [
            {
                "id": b.id,
                "base_kv": b.base_kv,
                "kind": b.kind,
                "v_init": [b.v_init_real, b.v_init_imag],
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "g": br.g,
                "b": br.b,
                "b_sh": br.b_sh,
                "ratio": br.ratio,
                "tap": None
                if br.tap is None
                else {
                    "tr_min": br.tap.tr_min,
                    "tr_max": br.tap.tr_max,
                    "v_set": br.tap.v_set,
                    "controlled_side": br.tap.controlled_side,
                    "step_size": br.tap.step_size,
                },
            }
            for br in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_g": g.p_g,
                "v_set": g.v_set,
                "q_min": g.q_min,
                "q_max": g.q_max,
                "p_min": g.p_min,
                "p_max": g.p_max,
                "agc_factor": g.agc_factor,
                "remote_bus": g.remote_bus,
                "remote_factor": g.remote_factor,
            }
            for g in case.generators
        ],
        "loads": [{"bus": l.bus, "p": l.p, "q": l.q} for l in case.loads],
        "fixed_shunts": [
            {"bus": s.bus, "g": s.g, "b": s.b} for s in case.fixed_shunts
        ],
        "shunts": [
            {
                "bus": s.bus,
                "b_min": s.b_min,
                "b_max": s.b_max,
                "step_size": s.step_size,
                "v_set": s.v_set,
            }
            for s in case.shunts
        ],
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _islands(case: NetworkCase) -> list[set[int]]:
    """Connected components over bus ids (BFS on the branch graph)."""
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.from_bus in adj and br.to_bus in adj:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen: set[int] = set()
    comps = []
    for b in case.buses:
        if b.id in seen:
            continue
        comp = {b.id}
        queue = [b.id]
        while queue:
            u = queue.pop()
            for v in adj[u]:
                if v not in comp:
                    comp.add(v)
                    queue.append(v)
        seen |= comp
        comps.append(comp)
    return comps


def validate(case: NetworkCase) -> list[str]:
    """Return all structural problems; empty list means solvable-shaped."""
    out: list[str] = []
    if case.s_base <= 0:
        out.append(f"s_base must be > 0, got {case.s_base}")

    ids = [b.id for b in case.buses]
    known = set(ids)
    if len(ids) != len(known):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        out.append(f"duplicate bus ids {dup}")
    if not case.buses:
        out.append("case has no buses")
        return out
    for b in case.buses:
        if b.base_kv <= 0:
            out.append(f"bus {b.id} base_kV must be > 0")
        if b.kind not in (SLACK, PV, PQ):
            out.append(f"bus {b.id} has unknown kind {b.kind!r}")

    for i, br in enumerate(case.branches):
        if br.from_bus == br.to_bus:
            out.append(f"branch {i} connects bus {br.from_bus} to itself")
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                out.append(f"branch {i} references unknown bus {end}")
        if br.g == 0.0 and br.b == 0.0:
            out.append(f"branch {i} has zero series admittance")
        if br.ratio <= 0.0:
            out.append(f"branch {i} has non-positive ratio {br.ratio}")
        if br.tap is not None:
            t = br.tap
            if not (0.0 < t.tr_min <= t.tr_max):
                out.append(
                    f"branch {i} tap limits invalid ({t.tr_min}, {t.tr_max})"
                )
            if t.controlled_side not in ("primary", "secondary"):
                out.append(
                    f"branch {i} tap controlled_side {t.controlled_side!r} unknown"
                )
            if t.step_size is not None and t.step_size <= 0.0:
                out.append(f"branch {i} tap step_size must be > 0")

    kind_of = {b.id: b.kind for b in case.buses}
    for i, g in enumerate(case.generators):
        if g.bus not in known:
            out.append(f"generator {i} references unknown bus {g.bus}")
            continue
        if g.q_min > g.q_max:
            out.append(f"generator {i} has q_min > q_max")
        if not (g.p_min <= g.p_g <= g.p_max):
            out.append(f"generator {i} p_g {g.p_g} outside [{g.p_min}, {g.p_max}]")
        if g.v_set <= 0:
            out.append(f"generator {i} v_set must be > 0")
        if g.agc_factor < 0:
            out.append(f"generator {i} agc_factor must be >= 0")
        if g.remote_factor < 0:
            out.append(f"generator {i} remote_factor must be >= 0")
        remote = g.remote_bus is not None and g.remote_bus != g.bus
        if remote and g.remote_bus not in known:
            out.append(f"generator {i} remote bus {g.remote_bus} unknown")
        if not remote and kind_of[g.bus] == PQ:
            out.append(f"generator {i} on PQ bus {g.bus} has no control role")

    for i, l in enumerate(case.loads):
        if l.bus not in known:
            out.append(f"load {i} references unknown bus {l.bus}")
    for i, s in enumerate(case.fixed_shunts):
        if s.bus not in known:
            out.append(f"fixed shunt {i} references unknown bus {s.bus}")
    for i, s in enumerate(case.shunts):
        if s.bus not in known:
            out.append(f"shunt {i} references unknown bus {s.bus}")
            continue
        if s.b_min > s.b_max:
            out.append(f"shunt {i} has b_min > b_max")
        if s.step_size <= 0:
            out.append(f"shunt {i} step_size must be > 0")
        if s.v_set <= 0:
            out.append(f"shunt {i} v_set must be > 0")

    for gi, grp in enumerate(case.remote_groups):
        if not grp.members:
            out.append(f"remote group {gi} has no members")
            continue
        if grp.controlled_bus not in known:
            out.append(f"remote group {gi} controls unknown bus {grp.controlled_bus}")
            continue
        vsets = {case.generators[m].v_set for m in grp.members}
        if len(vsets) > 1:
            out.append(
                f"remote group {gi} members disagree on v_set for bus "
                f"{grp.controlled_bus}: {sorted(vsets)}"
            )
        # a locally regulated bus cannot also be remote-controlled
        if kind_of[grp.controlled_bus] != PQ:
            out.append(
                f"remote group {gi} controls bus {grp.controlled_bus} which is "
                f"{kind_of[grp.controlled_bus]}; remote-controlled buses must be pq"
            )
        for m in grp.members:
            if case.generators[m].bus == grp.controlled_bus:
                out.append(
                    f"remote group {gi} member generator {m} sits on the "
                    f"controlled bus"
                )

    # one slack, one island
    comps = _islands(case)
    slack_ids = [b.id for b in case.buses if b.kind == SLACK]
    if not slack_ids:
        out.append("missing slack bus")
    for ci, comp in enumerate(comps):
        n_slack = sum(1 for s in slack_ids if s in comp)
        if n_slack > 1:
            out.append(f"multiple slack buses in island {ci}")
    if len(comps) > 1:
        sizes = sorted(len(c) for c in comps)
        out.append(
            f"network has {len(comps)} islands (sizes {sizes}); only a single "
            f"slack-connected island is supported"
        )

    # PV buses need a local voltage controller
    local_ctl_buses = {
        g.bus
        for g in case.generators
        if g.remote_bus is None or g.remote_bus == g.bus
    }
    for b in case.buses:
        if b.kind == PV and b.id not in local_ctl_buses:
            out.append(f"pv bus {b.id} has no local generator")

    return out


def flat_start_voltages(case: NetworkCase) -> list[complex]:
    """Initial bus voltages: setpoint + j0 at slack/pv buses, 1 + j0 elsewhere."""
    return [complex(b.v_init_real, b.v_init_imag) for b in case.buses]

"""MATPOWER case parsing, bus admittance assembly and sub-network derivation.

Bus, generator and branch records keep MATPOWER's physical units (MW, MVAr,
MVA, degrees). Everything the solvers consume goes through the per-unit array
accessors on :class:`NetworkCase`.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

BUS_KINDS = {1: "pq", 2: "pv", 3: "slack"}
KIND_CODES = {v: k for k, v in BUS_KINDS.items()}


class CaseError(ValueError):
    """Base class for case-file and network-model errors."""


class MissingTable(CaseError):
    pass


class MalformedRow(CaseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DanglingReference(CaseError):
    pass


class MultipleSlack(CaseError):
    pass


class NoSlack(CaseError):
    pass


class DisconnectedNetwork(CaseError):
    pass


class ZeroImpedanceBranch(CaseError):
    pass


class CannotReachTarget(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    pd: float
    qd: float
    gs: float
    bs: float
    vmin: float
    vmax: float
    base_kv: float
    vm0: float = 1.0
    va0: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: tuple[float, float, float]  # (c2, c1, c0)
    pg0: float = 0.0
    qg0: float = 0.0
    vg: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    smax: float = 0.0
    tap: float = 0.0
    shift: float = 0.0

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0 else 1.0


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    # slot_order[s] is the internal index of the bus occupying slot s
    slot_order: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.slot_order:
            object.__setattr__(self, "slot_order", tuple(range(len(self.buses))))
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def ref(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @cached_property
    def pd_pu(self) -> np.ndarray:
        return np.array([b.pd for b in self.buses]) / self.base_mva

    @cached_property
    def qd_pu(self) -> np.ndarray:
        return np.array([b.qd for b in self.buses]) / self.base_mva

    @cached_property
    def vmin(self) -> np.ndarray:
        return np.array([b.vmin for b in self.buses])

    @cached_property
    def vmax(self) -> np.ndarray:
        return np.array([b.vmax for b in self.buses])

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def gen_limits_pu(self) -> dict[str, np.ndarray]:
        a = np.array([[g.pmin, g.pmax, g.qmin, g.qmax] for g in self.generators]).reshape(-1, 4)
        a = a / self.base_mva
        return {"pmin": a[:, 0], "pmax": a[:, 1], "qmin": a[:, 2], "qmax": a[:, 3]}

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(ng, 3) array of (c2, c1, c0) in $/MW^2h, $/MWh, $/h."""
        return np.array([g.cost for g in self.generators], dtype=float).reshape(-1, 3)

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """Dense (nb, ng) bus-generator incidence matrix."""
        c = np.zeros((self.n_bus, self.n_gen))
        c[self.gen_bus, np.arange(self.n_gen)] = 1.0
        return c

    @cached_property
    def smax_pu(self) -> np.ndarray:
        return np.array([br.smax for br in self.branches]) / self.base_mva

    @cached_property
    def slot_position(self) -> np.ndarray:
        """Inverse of ``slot_order``: slot index of every bus."""
        pos = np.empty(self.n_bus, dtype=int)
        pos[list(self.slot_order)] = np.arange(self.n_bus)
        return pos

    @cached_property
    def p_load_buses(self) -> np.ndarray:
        """Buses with nonzero active load, in slot order."""
        order = np.array(self.slot_order, dtype=int)
        return order[self.pd_pu[order] != 0]

    @cached_property
    def q_load_buses(self) -> np.ndarray:
        """Buses with nonzero reactive load, in slot order."""
        order = np.array(self.slot_order, dtype=int)
        return order[self.qd_pu[order] != 0]

    @property
    def n_load_slots(self) -> int:
        return len(self.p_load_buses) + len(self.q_load_buses)

    @cached_property
    def load_buses(self) -> np.ndarray:
        order = np.array(self.slot_order, dtype=int)
        return order[(self.pd_pu[order] != 0) | (self.qd_pu[order] != 0)]


def _validate(case: NetworkCase) -> None:
    nb = len(case.buses)
    if nb == 0:
        raise MalformedRow("bus table is empty")
    slacks = [i for i, b in enumerate(case.buses) if b.kind == "slack"]
    if not slacks:
        raise NoSlack(f"{case.name}: no slack bus (type 3)")
    if len(slacks) > 1:
        raise MultipleSlack(f"{case.name}: {len(slacks)} slack buses, ids "
                            f"{[case.buses[i].id for i in slacks]}")
    for b in case.buses:
        if not (b.vmin > 0 and b.vmin <= b.vmax):
            raise MalformedRow(f"bus {b.id}: invalid voltage limits [{b.vmin}, {b.vmax}]")
    for g in case.generators:
        if not 0 <= g.bus < nb:
            raise DanglingReference(f"generator at unknown bus index {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise MalformedRow(f"generator at bus {case.buses[g.bus].id}: min limit above max")
    for br in case.branches:
        if not (0 <= br.from_bus < nb and 0 <= br.to_bus < nb):
            raise DanglingReference(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        if br.from_bus == br.to_bus:
            raise MalformedRow(f"branch at bus {case.buses[br.from_bus].id} is a self-loop")
    if sorted(case.slot_order) != list(range(nb)):
        raise CaseError(f"{case.name}: slot_order is not a permutation of the buses")
    if not _is_connected(nb, [(br.from_bus, br.to_bus) for br in case.branches]):
        raise DisconnectedNetwork(f"{case.name}: bus graph is not connected")


def _is_connected(nb: int, edges, alive=None) -> bool:
    if alive is None:
        alive = np.ones(nb, dtype=bool)
    idx = np.flatnonzero(alive)
    if len(idx) <= 1:
        return True
    remap = -np.ones(nb, dtype=int)
    remap[idx] = np.arange(len(idx))
    e = np.array([(remap[f], remap[t]) for f, t in edges if alive[f] and alive[t]],
                 dtype=int).reshape(-1, 2)
    graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(len(idx), len(idx)))
    ncomp, _ = connected_components(graph, directed=False)
    return ncomp == 1


# --------------------------------------------------------------------------
# parsing

_TABLE_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[;]+?)\s*;")
_FUNCTION = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}
_MAX_COLS = {"bus": 13, "gen": 10, "branch": 13}


def _read_tables(text: str):
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    scalars: dict[str, str] = {}
    name = None
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if current is None:
            m = _FUNCTION.match(line)
            if m:
                name = m.group(1)
                continue
            m = _TABLE_START.match(line)
            if m:
                current = m.group(1)
                tables[current] = []
                line = m.group(2)
            else:
                m = _SCALAR.match(line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip().strip("'\"")
                continue
        closed = "]" in line
        if closed:
            line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                tables[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                raise MalformedRow(f"non-numeric entry in mpc.{current}: {chunk.strip()!r}",
                                   lineno) from None
        if closed:
            current = None
    if current is not None:
        raise MalformedRow(f"mpc.{current} table is never closed")
    return name, scalars, tables


def parse_case(text: str, name: str | None = None) -> NetworkCase:
    """Parse MATPOWER case text (``mpc.baseMVA``, ``mpc.bus`` ...) into a NetworkCase."""
    file_name, scalars, tables = _read_tables(text)
    if "baseMVA" not in scalars:
        raise MissingTable("mpc.baseMVA not found")
    for tab in ("bus", "gen", "branch", "gencost"):
        if tab not in tables:
            raise MissingTable(f"mpc.{tab} table not found")
    try:
        base_mva = float(scalars["baseMVA"])
    except ValueError:
        raise MalformedRow(f"baseMVA is not a number: {scalars['baseMVA']!r}") from None

    for tab, rows in tables.items():
        if tab not in _MIN_COLS:
            continue
        for lineno, row in rows:
            if len(row) < _MIN_COLS[tab]:
                raise MalformedRow(f"mpc.{tab} row has {len(row)} columns, "
                                   f"need {_MIN_COLS[tab]}", lineno)
        widest = max((len(r) for _, r in rows), default=0)
        if widest > _MAX_COLS[tab]:
            logger.warning("mpc.%s: ignoring columns beyond %d", tab, _MAX_COLS[tab])

    buses = []
    index: dict[int, int] = {}
    for lineno, row in tables["bus"]:
        bus_id = int(row[0])
        code = int(row[1])
        if code not in BUS_KINDS:
            raise MalformedRow(f"bus {bus_id}: unsupported bus type {code}", lineno)
        if bus_id in index:
            raise MalformedRow(f"duplicate bus id {bus_id}", lineno)
        index[bus_id] = len(buses)
        buses.append(Bus(id=bus_id, kind=BUS_KINDS[code], pd=row[2], qd=row[3], gs=row[4],
                         bs=row[5], vm0=row[7], va0=row[8], base_kv=row[9],
                         vmax=row[11], vmin=row[12]))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise MalformedRow(f"mpc.gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    if len(cost_rows) > len(gen_rows):
        logger.warning("mpc.gencost: ignoring %d rows beyond the generator count",
                       len(cost_rows) - len(gen_rows))
    generators = []
    for (lineno, row), (clineno, crow) in zip(gen_rows, cost_rows):
        if int(row[0]) not in index:
            raise DanglingReference(f"line {lineno}: generator references unknown bus {int(row[0])}")
        cost = _parse_cost(crow, clineno)
        if row[7] <= 0:
            continue
        generators.append(Generator(bus=index[int(row[0])], pg0=row[1], qg0=row[2],
                                    qmax=row[3], qmin=row[4], vg=row[5],
                                    pmax=row[8], pmin=row[9], cost=cost))

    branches = []
    for lineno, row in tables["branch"]:
        for end in (row[0], row[1]):
            if int(end) not in index:
                raise DanglingReference(f"line {lineno}: branch references unknown bus {int(end)}")
        if row[10] <= 0:
            continue
        branches.append(Branch(from_bus=index[int(row[0])], to_bus=index[int(row[1])],
                               r=row[2], x=row[3], b=row[4], smax=row[5],
                               tap=row[8], shift=row[9]))

    slot_order: tuple[int, ...] = ()
    if "slot_order" in tables:
        ids = [int(v) for _, r in tables["slot_order"] for v in r]
        missing = [i for i in ids if i not in index]
        if missing:
            raise DanglingReference(f"slot_order references unknown buses {missing}")
        slot_order = tuple(index[i] for i in ids)

    return NetworkCase(name=name or file_name or "case", base_mva=base_mva,
                       buses=tuple(buses), generators=tuple(generators),
                       branches=tuple(branches), slot_order=slot_order)


def _parse_cost(row: list[float], lineno: int) -> tuple[float, float, float]:
    if len(row) < 4:
        raise MalformedRow("gencost row too short", lineno)
    model, n = int(row[0]), int(row[3])
    if model != 2:
        raise MalformedRow("only polynomial costs (model 2) are supported", lineno)
    if n > 3:
        raise MalformedRow(f"cost polynomial of degree {n - 1} > 2", lineno)
    coeffs = row[4:4 + n]
    if len(coeffs) < n:
        raise MalformedRow(f"gencost declares {n} coefficients, found {len(coeffs)}", lineno)
    if len(row) > 4 + n:
        logger.warning("line %d: ignoring extra gencost columns", lineno)
    padded = [0.0] * (3 - n) + list(coeffs)
    return (padded[0], padded[1], padded[2])


def load_case(path: str | Path) -> NetworkCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def builtin_case(name: str) -> NetworkCase:
    """One of the bundled cases: case9, case14, case30, case_ieee30, case57, case118, case300."""
    ref = resources.files("elasticopf") / "data" / f"{name}.m"
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return parse_case(ref.read_text(), name=name)


def resolve_case(spec: str | Path) -> NetworkCase:
    """Load from a path if it exists, else fall back to the bundled case of that name."""
    p = Path(spec)
    if p.exists():
        return load_case(p)
    return builtin_case(str(spec))


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def write_case(case: NetworkCase) -> str:
    """Serialize to canonical MATPOWER text; ``parse_case`` inverts it exactly."""
    out = [f"function mpc = {case.name}", "", "mpc.version = '2';",
           f"mpc.baseMVA = {_fmt(case.base_mva)};", "", "mpc.bus = ["]
    for b in case.buses:
        row = [b.id, KIND_CODES[b.kind], b.pd, b.qd, b.gs, b.bs, 1, b.vm0, b.va0,
               b.base_kv, 1, b.vmax, b.vmin]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gen = ["]
    for g in case.generators:
        row = [case.buses[g.bus].id, g.pg0, g.qg0, g.qmax, g.qmin, g.vg, case.base_mva, 1,
               g.pmax, g.pmin]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.branch = ["]
    for br in case.branches:
        row = [case.buses[br.from_bus].id, case.buses[br.to_bus].id, br.r, br.x, br.b,
               br.smax, br.smax, br.smax, br.tap, br.shift, 1, -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gencost = ["]
    for g in case.generators:
        row = [2, 0, 0, 3, *g.cost]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", ""]
    if list(case.slot_order) != list(range(case.n_bus)):
        ids = " ".join(str(case.buses[i].id) for i in case.slot_order)
        out += [f"mpc.slot_order = [{ids}];", ""]
    return "\n".join(out)


def case_to_dict(case: NetworkCase) -> dict:
    """JSON-ready dump used by ``case dump``."""
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [vars(b) for b in case.buses],
        "generators": [{**vars(g), "cost": list(g.cost)} for g in case.generators],
        "branches": [vars(br) for br in case.branches],
        "slot_order": [case.buses[i].id for i in case.slot_order],
    }


# --------------------------------------------------------------------------
# admittance


@dataclass(frozen=True)
class AdmittanceMatrix:
    entries: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def _branch_terms(case: NetworkCase):
    """Two-port admittances (yff, yft, ytf, ytt) for every branch."""
    nl = case.n_branch
    yff = np.zeros(nl, dtype=complex)
    yft = np.zeros(nl, dtype=complex)
    ytf = np.zeros(nl, dtype=complex)
    ytt = np.zeros(nl, dtype=complex)
    for l, br in enumerate(case.branches):
        if br.r == 0 and br.x == 0:
            raise ZeroImpedanceBranch(
                f"branch {case.buses[br.from_bus].id}-{case.buses[br.to_bus].id} has r = x = 0")
        y = 1.0 / complex(br.r, br.x)
        tau = br.ratio
        phi = np.deg2rad(br.shift)
        ych = 0.5j * br.b
        yff[l] = (y + ych) / tau**2
        yft[l] = -y / (tau * np.exp(-1j * phi))
        ytf[l] = -y / (tau * np.exp(1j * phi))
        ytt[l] = y + ych
    return yff, yft, ytf, ytt


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    nb = case.n_bus
    Y = np.zeros((nb, nb), dtype=complex)
    yff, yft, ytf, ytt = _branch_terms(case)
    for l, br in enumerate(case.branches):
        f, t = br.from_bus, br.to_bus
        Y[f, f] += yff[l]
        Y[f, t] += yft[l]
        Y[t, f] += ytf[l]
        Y[t, t] += ytt[l]
    shunt = np.array([complex(b.gs, b.bs) for b in case.buses]) / case.base_mva
    Y[np.diag_indices(nb)] += shunt
    return AdmittanceMatrix(Y)


def branch_admittances(case: NetworkCase):
    """Dense (Yf, Yt, Cf, Ct): If = Yf V, It = Yt V and the end-bus incidence matrices."""
    nl, nb = case.n_branch, case.n_bus
    yff, yft, ytf, ytt = _branch_terms(case)
    f = np.array([br.from_bus for br in case.branches], dtype=int)
    t = np.array([br.to_bus for br in case.branches], dtype=int)
    rows = np.arange(nl)
    Cf = np.zeros((nl, nb))
    Ct = np.zeros((nl, nb))
    Cf[rows, f] = 1.0
    Ct[rows, t] = 1.0
    Yf = yff[:, None] * Cf + yft[:, None] * Ct
    Yt = ytf[:, None] * Cf + ytt[:, None] * Ct
    return Yf, Yt, Cf, Ct


# --------------------------------------------------------------------------
# sub-networks


def removal_sequence(case: NetworkCase) -> list[int]:
    """Greedy bus-removal order used by :func:`derive_subnetwork`.

    Repeatedly removes the highest-index bus that is neither the slack nor a
    generator bus and whose removal leaves the remaining graph connected; stops
    when no such bus exists.
    """
    nb = case.n_bus
    protected = {case.ref, *case.gen_bus.tolist()}
    edges = [(br.from_bus, br.to_bus) for br in case.branches]
    alive = np.ones(nb, dtype=bool)
    seq = []
    while True:
        for i in range(nb - 1, -1, -1):
            if not alive[i] or i in protected:
                continue
            alive[i] = False
            if alive.sum() >= 1 and _is_connected(nb, edges, alive):
                seq.append(i)
                break
            alive[i] = True
        else:
            return seq


def derive_subnetwork(case: NetworkCase, target_buses: int) -> NetworkCase:
    """Shrink ``case`` to ``target_buses`` buses by deterministic greedy removal.

    The returned case carries the canonical expansion slot order: buses that
    survive every removal come first (in the input's slot order), followed by
    removable buses in reverse removal order. Consequently the slot order of a
    smaller derived network is a prefix (by bus id) of any larger one.
    """
    nb = case.n_bus
    if target_buses > nb:
        raise CannotReachTarget(f"target {target_buses} exceeds the {nb} buses of {case.name}")
    seq = removal_sequence(case)
    if target_buses < 2 or nb - target_buses > len(seq):
        floor = max(nb - len(seq), 2)
        raise CannotReachTarget(
            f"{case.name}: cannot shrink to {target_buses} buses (minimum reachable {floor})")
    removed = set(seq[: nb - target_buses])
    removable = set(seq)
    ranked = [i for i in case.slot_order if i not in removable] + seq[::-1]
    keep = [i for i in range(nb) if i not in removed]
    remap = {old: new for new, old in enumerate(keep)}

    buses = tuple(case.buses[i] for i in keep)
    generators = tuple(replace(g, bus=remap[g.bus]) for g in case.generators)
    branches = tuple(replace(br, from_bus=remap[br.from_bus], to_bus=remap[br.to_bus])
                     for br in case.branches
                     if br.from_bus not in removed and br.to_bus not in removed)
    slot_order = tuple(remap[i] for i in ranked if i not in removed)
    name = case.name if target_buses == nb else f"{case.name.split('_sub')[0]}_sub{target_buses}"
    return NetworkCase(name=name, base_mva=case.base_mva, buses=buses, generators=generators,
                       branches=branches, slot_order=slot_order)

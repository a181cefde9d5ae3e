"""AC optimal power flow front end.

Parses the standard matrix-oriented grid case text format, builds the
real-variable polynomial optimization model of the AC-OPF (power flow
variables eliminated, so the unknowns are the rectangular voltages per bus
and the complex power output per generator), scales coefficients into
[-1, 1], and certifies optimality gaps of externally supplied local optima
against the relaxation bounds.

Variable layout (1-based): bus i owns x_{2i-1} = Re V_i and x_{2i} = Im V_i
in bus order; generators follow with two variables each.  The builder works
in per-unit throughout; cost coefficients are rescaled so the objective
stays in $/h.
"""

from __future__ import annotations

import cmath
import math
import re
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .poly import Polynomial, PopModel
from . import relaxation, sdp, sparsity


class CaseFormatError(ValueError):
    """Raised for malformed case files, with row-level context."""


class UnsupportedCaseError(ValueError):
    """Raised for cases outside the supported model (e.g. wide angle bounds)."""


# ---------------------------------------------------------------------------
# Network data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    id: int
    vmin: float                 # p.u.
    vmax: float                 # p.u.
    shunt: complex              # Y^s, p.u.
    load: complex               # S^d, p.u.


@dataclass(frozen=True)
class Generator:
    bus: int
    smin: complex               # lower corner of the power rectangle, p.u.
    smax: complex               # upper corner, p.u.
    c2: float                   # $/MW^2 h
    c1: float                   # $/MW h
    c0: float                   # $/h


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    admittance: complex         # series Y = 1/(r + jx), p.u.
    charging: float             # total line charging b^c, p.u.
    tap: complex                # complex tap ratio T
    rate: Optional[float]       # thermal limit s^u in p.u., None if absent
    angle_min: float            # radians
    angle_max: float            # radians


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: Tuple[Bus, ...]
    generators: Tuple[Generator, ...]
    branches: Tuple[Branch, ...]
    ref_bus: int

    def bus_ids(self) -> Tuple[int, ...]:
        return tuple(b.id for b in self.buses)


# ---------------------------------------------------------------------------
# Case file parsing
# ---------------------------------------------------------------------------

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def _parse_rows(name: str, body: str) -> List[List[float]]:
    rows = []
    for rowno, raw in enumerate(body.replace("\n", " ").split(";"), 1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rows.append([float(t) for t in raw.split()])
        except ValueError as exc:
            raise CaseFormatError(f"table {name}, row {rowno}: {exc}") from exc
    return rows


def parse_case(text: str, name: str = "case") -> NetworkCase:
    """Parse a grid case text file into per-unit network data.

    Angles are converted to radians, powers to per-unit; out-of-service
    generators and branches are dropped; tap ratio and phase shift combine
    into one complex ratio.
    """
    stripped = "\n".join(line.split("%", 1)[0] for line in text.splitlines())
    tables: Dict[str, List[List[float]]] = {}
    for m in _TABLE_RE.finditer(stripped):
        tables[m.group(1)] = _parse_rows(m.group(1), m.group(2))
    scalars = {m.group(1): m.group(2).strip() for m in _SCALAR_RE.finditer(stripped)}

    if "baseMVA" not in scalars:
        raise CaseFormatError("missing baseMVA")
    base = float(scalars["baseMVA"])
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseFormatError(f"missing table {required}")

    buses: List[Bus] = []
    ref_bus = None
    bus_ids = set()
    for rowno, row in enumerate(tables["bus"], 1):
        if len(row) < 13:
            raise CaseFormatError(f"table bus, row {rowno}: expected 13 columns")
        bus_id = int(row[0])
        btype = int(row[1])
        if btype == 4:
            continue  # isolated
        if btype == 3:
            if ref_bus is not None:
                raise CaseFormatError(f"table bus, row {rowno}: second reference bus")
            ref_bus = bus_id
        buses.append(
            Bus(
                id=bus_id,
                vmin=row[12],
                vmax=row[11],
                shunt=complex(row[4], row[5]) / base,
                load=complex(row[2], row[3]) / base,
            )
        )
        bus_ids.add(bus_id)
    if ref_bus is None:
        raise CaseFormatError("no reference bus (type 3) in bus table")

    gens: List[Generator] = []
    gencost = tables["gencost"]
    if len(gencost) != len(tables["gen"]):
        raise CaseFormatError("gencost row count does not match gen table")
    for rowno, (row, cost) in enumerate(zip(tables["gen"], gencost), 1):
        if len(row) < 10:
            raise CaseFormatError(f"table gen, row {rowno}: expected 10 columns")
        if int(row[7]) == 0:
            continue
        bus_id = int(row[0])
        if bus_id not in bus_ids:
            raise CaseFormatError(f"table gen, row {rowno}: unknown bus {bus_id}")
        if int(cost[0]) != 2:
            raise CaseFormatError(
                f"table gencost, row {rowno}: only polynomial cost model 2 is supported"
            )
        ncoef = int(cost[3])
        coeffs = cost[4 : 4 + ncoef]
        if len(coeffs) != ncoef:
            raise CaseFormatError(f"table gencost, row {rowno}: truncated coefficients")
        # pad to quadratic: coefficients are highest order first
        c2 = c1 = c0 = 0.0
        if ncoef >= 1:
            c0 = coeffs[-1]
        if ncoef >= 2:
            c1 = coeffs[-2]
        if ncoef >= 3:
            c2 = coeffs[-3]
        if ncoef > 3 and any(c != 0.0 for c in coeffs[: ncoef - 3]):
            raise CaseFormatError(
                f"table gencost, row {rowno}: cost degree above 2 is unsupported"
            )
        gens.append(
            Generator(
                bus=bus_id,
                smin=complex(row[9], row[4]) / base,
                smax=complex(row[8], row[3]) / base,
                c2=c2,
                c1=c1,
                c0=c0,
            )
        )

    branches: List[Branch] = []
    for rowno, row in enumerate(tables["branch"], 1):
        if len(row) < 13:
            raise CaseFormatError(f"table branch, row {rowno}: expected 13 columns")
        if int(row[10]) == 0:
            continue
        fb, tb = int(row[0]), int(row[1])
        for b in (fb, tb):
            if b not in bus_ids:
                raise CaseFormatError(f"table branch, row {rowno}: unknown bus {b}")
        r, xre = row[2], row[3]
        if r == 0.0 and xre == 0.0:
            raise CaseFormatError(f"table branch, row {rowno}: zero impedance")
        y = 1.0 / complex(r, xre)
        ratio = row[8] if row[8] != 0.0 else 1.0
        shift = math.radians(row[9])
        rate = row[5] / base if row[5] > 0.0 else None
        branches.append(
            Branch(
                from_bus=fb,
                to_bus=tb,
                admittance=y,
                charging=row[4],
                tap=ratio * cmath.exp(1j * shift),
                rate=rate,
                angle_min=math.radians(row[11]),
                angle_max=math.radians(row[12]),
            )
        )

    return NetworkCase(
        name=name,
        base_mva=base,
        buses=tuple(buses),
        generators=tuple(gens),
        branches=tuple(branches),
        ref_bus=ref_bus,
    )


def load_case(path: str) -> NetworkCase:
    with open(path, "r") as fh:
        text = fh.read()
    name = re.sub(r"\.m$", "", path.rsplit("/", 1)[-1])
    return parse_case(text, name)


# ---------------------------------------------------------------------------
# Complex-coefficient polynomials over the real variables
# ---------------------------------------------------------------------------


class _CPoly:
    """A complex polynomial expressed by real and imaginary real parts."""

    __slots__ = ("re", "im")

    def __init__(self, re: Polynomial, im: Polynomial):
        self.re = re
        self.im = im

    @staticmethod
    def const(nvars: int, z: complex) -> "_CPoly":
        return _CPoly(
            Polynomial.constant(nvars, z.real), Polynomial.constant(nvars, z.imag)
        )

    @staticmethod
    def from_real(p: Polynomial) -> "_CPoly":
        return _CPoly(p, Polynomial.zero(p.nvars))

    def conj(self) -> "_CPoly":
        return _CPoly(self.re, -self.im)

    def __add__(self, other: "_CPoly") -> "_CPoly":
        return _CPoly(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "_CPoly") -> "_CPoly":
        return _CPoly(self.re - other.re, self.im - other.im)

    def __mul__(self, other: "_CPoly") -> "_CPoly":
        return _CPoly(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def scale(self, z: complex) -> "_CPoly":
        return _CPoly(
            self.re.scale(z.real) - self.im.scale(z.imag),
            self.re.scale(z.imag) + self.im.scale(z.real),
        )


# ---------------------------------------------------------------------------
# POP construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcopfOptions:
    flow_elimination: bool = True
    first_order_thermal: bool = False
    thermal_tangents: int = 8
    # Tangent cuts are emitted only for limits below this many p.u.; larger
    # ratings are treated as non-binding at the first relaxation order.
    # (The reported first-order bounds of the reference benchmark are only
    # reproduced under such a cap; quartic thermal constraints are never
    # capped.)
    first_order_rate_cap: Optional[float] = 1.0


@dataclass(frozen=True)
class AcopfPop:
    """The AC-OPF POP together with its variable map and scaling record."""

    pop: PopModel
    case: NetworkCase
    bus_vars: Dict[int, Tuple[int, int]]        # bus id -> (Re V idx, Im V idx)
    gen_vars: Tuple[Tuple[int, int], ...]       # per generator (Re S, Im S)
    flow_vars: Tuple[Tuple[int, int], ...]      # per directed branch when kept
    options: AcopfOptions
    objective_divisor: float = 1.0
    constraint_divisors: Tuple[float, ...] = ()  # inequalities then equalities

    @property
    def nvars(self) -> int:
        return self.pop.nvars

    def unscale_bound(self, bound: float) -> float:
        return bound * self.objective_divisor


def build_pop(case: NetworkCase, options: AcopfOptions = AcopfOptions()) -> AcopfPop:
    """Build the real-variable AC-OPF POP.

    With flow elimination (the default) the power flow along each branch is
    substituted by its quadratic expression in the voltages, which turns
    each thermal limit into a quartic constraint; with
    ``first_order_thermal`` the quartic disc is replaced by evenly spaced
    tangent half-planes (an outer approximation, so bounds stay valid).
    """
    nb, ng = len(case.buses), len(case.generators)
    ndirected = 2 * len(case.branches)
    nvars = 2 * nb + 2 * ng + (0 if options.flow_elimination else 2 * ndirected)

    bus_vars: Dict[int, Tuple[int, int]] = {}
    for i, bus in enumerate(case.buses):
        bus_vars[bus.id] = (2 * i + 1, 2 * i + 2)
    gen_vars = tuple(
        (2 * nb + 2 * k + 1, 2 * nb + 2 * k + 2) for k in range(ng)
    )
    flow_vars: Tuple[Tuple[int, int], ...] = ()
    if not options.flow_elimination:
        base_idx = 2 * nb + 2 * ng
        flow_vars = tuple(
            (base_idx + 2 * e + 1, base_idx + 2 * e + 2) for e in range(ndirected)
        )

    def V(bus_id: int) -> _CPoly:
        re_i, im_i = bus_vars[bus_id]
        return _CPoly(Polynomial.variable(nvars, re_i), Polynomial.variable(nvars, im_i))

    def Sgen(k: int) -> _CPoly:
        re_i, im_i = gen_vars[k]
        return _CPoly(Polynomial.variable(nvars, re_i), Polynomial.variable(nvars, im_i))

    # branch flow expressions S_ij, S_ji as polynomials in the voltages
    flow_exprs: List[_CPoly] = []   # indexed 2*e (from side), 2*e+1 (to side)
    for br in case.branches:
        vi, vj = V(br.from_bus), V(br.to_bus)
        yc = br.admittance.conjugate()
        shunt_from = yc - 1j * br.charging / 2.0
        t2 = abs(br.tap) ** 2
        vi2 = (vi * vi.conj())
        vj2 = (vj * vj.conj())
        vivj = vi * vj.conj()
        s_from = vi2.scale(shunt_from / t2) - vivj.scale(yc / br.tap)
        s_to = vj2.scale(shunt_from) - vivj.conj().scale(yc / br.tap.conjugate())
        # |V|^2 and the flow expressions must be real-imag consistent:
        # products of conjugates cancel imaginary parts structurally.
        if not vi2.im.is_zero() or not vj2.im.is_zero():
            raise AssertionError("imaginary residual in |V|^2 expansion")
        flow_exprs.append(s_from)
        flow_exprs.append(s_to)

    ineqs: List[Polynomial] = []
    eqs: List[Polynomial] = []

    # generator box constraints
    for k, gen in enumerate(case.generators):
        sg = Sgen(k)
        ineqs.append(sg.re - Polynomial.constant(nvars, gen.smin.real))
        ineqs.append(Polynomial.constant(nvars, gen.smax.real) - sg.re)
        ineqs.append(sg.im - Polynomial.constant(nvars, gen.smin.imag))
        ineqs.append(Polynomial.constant(nvars, gen.smax.imag) - sg.im)

    # voltage magnitude bounds
    for bus in case.buses:
        v2 = (V(bus.id) * V(bus.id).conj()).re
        ineqs.append(v2 - Polynomial.constant(nvars, bus.vmin**2))
        ineqs.append(Polynomial.constant(nvars, bus.vmax**2) - v2)

    # angle difference bounds (tan transform, valid on Re(Vi Vj*) >= 0)
    for br in case.branches:
        if not (-math.pi / 2 < br.angle_min <= br.angle_max < math.pi / 2):
            raise UnsupportedCaseError(
                f"branch {br.from_bus}-{br.to_bus}: angle bounds outside (-pi/2, pi/2)"
            )
        w = V(br.from_bus) * V(br.to_bus).conj()
        ineqs.append(w.re)
        ineqs.append(w.im - w.re.scale(math.tan(br.angle_min)))
        ineqs.append(w.re.scale(math.tan(br.angle_max)) - w.im)

    # thermal limits, both flow directions
    def flow_poly(e: int) -> _CPoly:
        if options.flow_elimination:
            return flow_exprs[e]
        re_i, im_i = flow_vars[e]
        return _CPoly(Polynomial.variable(nvars, re_i), Polynomial.variable(nvars, im_i))

    for bidx, br in enumerate(case.branches):
        if br.rate is None:
            continue
        if (
            options.first_order_thermal
            and options.first_order_rate_cap is not None
            and br.rate > options.first_order_rate_cap
        ):
            continue
        for e in (2 * bidx, 2 * bidx + 1):
            s = flow_poly(e)
            if options.first_order_thermal and options.flow_elimination:
                nt = options.thermal_tangents
                for t in range(nt):
                    phi = 2.0 * math.pi * t / nt
                    cut = (
                        Polynomial.constant(nvars, br.rate)
                        - s.re.scale(math.cos(phi))
                        - s.im.scale(math.sin(phi))
                    )
                    ineqs.append(cut)
            else:
                mag2 = s.re * s.re + s.im * s.im
                ineqs.append(Polynomial.constant(nvars, br.rate**2) - mag2)

    # reference bus angle
    ref_im = Polynomial.variable(nvars, bus_vars[case.ref_bus][1])
    eqs.append(ref_im)

    # power balance (complex equation -> two real equalities per bus)
    gens_at: Dict[int, List[int]] = {}
    for k, gen in enumerate(case.generators):
        gens_at.setdefault(gen.bus, []).append(k)
    incident: Dict[int, List[int]] = {}
    for bidx, br in enumerate(case.branches):
        incident.setdefault(br.from_bus, []).append(2 * bidx)
        incident.setdefault(br.to_bus, []).append(2 * bidx + 1)
    for bus in case.buses:
        total = _CPoly.const(nvars, -bus.load)
        for k in gens_at.get(bus.id, []):
            total = total + Sgen(k)
        v2 = (V(bus.id) * V(bus.id).conj())
        total = total - v2.scale(bus.shunt.conjugate())
        for e in incident.get(bus.id, []):
            total = total - flow_poly(e)
        eqs.append(total.re)
        eqs.append(total.im)

    # definition equalities for explicit flow variables
    if not options.flow_elimination:
        for e in range(ndirected):
            expr = flow_exprs[e]
            re_i, im_i = flow_vars[e]
            eqs.append(Polynomial.variable(nvars, re_i) - expr.re)
            eqs.append(Polynomial.variable(nvars, im_i) - expr.im)

    # objective in $/h with per-unit generator outputs
    obj = Polynomial.zero(nvars)
    base = case.base_mva
    for k, gen in enumerate(case.generators):
        sg_re = Sgen(k).re
        if gen.c2:
            obj = obj + (sg_re * sg_re).scale(gen.c2 * base * base)
        if gen.c1:
            obj = obj + sg_re.scale(gen.c1 * base)
        if gen.c0:
            obj = obj + Polynomial.constant(nvars, gen.c0)

    pop = PopModel(obj, tuple(ineqs), tuple(eqs))
    return AcopfPop(
        pop=pop,
        case=case,
        bus_vars=bus_vars,
        gen_vars=gen_vars,
        flow_vars=flow_vars,
        options=options,
    )


def scale_coefficients(apop: AcopfPop) -> AcopfPop:
    """Divide every constraint and the objective by its largest |coefficient|.

    The divisors are recorded so bounds can be reported unscaled; scaling is
    idempotent.  Constraints that vanish identically are dropped with a
    warning divisor of 0 recorded nowhere (they carry no information).
    """
    if apop.constraint_divisors:
        return apop  # already scaled

    def scaled(p: Polynomial) -> Tuple[Polynomial, float]:
        mx = p.max_abs_coefficient()
        if mx == 0.0 or mx == 1.0:
            return p, 1.0
        return p.scale(1.0 / mx), mx

    ineqs, eqs, divisors = [], [], []
    for g in apop.pop.inequalities:
        if g.is_zero():
            continue
        gs, dv = scaled(g)
        ineqs.append(gs)
        divisors.append(dv)
    for g in apop.pop.equalities:
        if g.is_zero():
            continue
        gs, dv = scaled(g)
        eqs.append(gs)
        divisors.append(dv)
    obj_s, obj_div = scaled(apop.pop.objective)
    pop = PopModel(obj_s, tuple(ineqs), tuple(eqs))
    return replace(
        apop,
        pop=pop,
        objective_divisor=obj_div,
        constraint_divisors=tuple(divisors),
    )


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------

LEVEL_FIRST_ORDER = "first_order"
LEVEL_MINIMAL_INITIAL = "minimal_initial"


@dataclass(frozen=True)
class GapCertificate:
    """Outcome of comparing a local optimum against a relaxation bound."""

    ac_value: float
    lower_bound: float
    gap_percent: float
    certified_1pct: bool
    relaxation_used: str
    solver_status: str = ""
    mb: int = 0
    mc: int = 0
    timings: Dict[str, float] = field(default_factory=dict)

    def table_row(self, name: str) -> str:
        t = sum(self.timings.values())
        return (
            f"{name:18s} {self.ac_value:12.4e} {self.lower_bound:12.4e} {t:8.2f} "
            f"{self.mb:4d} {self.gap_percent:7.2f} {self.mc:4d}  {self.solver_status}"
        )

    def record(self, name: str) -> Dict:
        return {
            "case": name,
            "ac": self.ac_value,
            "opt": self.lower_bound,
            "gap_percent": self.gap_percent,
            "certified_1pct": self.certified_1pct,
            "relaxation": self.relaxation_used,
            "status": self.solver_status,
            "mb": self.mb,
            "mc": self.mc,
            "timings": dict(self.timings),
        }


def build_relaxation(
    case: NetworkCase,
    level: str,
    s: int = 1,
    tangents: int = 8,
    ts_mode: str = sparsity.MAXIMAL_COMPONENTS,
) -> Tuple[AcopfPop, relaxation.BlockSdp]:
    """Build and scale the POP, then assemble the requested relaxation."""
    if level == LEVEL_FIRST_ORDER:
        options = AcopfOptions(
            first_order_thermal=True, thermal_tangents=tangents
        )
        apop = scale_coefficients(build_pop(case, options))
        block_sdp = relaxation.assemble_cs_tssos(apop.pop, d=1, s=s, ts_mode=ts_mode)
    elif level == LEVEL_MINIMAL_INITIAL:
        options = AcopfOptions(first_order_thermal=False)
        apop = scale_coefficients(build_pop(case, options))
        block_sdp = relaxation.assemble_minimal_initial(apop.pop, s=s, ts_mode=ts_mode)
    else:
        raise ValueError(f"unknown relaxation level {level!r}")
    return apop, block_sdp


def certify(
    case: NetworkCase,
    ac_value: float,
    level: str = LEVEL_MINIMAL_INITIAL,
    s: int = 1,
    tangents: int = 8,
    solver_options: Optional[sdp.SolverOptions] = None,
) -> GapCertificate:
    """Algorithm: build the POP, relax, solve, and report the optimality gap.

    The local optimum ``ac_value`` is ingested, not computed.  Solver
    failures are reported in the certificate status rather than raised.
    """
    if ac_value <= 0:
        raise ValueError("ac_value must be positive")
    t0 = time.perf_counter()
    apop, block_sdp = build_relaxation(case, level, s=s, tangents=tangents)
    t1 = time.perf_counter()
    conic = sdp.to_conic(block_sdp)
    t2 = time.perf_counter()
    solution = sdp.solve(conic, solver_options or sdp.SolverOptions())
    t3 = time.perf_counter()

    usable = solution.status in (sdp.STATUS_OPTIMAL, sdp.STATUS_SLOW)
    # the dual value is the certified side of the pair; at optimal status it
    # agrees with the primal value to solver tolerance
    bound = apop.unscale_bound(solution.dual_objective) if usable else float("nan")
    gap = (ac_value - bound) / ac_value * 100.0 if usable else float("nan")
    return GapCertificate(
        ac_value=ac_value,
        lower_bound=bound,
        gap_percent=gap,
        certified_1pct=bool(usable and gap < 1.0),
        relaxation_used=level,
        solver_status=solution.status,
        mb=block_sdp.max_block_size(),
        mc=block_sdp.max_clique_size,
        timings={
            "preprocessing": t1 - t0,
            "build_sdp": t2 - t1,
            "solve": t3 - t2,
        },
    )

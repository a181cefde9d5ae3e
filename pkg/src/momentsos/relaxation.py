"""Assembly of moment relaxations as block SDPs over shared moment variables.

Three assemblers are provided: the dense moment relaxation, the sparse
relaxation driven by correlative plus term sparsity, and the minimal
initial relaxation with per-clique orders and additional full first-order
moment blocks.  All of them emit a :class:`BlockSdp`, a purely structural
object: every matrix entry is an affine form in the moment variables
``y_alpha`` (the normalization ``y_0 = 1`` is kept as an explicit linear
equation and only folded in during conversion to conic form).

Block assembly is independent per (clique, constraint) pair; the shared
variable space is just the union of exponents referenced anywhere.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

from .poly import (
    Exponent,
    ZERO_EXPONENT,
    PopModel,
    Polynomial,
    exponent_add,
    grlex_key,
    half_degree,
    minimum_order,
    monomial_basis,
)
from . import sparsity
from .sparsity import (
    APPROX_SMALLEST,
    MAXIMAL_COMPONENTS,
    CliqueDecomposition,
    SparsityError,
    TsGraphFamily,
    build_ts_family,
    chordal_extension,
    partition_constraints,
)

LinForm = Dict[Exponent, float]


class AssemblyError(ValueError):
    """Raised when a relaxation cannot be assembled."""


@dataclass(frozen=True)
class MomentBlockSpec:
    """Descriptor of one emitted block.

    ``kind`` is "moment", "localizing" or "first_order_moment"; ``clique``
    is the variable-clique index (-1 for dense blocks); ``constraint``
    identifies the localized constraint as ("ineq"|"eq", position) or None;
    ``relation`` is "psd" or "zero".
    """

    kind: str
    clique: int
    basis: Tuple[Exponent, ...]
    constraint: Optional[Tuple[str, int]]
    relation: str

    @property
    def dimension(self) -> int:
        return len(self.basis)


@dataclass(frozen=True)
class Block:
    spec: MomentBlockSpec
    entries: Mapping[Tuple[int, int], LinForm]  # upper triangle incl. diagonal


@dataclass(frozen=True)
class BlockSdp:
    """Block-PSD plus linear-constraint form of a moment relaxation."""

    blocks: Tuple[Block, ...]
    linear_ineqs: Tuple[LinForm, ...]          # each form >= 0
    linear_eqs: Tuple[Tuple[LinForm, float], ...]  # each form == rhs
    objective: LinForm
    max_clique_size: int
    label: str = ""

    def variables(self) -> Tuple[Exponent, ...]:
        seen = set()
        for block in self.blocks:
            for form in block.entries.values():
                seen.update(form)
        for form in self.linear_ineqs:
            seen.update(form)
        for form, _ in self.linear_eqs:
            seen.update(form)
        seen.update(self.objective)
        return tuple(sorted(seen, key=grlex_key))

    def max_block_size(self) -> int:
        return max((b.spec.dimension for b in self.blocks), default=0)

    def psd_block_dims(self) -> Tuple[int, ...]:
        return tuple(b.spec.dimension for b in self.blocks if b.spec.relation == "psd")

    def describe_blocks(self) -> str:
        lines = []
        for b in self.blocks:
            spec = b.spec
            tag = spec.kind if spec.constraint is None else f"{spec.kind}[{spec.constraint[0]}{spec.constraint[1]}]"
            lines.append(f"clique {spec.clique:3d}  {tag:28s} dim {spec.dimension:4d}  {spec.relation}")
        return "\n".join(lines)


def _moment_entries(basis: Sequence[Exponent]) -> Dict[Tuple[int, int], LinForm]:
    entries: Dict[Tuple[int, int], LinForm] = {}
    for i in range(len(basis)):
        for j in range(i, len(basis)):
            entries[(i, j)] = {exponent_add(basis[i], basis[j]): 1.0}
    return entries


def _localizing_entries(
    g: Polynomial, basis: Sequence[Exponent]
) -> Dict[Tuple[int, int], LinForm]:
    entries: Dict[Tuple[int, int], LinForm] = {}
    for i in range(len(basis)):
        for j in range(i, len(basis)):
            shift = exponent_add(basis[i], basis[j])
            form: LinForm = {}
            for alpha, c in g.terms.items():
                e = exponent_add(alpha, shift)
                form[e] = form.get(e, 0.0) + c
            entries[(i, j)] = {e: c for e, c in form.items() if c != 0.0}
    return entries


def _pattern_entries(
    g: Polynomial, graph: sparsity.MonomialGraph
) -> Dict[Tuple[int, int], LinForm]:
    """Entries of a zero-relation localizing block on the TS pattern only."""
    entries: Dict[Tuple[int, int], LinForm] = {}
    pattern = [(i, i) for i in range(len(graph.nodes))] + sorted(graph.edges)
    for i, j in pattern:
        shift = exponent_add(graph.nodes[i], graph.nodes[j])
        form: LinForm = {}
        for alpha, c in g.terms.items():
            e = exponent_add(alpha, shift)
            form[e] = form.get(e, 0.0) + c
        entries[(i, j)] = {e: c for e, c in form.items() if c != 0.0}
    return entries


def _normalization() -> Tuple[LinForm, float]:
    return ({ZERO_EXPONENT: 1.0}, 1.0)


# ---------------------------------------------------------------------------
# Dense relaxation
# ---------------------------------------------------------------------------


def assemble_dense(pop: PopModel, d: int) -> BlockSdp:
    """The order-d dense moment relaxation: one full moment matrix, one
    localizing matrix per constraint (zero relation for equalities)."""
    if d < minimum_order(pop):
        raise AssemblyError(f"order {d} below minimum order {minimum_order(pop)}")
    allvars = tuple(range(1, pop.nvars + 1))
    blocks = [
        Block(
            MomentBlockSpec("moment", -1, monomial_basis(allvars, d), None, "psd"),
            _moment_entries(monomial_basis(allvars, d)),
        )
    ]
    for j, g in enumerate(pop.inequalities):
        basis = monomial_basis(allvars, d - half_degree(g))
        blocks.append(
            Block(
                MomentBlockSpec("localizing", -1, basis, ("ineq", j), "psd"),
                _localizing_entries(g, basis),
            )
        )
    for j, g in enumerate(pop.equalities):
        basis = monomial_basis(allvars, d - half_degree(g))
        blocks.append(
            Block(
                MomentBlockSpec("localizing", -1, basis, ("eq", j), "zero"),
                _localizing_entries(g, basis),
            )
        )
    return BlockSdp(
        blocks=tuple(blocks),
        linear_ineqs=(),
        linear_eqs=(_normalization(),),
        objective=dict(pop.objective.terms),
        max_clique_size=pop.nvars,
        label=f"dense d={d}",
    )


# ---------------------------------------------------------------------------
# Sparse relaxations
# ---------------------------------------------------------------------------


def _prune_subset_moment_blocks(blocks: list) -> list:
    """Drop moment blocks whose basis is contained in another moment block.

    A principal submatrix of a PSD moment matrix is PSD, so such blocks are
    implied; overlapping cliques produce them routinely and they only add
    degeneracy to the SDP.
    """
    moment_like = [
        (i, frozenset(b.spec.basis))
        for i, b in enumerate(blocks)
        if b.spec.kind in ("moment", "first_order_moment")
    ]
    moment_like.sort(key=lambda t: (-len(t[1]), t[0]))
    kept_sets: list = []
    drop: set = set()
    for i, basis in moment_like:
        if any(basis <= other for other in kept_sets):
            drop.add(i)
        else:
            kept_sets.append(basis)
    return [b for i, b in enumerate(blocks) if i not in drop]


def _ts_blocks(
    pop: PopModel,
    decomposition: CliqueDecomposition,
    family: TsGraphFamily,
    ts_mode: str,
) -> Tuple[Block, ...]:
    """Split each per-(clique, constraint) graph into blocks via its cliques."""
    blocks: list = []
    for k in range(decomposition.ncliques):
        graph = family.graphs[(k, "mom", -1)]
        for node_clique in graph.node_cliques(ts_mode):
            basis = tuple(graph.nodes[i] for i in node_clique)
            blocks.append(
                Block(
                    MomentBlockSpec("moment", k, basis, None, "psd"),
                    _moment_entries(basis),
                )
            )
        for kind, group in (("ineq", decomposition.ineq_groups[k]), ("eq", decomposition.eq_groups[k])):
            for j in group:
                g = pop.inequalities[j] if kind == "ineq" else pop.equalities[j]
                graph = family.graphs[(k, kind, j)]
                if kind == "ineq":
                    for node_clique in graph.node_cliques(ts_mode):
                        basis = tuple(graph.nodes[i] for i in node_clique)
                        blocks.append(
                            Block(
                                MomentBlockSpec("localizing", k, basis, (kind, j), "psd"),
                                _localizing_entries(g, basis),
                            )
                        )
                else:
                    # equality: the pattern entries are forced to zero
                    blocks.append(
                        Block(
                            MomentBlockSpec("localizing", k, graph.nodes, (kind, j), "zero"),
                            _pattern_entries(g, graph),
                        )
                    )
    return tuple(blocks)


def _residual_constraints(
    pop: PopModel, decomposition: CliqueDecomposition
) -> Tuple[Tuple[LinForm, ...], Tuple[Tuple[LinForm, float], ...]]:
    ineqs = tuple(dict(pop.inequalities[j].terms) for j in decomposition.ineq_residual)
    eqs = tuple((dict(pop.equalities[j].terms), 0.0) for j in decomposition.eq_residual)
    return ineqs, eqs + (_normalization(),)


def assemble_cs_tssos(
    pop: PopModel,
    d: int,
    s: int,
    cs_mode: str = APPROX_SMALLEST,
    ts_mode: str = MAXIMAL_COMPONENTS,
) -> BlockSdp:
    """The sparse moment relaxation at relaxation order d and sparse order s.

    Constraints of half-degree d stay as scalar linear constraints; all
    others are localized inside the variable clique that covers them, and
    every moment or localizing matrix is split along the cliques of its
    term-sparsity graph at sparse order s.
    """
    if s < 1:
        raise AssemblyError("sparse order s must be >= 1")
    csp = sparsity.build_csp_graph(pop, d)
    ext = chordal_extension(csp, cs_mode)
    decomposition = partition_constraints(pop, ext.maximal_cliques, sparsity.UNIFORM, d=d)
    family = build_ts_family(pop, decomposition, [d] * decomposition.ncliques, s, ts_mode)
    blocks = tuple(_prune_subset_moment_blocks(list(_ts_blocks(pop, decomposition, family, ts_mode))))
    ineqs, eqs = _residual_constraints(pop, decomposition)
    return BlockSdp(
        blocks=blocks,
        linear_ineqs=ineqs,
        linear_eqs=eqs,
        objective=dict(pop.objective.terms),
        max_clique_size=decomposition.max_clique_size(),
        label=f"cs-tssos d={d} s={s}",
    )


def assemble_minimal_initial(
    pop: PopModel,
    s: int,
    ts_mode: str = MAXIMAL_COMPONENTS,
    cs_mode: str = APPROX_SMALLEST,
) -> BlockSdp:
    """The minimal initial relaxation: per-clique orders from the icsp graph.

    Each clique k gets its moment matrix at its own order o_k (split by term
    sparsity), localizing blocks for the constraints it covers, and a full
    first-order moment matrix that strengthens the relaxation; constraints
    spanning several cliques contribute scalar linear constraints.
    """
    if s < 1:
        raise AssemblyError("sparse order s must be >= 1")
    icsp = sparsity.build_icsp_graph(pop)
    ext = chordal_extension(icsp, cs_mode)
    decomposition = partition_constraints(pop, ext.maximal_cliques, sparsity.MINIMAL)
    orders = decomposition.per_clique_order
    family = build_ts_family(pop, decomposition, orders, s, ts_mode)
    blocks = list(_ts_blocks(pop, decomposition, family, ts_mode))
    for k, clique in enumerate(decomposition.cliques):
        basis = monomial_basis(clique, 1)
        blocks.append(
            Block(
                MomentBlockSpec("first_order_moment", k, basis, None, "psd"),
                _moment_entries(basis),
            )
        )
    blocks = _prune_subset_moment_blocks(blocks)
    ineqs, eqs = _residual_constraints(pop, decomposition)
    return BlockSdp(
        blocks=tuple(blocks),
        linear_ineqs=ineqs,
        linear_eqs=eqs,
        objective=dict(pop.objective.terms),
        max_clique_size=decomposition.max_clique_size(),
        label=f"minimal-initial s={s}",
    )


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass
class RelaxationReport:
    """The per-run summary columns: bound, structure sizes, status, timing."""

    bound: float
    mc: int
    mb: int
    solver_status: str
    timings: Dict[str, float] = field(default_factory=dict)

    def table_row(self, name: str = "", ac: Optional[float] = None) -> str:
        gap = ""
        if ac is not None and ac != 0:
            gap = f"{(ac - self.bound) / ac * 100.0:8.2f}"
        t = sum(self.timings.values())
        return (
            f"{name:16s} {self.bound:14.6e} {t:8.2f} {self.mb:5d} {gap:>8s} {self.mc:5d}"
            f"  {self.solver_status}"
        )


def report(sdp: BlockSdp, solution) -> RelaxationReport:
    """Materialize the summary for a solved (or merely assembled) relaxation."""
    bound = float("nan")
    status = "unsolved"
    timings: Dict[str, float] = {}
    if solution is not None:
        bound = solution.primal_objective
        status = solution.status
        timings = dict(getattr(solution, "timings", {}) or {})
    return RelaxationReport(
        bound=bound,
        mc=sdp.max_clique_size,
        mb=sdp.max_block_size(),
        solver_status=status,
        timings=timings,
    )


def timed(fn, *args, **kwargs):
    """Run fn and return (result, elapsed seconds)."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

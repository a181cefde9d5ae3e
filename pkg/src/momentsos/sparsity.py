"""Correlative and term sparsity machinery.

Builds variable-level sparsity graphs (csp / icsp), chordal extensions with
their maximal cliques, the partition of constraints onto variable cliques,
and the iterated monomial (term sparsity) graphs that induce the block
structure of the sparse moment relaxations.

Vertices of variable graphs are 1-based variable indices.  Monomial graphs
carry exponents with global variable indices; their edges are index pairs
into the node list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Sequence, Tuple

from .poly import (
    Exponent,
    ZERO_EXPONENT,
    PopModel,
    Polynomial,
    exponent_add,
    exponent_degree,
    exponent_is_even,
    exponent_support,
    grlex_key,
    half_degree,
    minimum_order,
    monomial_basis,
)

Edge = Tuple[int, int]

APPROX_SMALLEST = "approx_smallest"
MAXIMAL_COMPONENTS = "maximal_components"


class SparsityError(ValueError):
    """Raised for invalid graphs or decompositions."""


def _edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class VarGraph:
    """Undirected graph on variable indices 1..nvertices, no self-loops."""

    nvertices: int
    edges: FrozenSet[Edge]

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise SparsityError(f"self-loop at vertex {i}")
            if not (1 <= i <= self.nvertices and 1 <= j <= self.nvertices):
                raise SparsityError(f"edge ({i},{j}) outside 1..{self.nvertices}")
            if i > j:
                raise SparsityError(f"edge ({i},{j}) not normalized")

    @staticmethod
    def from_pairs(nvertices: int, pairs: Iterable[Tuple[int, int]]) -> "VarGraph":
        return VarGraph(nvertices, frozenset(_edge(i, j) for i, j in pairs if i != j))

    def adjacency(self) -> Dict[int, set]:
        adj: Dict[int, set] = {v: set() for v in range(1, self.nvertices + 1)}
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def is_subgraph_of(self, other: "VarGraph") -> bool:
        return self.edges <= other.edges

    def edge_list_text(self) -> str:
        """Plain-text edge list, one 'i j' pair per line, sorted."""
        return "\n".join(f"{i} {j}" for i, j in sorted(self.edges)) + "\n"


# ---------------------------------------------------------------------------
# csp / icsp graphs
# ---------------------------------------------------------------------------


def build_csp_graph(pop: PopModel, d: int) -> VarGraph:
    """Correlative sparsity pattern graph at relaxation order d.

    An edge {i, j} exists when the pair co-occurs in a monomial of the
    objective or of a constraint of maximal half-degree d, or anywhere in
    the variable set of a constraint of smaller half-degree.
    """
    if d < minimum_order(pop):
        raise SparsityError(f"order {d} below minimum order {minimum_order(pop)}")
    n = pop.nvars
    pairs: set = set()

    def add_monomial_pairs(p: Polynomial):
        for e in p.terms:
            sup = exponent_support(e)
            for a in range(len(sup)):
                for b in range(a + 1, len(sup)):
                    pairs.add(_edge(sup[a], sup[b]))

    add_monomial_pairs(pop.objective)
    for g in pop.constraints():
        if half_degree(g) == d:
            # maximal-degree constraints contribute per monomial
            add_monomial_pairs(g)
        else:
            sup = g.variables()
            for a in range(len(sup)):
                for b in range(a + 1, len(sup)):
                    pairs.add(_edge(sup[a], sup[b]))
    return VarGraph(n, frozenset(pairs))


def build_icsp_graph(pop: PopModel) -> VarGraph:
    """Monomial-level sparsity graph used by the minimal initial relaxation.

    An edge {i, j} exists only when both variables appear in one monomial of
    the objective or of any constraint; this is a subgraph of the csp graph
    at every admissible order.
    """
    n = pop.nvars
    pairs: set = set()
    for p in (pop.objective,) + pop.constraints():
        for e in p.terms:
            sup = exponent_support(e)
            for a in range(len(sup)):
                for b in range(a + 1, len(sup)):
                    pairs.add(_edge(sup[a], sup[b]))
    return VarGraph(n, frozenset(pairs))


# ---------------------------------------------------------------------------
# Chordal extensions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChordalExtension:
    """A chordal supergraph with a perfect elimination ordering."""

    graph: VarGraph
    elimination_order: Tuple[int, ...]
    maximal_cliques: Tuple[Tuple[int, ...], ...]


def verify_peo(graph_adj: Mapping[int, set], order: Sequence[int]) -> bool:
    """Check that each vertex's later neighbors form a clique."""
    position = {v: k for k, v in enumerate(order)}
    for v in order:
        later = [u for u in graph_adj[v] if position[u] > position[v]]
        for a in range(len(later)):
            for b in range(a + 1, len(later)):
                if later[b] not in graph_adj[later[a]]:
                    return False
    return True


def _cliques_from_peo(adj: Mapping[int, set], order: Sequence[int]) -> Tuple[Tuple[int, ...], ...]:
    position = {v: k for k, v in enumerate(order)}
    candidates = []
    for v in order:
        clique = {v} | {u for u in adj[v] if position[u] > position[v]}
        candidates.append(frozenset(clique))
    # keep only inclusion-maximal candidate cliques
    unique = sorted(set(candidates), key=len, reverse=True)
    maximal: list = []
    for c in unique:
        if not any(c < m for m in maximal):
            maximal.append(c)
    return tuple(sorted(tuple(sorted(c)) for c in maximal))


def chordal_extension(g: VarGraph, mode: str = APPROX_SMALLEST) -> ChordalExtension:
    """Extend a graph to a chordal one and enumerate its maximal cliques.

    ``approx_smallest`` runs greedy minimum-fill elimination (ties broken by
    minimum degree, then lowest vertex index) which keeps cliques small.
    ``maximal_components`` completes every connected component into a clique.
    """
    adj = g.adjacency()
    if mode == MAXIMAL_COMPONENTS:
        seen: set = set()
        comps: list = []
        for v in range(1, g.nvertices + 1):
            if v in seen:
                continue
            stack, comp = [v], {v}
            seen.add(v)
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if w not in comp:
                        comp.add(w)
                        seen.add(w)
                        stack.append(w)
            comps.append(tuple(sorted(comp)))
        comps.sort()
        edges = set(g.edges)
        for comp in comps:
            for a in range(len(comp)):
                for b in range(a + 1, len(comp)):
                    edges.add((comp[a], comp[b]))
        order = tuple(v for comp in comps for v in comp)
        return ChordalExtension(VarGraph(g.nvertices, frozenset(edges)), order, tuple(comps))

    if mode != APPROX_SMALLEST:
        raise SparsityError(f"unknown chordal extension mode {mode!r}")

    work = {v: set(ns) for v, ns in adj.items()}
    filled = {v: set(ns) for v, ns in adj.items()}
    order: list = []
    remaining = set(work)
    while remaining:
        best = None
        for v in sorted(remaining):
            ns = [u for u in work[v]]
            fill = 0
            for a in range(len(ns)):
                for b in range(a + 1, len(ns)):
                    if ns[b] not in work[ns[a]]:
                        fill += 1
            key = (fill, len(ns), v)
            if best is None or key < best[0]:
                best = (key, v)
        v = best[1]
        order.append(v)
        ns = sorted(work[v])
        for a in range(len(ns)):
            for b in range(a + 1, len(ns)):
                u, w = ns[a], ns[b]
                if w not in work[u]:
                    work[u].add(w)
                    work[w].add(u)
                    filled[u].add(w)
                    filled[w].add(u)
        for u in ns:
            work[u].discard(v)
        remaining.discard(v)
        del work[v]

    edges = frozenset(
        _edge(v, u) for v, ns in filled.items() for u in ns if v < u
    )
    ext = VarGraph(g.nvertices, edges)
    adj_ext = ext.adjacency()
    if not verify_peo(adj_ext, order):
        raise SparsityError("internal error: elimination order is not a PEO")
    cliques = _cliques_from_peo(adj_ext, order)
    return ChordalExtension(ext, tuple(order), cliques)


def maximal_cliques(g: VarGraph) -> Tuple[Tuple[int, ...], ...]:
    """Maximal cliques of a chordal graph via maximum cardinality search.

    Raises ``SparsityError`` when the input is not chordal (the MCS order
    fails the perfect-elimination test).
    """
    adj = g.adjacency()
    weight = {v: 0 for v in adj}
    unnumbered = set(adj)
    mcs_rev: list = []
    while unnumbered:
        v = max(sorted(unnumbered), key=lambda u: weight[u])
        mcs_rev.append(v)
        unnumbered.discard(v)
        for u in adj[v]:
            if u in unnumbered:
                weight[u] += 1
    order = list(reversed(mcs_rev))
    if not verify_peo(adj, order):
        raise SparsityError("graph is not chordal (no perfect elimination ordering)")
    return _cliques_from_peo(adj, order)


# ---------------------------------------------------------------------------
# Constraint partition over cliques
# ---------------------------------------------------------------------------

UNIFORM = "uniform"
MINIMAL = "minimal"


@dataclass(frozen=True)
class CliqueDecomposition:
    """Variable cliques with constraints routed to them.

    ``ineq_groups[k]`` / ``eq_groups[k]`` hold 0-based positions into
    ``pop.inequalities`` / ``pop.equalities``; the residual tuples are the
    J' / K' constraints that are handled as scalar linear constraints.
    ``per_clique_order`` is present only for the minimal (icsp) variant.
    """

    cliques: Tuple[Tuple[int, ...], ...]
    ineq_groups: Tuple[Tuple[int, ...], ...]
    ineq_residual: Tuple[int, ...]
    eq_groups: Tuple[Tuple[int, ...], ...]
    eq_residual: Tuple[int, ...]
    per_clique_order: Optional[Tuple[int, ...]] = None

    @property
    def ncliques(self) -> int:
        return len(self.cliques)

    def max_clique_size(self) -> int:
        return max((len(c) for c in self.cliques), default=0)

    def cliques_text(self) -> str:
        return "\n".join("{" + ", ".join(str(v) for v in c) + "}" for c in self.cliques) + "\n"


def _containing_clique(cliques: Sequence[Tuple[int, ...]], variables: Tuple[int, ...]) -> Optional[int]:
    vs = set(variables)
    for k, clique in enumerate(cliques):
        if vs <= set(clique):
            return k
    return None


def partition_constraints(
    pop: PopModel,
    cliques: Sequence[Tuple[int, ...]],
    variant: str = UNIFORM,
    d: Optional[int] = None,
) -> CliqueDecomposition:
    """Assign each constraint to the lowest-index clique covering its variables.

    In the uniform variant, constraints with half-degree equal to the
    relaxation order d form the residual J'/K' sets; all others must fit in
    a clique.  In the minimal variant a constraint goes to the residual
    exactly when no clique contains its variables, the objective is split
    term-by-term over the cliques, and each clique receives its own
    relaxation order.
    """
    cliques = tuple(tuple(sorted(c)) for c in cliques)
    p = len(cliques)
    ineq_groups: list = [[] for _ in range(p)]
    eq_groups: list = [[] for _ in range(p)]
    ineq_residual: list = []
    eq_residual: list = []

    if variant == UNIFORM:
        if d is None:
            raise SparsityError("uniform variant requires the relaxation order d")
        for lists, groups, residual in (
            (pop.inequalities, ineq_groups, ineq_residual),
            (pop.equalities, eq_groups, eq_residual),
        ):
            for j, g in enumerate(lists):
                if half_degree(g) == d:
                    residual.append(j)
                    continue
                k = _containing_clique(cliques, g.variables())
                if k is None:
                    raise SparsityError(
                        f"constraint {j} of half-degree < d fits no clique; "
                        "invalid chordal decomposition"
                    )
                groups[k].append(j)
        orders = None
    elif variant == MINIMAL:
        for lists, groups, residual in (
            (pop.inequalities, ineq_groups, ineq_residual),
            (pop.equalities, eq_groups, eq_residual),
        ):
            for j, g in enumerate(lists):
                k = _containing_clique(cliques, g.variables())
                if k is None:
                    residual.append(j)
                else:
                    groups[k].append(j)
        # split the objective term by term; every term must fit somewhere
        fk_degree = [0] * p
        for e in pop.objective.terms:
            k = _containing_clique(cliques, exponent_support(e))
            if k is None:
                raise SparsityError(
                    f"objective term {e} fits no clique; objective decomposition failed"
                )
            fk_degree[k] = max(fk_degree[k], exponent_degree(e))
        orders_list = []
        for k in range(p):
            o = 1
            o = max(o, (fk_degree[k] + 1) // 2)
            for j in ineq_groups[k]:
                o = max(o, half_degree(pop.inequalities[j]))
            for j in eq_groups[k]:
                o = max(o, half_degree(pop.equalities[j]))
            orders_list.append(o)
        orders = tuple(orders_list)
    else:
        raise SparsityError(f"unknown partition variant {variant!r}")

    return CliqueDecomposition(
        cliques=cliques,
        ineq_groups=tuple(tuple(g) for g in ineq_groups),
        ineq_residual=tuple(ineq_residual),
        eq_groups=tuple(tuple(g) for g in eq_groups),
        eq_residual=tuple(eq_residual),
        per_clique_order=orders,
    )


# ---------------------------------------------------------------------------
# Term sparsity graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonomialGraph:
    """Graph on a monomial basis; edges are index pairs into ``nodes``."""

    nodes: Tuple[Exponent, ...]
    edges: FrozenSet[Edge]

    def __post_init__(self):
        nn = len(self.nodes)
        for i, j in self.edges:
            if not (0 <= i < j < nn):
                raise SparsityError(f"edge ({i},{j}) outside the node range")

    def support(self) -> FrozenSet[Exponent]:
        """supp(G): diagonal sums 2*beta plus the edge sums beta+gamma."""
        out = {exponent_add(b, b) for b in self.nodes}
        for i, j in self.edges:
            out.add(exponent_add(self.nodes[i], self.nodes[j]))
        return frozenset(out)

    def components(self) -> Tuple[Tuple[int, ...], ...]:
        adj: Dict[int, set] = {i: set() for i in range(len(self.nodes))}
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        seen: set = set()
        comps = []
        for v in range(len(self.nodes)):
            if v in seen:
                continue
            stack, comp = [v], {v}
            seen.add(v)
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if w not in comp:
                        comp.add(w)
                        seen.add(w)
                        stack.append(w)
            comps.append(tuple(sorted(comp)))
        return tuple(comps)

    def node_cliques(self, ts_mode: str) -> Tuple[Tuple[int, ...], ...]:
        """Maximal cliques of the chordal extension under the given mode.

        With ``maximal_components`` the cliques are exactly the connected
        components; with ``approx_smallest`` the greedy min-fill extension
        is computed on the node indices.
        """
        if ts_mode == MAXIMAL_COMPONENTS:
            return self.components()
        if ts_mode != APPROX_SMALLEST:
            raise SparsityError(f"unknown ts mode {ts_mode!r}")
        vg = VarGraph.from_pairs(len(self.nodes), {(i + 1, j + 1) for i, j in self.edges})
        ext = chordal_extension(vg, APPROX_SMALLEST)
        return tuple(tuple(v - 1 for v in c) for c in ext.maximal_cliques)

    def edge_list_text(self) -> str:
        lines = []
        for i, j in sorted(self.edges):
            from .poly import exponent_str

            lines.append(f"{exponent_str(self.nodes[i])} -- {exponent_str(self.nodes[j])}")
        return "\n".join(lines) + ("\n" if lines else "")


BlockKey = Tuple[int, str, int]
# (clique index, kind, constraint position); kind is "mom", "ineq" or "eq"
# and the position is -1 for the moment graph.


@dataclass(frozen=True)
class TsGraphFamily:
    """Per-(clique, constraint) monomial graphs at one sparse order."""

    sparse_order: int
    orders: Tuple[int, ...]
    graphs: Mapping[BlockKey, MonomialGraph]
    support_union: FrozenSet[Exponent]


def _global_support(pop: PopModel) -> FrozenSet[Exponent]:
    out: set = set()
    out.update(pop.objective.terms)
    for g in pop.constraints():
        out.update(g.terms)
    return frozenset(out)


def _moment_edge_allowed(
    beta: Exponent,
    gamma: Exponent,
    total: Exponent,
    objective_support: FrozenSet[Exponent],
) -> bool:
    # Pairs involving the constant monomial join a moment graph only when
    # the product is even (a square moment) or appears in the objective:
    # those are the constant-row entries the relaxation actually needs.
    # Other constant-row couplings stay free, which keeps the split blocks
    # small without affecting the constraints carried by nonconstant rows.
    if beta != ZERO_EXPONENT and gamma != ZERO_EXPONENT:
        return True
    return exponent_is_even(total) or total in objective_support


def _clique_restricted(support, clique_set: set) -> FrozenSet[Exponent]:
    return frozenset(
        e for e in support if set(exponent_support(e)) <= clique_set
    )


def ts_initial_graph(
    pop: PopModel,
    decomposition: CliqueDecomposition,
    k: int,
    d: int,
) -> MonomialGraph:
    """Initial (sparse order 0) term-sparsity graph of clique k's moment matrix.

    Nodes are the clique's monomials up to degree d; two distinct monomials
    are adjacent when their product is an even monomial or appears among the
    problem supports restricted to the clique (constant-node pairs per
    ``_moment_edge_allowed``).
    """
    clique = decomposition.cliques[k]
    nodes = monomial_basis(clique, d)
    clique_set = set(clique)
    support_k = _clique_restricted(_global_support(pop), clique_set)
    obj_k = _clique_restricted(pop.objective.terms, clique_set)
    edges: set = set()
    nn = len(nodes)
    for a in range(nn):
        for b in range(a + 1, nn):
            total = exponent_add(nodes[a], nodes[b])
            if exponent_is_even(total) or total in support_k:
                if _moment_edge_allowed(nodes[a], nodes[b], total, obj_k):
                    edges.add((a, b))
    return MonomialGraph(nodes, frozenset(edges))


def _constraint_poly(pop: PopModel, kind: str, j: int) -> Polynomial:
    return pop.inequalities[j] if kind == "ineq" else pop.equalities[j]


def build_ts_family(
    pop: PopModel,
    decomposition: CliqueDecomposition,
    orders: Sequence[int],
    s: int,
    ts_mode: str = MAXIMAL_COMPONENTS,
) -> TsGraphFamily:
    """Build the term-sparsity family at sparse order s (>= 0).

    ``orders[k]`` is clique k's relaxation order (a uniform order repeated,
    or the per-clique minimal orders).  Localizing graphs start empty; the
    family is then iterated s times.
    """
    if len(orders) != decomposition.ncliques:
        raise SparsityError("one relaxation order per clique is required")
    graphs: Dict[BlockKey, MonomialGraph] = {}
    for k in range(decomposition.ncliques):
        d_k = orders[k]
        graphs[(k, "mom", -1)] = ts_initial_graph(pop, decomposition, k, d_k)
        for kind, group in (("ineq", decomposition.ineq_groups[k]), ("eq", decomposition.eq_groups[k])):
            for j in group:
                g = _constraint_poly(pop, kind, j)
                nodes = monomial_basis(decomposition.cliques[k], d_k - half_degree(g))
                graphs[(k, kind, j)] = MonomialGraph(nodes, frozenset())
    family = TsGraphFamily(
        sparse_order=0,
        orders=tuple(orders),
        graphs=graphs,
        support_union=_support_union(pop, decomposition, graphs, initial=True),
    )
    for _ in range(s):
        family = ts_iterate(family, pop, decomposition, ts_mode)
    return family


def _support_union(
    pop: PopModel,
    decomposition: CliqueDecomposition,
    graphs: Mapping[BlockKey, MonomialGraph],
    initial: bool = False,
) -> FrozenSet[Exponent]:
    # At sparse order 0 the localizing graphs are empty placeholders and
    # contribute nothing; their diagonals only become part of the support
    # union once the iteration has activated them.
    out: set = set()
    for (k, kind, j), graph in graphs.items():
        if kind == "mom":
            out.update(graph.support())
        elif not initial:
            g = _constraint_poly(pop, kind, j)
            gsupp = graph.support()
            for alpha in g.terms:
                for sigma in gsupp:
                    out.add(exponent_add(alpha, sigma))
    return frozenset(out)


def _complete_components_edges(nodes_count: int, edges: FrozenSet[Edge]) -> FrozenSet[Edge]:
    adj: Dict[int, set] = {i: set() for i in range(nodes_count)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen: set = set()
    out: set = set(edges)
    for v in range(nodes_count):
        if v in seen:
            continue
        stack, comp = [v], {v}
        seen.add(v)
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in comp:
                    comp.add(w)
                    seen.add(w)
                    stack.append(w)
        comp_sorted = sorted(comp)
        for a in range(len(comp_sorted)):
            for b in range(a + 1, len(comp_sorted)):
                out.add((comp_sorted[a], comp_sorted[b]))
    return frozenset(out)


def _chordal_edges(nodes_count: int, edges: FrozenSet[Edge], ts_mode: str) -> FrozenSet[Edge]:
    if ts_mode == MAXIMAL_COMPONENTS:
        return _complete_components_edges(nodes_count, edges)
    if ts_mode != APPROX_SMALLEST:
        raise SparsityError(f"unknown ts mode {ts_mode!r}")
    vg = VarGraph.from_pairs(nodes_count, {(i + 1, j + 1) for i, j in edges})
    ext = chordal_extension(vg, APPROX_SMALLEST)
    return frozenset((i - 1, j - 1) for i, j in ext.graph.edges)


def ts_iterate(
    family: TsGraphFamily,
    pop: PopModel,
    decomposition: CliqueDecomposition,
    ts_mode: str = MAXIMAL_COMPONENTS,
) -> TsGraphFamily:
    """One sweep of the term-sparsity iteration.

    Each graph's new edge set joins pairs whose product (shifted by the
    constraint support) meets the previous support union; the union with
    the previous edges keeps the chain ascending, and the result is closed
    by the chordal extension of the requested mode.  Each sweep reads the
    frozen support union of the previous order and writes a fresh one.
    """
    prev_supp = family.support_union
    new_graphs: Dict[BlockKey, MonomialGraph] = {}
    obj_by_clique = [
        _clique_restricted(pop.objective.terms, set(c)) for c in decomposition.cliques
    ]
    for key in sorted(family.graphs):
        k, kind, j = key
        graph = family.graphs[key]
        nodes = graph.nodes
        if kind == "mom":
            shifts: Tuple[Exponent, ...] = (ZERO_EXPONENT,)
        else:
            shifts = tuple(_constraint_poly(pop, kind, j).terms)
        edges: set = set(graph.edges)
        nn = len(nodes)
        for a in range(nn):
            for b in range(a + 1, nn):
                if (a, b) in edges:
                    continue
                total = exponent_add(nodes[a], nodes[b])
                hit = any(exponent_add(total, sh) in prev_supp for sh in shifts)
                if not hit:
                    continue
                if kind == "mom" and not _moment_edge_allowed(
                    nodes[a], nodes[b], total, obj_by_clique[k]
                ):
                    continue
                edges.add((a, b))
        closed = _chordal_edges(nn, frozenset(edges), ts_mode)
        new_graphs[key] = MonomialGraph(nodes, closed)
    return TsGraphFamily(
        sparse_order=family.sparse_order + 1,
        orders=family.orders,
        graphs=new_graphs,
        support_union=_support_union(pop, decomposition, new_graphs),
    )


def ts_families_equal(a: TsGraphFamily, b: TsGraphFamily) -> bool:
    """Fixpoint test: same keys with identical edge sets."""
    if set(a.graphs) != set(b.graphs):
        return False
    return all(a.graphs[k].edges == b.graphs[k].edges for k in a.graphs)

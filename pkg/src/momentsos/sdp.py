"""Conic form, sparse text interchange and an embedded interior-point solver.

A :class:`ConicProblem` is the linear matrix inequality form

    minimize    c' x  (+ offset)
    subject to  sum_i x_i F_i - F_0  is PSD (block diagonal),

which is exactly the problem encoded by the widespread sparse SDP text
format, so export is a direct serialization.  Conversion from a
:class:`~momentsos.relaxation.BlockSdp` substitutes y_0 = 1, eliminates all
scalar linear equalities by Gaussian pivoting (flagging inconsistent
systems), turns linear inequalities into entries of one diagonal block, and
keeps each PSD block as a cone; sharing of moment variables across blocks
is carried by the constraint matrices themselves.

The embedded solver is a primal-dual path-following method with
Nesterov-Todd scaling and a Mehrotra predictor-corrector, using dense
per-block linear algebra.  It is intended for desk-scale instances (block
sizes up to around a hundred); larger problems should go through export.
Problems and solutions are immutable; per-block work inside one solve is
independent and could run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from scipy.linalg import lapack

from .poly import Exponent, grlex_key
from .relaxation import BlockSdp, LinForm


class ConversionError(ValueError):
    """Raised when a BlockSdp cannot be converted to conic form."""


class SolutionFormatError(ValueError):
    """Raised for malformed solution files."""


# ---------------------------------------------------------------------------
# Conic problem container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConicProblem:
    """Standard sparse-SDP data.

    ``block_dims`` holds PSD cone sizes; a negative entry is a diagonal
    block whose |dim| entries are nonnegative scalars.  ``matrices[b]`` is a
    CSR matrix with m+1 rows: row 0 is F_0 (the constant matrix) and row
    i >= 1 is F_i, stored as flattened full symmetric matrices (length
    dim*dim) for PSD blocks or length |dim| vectors for diagonal blocks.
    Scalar linear equalities that could not be folded in by substitution
    are kept as ``eq_matrix x = eq_rhs``.
    """

    block_dims: Tuple[int, ...]
    matrices: Tuple[sp.csr_matrix, ...]
    rhs: np.ndarray                      # cost vector c, one entry per x_i
    objective_offset: float = 0.0
    eq_matrix: Optional[sp.csr_matrix] = None
    eq_rhs: Optional[np.ndarray] = None
    variable_names: Optional[Tuple[Exponent, ...]] = None
    eliminated: Tuple[Tuple[Exponent, Tuple[Tuple[Exponent, float], ...], float], ...] = ()

    @property
    def nvars(self) -> int:
        return int(self.rhs.shape[0])

    @property
    def n_equalities(self) -> int:
        return 0 if self.eq_matrix is None else self.eq_matrix.shape[0]

    def constraint_matrix(self, i: int, b: int) -> np.ndarray:
        """Dense F_i for block b (i = 0 gives F_0)."""
        dim = self.block_dims[b]
        row = np.asarray(self.matrices[b].getrow(i).todense()).ravel()
        if dim < 0:
            return row
        return row.reshape((dim, dim))

    def cone_dims(self) -> Tuple[int, ...]:
        return self.block_dims


@dataclass(frozen=True)
class ConicSolution:
    """Result of a solve or an imported external solution."""

    primal_objective: float
    dual_objective: float
    status: str
    iterations: int
    duality_gap: float
    x: Optional[np.ndarray] = None
    slack_blocks: Optional[Tuple[np.ndarray, ...]] = None  # X = sum x_i F_i - F_0
    dual_blocks: Optional[Tuple[np.ndarray, ...]] = None   # Y
    timings: Mapping[str, float] = field(default_factory=dict)


STATUS_OPTIMAL = "optimal"
STATUS_SLOW = "slow_progress"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_MAX_ITER = "max_iter"
STATUS_NUMERICAL = "numerical_error"


# ---------------------------------------------------------------------------
# BlockSdp -> ConicProblem
# ---------------------------------------------------------------------------


def _canonical_row(form: LinForm, rhs: float) -> Tuple:
    items = tuple(sorted(((e, float(c)) for e, c in form.items() if c != 0.0)))
    return (items, float(rhs))


class _Eliminator:
    """Substitution of single-variable equalities (pinned moments).

    Only rows that reduce to one variable are folded in (y = const); rows
    coupling several moments stay explicit equality constraints.  This
    keeps every block entry a pure moment variable, which the solver's
    Schur complement needs for nonsingularity.
    """

    def __init__(self, scale: float):
        self.scale = scale
        self.values: Dict[Exponent, float] = {}
        self.pending: List[Tuple[Dict[Exponent, float], float]] = []

    def reduce(self, form: LinForm, const: float = 0.0) -> Tuple[Dict[Exponent, float], float]:
        out: Dict[Exponent, float] = {}
        c0 = const
        for e, c in form.items():
            if e in self.values:
                c0 += c * self.values[e]
            else:
                out[e] = out.get(e, 0.0) + c
        return {e: c for e, c in out.items() if c != 0.0}, c0

    def _consume(self, red: Dict[Exponent, float], rhs: float) -> bool:
        """Try to turn a reduced row into a pin; return True if consumed."""
        red = {e: c for e, c in red.items() if abs(c) > 1e-14 * self.scale}
        if not red:
            if abs(rhs) > 1e-8 * (1.0 + self.scale):
                raise ConversionError(
                    f"inconsistent equality: 0 = {rhs!r} after elimination"
                )
            return True
        if len(red) == 1:
            (e, c), = red.items()
            value = rhs / c
            if e in self.values and abs(self.values[e] - value) > 1e-8 * (1.0 + self.scale):
                raise ConversionError(f"conflicting pins for a moment variable")
            self.values[e] = value
            return True
        return False

    def add_equation(self, form: LinForm, rhs: float):
        red, c0 = self.reduce(form)
        if not self._consume(red, rhs - c0):
            self.pending.append((red, rhs - c0))

    def settle(self) -> List[Tuple[Dict[Exponent, float], float]]:
        """Re-reduce pending rows until no new pins appear; return leftovers."""
        work = self.pending
        while True:
            leftover: List[Tuple[Dict[Exponent, float], float]] = []
            progressed = False
            for red, rhs in work:
                red2, c0 = self.reduce(red)
                if self._consume(red2, rhs - c0):
                    progressed = True
                else:
                    leftover.append((red2, rhs - c0))
            work = leftover
            if not progressed:
                break
        self.pending = work
        return work


def to_conic(sdp: BlockSdp) -> ConicProblem:
    """Convert a block relaxation into standard sparse-SDP data.

    The y_0 = 1 normalization and every scalar equality (including the
    entries of zero-relation blocks) are folded in by substitution;
    duplicate rows are removed by canonical hashing first.
    """
    scale = max(
        [1.0]
        + [abs(c) for form in sdp.linear_ineqs for c in form.values()]
        + [abs(c) for form, _ in sdp.linear_eqs for c in form.values()]
    )

    # collect equations: explicit linear ones plus zero-relation entries
    eq_rows: List[Tuple[LinForm, float]] = []
    seen: set = set()
    for form, rhs in sdp.linear_eqs:
        key = _canonical_row(form, rhs)
        if key not in seen:
            seen.add(key)
            eq_rows.append((dict(form), float(rhs)))
    for block in sdp.blocks:
        if block.spec.relation != "zero":
            continue
        for ij in sorted(block.entries):
            form = block.entries[ij]
            key = _canonical_row(form, 0.0)
            if key not in seen:
                seen.add(key)
                eq_rows.append((dict(form), 0.0))

    elim = _Eliminator(scale)
    for form, rhs in eq_rows:
        elim.add_equation(form, rhs)
    residual_eqs = elim.settle()

    # inequality rows (deduplicated, reduced)
    ineq_rows: List[Tuple[Dict[Exponent, float], float]] = []
    seen_ineq: set = set()
    for form in sdp.linear_ineqs:
        red, c0 = elim.reduce(form)
        key = _canonical_row(red, c0)
        if key not in seen_ineq:
            seen_ineq.add(key)
            ineq_rows.append((red, c0))

    # reduce PSD block entries, dropping exact duplicate blocks
    psd_blocks: List[Tuple[int, Dict[Tuple[int, int], Tuple[Dict[Exponent, float], float]]]] = []
    seen_blocks: set = set()
    for block in sdp.blocks:
        if block.spec.relation != "psd":
            continue
        dim = block.spec.dimension
        reduced: Dict[Tuple[int, int], Tuple[Dict[Exponent, float], float]] = {}
        for ij in sorted(block.entries):
            red, c0 = elim.reduce(block.entries[ij])
            reduced[ij] = (red, c0)
        key = (
            dim,
            tuple(
                (ij, tuple(sorted(red.items())), c0)
                for ij, (red, c0) in sorted(reduced.items())
            ),
        )
        if key in seen_blocks:
            continue
        seen_blocks.add(key)
        psd_blocks.append((dim, reduced))

    obj_form, obj_const = elim.reduce(sdp.objective)

    # fold 1x1 blocks into the scalar rows; they share the diagonal path
    for dim, reduced in psd_blocks:
        if dim == 1:
            red, c0 = reduced[(0, 0)]
            key = _canonical_row(red, c0)
            if key not in seen_ineq:
                seen_ineq.add(key)
                ineq_rows.append((red, c0))
    psd_blocks = [(dim, reduced) for dim, reduced in psd_blocks if dim > 1]

    # presolve: drop blocks and scalar rows all of whose variables appear
    # nowhere else (free moment directions; always satisfiable), repeating
    # until stable
    while True:
        counts: Dict[Exponent, int] = {}
        for e in obj_form:
            counts[e] = counts.get(e, 0) + 2  # objective presence is sticky
        for red, _ in residual_eqs:
            for e in set(red):
                counts[e] = counts.get(e, 0) + 2  # equalities are never pruned
        for dim, reduced in psd_blocks:
            block_vars = set()
            for red, _ in reduced.values():
                block_vars.update(red)
            for e in block_vars:
                counts[e] = counts.get(e, 0) + 1
        for red, _ in ineq_rows:
            for e in set(red):
                counts[e] = counts.get(e, 0) + 1

        def exclusive(vars_set) -> bool:
            return bool(vars_set) and all(counts[e] <= 1 for e in vars_set)

        kept_blocks = []
        dropped = 0
        for dim, reduced in psd_blocks:
            block_vars = set()
            for red, _ in reduced.values():
                block_vars.update(red)
            # safe to drop when every referenced variable is exclusive and
            # the diagonal is adjustable (contains free variables)
            if exclusive(block_vars) and all(reduced[(i, i)][0] for i in range(dim)):
                dropped += 1
            else:
                kept_blocks.append((dim, reduced))
        kept_rows = []
        for red, c0 in ineq_rows:
            if exclusive(set(red)):
                dropped += 1
            else:
                kept_rows.append((red, c0))
        psd_blocks, ineq_rows = kept_blocks, kept_rows
        if dropped == 0:
            break

    # variable order: remaining exponents, canonical
    var_set: set = set(obj_form)
    for dim, reduced in psd_blocks:
        for red, _ in reduced.values():
            var_set.update(red)
    for red, _ in ineq_rows:
        var_set.update(red)
    for red, _ in residual_eqs:
        var_set.update(red)
    variables = tuple(sorted(var_set, key=grlex_key))
    var_index = {e: i for i, e in enumerate(variables)}
    m = len(variables)

    matrices: List[sp.csr_matrix] = []
    dims: List[int] = []
    for dim, reduced in psd_blocks:
        rows: List[int] = []
        cols: List[int] = []
        vals: List[float] = []
        for (i, j), (red, c0) in reduced.items():
            positions = [i * dim + j] if i == j else [i * dim + j, j * dim + i]
            for pos in positions:
                if c0 != 0.0:
                    rows.append(0)
                    cols.append(pos)
                    vals.append(-c0)  # F_0 entry: M(y) = sum y F - F_0
                for e, c in red.items():
                    rows.append(1 + var_index[e])
                    cols.append(pos)
                    vals.append(c)
        matrices.append(
            sp.csr_matrix((vals, (rows, cols)), shape=(m + 1, dim * dim))
        )
        dims.append(dim)

    if ineq_rows:
        nd = len(ineq_rows)
        rows, cols, vals = [], [], []
        for k, (red, c0) in enumerate(ineq_rows):
            if c0 != 0.0:
                rows.append(0)
                cols.append(k)
                vals.append(-c0)
            for e, c in red.items():
                rows.append(1 + var_index[e])
                cols.append(k)
                vals.append(c)
        matrices.append(sp.csr_matrix((vals, (rows, cols)), shape=(m + 1, nd)))
        dims.append(-nd)

    c_vec = np.zeros(m)
    for e, c in obj_form.items():
        c_vec[var_index[e]] = c

    # gauge fixing: combinations of variables that appear in no PSD block
    # (only in scalar rows) can be invisible to the whole problem when the
    # rows couple them in fixed patterns; pin the invisible combinations
    # with explicit zero equalities so the KKT system is nonsingular
    block_anchored: set = set()
    for dim, reduced in psd_blocks:
        for red, _ in reduced.values():
            block_anchored.update(red)
    row_only = sorted(
        (e for e in variables if e not in block_anchored), key=grlex_key
    )
    if row_only:
        ro_index = {e: i for i, e in enumerate(row_only)}
        rows_mat: List[np.ndarray] = []
        for red, _ in ineq_rows:
            if any(e in ro_index for e in red):
                r = np.zeros(len(row_only))
                for e, cc in red.items():
                    if e in ro_index:
                        r[ro_index[e]] = cc
                rows_mat.append(r)
        for red, _ in residual_eqs:
            if any(e in ro_index for e in red):
                r = np.zeros(len(row_only))
                for e, cc in red.items():
                    if e in ro_index:
                        r[ro_index[e]] = cc
                rows_mat.append(r)
        robj = np.zeros(len(row_only))
        for e, cc in obj_form.items():
            if e in ro_index:
                robj[ro_index[e]] = cc
        rows_mat.append(robj)
        M = np.array(rows_mat)
        # null basis via reduced row echelon form with partial pivoting
        Mw = M.copy()
        nr, nc = Mw.shape
        pivots: List[int] = []
        r = 0
        for col in range(nc):
            if r >= nr:
                break
            p = int(np.argmax(np.abs(Mw[r:, col]))) + r
            if abs(Mw[p, col]) < 1e-10 * (1.0 + float(np.abs(M).max())):
                continue
            Mw[[r, p]] = Mw[[p, r]]
            Mw[r] = Mw[r] / Mw[r, col]
            for rr in range(nr):
                if rr != r and Mw[rr, col] != 0.0:
                    Mw[rr] = Mw[rr] - Mw[rr, col] * Mw[r]
            pivots.append(col)
            r += 1
        free_cols = [c2 for c2 in range(nc) if c2 not in pivots]
        for fc in free_cols:
            form: Dict[Exponent, float] = {row_only[fc]: 1.0}
            for ri, pc in enumerate(pivots):
                v = -Mw[ri, fc]
                if abs(v) > 1e-12:
                    form[row_only[pc]] = form.get(row_only[pc], 0.0) + v
            # v' y = 0 pins the invisible direction; nothing else sees it
            residual_eqs.append((form, 0.0))

    eq_matrix = None
    eq_rhs_vec = None
    if residual_eqs:
        # deduplicate equality rows canonically
        uniq: List[Tuple[Dict[Exponent, float], float]] = []
        seen_eq: set = set()
        for red, rhs in sorted(
            residual_eqs, key=lambda fr: _canonical_row(fr[0], fr[1])
        ):
            key = _canonical_row(red, rhs)
            if key not in seen_eq:
                seen_eq.add(key)
                uniq.append((red, rhs))
        # keep a maximal linearly independent subset (modified Gram-Schmidt);
        # dependent rows must be consistent or the system is flagged
        basis: List[Tuple[np.ndarray, float]] = []
        kept: List[Tuple[Dict[Exponent, float], float]] = []
        for red, rhs in uniq:
            v = np.zeros(m)
            for e, cc in red.items():
                v[var_index[e]] = cc
            b_rhs = rhs
            nrm0 = np.linalg.norm(v) + 1e-300
            for _ in range(2):  # re-orthogonalize once for stability
                for q, q_rhs in basis:
                    coef = float(q @ v)
                    if coef != 0.0:
                        v = v - coef * q
                        b_rhs -= coef * q_rhs
            nrm = float(np.linalg.norm(v))
            if nrm <= 1e-9 * nrm0:
                if abs(b_rhs) > 1e-7 * (1.0 + scale):
                    raise ConversionError(
                        "inconsistent equalities detected during preprocessing"
                    )
                continue  # redundant row
            basis.append((v / nrm, b_rhs / nrm))
            kept.append((red, rhs))
        rows, cols, vals = [], [], []
        rhs_list = []
        for k, (red, rhs) in enumerate(kept):
            rhs_list.append(rhs)
            for e, cc in red.items():
                rows.append(k)
                cols.append(var_index[e])
                vals.append(cc)
        eq_matrix = sp.csr_matrix((vals, (rows, cols)), shape=(len(kept), m))
        eq_rhs_vec = np.array(rhs_list)

    eliminated = tuple(
        (pivot, (), const)
        for pivot, const in sorted(elim.values.items(), key=lambda kv: grlex_key(kv[0]))
    )

    return ConicProblem(
        block_dims=tuple(dims),
        matrices=tuple(matrices),
        rhs=c_vec,
        objective_offset=float(obj_const),
        eq_matrix=eq_matrix,
        eq_rhs=eq_rhs_vec,
        variable_names=variables,
        eliminated=eliminated,
    )


def recover_moments(problem: ConicProblem, solution: ConicSolution) -> Dict[Exponent, float]:
    """Values of all moment variables, including the eliminated ones."""
    if problem.variable_names is None or solution.x is None:
        raise ConversionError("problem carries no variable names or solution has no x")
    values = {e: float(v) for e, v in zip(problem.variable_names, solution.x)}
    # eliminated variables are stored fully reduced, one pass suffices
    for pivot, form, const in problem.eliminated:
        v = const
        for e, c in form:
            v += c * values.get(e, 0.0)
        values[pivot] = v
    return values


# ---------------------------------------------------------------------------
# Sparse text export / import
# ---------------------------------------------------------------------------


def export_sparse_text(p: ConicProblem) -> str:
    """Serialize in the sparse SDP text format.

    Header: comment with the objective offset, then the number of
    constraint matrices, number of blocks, block dimensions (negative for
    diagonal blocks) and the cost vector; entries follow as quintuples
    ``k b i j v`` with upper-triangle 1-based indices, sorted.  Exports are
    byte-deterministic for equal problems.
    """
    # equality rows are exported as paired opposed entries in a diagonal
    # block, which keeps the file inside the plain sparse SDP format
    dims = list(p.block_dims)
    extra: List[Tuple[int, int, float]] = []  # (k, local diag index, value)
    nE = p.n_equalities
    if nE:
        eq = p.eq_matrix.tocoo()
        base = 0
        if dims and dims[-1] < 0:
            base = -dims[-1]
            dims[-1] -= 2 * nE
        else:
            dims.append(-2 * nE)
        for r, col, v in zip(eq.row, eq.col, eq.data):
            extra.append((int(col) + 1, base + 2 * int(r), float(v)))
            extra.append((int(col) + 1, base + 2 * int(r) + 1, -float(v)))
        for r, v in enumerate(np.asarray(p.eq_rhs)):
            if v != 0.0:
                extra.append((0, base + 2 * r, float(v)))
                extra.append((0, base + 2 * r + 1, -float(v)))

    lines = [f"*offset {p.objective_offset!r}"]
    lines.append(str(p.nvars))
    lines.append(str(len(dims)))
    lines.append(" ".join(str(d) for d in dims))
    lines.append(" ".join(repr(float(v)) for v in p.rhs))
    entries = []
    eq_block = len(dims)  # 1-based index of the (possibly extended) diag block
    for b, dim in enumerate(p.block_dims):
        mat = p.matrices[b].tocoo()
        for k, pos, v in zip(mat.row, mat.col, mat.data):
            if v == 0.0:
                continue
            if dim < 0:
                i = j = pos + 1
            else:
                i, j = divmod(int(pos), dim)
                if i > j:
                    continue  # emit upper triangle only
                i, j = i + 1, j + 1
            entries.append((int(k), b + 1, int(i), int(j), float(v)))
    for k, local, v in extra:
        entries.append((k, eq_block, local + 1, local + 1, v))
    entries.sort()
    for k, b, i, j, v in entries:
        lines.append(f"{k} {b} {i} {j} {v!r}")
    return "\n".join(lines) + "\n"


def import_sparse_text(text: str) -> ConicProblem:
    """Parse the sparse SDP text format back into a ConicProblem."""
    offset = 0.0
    body: List[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("*") or line.startswith('"'):
            if line.startswith("*offset"):
                offset = float(line.split(None, 1)[1])
            continue
        body.append(line)
    if len(body) < 4:
        raise ConversionError("truncated sparse SDP file")
    m = int(body[0])
    nblocks = int(body[1])
    dims = tuple(int(t) for t in body[2].split())
    if len(dims) != nblocks:
        raise ConversionError("block dimension count does not match header")
    c = np.array([float(t) for t in body[3].split()])
    if c.shape[0] != m:
        raise ConversionError("cost vector length does not match header")
    per_block: List[Tuple[List[int], List[int], List[float]]] = [
        ([], [], []) for _ in range(nblocks)
    ]
    for line in body[4:]:
        toks = line.split()
        if len(toks) != 5:
            raise ConversionError(f"malformed entry line: {line!r}")
        k, b, i, j = int(toks[0]), int(toks[1]), int(toks[2]), int(toks[3])
        v = float(toks[4])
        if not (0 <= k <= m and 1 <= b <= nblocks):
            raise ConversionError(f"entry indices out of range: {line!r}")
        dim = dims[b - 1]
        rows, cols, vals = per_block[b - 1]
        if dim < 0:
            if i != j:
                raise ConversionError(f"off-diagonal entry in diagonal block: {line!r}")
            rows.append(k)
            cols.append(i - 1)
            vals.append(v)
        else:
            rows.append(k)
            cols.append((i - 1) * dim + (j - 1))
            vals.append(v)
            if i != j:
                rows.append(k)
                cols.append((j - 1) * dim + (i - 1))
                vals.append(v)
    matrices = []
    for b, dim in enumerate(dims):
        rows, cols, vals = per_block[b]
        width = -dim if dim < 0 else dim * dim
        matrices.append(sp.csr_matrix((vals, (rows, cols)), shape=(m + 1, width)))
    return ConicProblem(
        block_dims=dims,
        matrices=tuple(matrices),
        rhs=c,
        objective_offset=offset,
    )


def solution_to_text(sol: ConicSolution) -> str:
    lines = [
        f"status {sol.status}",
        f"iterations {sol.iterations}",
        f"primal {sol.primal_objective!r}",
        f"dual {sol.dual_objective!r}",
        f"gap {sol.duality_gap!r}",
    ]
    return "\n".join(lines) + "\n"


def import_external_solution(text: str) -> ConicSolution:
    """Parse a solution file (status/iterations/primal/dual/gap lines)."""
    fields: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise SolutionFormatError(f"malformed solution line: {line!r}")
        fields[parts[0]] = parts[1]
    for required in ("status", "primal", "dual"):
        if required not in fields:
            raise SolutionFormatError(f"missing {required} section in solution file")
    try:
        return ConicSolution(
            primal_objective=float(fields["primal"]),
            dual_objective=float(fields["dual"]),
            status=fields["status"],
            iterations=int(fields.get("iterations", "0")),
            duality_gap=float(fields.get("gap", "nan")),
        )
    except ValueError as exc:
        raise SolutionFormatError(f"bad numeric field: {exc}") from exc


# ---------------------------------------------------------------------------
# Embedded interior-point solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.98
    verbose: bool = False


class _BlockWork:
    """Per-block state: dense iterates and the constraint data views."""

    __slots__ = ("dim", "diag", "F", "F0", "touch", "Fd", "X", "Y")

    def __init__(self, dim: int, mat: sp.csr_matrix):
        self.dim = abs(dim)
        self.diag = dim < 0
        self.F = mat[1:]
        self.F0 = np.asarray(mat.getrow(0).todense()).ravel()
        touching = np.unique(self.F.tocoo().row)
        self.touch = touching
        Fsub = self.F[touching]
        self.Fd = np.asarray(Fsub.todense())
        if self.diag:
            self.X = np.ones(self.dim)
            self.Y = np.ones(self.dim)
        else:
            self.X = np.eye(self.dim)
            self.Y = np.eye(self.dim)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _chol_inv(S: np.ndarray) -> np.ndarray:
    """Inverse of the lower Cholesky factor of a PSD matrix."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(S)
        shift = max(0.0, -float(w.min())) + 1e-13 * (1.0 + float(abs(w).max()))
        L = np.linalg.cholesky(S + shift * np.eye(S.shape[0]))
    Li, info = lapack.dtrtri(L, lower=1)
    if info != 0:
        Li = np.linalg.inv(L)
    return Li


def _psd_max_step_scaled(Li: np.ndarray, dS: np.ndarray) -> float:
    """Largest alpha with S + alpha dS PSD, given Li = chol(S)^-1."""
    lam = np.linalg.eigvalsh(Li @ dS @ Li.T).min()
    if lam >= -1e-14:
        return np.inf
    return -1.0 / lam


def _diag_max_step(s: np.ndarray, ds: np.ndarray) -> float:
    mask = ds < 0
    if not mask.any():
        return np.inf
    return float(np.min(-s[mask] / ds[mask]))


class _NtScaling:
    """Nesterov-Todd scaling point of a PSD pair (X, Y).

    W Y W = X; G is the factor with W = G G', chosen so that the scaled
    iterate Ginv X Ginv' = G' Y G is the diagonal matrix diag(lam).  The
    inverse Cholesky factors of X and Y are kept for step-length tests.
    """

    __slots__ = ("W", "U", "G", "Gi", "lam", "LiX", "LiY")

    def __init__(self, X: np.ndarray, Y: np.ndarray):
        try:
            L = np.linalg.cholesky(X)
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(X)
            shift = max(0.0, -float(w.min())) + 1e-13 * (1.0 + float(abs(w).max()))
            L = np.linalg.cholesky(X + shift * np.eye(X.shape[0]))
        M = _sym(L.T @ Y @ L)
        lam, Q = np.linalg.eigh(M)
        lam = np.maximum(lam, 1e-300)
        self.G = L @ (Q * (lam ** -0.25))
        Linv, info = lapack.dtrtri(L, lower=1)
        if info != 0:
            Linv = np.linalg.inv(L)
        self.Gi = (lam ** 0.25)[:, None] * (Q.T @ Linv)
        self.W = _sym(self.G @ self.G.T)
        self.U = _sym(self.Gi.T @ self.Gi)   # W^{-1}
        self.lam = np.sqrt(lam)
        self.LiX = Linv
        self.LiY = _chol_inv(Y)


def solve(problem: ConicProblem, opts: Optional[SolverOptions] = None) -> ConicSolution:
    """Solve min c'x s.t. sum x_i F_i - F_0 PSD with a primal-dual method.

    Returns status ``optimal`` at the requested tolerances,
    ``slow_progress`` when steps stall with residuals below 1e-5 (the
    near-optimal bound is still reported), ``max_iter`` or
    ``numerical_error`` otherwise.
    """
    import time as _time

    t0 = _time.perf_counter()
    if opts is None:
        opts = SolverOptions()
    m = problem.nvars
    blocks = [
        _BlockWork(dim, mat) for dim, mat in zip(problem.block_dims, problem.matrices)
    ]
    c = np.asarray(problem.rhs, dtype=float).copy()
    if m == 0:
        return ConicSolution(
            primal_objective=problem.objective_offset,
            dual_objective=problem.objective_offset,
            status=STATUS_OPTIMAL,
            iterations=0,
            duality_gap=0.0,
            x=np.zeros(0),
        )

    # equilibrate variables: scale each x_i by the norm of its matrices
    col_norm = np.zeros(m)
    for b in blocks:
        if b.Fd.size:
            col_norm[b.touch] += np.sum(b.Fd * b.Fd, axis=1)
    col_scale = 1.0 / np.sqrt(np.maximum(col_norm, 1e-12))
    for b in blocks:
        b.Fd = b.Fd * col_scale[b.touch][:, None]
        b.F = sp.csr_matrix(sp.diags(col_scale) @ b.F)
    c = c * col_scale

    nE = problem.n_equalities
    if nE:
        Geq = np.asarray((problem.eq_matrix @ sp.diags(col_scale)).todense())
        heq = np.asarray(problem.eq_rhs, dtype=float).copy()
        # normalize equality rows
        row_norm = np.maximum(np.sqrt(np.sum(Geq * Geq, axis=1)), 1e-12)
        Geq = Geq / row_norm[:, None]
        heq = heq / row_norm
        w_eq = np.zeros(nE)
    else:
        Geq = np.zeros((0, m))
        heq = np.zeros(0)
        w_eq = np.zeros(0)

    data_scale = max(
        [1.0, float(np.abs(c).max(initial=0.0))]
        + [float(np.abs(b.F0).max(initial=0.0)) for b in blocks]
        + [float(np.abs(b.Fd).max(initial=0.0)) if b.Fd.size else 0.0 for b in blocks]
    )
    init_scale = max(10.0, data_scale)
    for b in blocks:
        if b.diag:
            b.X = np.full(b.dim, init_scale)
            b.Y = np.full(b.dim, init_scale)
        else:
            b.X = init_scale * np.eye(b.dim)
            b.Y = init_scale * np.eye(b.dim)
    x = np.zeros(m)

    # constant Gram system for dual-residual repair: solving
    # [Gram, G'; G, 0] [lam; d] = [rho; 0] gives a least-change correction
    # of the dual blocks that restores A(dY) + G'dw = rd exactly
    Gram = np.zeros((m, m))
    for b in blocks:
        if b.Fd.size:
            Gram[np.ix_(b.touch, b.touch)] += b.Fd @ b.Fd.T
    gram_ridge = 1e-12 * (np.trace(Gram) / m + 1.0)
    try:
        Gramf = sla.cho_factor(Gram + gram_ridge * np.eye(m), lower=True)
        if nE:
            GBiG = sla.cho_solve(Gramf, Geq.T)
            GSE = Geq @ GBiG
            GSEf = sla.cho_factor(
                GSE + 1e-13 * (np.trace(GSE) / nE + 1.0) * np.eye(nE), lower=True
            )
        repair_ok = True
    except np.linalg.LinAlgError:
        repair_ok = False

    def dual_repair(rho: np.ndarray):
        t = sla.cho_solve(Gramf, rho)
        if nE:
            d2 = sla.cho_solve(GSEf, Geq @ t)
            lam = t - GBiG @ d2
        else:
            d2 = np.zeros(0)
            lam = t
        return lam, d2

    ndim_total = sum(b.dim for b in blocks)
    status = STATUS_MAX_ITER
    iters_done = 0
    slow_count = 0
    merit_history: List[float] = []
    best = {"merit": np.inf}

    def primal_matrix(b: _BlockWork) -> np.ndarray:
        """sum x_i F_i - F_0 for the block, dense."""
        v = b.F.T.dot(x) - b.F0
        return v if b.diag else v.reshape((b.dim, b.dim))

    mu0 = None
    for iteration in range(1, opts.max_iter + 1):
        iters_done = iteration
        # residuals
        mu = sum(float(np.sum(b.X * b.Y)) for b in blocks) / ndim_total
        if mu0 is None:
            mu0 = mu

        rp_norm = 0.0
        Rp = []
        for b in blocks:
            R = primal_matrix(b) - b.X
            Rp.append(R)
            rp_norm = max(rp_norm, float(np.abs(R).max(initial=0.0)))
        def dual_residual() -> np.ndarray:
            r = c.copy()
            for b in blocks:
                yvec = b.Y if b.diag else b.Y.ravel()
                r[b.touch] -= b.Fd @ yvec
            if nE:
                r -= Geq.T @ w_eq
            return r

        rd = dual_residual()
        # snap the dual iterate back onto its affine equation when rounding
        # drift has accumulated; the projection is damped to keep Y PSD
        if (
            repair_ok
            and mu < 1e-2 * mu0
            and float(np.abs(rd).max(initial=0.0)) > 5.0 * opts.tol_feas * (1.0 + data_scale)
        ):
            lam, d2 = dual_repair(rd)
            dY_fix = []
            alpha_fix = 1.0
            for b in blocks:
                corr_vec = b.Fd.T @ lam[b.touch]
                if b.diag:
                    dY_fix.append(corr_vec)
                    alpha_fix = min(alpha_fix, 0.95 * _diag_max_step(b.Y, corr_vec))
                else:
                    C = _sym(corr_vec.reshape((b.dim, b.dim)))
                    dY_fix.append(C)
                    alpha_fix = min(
                        alpha_fix, 0.95 * _psd_max_step_scaled(_chol_inv(b.Y), C)
                    )
            if alpha_fix > 1e-8:
                for bi, b in enumerate(blocks):
                    b.Y = b.Y + alpha_fix * dY_fix[bi]
                if nE:
                    w_eq = w_eq + alpha_fix * d2
                rd = dual_residual()

        if nE:
            req = heq - Geq @ x
            rp_norm = max(rp_norm, float(np.abs(req).max(initial=0.0)))
        else:
            req = np.zeros(0)
        rd_norm = float(np.abs(rd).max(initial=0.0))

        pobj = float(c @ x)
        dobj = sum(
            float(b.F0 @ (b.Y if b.diag else b.Y.ravel())) for b in blocks
        ) + (float(heq @ w_eq) if nE else 0.0)
        gap = pobj - dobj
        relgap = abs(gap) / (1.0 + abs(pobj) + abs(dobj))
        rp_rel = rp_norm / (1.0 + data_scale)
        rd_rel = rd_norm / (1.0 + data_scale)

        # conservative endgame: shorter steps and a centering floor keep the
        # iterates away from the boundary on degenerate optimal faces
        safe_mode = relgap < 3e-2 and iteration > 10
        step_fraction = 0.9 if safe_mode else opts.step_fraction

        if opts.verbose:
            print(
                f"iter {iteration:3d}  mu {mu:9.2e}  gap {relgap:9.2e}  "
                f"rp {rp_rel:9.2e}  rd {rd_rel:9.2e}  pobj {pobj:+.8e}"
            )

        merit = relgap + rp_rel + rd_rel
        if merit < best["merit"]:
            best.update(
                merit=merit,
                relgap=relgap,
                rp=rp_rel,
                rd=rd_rel,
                x=x.copy(),
                w=w_eq.copy(),
                X=[b.X.copy() for b in blocks],
                Y=[b.Y.copy() for b in blocks],
            )
        elif merit > 50.0 * best["merit"] and best["merit"] < 1e-2:
            # the endgame is diverging; stop and restore the best iterate
            status = STATUS_NUMERICAL
            break

        if relgap <= opts.tol_gap and rp_rel <= opts.tol_feas and rd_rel <= opts.tol_feas:
            status = STATUS_OPTIMAL
            break
        if abs(dobj) > 1e14 * (1.0 + data_scale) and rd_rel < 1e-6:
            status = STATUS_INFEASIBLE
            break
        if pobj < -1e14 * (1.0 + data_scale) and rp_rel < 1e-6:
            status = STATUS_UNBOUNDED
            break

        # stall detection on a combined merit of gap and feasibility
        merit_history.append(merit)
        if len(merit_history) >= 7 and iteration > 12:
            if min(merit_history[-6:]) > 0.9 * min(merit_history[:-6]):
                status = STATUS_SLOW
                break

        # NT scalings and Schur complement
        scal = []
        yinv = []
        B = np.zeros((m, m))
        try:
            for b in blocks:
                if b.diag:
                    w2 = b.Y / b.X  # U^2, with U = W^{-1}
                    scal.append(w2)
                    yinv.append(1.0 / b.Y)
                    contrib = (b.Fd * w2) @ b.Fd.T
                else:
                    nt = _NtScaling(b.X, b.Y)
                    scal.append(nt)
                    yinv.append(_sym(nt.G @ ((1.0 / nt.lam)[:, None] * nt.G.T)))
                    if b.dim <= 40:
                        K = np.kron(nt.U, nt.U)
                        contrib = (b.Fd @ K) @ b.Fd.T
                    else:
                        rows = [
                            (nt.U @ f.reshape((b.dim, b.dim)) @ nt.U).ravel()
                            for f in b.Fd
                        ]
                        contrib = b.Fd @ np.array(rows).T
                B[np.ix_(b.touch, b.touch)] += contrib
        except np.linalg.LinAlgError:
            status = STATUS_NUMERICAL
            break

        # proactive regularization: moment problems often carry exact gauge
        # directions (variable combinations no block can see), which make
        # the Schur complement singular; a ridge that shrinks with mu
        # quotients them out without limiting endgame accuracy
        diag_max = float(B.diagonal().max()) + 1e-300
        delta = diag_max * (1e-9 * min(1.0, mu / mu0) + 3e-14)
        try:
            for attempt in range(4):
                try:
                    Breg = B + delta * np.eye(m)
                    Bf = sla.cho_factor(Breg, lower=True)
                    break
                except np.linalg.LinAlgError:
                    delta = max(delta * 1e3, 1e-10 * (1.0 + float(np.abs(B).max())))
            else:
                raise np.linalg.LinAlgError("Schur factorization failed")
        except np.linalg.LinAlgError:
            status = STATUS_NUMERICAL
            break

        if nE:
            BiG = sla.cho_solve(Bf, Geq.T)
            SE = Geq @ BiG
            SEf = sla.cho_factor(
                SE + 1e-13 * (np.trace(SE) / max(nE, 1) + 1.0) * np.eye(nE),
                lower=True,
            )

        def kkt_once(r1: np.ndarray, r2: np.ndarray):
            t = sla.cho_solve(Bf, r1)
            if nE:
                dw = sla.cho_solve(SEf, r2 - Geq @ t)
                du = t + BiG @ dw
            else:
                dw = np.zeros(0)
                du = t
            return du, dw

        def kkt_solve(rhs: np.ndarray, rq: np.ndarray):
            """Solve B dx - G' dw = rhs, G dx = rq, refined against the
            true (unregularized) system so the ridge injects no error."""
            dx, dw = kkt_once(rhs, rq)
            scale_r = float(np.linalg.norm(rhs)) + float(np.linalg.norm(rq)) + 1e-300
            for _ in range(3):
                r1 = rhs - (B @ dx - (Geq.T @ dw if nE else 0.0))
                r2 = rq - Geq @ dx if nE else np.zeros(0)
                if np.linalg.norm(r1) + np.linalg.norm(r2) <= 1e-11 * scale_r:
                    break
                cx, cw = kkt_once(r1, r2)
                dx = dx + cx
                dw = dw + cw
            return dx, dw

        def solve_direction(sigma_mu: float, corr: Optional[List[np.ndarray]]):
            rhs = -rd.copy()  # note: g_i includes -r_d,i with r_d = c - <F,Y>
            Rmats = []
            for bi, b in enumerate(blocks):
                if b.diag:
                    R = sigma_mu * yinv[bi] - b.X - Rp[bi]
                    if corr is not None:
                        R = R - corr[bi]
                    MR = R * scal[bi]
                    Rmats.append(MR)
                    rhs[b.touch] += b.Fd @ MR
                else:
                    nt = scal[bi]
                    R = sigma_mu * yinv[bi] - b.X - Rp[bi]
                    if corr is not None:
                        R = R - corr[bi]
                    MR = nt.U @ _sym(R) @ nt.U
                    Rmats.append(MR)
                    rhs[b.touch] += b.Fd @ MR.ravel()
            # KKT with the equality rows folded in by block elimination:
            # B dx - Geq' dw = rhs, Geq dx = req
            dx, dw = kkt_solve(rhs, req)
            dXs, dYs = [], []
            for bi, b in enumerate(blocks):
                Sv = b.Fd.T @ dx[b.touch]
                if b.diag:
                    dX = Sv + Rp[bi]
                    dY = Rmats[bi] - scal[bi] * Sv
                else:
                    S = Sv.reshape((b.dim, b.dim))
                    dX = _sym(S + Rp[bi])
                    nt = scal[bi]
                    dY = _sym(Rmats[bi] - nt.U @ S @ nt.U)
                dXs.append(dX)
                dYs.append(dY)
            return dx, dw, dXs, dYs

        def max_steps(dXs, dYs):
            ap = ad = np.inf
            for bi, b in enumerate(blocks):
                if b.diag:
                    ap = min(ap, _diag_max_step(b.X, dXs[bi]))
                    ad = min(ad, _diag_max_step(b.Y, dYs[bi]))
                else:
                    nt = scal[bi]
                    ap = min(ap, _psd_max_step_scaled(nt.LiX, dXs[bi]))
                    ad = min(ad, _psd_max_step_scaled(nt.LiY, dYs[bi]))
            return ap, ad

        # predictor
        try:
            dx_a, dw_a, dX_a, dY_a = solve_direction(0.0, None)
        except np.linalg.LinAlgError:
            status = STATUS_NUMERICAL
            break
        ap, ad = max_steps(dX_a, dY_a)
        ap_aff = min(1.0, step_fraction * ap)
        ad_aff = min(1.0, step_fraction * ad)
        mu_aff = 0.0
        for bi, b in enumerate(blocks):
            Xa = b.X + ap_aff * dX_a[bi]
            Ya = b.Y + ad_aff * dY_a[bi]
            mu_aff += float(np.sum(Xa * Ya))
        mu_aff /= ndim_total
        sigma = min(1.0, max(0.0, (max(mu_aff, 0.0) / mu) ** 3))
        if safe_mode:
            sigma = max(sigma, 0.15)

        # Mehrotra corrector, exact in the scaled (NT eigenbasis) space
        corr = []
        for bi, b in enumerate(blocks):
            if b.diag:
                corr.append(dX_a[bi] * dY_a[bi] / b.Y)
            else:
                nt = scal[bi]
                DXa = nt.Gi @ dX_a[bi] @ nt.Gi.T
                DYa = nt.G.T @ dY_a[bi] @ nt.G
                C = 0.5 * (DXa @ DYa + DYa @ DXa)
                S = 2.0 / np.add.outer(nt.lam, nt.lam)
                corr.append(_sym(nt.G @ (C * S) @ nt.G.T))
        try:
            dx, dw, dXs, dYs = solve_direction(sigma * mu, corr)
        except np.linalg.LinAlgError:
            dx, dw, dXs, dYs = dx_a, dw_a, dX_a, dY_a
        ap, ad = max_steps(dXs, dYs)
        alpha_p = min(1.0, step_fraction * ap)
        alpha_d = min(1.0, step_fraction * ad)
        if min(alpha_p, alpha_d) < 1e-3:
            # fall back to a centering step when the corrector stalls
            try:
                dx, dw, dXs, dYs = solve_direction(0.8 * mu, None)
            except np.linalg.LinAlgError:
                status = STATUS_NUMERICAL
                break
            ap, ad = max_steps(dXs, dYs)
            alpha_p = min(1.0, step_fraction * ap)
            alpha_d = min(1.0, step_fraction * ad)

        if min(alpha_p, alpha_d) < 1e-8:
            slow_count += 1
        else:
            slow_count = 0
        if slow_count >= 3:
            status = STATUS_SLOW
            break

        x = x + alpha_p * dx
        if nE:
            w_eq = w_eq + alpha_d * dw
        for bi, b in enumerate(blocks):
            if b.diag:
                b.X = b.X + alpha_p * dXs[bi]
                b.Y = b.Y + alpha_d * dYs[bi]
            else:
                b.X = _sym(b.X + alpha_p * dXs[bi])
                b.Y = _sym(b.Y + alpha_d * dYs[bi])

    # fall back to the best iterate seen when the last steps degraded
    if best["merit"] < np.inf and status not in (STATUS_INFEASIBLE, STATUS_UNBOUNDED):
        x = best["x"]
        w_eq = best["w"]
        for bi, b in enumerate(blocks):
            b.X = best["X"][bi]
            b.Y = best["Y"][bi]
        # a stalled or diverging run whose best iterate is essentially
        # feasible and nearly converged counts as slow progress, not error
        near = best["rp"] <= 1e-5 and best["rd"] <= 1e-5 and best["relgap"] <= 5e-3
        if status in (STATUS_NUMERICAL, STATUS_MAX_ITER) and near:
            status = STATUS_SLOW
        elif status == STATUS_SLOW and not near:
            status = STATUS_NUMERICAL

    pobj = float(c @ x) + problem.objective_offset
    dobj = (
        sum(float(b.F0 @ (b.Y if b.diag else b.Y.ravel())) for b in blocks)
        + (float(heq @ w_eq) if nE else 0.0)
        + problem.objective_offset
    )
    elapsed = _time.perf_counter() - t0
    return ConicSolution(
        primal_objective=pobj,
        dual_objective=dobj,
        status=status,
        iterations=iters_done,
        duality_gap=pobj - dobj,
        x=col_scale * x,
        slack_blocks=tuple(
            (b.X.copy() if not b.diag else b.X.copy()) for b in blocks
        ),
        dual_blocks=tuple(
            (b.Y.copy() if not b.diag else b.Y.copy()) for b in blocks
        ),
        timings={"solve": elapsed},
    )

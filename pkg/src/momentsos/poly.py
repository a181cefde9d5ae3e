"""Sparse multivariate polynomials and polynomial optimization models.

A monomial exponent is a sparse tuple of ``(variable index, power)`` pairs
with 1-based variable indices, strictly increasing indices and no zero
powers; the empty tuple is the constant monomial.  A polynomial is a map
from exponents to float coefficients together with a variable count.

Everything here is immutable after construction and can be shared freely
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Tuple

Exponent = Tuple[Tuple[int, int], ...]

ZERO_EXPONENT: Exponent = ()


class PolynomialError(ValueError):
    """Raised for malformed polynomials, exponents or POP text."""


def make_exponent(pairs: Iterable[Tuple[int, int]]) -> Exponent:
    """Normalize (index, power) pairs into a canonical exponent tuple.

    Pairs may arrive unsorted or with repeated indices; powers for the same
    index are added, zero powers are dropped.
    """
    acc: dict[int, int] = {}
    for idx, power in pairs:
        if idx < 1:
            raise PolynomialError(f"variable index {idx} is not 1-based")
        if power < 0:
            raise PolynomialError(f"negative power {power} for x{idx}")
        if power:
            acc[idx] = acc.get(idx, 0) + power
    return tuple(sorted((i, p) for i, p in acc.items() if p))


def exponent_degree(e: Exponent) -> int:
    return sum(p for _, p in e)


def exponent_support(e: Exponent) -> Tuple[int, ...]:
    """Indices of variables with nonzero power."""
    return tuple(i for i, _ in e)


def exponent_add(a: Exponent, b: Exponent) -> Exponent:
    if not a:
        return b
    if not b:
        return a
    acc = dict(a)
    for idx, power in b:
        acc[idx] = acc.get(idx, 0) + power
    return tuple(sorted(acc.items()))


def exponent_is_even(e: Exponent) -> bool:
    """True when every stored power is even (membership in (2N)^n)."""
    return all(p % 2 == 0 for _, p in e)


def exponent_halve(e: Exponent) -> Exponent:
    if not exponent_is_even(e):
        raise PolynomialError(f"exponent {e} is not even")
    return tuple((i, p // 2) for i, p in e)


def grlex_key(e: Exponent):
    """Sort key for graded lexicographic order with x1 > x2 > ... .

    Ascending total degree; within a degree, x1^2 < x1*x2 < x2^2 style
    ordering, i.e. larger-lex monomials come first.
    """
    return (exponent_degree(e), tuple((i, -p) for i, p in e))


def exponent_str(e: Exponent) -> str:
    if not e:
        return "1"
    return " ".join(f"x{i}^{p}" for i, p in e)


def monomial_basis(variables: Sequence[int], degree: int) -> Tuple[Exponent, ...]:
    """All monomials in the given variables up to total degree, grlex sorted.

    The variables carry their global indices, so the basis is the embedding
    of N^{n_k}_d into N^n.
    """
    if degree < 0:
        raise PolynomialError(f"negative basis degree {degree}")
    vs = sorted(set(variables))
    # Extend by one variable at a time; each pass appends every admissible
    # power of the new variable to the monomials built so far.
    out: list[Exponent] = [ZERO_EXPONENT]
    for v in vs:
        grown: list[Exponent] = []
        for e in out:
            d0 = exponent_degree(e)
            for p in range(1, degree - d0 + 1):
                grown.append(e + ((v, p),))
        out.extend(grown)
    return tuple(sorted(out, key=grlex_key))


@dataclass(frozen=True)
class Polynomial:
    """Immutable sparse polynomial over real variables x1..x_nvars."""

    nvars: int
    terms: Mapping[Exponent, float] = field(default_factory=dict)

    def __post_init__(self):
        clean: dict[Exponent, float] = {}
        for e, c in self.terms.items():
            if e and e[-1][0] > self.nvars:
                raise PolynomialError(
                    f"exponent {e} references x{e[-1][0]} > nvars={self.nvars}"
                )
            c = float(c)
            if c != 0.0:
                clean[e] = c
        object.__setattr__(self, "terms", clean)

    # -- constructors -------------------------------------------------
    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars, {})

    @staticmethod
    def constant(nvars: int, value: float) -> "Polynomial":
        return Polynomial(nvars, {ZERO_EXPONENT: value})

    @staticmethod
    def variable(nvars: int, index: int, power: int = 1) -> "Polynomial":
        if not 1 <= index <= nvars:
            raise PolynomialError(f"variable index {index} out of range")
        return Polynomial(nvars, {make_exponent([(index, power)]): 1.0})

    @staticmethod
    def from_terms(nvars: int, items: Iterable[Tuple[Iterable[Tuple[int, int]], float]]) -> "Polynomial":
        acc: dict[Exponent, float] = {}
        for pairs, coeff in items:
            e = make_exponent(pairs)
            acc[e] = acc.get(e, 0.0) + float(coeff)
        return Polynomial(nvars, acc)

    # -- queries -------------------------------------------------------
    def is_zero(self) -> bool:
        return not self.terms

    def support(self) -> frozenset:
        return frozenset(self.terms)

    def degree(self) -> int:
        if not self.terms:
            raise PolynomialError("degree of the zero polynomial is undefined")
        return max(exponent_degree(e) for e in self.terms)

    def variables(self) -> Tuple[int, ...]:
        """Union of variable supports over all monomials."""
        seen: set[int] = set()
        for e in self.terms:
            seen.update(exponent_support(e))
        return tuple(sorted(seen))

    def coefficient(self, e: Exponent) -> float:
        return self.terms.get(e, 0.0)

    def max_abs_coefficient(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(c) for c in self.terms.values())

    def evaluate(self, point: Sequence[float]) -> float:
        if len(point) != self.nvars:
            raise PolynomialError(
                f"point has {len(point)} coordinates, expected {self.nvars}"
            )
        total = 0.0
        for e, c in self.terms.items():
            v = c
            for i, p in e:
                v *= point[i - 1] ** p
            total += v
        return total

    # -- arithmetic ----------------------------------------------------
    def _check_compatible(self, other: "Polynomial"):
        if self.nvars != other.nvars:
            raise PolynomialError("polynomials over different variable counts")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check_compatible(other)
        acc = dict(self.terms)
        for e, c in other.terms.items():
            acc[e] = acc.get(e, 0.0) + c
        return Polynomial(self.nvars, acc)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {e: -c for e, c in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        self._check_compatible(other)
        acc: dict[Exponent, float] = {}
        for ea, ca in self.terms.items():
            for eb, cb in other.terms.items():
                e = exponent_add(ea, eb)
                acc[e] = acc.get(e, 0.0) + ca * cb
        return Polynomial(self.nvars, acc)

    def scale(self, factor: float) -> "Polynomial":
        return Polynomial(self.nvars, {e: c * factor for e, c in self.terms.items()})

    def substitute(self, index: int, replacement: "Polynomial") -> "Polynomial":
        """Substitute x_index by a polynomial (same variable count)."""
        self._check_compatible(replacement)
        result = Polynomial.zero(self.nvars)
        for e, c in self.terms.items():
            factor = Polynomial.constant(self.nvars, c)
            for i, p in e:
                base = replacement if i == index else Polynomial.variable(self.nvars, i)
                for _ in range(p):
                    factor = factor * base
            result = result + factor
        return result

    # -- printing --------------------------------------------------------
    def __str__(self) -> str:
        if not self.terms:
            return "0.0"
        parts = []
        for e in sorted(self.terms, key=grlex_key):
            c = self.terms[e]
            if e:
                parts.append(f"{c!r} * {exponent_str(e)}")
            else:
                parts.append(f"{c!r}")
        return " + ".join(parts)


def support(p: Polynomial) -> frozenset:
    """supp(p): exponents with nonzero coefficient."""
    return p.support()


def half_degree(p: Polynomial) -> int:
    """ceil(deg(p) / 2); the d_j of a constraint polynomial."""
    return (p.degree() + 1) // 2


@dataclass(frozen=True)
class PopModel:
    """A polynomial optimization problem.

    Minimize ``objective`` subject to ``inequalities[j] >= 0`` and
    ``equalities[j] == 0``.  Constraint indexing follows the usual
    convention: inequalities occupy 1..m and equalities m+1..m+l.
    """

    objective: Polynomial
    inequalities: Tuple[Polynomial, ...] = ()
    equalities: Tuple[Polynomial, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inequalities", tuple(self.inequalities))
        object.__setattr__(self, "equalities", tuple(self.equalities))
        for g in self.inequalities + self.equalities:
            if g.nvars != self.nvars:
                raise PolynomialError("constraint over a different variable count")

    @property
    def nvars(self) -> int:
        return self.objective.nvars

    def constraints(self) -> Tuple[Polynomial, ...]:
        return self.inequalities + self.equalities


def minimum_order(pop: PopModel) -> int:
    """d_min: the smallest admissible relaxation order."""
    d = half_degree(pop.objective)
    for g in pop.constraints():
        d = max(d, half_degree(g))
    return d


# ---------------------------------------------------------------------------
# Text POP format.
#
# One polynomial per line with an "obj:", "ineq:" or "eq:" prefix; an
# optional "nvars: <n>" line pins the variable count.  Terms are printed as
# "<coeff> * x<i>^<p> ..." joined by " + " with repr() floats, so parsing a
# printed file reproduces it bit for bit.
# ---------------------------------------------------------------------------


def _parse_poly(body: str, nvars: int, where: str) -> Polynomial:
    acc: dict[Exponent, float] = {}
    body = body.strip()
    if not body or body == "0.0":
        return Polynomial.zero(nvars)
    for raw in body.split(" + "):
        term = raw.strip()
        if not term:
            raise PolynomialError(f"{where}: empty term")
        if "*" in term:
            coeff_s, mono_s = term.split("*", 1)
            try:
                coeff = float(coeff_s)
            except ValueError as exc:
                raise PolynomialError(f"{where}: bad coefficient {coeff_s!r}") from exc
            pairs = []
            for tok in mono_s.split():
                if not tok.startswith("x"):
                    raise PolynomialError(f"{where}: bad monomial token {tok!r}")
                if "^" in tok:
                    i_s, p_s = tok[1:].split("^", 1)
                else:
                    i_s, p_s = tok[1:], "1"
                try:
                    pairs.append((int(i_s), int(p_s)))
                except ValueError as exc:
                    raise PolynomialError(f"{where}: bad monomial token {tok!r}") from exc
            e = make_exponent(pairs)
        else:
            try:
                coeff = float(term)
            except ValueError as exc:
                raise PolynomialError(f"{where}: bad constant term {term!r}") from exc
            e = ZERO_EXPONENT
        acc[e] = acc.get(e, 0.0) + coeff
    return Polynomial(nvars, acc)


def pop_from_text(text: str) -> PopModel:
    nvars = 0
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        lines.append((lineno, line))
    for _, line in lines:
        if line.startswith("nvars:"):
            nvars = int(line.split(":", 1)[1])
    if nvars == 0:
        # infer from the largest index that appears anywhere
        import re

        for _, line in lines:
            for m in re.finditer(r"x(\d+)", line):
                nvars = max(nvars, int(m.group(1)))
    objective = None
    ineqs: list[Polynomial] = []
    eqs: list[Polynomial] = []
    for lineno, line in lines:
        if line.startswith("nvars:"):
            continue
        if line.startswith("obj:"):
            if objective is not None:
                raise PolynomialError(f"line {lineno}: duplicate objective")
            objective = _parse_poly(line[4:], nvars, f"line {lineno}")
        elif line.startswith("ineq:"):
            ineqs.append(_parse_poly(line[5:], nvars, f"line {lineno}"))
        elif line.startswith("eq:"):
            eqs.append(_parse_poly(line[3:], nvars, f"line {lineno}"))
        else:
            raise PolynomialError(f"line {lineno}: unknown prefix in {line!r}")
    if objective is None:
        raise PolynomialError("missing obj: line")
    return PopModel(objective, tuple(ineqs), tuple(eqs))


def pop_to_text(pop: PopModel) -> str:
    out = [f"nvars: {pop.nvars}"]
    out.append(f"obj: {pop.objective}")
    for g in pop.inequalities:
        out.append(f"ineq: {g}")
    for g in pop.equalities:
        out.append(f"eq: {g}")
    return "\n".join(out) + "\n"

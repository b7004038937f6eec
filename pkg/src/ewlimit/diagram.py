"""Power counting for graphs of homogeneous kernels.

A diagram is a graph whose edges carry kernels ``K_e`` with
``|K_e(x)| <~ |x|^deg0`` near the origin and ``|x|^deginf`` at infinity.
Legged vertices are tested against smooth functions, interior vertices are
integrated over ``R^d``.  The integral converges when

* every non-empty edge subset has ``sum deg0 + d (|V(subset)| - 1) > 0``;
* every tight partition (legged vertices in one block, at least two blocks)
  has ``sum_{traversing edges} deginf + d (|blocks| - 1) < 0``.

Degrees are affine in a parameter ``lam`` with exact rational coefficients,
so the admissible set of ``lam`` is an exact open interval.
"""
from __future__ import annotations

import ast
import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import networkx as nx

from .errors import (DiagramError, DiagramSyntaxError, EmptySubgraph, EnumerationBudgetExceeded,
                     NotPartition, NotTight, ReductionNotApplicable)

__all__ = [
    "AffineDegree",
    "Edge",
    "FeynmanDiagram",
    "Status",
    "Verdict",
    "OpenInterval",
    "parse_affine",
    "parse_diagram",
    "deg0_subgraph",
    "deginf_partition",
    "tight_partitions",
    "check_fixed",
    "admissible_interval",
    "reduce_vertex",
    "isomorphic",
    "gamma0",
    "gamma0_prime",
    "gamma1",
    "gamma2",
    "gamma_tilde",
]

MAX_EDGES = 20
MAX_VERTICES = 12
DEFAULT_BUDGET = 2_000_000


def _q(x) -> Fraction:
    if isinstance(x, float):
        raise TypeError("degrees must be exact; pass int, Fraction or 'p/q' strings")
    return Fraction(x)


@dataclass(frozen=True, order=True)
class AffineDegree:
    """``constant + lambda_coeff * lam`` with rational coefficients."""

    constant: Fraction = Fraction(0)
    lambda_coeff: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "constant", _q(self.constant))
        object.__setattr__(self, "lambda_coeff", _q(self.lambda_coeff))

    @classmethod
    def lam(cls) -> "AffineDegree":
        return cls(0, 1)

    @classmethod
    def of(cls, value) -> "AffineDegree":
        return value if isinstance(value, AffineDegree) else cls(_q(value), 0)

    def __call__(self, lam) -> Fraction:
        return self.constant + self.lambda_coeff * _q(lam)

    def __add__(self, other):
        o = AffineDegree.of(other)
        return AffineDegree(self.constant + o.constant, self.lambda_coeff + o.lambda_coeff)

    __radd__ = __add__

    def __neg__(self):
        return AffineDegree(-self.constant, -self.lambda_coeff)

    def __sub__(self, other):
        return self + (-AffineDegree.of(other))

    def __rsub__(self, other):
        return AffineDegree.of(other) - self

    def __mul__(self, k):
        k = _q(k)
        return AffineDegree(self.constant * k, self.lambda_coeff * k)

    __rmul__ = __mul__

    @property
    def is_constant(self) -> bool:
        return self.lambda_coeff == 0

    def __str__(self):
        if self.lambda_coeff == 0:
            return str(self.constant)
        lam = "L" if self.lambda_coeff == 1 else "-L" if self.lambda_coeff == -1 else f"{self.lambda_coeff}*L"
        if self.constant == 0:
            return lam
        sign = "+" if self.constant > 0 else "-"
        return f"{lam} {sign} {abs(self.constant)}"


@dataclass(frozen=True)
class Edge:
    tail: str
    head: str
    deg0: AffineDegree
    deginf: AffineDegree

    @property
    def ends(self) -> frozenset:
        return frozenset((self.tail, self.head))

    @property
    def homogeneous(self) -> bool:
        return self.deg0 == self.deginf


@dataclass(frozen=True)
class FeynmanDiagram:
    """Directed multigraph with affine degree labels.

    Orientation is kept for fidelity but ignored by all power counting.
    """

    vertices: tuple
    edges: tuple
    legged: frozenset = frozenset()
    dimension: int = 3
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "legged", frozenset(self.legged))
        vs = set(self.vertices)
        if len(vs) != len(self.vertices):
            raise DiagramError("duplicate vertex ids")
        if not self.legged <= vs:
            raise DiagramError(f"legged vertices {sorted(self.legged - vs)} are not vertices")
        if len(self.vertices) > MAX_VERTICES:
            raise DiagramError(f"{len(self.vertices)} vertices exceed the limit of {MAX_VERTICES}")
        if len(self.edges) > MAX_EDGES:
            raise DiagramError(f"{len(self.edges)} edges exceed the limit of {MAX_EDGES}")
        touched = set()
        for e in self.edges:
            if e.tail not in vs or e.head not in vs:
                raise DiagramError(f"edge {e.tail}-{e.head} references an unknown vertex")
            if e.tail == e.head:
                raise DiagramError(f"self-loop at {e.tail}")
            touched |= e.ends
        lonely = [v for v in self.interior if v not in touched]
        if lonely:
            raise DiagramError(f"interior vertices without edges: {lonely}")
        if self.dimension < 1:
            raise DiagramError("dimension must be positive")

    @property
    def interior(self) -> tuple:
        return tuple(v for v in self.vertices if v not in self.legged)

    def index(self, v: str) -> int:
        return self.vertices.index(v)

    def incident(self, v: str) -> list[int]:
        return [i for i, e in enumerate(self.edges) if v in e.ends]

    def to_dsl(self) -> str:
        lines = [f"# {self.name}"] if self.name else []
        for v in self.vertices:
            lines.append(f"vertex {v}" + (" legged" if v in self.legged else ""))
        for e in self.edges:
            lines.append(f"edge {e.tail} {e.head} deg0={e.deg0} deginf={e.deginf}".replace(" + ", "+")
                         .replace(" - ", "-"))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# degrees of subgraphs and partitions


def deg0_subgraph(diagram: FeynmanDiagram, edge_subset: Iterable[int]) -> AffineDegree:
    """``sum deg0(e) + d (|V(subset)| - 1)``, ``V`` the incident vertices."""
    idx = sorted(set(int(i) for i in edge_subset))
    if not idx:
        raise EmptySubgraph("edge subset is empty")
    if idx[0] < 0 or idx[-1] >= len(diagram.edges):
        raise DiagramError("edge index out of range")
    verts = set().union(*(diagram.edges[i].ends for i in idx))
    total = sum((diagram.edges[i].deg0 for i in idx), AffineDegree())
    return total + diagram.dimension * (len(verts) - 1)


def _canonical_partition(diagram: FeynmanDiagram, partition) -> tuple:
    blocks = [tuple(sorted(set(b), key=diagram.index)) for b in partition]
    return tuple(sorted(blocks, key=lambda b: [diagram.index(v) for v in b]))


def deginf_partition(diagram: FeynmanDiagram, partition: Iterable[Iterable[str]]) -> AffineDegree:
    """``sum_{traversing e} deginf(e) + d (|blocks| - 1)``."""
    blocks = [frozenset(b) for b in partition]
    if any(not b for b in blocks):
        raise NotPartition("empty block")
    union = frozenset().union(*blocks) if blocks else frozenset()
    if sum(len(b) for b in blocks) != len(union) or union != frozenset(diagram.vertices):
        raise NotPartition("blocks must be disjoint and cover every vertex")
    if len(blocks) < 2:
        raise NotPartition("a partition needs at least two blocks")
    if diagram.legged and not any(diagram.legged <= b for b in blocks):
        raise NotTight("legged vertices are split across blocks")
    where = {v: i for i, b in enumerate(blocks) for v in b}
    total = sum((e.deginf for e in diagram.edges if where[e.tail] != where[e.head]), AffineDegree())
    return total + diagram.dimension * (len(blocks) - 1)


def _set_partitions(items: Sequence) -> Iterator[list[list]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def _bell(n: int) -> int:
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for x in row:
            nxt.append(nxt[-1] + x)
        row = nxt
    return row[0]


def tight_partitions(diagram: FeynmanDiagram, budget: int = DEFAULT_BUDGET) -> list[tuple]:
    """All tight partitions with at least two blocks, canonically ordered."""
    star = object()
    items = ([star] if diagram.legged else []) + list(diagram.interior)
    if _bell(len(items)) > budget:
        raise EnumerationBudgetExceeded(f"{_bell(len(items))} partitions exceed the budget {budget}")
    out = []
    for part in _set_partitions(items):
        if len(part) < 2:
            continue
        blocks = []
        for b in part:
            vs = []
            for v in b:
                vs.extend(diagram.legged if v is star else [v])
            blocks.append(vs)
        out.append(_canonical_partition(diagram, blocks))
    return sorted(set(out), key=lambda p: [[diagram.index(v) for v in b] for b in p])


def _edge_subsets(diagram: FeynmanDiagram, budget: int) -> Iterator[tuple]:
    m = len(diagram.edges)
    if 2**m - 1 > budget:
        raise EnumerationBudgetExceeded(f"{2 ** m - 1} subgraphs exceed the budget {budget}")
    for k in range(1, m + 1):
        yield from itertools.combinations(range(m), k)


# ---------------------------------------------------------------------------
# verdicts


class Status(enum.Enum):
    INTEGRABLE = "Integrable"
    FAILS_SMALL_SCALE = "FailsSmallScale"
    FAILS_LARGE_SCALE = "FailsLargeScale"


@dataclass(frozen=True)
class Verdict:
    status: Status
    at_lambda: Fraction
    witness: tuple | None = None
    degree: Fraction | None = None

    @property
    def integrable(self) -> bool:
        return self.status is Status.INTEGRABLE

    def describe(self, diagram: FeynmanDiagram | None = None) -> str:
        if self.integrable:
            return f"Integrable at L = {self.at_lambda}"
        if self.status is Status.FAILS_SMALL_SCALE:
            if diagram is not None:
                w = ", ".join(f"{diagram.edges[i].tail}-{diagram.edges[i].head}" for i in self.witness)
            else:
                w = ", ".join(map(str, self.witness))
            return f"FailsSmallScale at L = {self.at_lambda}: subgraph {{{w}}} has deg0 = {self.degree} <= 0"
        blocks = " | ".join("{" + ", ".join(b) + "}" for b in self.witness)
        return f"FailsLargeScale at L = {self.at_lambda}: partition {blocks} has deginf = {self.degree} >= 0"


def check_fixed(diagram: FeynmanDiagram, lam, budget: int = DEFAULT_BUDGET) -> Verdict:
    """Check both criteria at a fixed ``lam``.

    Small-scale conditions are checked first; the witness is the smallest
    violating edge subset (by size, then lexicographically) or the first
    violating partition in canonical order.
    """
    lam = _q(lam)
    for subset in _edge_subsets(diagram, budget):
        val = deg0_subgraph(diagram, subset)(lam)
        if val <= 0:
            return Verdict(Status.FAILS_SMALL_SCALE, lam, subset, val)
    for part in tight_partitions(diagram, budget):
        val = deginf_partition(diagram, part)(lam)
        if val >= 0:
            return Verdict(Status.FAILS_LARGE_SCALE, lam, part, val)
    return Verdict(Status.INTEGRABLE, lam)


@dataclass(frozen=True)
class OpenInterval:
    """``(lo, hi)``; ``None`` stands for an infinite endpoint."""

    lo: Fraction | None
    hi: Fraction | None

    def __contains__(self, x) -> bool:
        x = _q(x)
        return (self.lo is None or x > self.lo) and (self.hi is None or x < self.hi)

    def __str__(self):
        lo = "-inf" if self.lo is None else str(self.lo)
        hi = "inf" if self.hi is None else str(self.hi)
        return f"({lo}, {hi})"


@dataclass(frozen=True)
class IntervalResult:
    """Admissible set (a union of open intervals) with its binding constraints."""

    intervals: tuple
    lower_witness: tuple | None = field(default=None, compare=False)
    upper_witness: tuple | None = field(default=None, compare=False)

    @property
    def empty(self) -> bool:
        return not self.intervals

    def __str__(self):
        return " U ".join(str(i) for i in self.intervals) if self.intervals else "empty"


def _constraints(diagram: FeynmanDiagram, budget: int):
    """Yield ``(p, witness)`` meaning ``p(lam) > 0`` is required."""
    for subset in _edge_subsets(diagram, budget):
        yield deg0_subgraph(diagram, subset), ("subgraph", subset)
    for part in tight_partitions(diagram, budget):
        yield -deginf_partition(diagram, part), ("partition", part)


def admissible_interval(diagram: FeynmanDiagram, budget: int = DEFAULT_BUDGET) -> IntervalResult:
    """All ``lam`` for which every condition holds strictly."""
    lo = hi = None
    lo_w = hi_w = None
    for p, w in _constraints(diagram, budget):
        if p.lambda_coeff == 0:
            if p.constant <= 0:
                return IntervalResult((), w, w)
            continue
        root = -p.constant / p.lambda_coeff
        if p.lambda_coeff > 0 and (lo is None or root > lo):
            lo, lo_w = root, w
        elif p.lambda_coeff < 0 and (hi is None or root < hi):
            hi, hi_w = root, w
    if lo is not None and hi is not None and lo >= hi:
        return IntervalResult((), lo_w, hi_w)
    return IntervalResult((OpenInterval(lo, hi),), lo_w, hi_w)


# ---------------------------------------------------------------------------
# vertex reduction


def reduce_vertex(diagram: FeynmanDiagram, vertex: str, at_lambda=None) -> FeynmanDiagram:
    """Integrate out an interior vertex joined to two homogeneous kernels.

    ``int |x - z|^alpha |z - y|^beta dz = c |x - y|^(alpha + beta + d)``
    needs ``alpha, beta > -d`` and ``alpha + beta + d < 0``; these are checked
    at ``at_lambda`` (required when a degree depends on ``lam``).
    """
    if vertex not in diagram.vertices:
        raise ReductionNotApplicable(f"unknown vertex {vertex}")
    if vertex in diagram.legged:
        raise ReductionNotApplicable(f"{vertex} is legged")
    inc = diagram.incident(vertex)
    if len(inc) != 2:
        raise ReductionNotApplicable(f"{vertex} has {len(inc)} incident edges, need 2")
    e1, e2 = (diagram.edges[i] for i in inc)
    if not (e1.homogeneous and e2.homogeneous):
        raise ReductionNotApplicable("both kernels must be homogeneous (deg0 == deginf)")
    a, b = e1.deg0, e2.deg0
    new = a + b + diagram.dimension
    d = diagram.dimension
    if all(x.is_constant for x in (a, b)):
        vals = (a.constant, b.constant, new.constant)
    else:
        if at_lambda is None:
            raise ReductionNotApplicable("degrees depend on L; pass at_lambda")
        vals = (a(at_lambda), b(at_lambda), new(at_lambda))
    if not (vals[0] > -d and vals[1] > -d and vals[2] < 0):
        raise ReductionNotApplicable(
            f"need alpha, beta > -{d} and alpha + beta + {d} < 0, got {vals[0]}, {vals[1]}")
    n1 = next(iter(e1.ends - {vertex}))
    n2 = next(iter(e2.ends - {vertex}))
    if n1 == n2:
        raise ReductionNotApplicable("reduction would create a self-loop")
    merged = Edge(n1, n2, new, new)
    edges = []
    for i, e in enumerate(diagram.edges):
        if i == inc[0]:
            edges.append(merged)
        elif i != inc[1]:
            edges.append(e)
    verts = tuple(v for v in diagram.vertices if v != vertex)
    return FeynmanDiagram(verts, tuple(edges), diagram.legged, diagram.dimension, diagram.name)


def _as_multigraph(diagram: FeynmanDiagram) -> nx.MultiGraph:
    G = nx.MultiGraph()
    for v in diagram.vertices:
        G.add_node(v, legged=v in diagram.legged)
    for e in diagram.edges:
        G.add_edge(e.tail, e.head, deg=(e.deg0, e.deginf))
    return G


def isomorphic(a: FeynmanDiagram, b: FeynmanDiagram) -> bool:
    """Label-preserving isomorphism, ignoring vertex names and orientation."""
    if a.dimension != b.dimension:
        return False

    def edge_match(x, y):
        return sorted(d["deg"] for d in x.values()) == sorted(d["deg"] for d in y.values())

    return nx.is_isomorphic(_as_multigraph(a), _as_multigraph(b),
                            node_match=lambda x, y: x["legged"] == y["legged"], edge_match=edge_match)


# ---------------------------------------------------------------------------
# text format


_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)


def parse_affine(text: str, kappa=None, dim=None) -> AffineDegree:
    """Parse an affine expression in ``L`` (``K`` = kappa and ``D`` = dim if given)."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse {text!r}") from exc
    names = {"L": AffineDegree.lam()}
    if kappa is not None:
        names["K"] = AffineDegree.of(_q(kappa))
    if dim is not None:
        names["D"] = AffineDegree.of(_q(dim))

    def ev(node) -> AffineDegree:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
            return AffineDegree.of(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ValueError(f"unknown symbol {node.id!r}" +
                                 (" (supply --kappa/--dim)" if node.id in "KD" else ""))
            return names[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            x, y = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return x + y
            if isinstance(node.op, ast.Sub):
                return x - y
            if isinstance(node.op, ast.Mult):
                if x.is_constant:
                    return y * x.constant
                if y.is_constant:
                    return x * y.constant
                raise ValueError("product of two L-dependent terms is not affine")
            if not y.is_constant or y.constant == 0:
                raise ValueError("division must be by a non-zero constant")
            return x * (1 / y.constant)
        raise ValueError(f"unsupported syntax in {text!r}")

    return ev(tree)


def parse_diagram(text: str, kappa=None, dim: int = 3, name: str = "") -> FeynmanDiagram:
    """Read the line format ``vertex <id> [legged]`` / ``edge <a> <b> deg0=.. deginf=..``."""
    vertices, legged, edges = [], set(), []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "vertex":
                if len(tok) not in (2, 3) or (len(tok) == 3 and tok[2] != "legged"):
                    raise ValueError("expected: vertex <id> [legged]")
                vertices.append(tok[1])
                if len(tok) == 3:
                    legged.add(tok[1])
            elif tok[0] == "edge":
                if len(tok) < 4:
                    raise ValueError("expected: edge <a> <b> deg0=<expr> deginf=<expr>")
                rest = " ".join(tok[3:])
                fields = {}
                parts = [p.strip() for p in _split_assignments(rest)]
                for p in parts:
                    key, _, expr = p.partition("=")
                    key = key.strip()
                    if key not in ("deg0", "deginf", "deg") or not expr.strip():
                        raise ValueError(f"bad edge attribute {p!r}")
                    fields[key] = parse_affine(expr, kappa, dim)
                if "deg" in fields:
                    fields.setdefault("deg0", fields["deg"])
                    fields.setdefault("deginf", fields["deg"])
                if "deg0" not in fields or "deginf" not in fields:
                    raise ValueError("edge needs deg0 and deginf")
                edges.append(Edge(tok[1], tok[2], fields["deg0"], fields["deginf"]))
            else:
                raise ValueError(f"unknown directive {tok[0]!r}")
        except ValueError as exc:
            raise DiagramSyntaxError(str(exc), line=lineno) from None
    try:
        return FeynmanDiagram(tuple(vertices), tuple(edges), frozenset(legged), int(dim), name)
    except DiagramError as exc:
        raise DiagramSyntaxError(str(exc), line=None) from None


def _split_assignments(text: str) -> list[str]:
    """Split ``deg0=a b deginf=c`` at the attribute keys."""
    out, cur = [], []
    for tok in text.split():
        if "=" in tok and tok.split("=", 1)[0] in ("deg0", "deginf", "deg") and cur:
            out.append(" ".join(cur))
            cur = []
        cur.append(tok)
    if cur:
        out.append(" ".join(cur))
    return out


# ---------------------------------------------------------------------------
# diagrams used in the fluctuation estimates


def _edge(a, b, deg) -> Edge:
    deg = AffineDegree.of(deg)
    return Edge(a, b, deg, deg)


def gamma0(kappa, d: int = 3) -> FeynmanDiagram:
    """Two legs joined through two interior points by one Riesz kernel."""
    k, L = _q(kappa), AffineDegree.lam()
    return FeynmanDiagram(("x1", "x2", "y1", "y2"),
                          (_edge("y1", "x1", L - d), _edge("y2", "x2", L - d), _edge("y1", "y2", -k)),
                          frozenset({"x1", "x2"}), d, "gamma0")


def gamma0_prime(kappa, d: int = 3) -> FeynmanDiagram:
    k, L = _q(kappa), AffineDegree.lam()
    return FeynmanDiagram(("x1", "x2", "y"), (_edge("y", "x1", L - d), _edge("y", "x2", L - k)),
                          frozenset({"x1", "x2"}), d, "gamma0_prime")


def gamma1(kappa, d: int = 3) -> FeynmanDiagram:
    k, L = _q(kappa), AffineDegree.lam()
    edges = [_edge(f"y{i}", f"x{i}", L - d) for i in range(1, 5)]
    edges += [_edge("y1", "y2", -k), _edge("y3", "y4", -k), _edge("y1", "y4", 2 - k)]
    return FeynmanDiagram(("x1", "x2", "x3", "x4", "y1", "y2", "y3", "y4"), tuple(edges),
                          frozenset({"x1", "x2", "x3", "x4"}), d, "gamma1")


def gamma2(kappa, d: int = 3) -> FeynmanDiagram:
    k, L = _q(kappa), AffineDegree.lam()
    edges = [_edge(f"y{i}", f"x{i}", L - d) for i in range(1, 5)]
    edges += [_edge("y1", "z1", L - d), _edge("z1", "y2", -k), _edge("y3", "z2", -k),
              _edge("z2", "y4", L - d), _edge("y1", "y4", -k)]
    return FeynmanDiagram(("x1", "x2", "x3", "x4", "y1", "y2", "y3", "y4", "z1", "z2"), tuple(edges),
                          frozenset({"x1", "x2", "x3", "x4"}), d, "gamma2")


def gamma_tilde(alpha, beta, d: int = 3) -> FeynmanDiagram:
    """Two interior points, each with a ``L - d`` leg and an ``alpha`` leg."""
    L = AffineDegree.lam()
    a, b = AffineDegree.of(alpha), AffineDegree.of(beta)
    edges = (_edge("x1", "z1", L - d), _edge("z1", "x2", a), _edge("x3", "z2", L - d),
             _edge("z2", "x4", a), _edge("z1", "z2", b))
    return FeynmanDiagram(("x1", "x2", "x3", "x4", "z1", "z2"), edges,
                          frozenset({"x1", "x2", "x3", "x4"}), d, "gamma_tilde")

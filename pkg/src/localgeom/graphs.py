"""Mixed graphs, m-separation and Markov equivalence of ancestral graphs.

Vertices are dense integers ``0..n-1``.  Each unordered pair carries at most
one edge, stored with its endpoint marks so that orientation can be read from
either side.  A graph may carry display labels (a symbol table) which are used
by the text format and in human-readable messages.
"""
from __future__ import annotations

import itertools as itr
import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

__all__ = [
    "DIRECTED",
    "BIDIRECTED",
    "UNDIRECTED",
    "GraphError",
    "GraphParseError",
    "NotAMAGError",
    "MixedGraph",
    "IndependenceStatement",
    "IndependenceModel",
    "DiscriminatingPath",
    "parse_graph",
    "write_graph",
    "skeleton",
    "unshielded_colliders",
    "m_separated",
    "implied_independences",
    "discriminating_path_colliders",
    "markov_equivalent",
    "equivalence_difference",
    "build_discpath_graphs",
    "is_ancestral",
    "is_maximal",
    "check_mag",
]

DIRECTED = "->"
BIDIRECTED = "<->"
UNDIRECTED = "--"
_KINDS = (DIRECTED, BIDIRECTED, UNDIRECTED)

Pair = Tuple[int, int]


class GraphError(ValueError):
    pass


class GraphParseError(GraphError):
    def __init__(self, lineno: int, line: str, reason: str):
        self.lineno = lineno
        self.line = line
        self.reason = reason
        super().__init__(f"line {lineno}: {reason}: {line!r}")


class NotAMAGError(GraphError):
    pass


def _pair(a: int, b: int) -> Pair:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class MixedGraph:
    """Simple mixed graph with directed, bidirected and undirected edges.

    ``edges`` maps a canonical pair ``(i, j)`` with ``i < j`` to
    ``(kind, tail)`` where ``tail`` is the source end of a directed edge and
    ``None`` otherwise.  Use :meth:`from_edges` rather than building the map
    by hand.
    """

    n: int
    edges: Dict[Pair, Tuple[str, Optional[int]]] = field(default_factory=dict)
    labels: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.n < 0:
            raise GraphError("vertex count must be nonnegative")
        if self.labels is not None and len(self.labels) != self.n:
            raise GraphError("labels must name every vertex")
        for (i, j), (kind, tail) in self.edges.items():
            if i == j:
                raise GraphError(f"self-loop at {i}")
            if not (0 <= i < j < self.n):
                raise GraphError(f"bad edge key {(i, j)}")
            if kind not in _KINDS:
                raise GraphError(f"unknown edge kind {kind!r}")
            if (kind == DIRECTED) != (tail is not None):
                raise GraphError("directed edges need a tail, others must not have one")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Tuple[int, str, int]],
                   labels: Optional[Sequence[int]] = None) -> "MixedGraph":
        """Build from ``(a, kind, b)`` triples, e.g. ``(0, "->", 1)``."""
        emap: Dict[Pair, Tuple[str, Optional[int]]] = {}
        for a, kind, b in edges:
            if a == b:
                raise GraphError(f"self-loop at {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise GraphError(f"vertex out of range in {a} {kind} {b}")
            key = _pair(a, b)
            if key in emap:
                raise GraphError(f"duplicate pair {key}")
            if kind == "<-":
                a, b, kind = b, a, DIRECTED
            emap[key] = (kind, a if kind == DIRECTED else None)
        return cls(n, emap, tuple(labels) if labels is not None else None)

    # -- basic queries -------------------------------------------------
    @property
    def vertices(self) -> range:
        return range(self.n)

    def label(self, v: int) -> int:
        return self.labels[v] if self.labels is not None else v

    def adjacent(self, a: int, b: int) -> bool:
        return _pair(a, b) in self.edges

    def edge(self, a: int, b: int) -> Optional[str]:
        """Edge kind as seen from ``a`` towards ``b``: '->', '<-', '<->', '--'."""
        e = self.edges.get(_pair(a, b))
        if e is None:
            return None
        kind, tail = e
        if kind == DIRECTED:
            return DIRECTED if tail == a else "<-"
        return kind

    def arrowhead_at(self, v: int, u: int) -> bool:
        """True if the edge between ``u`` and ``v`` has an arrowhead at ``v``."""
        kind = self.edge(u, v)
        return kind == DIRECTED or kind == BIDIRECTED

    def neighbors(self, v: int) -> List[int]:
        return [u for u in range(self.n) if u != v and _pair(u, v) in self.edges]

    def parents(self, v: int) -> List[int]:
        return [u for u in self.neighbors(v) if self.edge(u, v) == DIRECTED]

    def children(self, v: int) -> List[int]:
        return [u for u in self.neighbors(v) if self.edge(v, u) == DIRECTED]

    def spouses(self, v: int) -> List[int]:
        return [u for u in self.neighbors(v) if self.edge(u, v) == BIDIRECTED]

    def undirected_neighbors(self, v: int) -> List[int]:
        return [u for u in self.neighbors(v) if self.edge(u, v) == UNDIRECTED]

    def ancestors(self, vs: Iterable[int]) -> Set[int]:
        """Ancestors of ``vs``, the vertices themselves included."""
        out = set(vs)
        stack = list(out)
        while stack:
            v = stack.pop()
            for p in self.parents(v):
                if p not in out:
                    out.add(p)
                    stack.append(p)
        return out

    def anteriors(self, vs: Iterable[int]) -> Set[int]:
        """Vertices reaching ``vs`` along edges ``u -> w`` or ``u -- w``, ``vs`` included."""
        out = set(vs)
        stack = list(out)
        while stack:
            v = stack.pop()
            for p in self.parents(v) + self.undirected_neighbors(v):
                if p not in out:
                    out.add(p)
                    stack.append(p)
        return out

    def descendants(self, vs: Iterable[int]) -> Set[int]:
        out = set(vs)
        stack = list(out)
        while stack:
            v = stack.pop()
            for c in self.children(v):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def is_dag(self) -> bool:
        return all(kind == DIRECTED for kind, _ in self.edges.values()) and is_ancestral(self)

    def relabel(self, perm: Sequence[int]) -> "MixedGraph":
        """Graph with vertex ``v`` renamed ``perm[v]``."""
        triples = []
        for (i, j), (kind, tail) in self.edges.items():
            if kind == DIRECTED:
                head = j if tail == i else i
                triples.append((perm[tail], DIRECTED, perm[head]))
            else:
                triples.append((perm[i], kind, perm[j]))
        return MixedGraph.from_edges(self.n, triples)

    def edge_triples(self) -> List[Tuple[int, str, int]]:
        out = []
        for (i, j) in sorted(self.edges):
            kind, tail = self.edges[(i, j)]
            if kind == DIRECTED and tail == j:
                out.append((j, DIRECTED, i))
            else:
                out.append((i, kind, j))
        return out

    def __str__(self) -> str:
        return write_graph(self)


# -- text format -------------------------------------------------------
_EDGE_RE = re.compile(r"^\s*(\d+)\s*(<->|->|<-|--)\s*(\d+)\s*$")


def parse_graph(text: str) -> MixedGraph:
    """Parse the line-based graph format.

    The first non-blank line is ``vertices: n``.  An optional ``labels:``
    line lists one integer label per vertex; edges then refer to labels and
    are mapped through that table.  Remaining lines are ``a -> b``,
    ``a <-> b`` or ``a -- b``; ``#`` starts a comment.
    """
    n = None
    labels: Optional[List[int]] = None
    index: Dict[int, int] = {}
    edges: Dict[Pair, Tuple[str, Optional[int]]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if n is None:
            m = re.match(r"^vertices\s*:\s*(\d+)$", line)
            if not m:
                raise GraphParseError(lineno, raw, "expected header 'vertices: n'")
            n = int(m.group(1))
            continue
        if line.startswith("labels"):
            if labels is not None or edges:
                raise GraphParseError(lineno, raw, "labels must directly follow the header")
            try:
                labels = [int(t) for t in line.split(":", 1)[1].split()]
            except (IndexError, ValueError):
                raise GraphParseError(lineno, raw, "malformed labels line") from None
            if len(labels) != n or len(set(labels)) != n or min(labels, default=0) < 0:
                raise GraphParseError(lineno, raw, "labels must be n distinct nonnegative integers")
            index = {lab: v for v, lab in enumerate(labels)}
            continue
        m = _EDGE_RE.match(line)
        if not m:
            raise GraphParseError(lineno, raw, "malformed edge")
        a, kind, b = int(m.group(1)), m.group(2), int(m.group(3))
        if labels is not None:
            if a not in index or b not in index:
                raise GraphParseError(lineno, raw, "unknown vertex label")
            a, b = index[a], index[b]
        elif not (a < n and b < n):
            raise GraphParseError(lineno, raw, "vertex out of range")
        if a == b:
            raise GraphParseError(lineno, raw, "self-loop")
        key = _pair(a, b)
        if key in edges:
            raise GraphParseError(lineno, raw, "duplicate pair")
        if kind == "<-":
            a, b, kind = b, a, DIRECTED
        edges[key] = (kind, a if kind == DIRECTED else None)
    if n is None:
        raise GraphParseError(0, "", "missing header 'vertices: n'")
    return MixedGraph(n, edges, tuple(labels) if labels is not None else None)


def write_graph(G: MixedGraph) -> str:
    """Canonical text form: header, optional labels, edges sorted by pair."""
    lines = [f"vertices: {G.n}"]
    if G.labels is not None and tuple(G.labels) != tuple(range(G.n)):
        lines.append("labels: " + " ".join(str(x) for x in G.labels))
    for a, kind, b in G.edge_triples():
        lines.append(f"{G.label(a)} {kind} {G.label(b)}")
    return "\n".join(lines) + "\n"


# -- structural features ----------------------------------------------
def skeleton(G: MixedGraph) -> Set[FrozenSet[int]]:
    return {frozenset(p) for p in G.edges}


def unshielded_colliders(G: MixedGraph) -> Set[Tuple[int, int, int]]:
    """Triples ``(i, k, j)`` with ``i < j`` non-adjacent and arrowheads at ``k``."""
    out = set()
    for k in G.vertices:
        into = [u for u in G.neighbors(k) if G.arrowhead_at(k, u)]
        for i, j in itr.combinations(sorted(into), 2):
            if not G.adjacent(i, j):
                out.add((i, k, j))
    return out


def m_separated(G: MixedGraph, a: int, b: int, C: Iterable[int] = ()) -> bool:
    """m-separation of ``a`` and ``b`` given ``C`` in an ancestral graph.

    Uses the walk form of the criterion: a walk is connecting iff every
    collider on it is in ``C`` and every non-collider is outside ``C``.  This
    agrees with the path form (colliders with a descendant in ``C``).
    """
    C = frozenset(C)
    if a == b or a in C or b in C:
        raise GraphError("need a != b and a, b not in C")
    # state: (vertex, previous vertex's edge has an arrowhead at vertex)
    seen = set()
    stack = []
    for u in G.neighbors(a):
        stack.append((u, G.arrowhead_at(u, a)))
    while stack:
        v, head_in = stack.pop()
        if (v, head_in) in seen:
            continue
        seen.add((v, head_in))
        if v == b:
            return False
        for w in G.neighbors(v):
            collider = head_in and G.arrowhead_at(v, w)
            if collider and v not in C:
                continue
            if not collider and v in C:
                continue
            stack.append((w, G.arrowhead_at(w, v)))
    return True


# -- independence models -----------------------------------------------
@dataclass(frozen=True, order=True)
class IndependenceStatement:
    i: int
    j: int
    C: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("i and j must differ")
        if self.i > self.j:
            a, b = self.j, self.i
            object.__setattr__(self, "i", a)
            object.__setattr__(self, "j", b)
        object.__setattr__(self, "C", frozenset(self.C))
        if self.i in self.C or self.j in self.C:
            raise ValueError("conditioning set must not contain i or j")

    @property
    def pair(self) -> Pair:
        return (self.i, self.j)

    def __repr__(self) -> str:
        c = ",".join(map(str, sorted(self.C)))
        return f"{self.i} _||_ {self.j} | {{{c}}}"


@dataclass(frozen=True)
class IndependenceModel:
    statements: FrozenSet[IndependenceStatement]
    simple: bool = False

    def __post_init__(self):
        object.__setattr__(self, "statements", frozenset(self.statements))
        if self.simple:
            pairs = [s.pair for s in self.statements]
            if len(pairs) != len(set(pairs)):
                raise ValueError("a simple independence model has one statement per pair")

    def __contains__(self, stmt) -> bool:
        if isinstance(stmt, tuple):
            stmt = IndependenceStatement(*stmt)
        return stmt in self.statements

    def __iter__(self) -> Iterator[IndependenceStatement]:
        return iter(sorted(self.statements, key=lambda s: (s.i, s.j, len(s.C), sorted(s.C))))

    def __len__(self) -> int:
        return len(self.statements)

    def pairs(self) -> Set[Pair]:
        return {s.pair for s in self.statements}

    def pairwise(self) -> "IndependenceModel":
        """One witness per pair: the smallest conditioning set, ties broken lexicographically."""
        best: Dict[Pair, IndependenceStatement] = {}
        for s in self:
            best.setdefault(s.pair, s)
        return IndependenceModel(frozenset(best.values()), simple=True)


def implied_independences(G: MixedGraph, cap: int = 6) -> IndependenceModel:
    """All m-separations ``(i, j, C)`` of a MAG, by exhaustive enumeration."""
    if G.n > cap:
        raise GraphError(f"brute-force enumeration capped at {cap} vertices (got {G.n})")
    check_mag(G)
    stmts = set()
    for i, j in itr.combinations(G.vertices, 2):
        rest = [v for v in G.vertices if v != i and v != j]
        for r in range(len(rest) + 1):
            for C in itr.combinations(rest, r):
                if m_separated(G, i, j, C):
                    stmts.add(IndependenceStatement(i, j, frozenset(C)))
    return IndependenceModel(frozenset(stmts))


# -- ancestral / maximal checks ------------------------------------------
def is_ancestral(G: MixedGraph) -> bool:
    """No directed or almost-directed cycles; no arrowheads into undirected vertices."""
    for v in G.vertices:
        anc = G.ancestors(G.parents(v))
        if v in anc:
            return False
        for s in G.spouses(v):
            if s in G.ancestors([v]):
                return False
        if G.undirected_neighbors(v) and (G.parents(v) or G.spouses(v)):
            return False
    return True


def is_maximal(G: MixedGraph) -> bool:
    """Every non-adjacent pair is m-separated by some set.

    For ancestral graphs it suffices to test the anterior set
    ``ant({i, j}) \\ {i, j}``.
    """
    for i, j in itr.combinations(G.vertices, 2):
        if G.adjacent(i, j):
            continue
        C = G.anteriors([i, j]) - {i, j}
        if not m_separated(G, i, j, C):
            return False
    return True


def check_mag(G: MixedGraph) -> None:
    if not is_ancestral(G):
        raise NotAMAGError("graph is not ancestral")
    if not is_maximal(G):
        raise NotAMAGError("graph is not maximal")


# -- discriminating paths ----------------------------------------------
@dataclass(frozen=True)
class DiscriminatingPath:
    path: Tuple[int, ...]  # x, q1, ..., qm, b, y
    collider: bool

    @property
    def vertex(self) -> int:
        return self.path[-2]


def discriminating_path_colliders(G: MixedGraph) -> Set[DiscriminatingPath]:
    """Every discriminating path of ``G`` with the collider status of its vertex.

    A path ``<x, q1, .., qm, b, y>`` with at least three edges discriminates
    ``b`` if ``x`` and ``y`` are non-adjacent and every ``qi`` is a collider
    on the path and a parent of ``y``.
    """
    out: Set[DiscriminatingPath] = set()

    def extend(rev: List[int], y: int):
        # rev = [b, q_m, ..., front]; front is an intermediate awaiting its predecessor
        front = rev[-1]
        for w in G.neighbors(front):
            if w in rev or w == y:
                continue
            # front is an intermediate: collider on the path
            if not (G.arrowhead_at(front, w) and G.arrowhead_at(front, rev[-2])):
                continue
            if not G.adjacent(w, y):
                path = tuple(reversed(rev + [w])) + (y,)
                b = rev[0]
                coll = G.arrowhead_at(b, path[-3]) and G.arrowhead_at(b, y)
                out.add(DiscriminatingPath(path, coll))
            elif G.edge(w, y) == DIRECTED:
                extend(rev + [w], y)

    for y in G.vertices:
        for b in G.neighbors(y):
            for q in G.neighbors(b):
                if q == y or G.edge(q, y) != DIRECTED:
                    continue
                extend([b, q], y)
    return out


def equivalence_difference(G1: MixedGraph, G2: MixedGraph) -> Optional[str]:
    """Describe the first feature separating two MAGs, or None if equivalent."""
    if G1.n != G2.n:
        raise GraphError("graphs have different vertex counts")
    check_mag(G1)
    check_mag(G2)
    lab = G1.label
    s1, s2 = skeleton(G1), skeleton(G2)
    if s1 != s2:
        a, b = sorted(min(s1 ^ s2, key=sorted))
        return f"adjacency {lab(a)}-{lab(b)} differs"
    c1, c2 = unshielded_colliders(G1), unshielded_colliders(G2)
    if c1 != c2:
        i, k, j = min(c1 ^ c2)
        return f"unshielded collider {lab(i)}*->{lab(k)}<-*{lab(j)} differs"
    d1 = {p.path: p.collider for p in discriminating_path_colliders(G1)}
    d2 = {p.path: p.collider for p in discriminating_path_colliders(G2)}
    for path in sorted(set(d1) & set(d2)):
        if d1[path] != d2[path]:
            shown = ",".join(str(lab(v)) for v in path)
            return f"discriminating path ⟨{shown}⟩ collider status differs"
    return None


def markov_equivalent(G1: MixedGraph, G2: MixedGraph) -> bool:
    return equivalence_difference(G1, G2) is None


def build_discpath_graphs(k: int) -> Tuple[MixedGraph, MixedGraph]:
    """The pair ``(G_k, G_k')`` differing only in the edge between ``k`` and ``k+1``.

    Display labels are ``1..k+1``; internal vertex ``v`` carries label ``v+1``.
    """
    if k < 2:
        raise GraphError("k must be at least 2")
    n = k + 1
    top = k  # internal index of vertex k+1
    edges = [(i, BIDIRECTED, i + 1) for i in range(k - 1)]
    edges += [(i, DIRECTED, top) for i in range(1, k - 1)]
    labels = tuple(range(1, n + 1))
    Gk = MixedGraph.from_edges(n, edges + [(k - 1, BIDIRECTED, top)], labels)
    Gk_prime = MixedGraph.from_edges(n, edges + [(k - 1, DIRECTED, top)], labels)
    return Gk, Gk_prime

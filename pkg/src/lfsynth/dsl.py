"""Typed functional DSL for labeling-function programs.

A grammar is built from a library of domain-level labeling functions (precomputed
feature columns) plus a fixed set of structural operators.  Programs are
architectures: typed trees whose leaves may still be holes.  Parameters never
live in the tree; see :mod:`lfsynth.diffexec` for those.

Scores vs. probabilities: every complete program produces a *score* that the
evaluator turns into class probabilities.  For binary tasks the score is a
scalar logit (probability of the positive class is its sigmoid); for ``k > 2``
classes it is a ``class_probs(k)`` logit vector passed through a softmax.
"""
from __future__ import annotations

import enum
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union


class DSLError(Exception):
    pass


class EmptyLibrary(DSLError):
    pass


class UnreachableOutputType(DSLError):
    pass


class NoApplicableProduction(DSLError):
    pass


class UnknownProduction(DSLError):
    def __init__(self, name: str):
        super().__init__(f"unknown production {name!r}")
        self.name = name


class TypeMismatch(DSLError):
    def __init__(self, expected, found, path):
        super().__init__(f"type mismatch at {path_str(path)}: expected {expected}, found {found}")
        self.expected = expected
        self.found = found
        self.path = path


class ProgramSyntaxError(DSLError, SyntaxError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class SemType:
    kind: str
    dim: int | None = None
    element: SemType | None = None
    length: int | None = None
    tag: str | None = None  # distinguishes slots that share a carrier, e.g. LF-only frame inputs

    def __post_init__(self):
        if self.kind == "scalar":
            pass
        elif self.kind == "vector":
            if self.dim is None or self.dim < 1:
                raise ValueError("vector dim must be >= 1")
        elif self.kind == "class_probs":
            if self.dim is None or self.dim < 2:
                raise ValueError("class_probs needs at least 2 classes")
        elif self.kind == "sequence":
            if self.element is None:
                raise ValueError("sequence needs an element type")
            if self.element.kind == "sequence" and self.element.length is None:
                raise ValueError("nested unbounded sequences are not allowed")
            if self.length is not None and self.length < 1:
                raise ValueError("sequence length must be positive")
        else:
            raise ValueError(f"unknown type kind {self.kind!r}")

    @property
    def width(self) -> int:
        """Number of reals carried by one value of this type."""
        if self.kind == "scalar":
            return 1
        if self.kind in ("vector", "class_probs"):
            return self.dim
        raise ValueError("sequences have no flat width")

    def __str__(self):
        if self.kind == "scalar":
            return "scalar"
        if self.kind == "sequence":
            n = "" if self.length is None else f", {self.length}"
            return f"sequence({self.element}{n})"
        return f"{self.kind}({self.dim})"


def scalar() -> SemType:
    return SemType("scalar")


def vector(dim: int) -> SemType:
    return SemType("vector", dim=dim)


def class_probs(k: int) -> SemType:
    return SemType("class_probs", dim=k)


def sequence(element: SemType, length: int | None = None) -> SemType:
    return SemType("sequence", element=element, length=length)


def score_type(num_classes: int) -> SemType:
    return scalar() if num_classes == 2 else class_probs(num_classes)


# --------------------------------------------------------------------------
# productions and architectures


class Operator(str, enum.Enum):
    INPUT_X = "input_x"
    CONSTANT_C = "constant_c"
    ADD = "add"
    DOT = "dot"
    OUTER = "outer"
    CONCAT = "concat"
    # expert-supplied parameterized functions; the default grammar realizes
    # these only through AFFINE
    PARAM_LIBRARY_FN = "param_library_fn"
    DOMAIN_LF = "domain_lf"
    ITE = "ite"
    MAP = "map"
    FOLD = "fold"
    AFFINE = "affine"


@dataclass(frozen=True)
class DomainLF:
    name: str
    output: SemType
    columns: tuple[int, int]
    category: str = ""

    @property
    def width(self) -> int:
        return self.columns[1] - self.columns[0]


@dataclass(frozen=True)
class DomainLFLibrary:
    entries: tuple[DomainLF, ...]
    width: int

    def __post_init__(self):
        seen = set()
        spans = []
        for e in self.entries:
            key = e.name.lower()
            if key in seen:
                raise ValueError(f"duplicate domain LF name {e.name!r}")
            seen.add(key)
            lo, hi = e.columns
            if not (0 <= lo < hi <= self.width):
                raise ValueError(f"columns of {e.name!r} outside feature width {self.width}")
            if e.output.width != hi - lo:
                raise ValueError(f"{e.name!r}: output type {e.output} does not match {hi - lo} columns")
            spans.append((lo, hi, e.name))
        spans.sort()
        for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"column ranges of {an!r} and {bn!r} overlap")

    @classmethod
    def from_specs(cls, specs: Sequence[tuple[str, int, str]]) -> DomainLFLibrary:
        """Build a library from ``(name, dim, category)`` triples laid out left to right."""
        entries, col = [], 0
        for name, dim, category in specs:
            out = scalar() if dim == 1 else vector(dim)
            entries.append(DomainLF(name, out, (col, col + dim), category))
            col += dim
        return cls(tuple(entries), col)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, name: str) -> DomainLF:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def categories(self) -> dict[str, list[DomainLF]]:
        out: dict[str, list[DomainLF]] = {}
        for e in self.entries:
            out.setdefault(e.category or e.name, []).append(e)
        return out

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "entries": [
                {"name": e.name, "dim": e.output.width, "columns": list(e.columns), "category": e.category}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DomainLFLibrary:
        entries = []
        for e in d["entries"]:
            out = scalar() if e["dim"] == 1 else vector(e["dim"])
            entries.append(DomainLF(e["name"], out, tuple(e["columns"]), e.get("category", "")))
        return cls(tuple(entries), d["width"])


@dataclass(frozen=True, eq=False)
class Production:
    name: str
    symbol: str
    operator: Operator
    input: SemType
    child_slots: tuple[SemType, ...]
    output: SemType
    param_shape: tuple[int, ...] = ()
    lf: DomainLF | None = None
    fold_init: float = 0.0
    child_in: SemType | None = None  # overrides the input type seen by children

    def child_input(self, i: int) -> SemType:
        if self.child_in is not None:
            return self.child_in
        if self.operator in (Operator.MAP, Operator.FOLD):
            return self.input.element
        return self.input

    @property
    def is_terminal(self) -> bool:
        return not self.child_slots

    @property
    def num_params(self) -> int:
        return math.prod(self.param_shape) if self.param_shape else 0

    def __repr__(self):
        slots = ", ".join(map(str, self.child_slots))
        return f"<{self.symbol}({slots}) -> {self.output}>"


@dataclass(frozen=True)
class Hole:
    expected_type: SemType
    input_type: SemType
    depth: int

    def __str__(self):
        return "?"


@dataclass(frozen=True)
class Node:
    production: Production
    children: tuple = ()

    def __post_init__(self):
        if len(self.children) != len(self.production.child_slots):
            raise TypeMismatch(len(self.production.child_slots), len(self.children), ())


Path = tuple[int, ...]
Tree = Union[Node, Hole]


def path_str(path: Path) -> str:
    return ".".join(["r", *map(str, path)])


def _walk(t, path: Path = ()) -> Iterator[tuple[Path, object]]:
    yield path, t
    if isinstance(t, Node):
        for i, c in enumerate(t.children):
            yield from _walk(c, path + (i,))


@dataclass(frozen=True)
class ProgramArchitecture:
    root: object

    def walk(self) -> Iterator[tuple[Path, object]]:
        return _walk(self.root)

    def holes(self) -> list[tuple[Path, Hole]]:
        return [(p, t) for p, t in self.walk() if isinstance(t, Hole)]

    def unknowns(self) -> list[tuple[Path, object]]:
        """Holes and anything else standing in for an unknown subprogram."""
        return [(p, t) for p, t in self.walk() if not isinstance(t, Node)]

    def first_hole(self) -> tuple[Path, Hole] | None:
        for p, t in self.walk():
            if isinstance(t, Hole):
                return p, t
        return None

    @property
    def is_complete(self) -> bool:
        return all(isinstance(t, Node) for _, t in self.walk())

    @property
    def node_count(self) -> int:
        """Number of known (non-hole) variables."""
        return sum(1 for _, t in self.walk() if isinstance(t, Node))

    @property
    def depth(self) -> int:
        return max(len(p) for p, _ in self.walk())

    def get(self, path: Path):
        t = self.root
        for i in path:
            t = t.children[i]
        return t

    def replace(self, path: Path, sub) -> ProgramArchitecture:
        return ProgramArchitecture(_replace(self.root, path, sub))

    def map_unknowns(self, fn) -> ProgramArchitecture:
        """Replace every non-Node leaf ``u`` by ``fn(path, u)``."""

        def go(t, path):
            if isinstance(t, Node):
                return Node(t.production, tuple(go(c, path + (i,)) for i, c in enumerate(t.children)))
            return fn(path, t)

        return ProgramArchitecture(go(self.root, ()))

    def text(self) -> str:
        return to_text(self)

    def __str__(self):
        return to_text(self)


def _replace(t, path: Path, sub):
    if not path:
        return sub
    i = path[0]
    kids = list(t.children)
    kids[i] = _replace(kids[i], path[1:], sub)
    return Node(t.production, tuple(kids))


# --------------------------------------------------------------------------
# grammar


DEFAULT_OPS = ("add", "multiply", "ite", "affine", "const")
EXTENDED_OPS = ("dot", "concat", "outer")


@dataclass(frozen=True)
class GrammarOptions:
    task: str = "frame"  # "frame" or "sequence"
    seq_len: int | None = None
    ops: tuple[str, ...] = DEFAULT_OPS
    include_input: bool = False
    fold_init: float = 0.0
    affine_leaves: bool = False  # domain LFs only appear as the argument of Affine

    def __post_init__(self):
        if self.affine_leaves and "affine" not in self.ops:
            raise ValueError("affine_leaves needs the affine op")
        if self.task not in ("frame", "sequence"):
            raise ValueError(f"task must be 'frame' or 'sequence', not {self.task!r}")
        unknown = set(self.ops) - set(DEFAULT_OPS) - set(EXTENDED_OPS)
        if unknown:
            raise ValueError(f"unknown grammar ops {sorted(unknown)}")


def default_max_depth(num_lfs: int) -> int:
    return max(3, math.ceil(math.log2(max(num_lfs, 1))))


class Grammar:
    """Typed production set over a domain-LF library.

    Immutable after construction; expansion is pure.
    """

    def __init__(self, library: DomainLFLibrary, num_classes: int, max_depth: int,
                 options: GrammarOptions | None = None):
        self.library = library
        self.num_classes = num_classes
        self.max_depth = max_depth
        self.options = options or GrammarOptions()
        self.frame_type = vector(library.width)
        self.score_type = score_type(num_classes)
        if self.options.task == "frame":
            self.root_input = sequence(self.frame_type)
            self.root_type = sequence(self.score_type)
        else:
            self.root_input = sequence(self.frame_type, self.options.seq_len)
            self.root_type = self.score_type
        self.productions: tuple[Production, ...] = tuple(self._build())
        self._by_sig: dict[tuple[SemType, SemType], list[Production]] = {}
        for p in self.productions:
            self._by_sig.setdefault((p.input, p.output), []).append(p)
        self._realizable_cache: dict = {}
        self._maxn_cache: dict = {}

    # -- construction

    def _build(self) -> list[Production]:
        ops = set(self.options.ops)
        frame, S, sc = self.frame_type, self.score_type, scalar()
        prods: list[Production] = []

        if self.options.task == "frame":
            prods.append(Production("map", "Map", Operator.MAP, self.root_input, (S,), self.root_type))
        else:
            prods.append(Production("fold", "Fold", Operator.FOLD, self.root_input, (S,), S,
                                    fold_init=self.options.fold_init))

        leaf_in = SemType("vector", dim=frame.dim, tag="lf") if self.options.affine_leaves else frame
        for lf in self.library:
            prods.append(Production(f"domain_lf:{lf.name.lower()}", lf.name, Operator.DOMAIN_LF,
                                    leaf_in, (), lf.output, lf=lf))
        if "const" in ops:
            prods.append(Production("const", "Const", Operator.CONSTANT_C, frame, (), sc, (1,)))
        if self.options.include_input:
            prods.append(Production("input", "Input", Operator.INPUT_X, frame, (), frame))

        values = [sc] if S == sc else [sc, S]
        vec_dims = sorted({lf.output.dim for lf in self.library if lf.output.kind == "vector"})
        if self.options.include_input and self.library.width > 1:
            vec_dims = sorted(set(vec_dims) | {self.library.width})

        if "add" in ops:
            for t in values:
                prods.append(Production("add", "Add", Operator.ADD, frame, (t, t), t))
        if "multiply" in ops:
            prods.append(Production("multiply", "Multiply", Operator.OUTER, frame, (sc, sc), sc))
        if "ite" in ops:
            for t in values:
                prods.append(Production("ite", "SimpleITE", Operator.ITE, frame, (sc, t, t), t))
        if "affine" in ops:
            for src_dim in [1, *vec_dims]:
                src = sc if src_dim == 1 else vector(src_dim)
                for dst in values:
                    shape = (src_dim + 1,) if dst == sc else (dst.dim, src_dim + 1)
                    prods.append(Production("affine", "Affine", Operator.AFFINE, frame, (src,), dst, shape,
                                            child_in=leaf_in if leaf_in != frame else None))
        if "dot" in ops:
            for d in vec_dims:
                prods.append(Production("dot", "Dot", Operator.DOT, frame, (vector(d), vector(d)), sc))
        if "concat" in ops:
            for a in [1, *vec_dims]:
                for b in [1, *vec_dims]:
                    if a + b in vec_dims:
                        ta = sc if a == 1 else vector(a)
                        tb = sc if b == 1 else vector(b)
                        prods.append(Production("concat", "Concat", Operator.CONCAT, frame, (ta, tb),
                                                vector(a + b)))
        if "outer" in ops:
            for a in vec_dims:
                for b in vec_dims:
                    if a * b in vec_dims:
                        prods.append(Production("outer", "Outer", Operator.OUTER, frame,
                                                (vector(a), vector(b)), vector(a * b)))
        return prods

    # -- queries

    def candidates(self, input_type: SemType, output: SemType) -> list[Production]:
        return self._by_sig.get((input_type, output), [])

    def realizable(self, input_type: SemType, output: SemType, depth: int) -> bool:
        """Whether some complete subtree of this type fits between ``depth`` and max depth."""
        key = (input_type, output, depth)
        if key not in self._realizable_cache:
            self._realizable_cache[key] = False  # guards against cycles
            ok = any(self._fits(p, depth) for p in self.candidates(input_type, output))
            self._realizable_cache[key] = ok
        return self._realizable_cache[key]

    def _fits(self, p: Production, depth: int) -> bool:
        if p.is_terminal:
            return depth <= self.max_depth
        if depth >= self.max_depth:
            return False
        return all(self.realizable(p.child_input(i), t, depth + 1) for i, t in enumerate(p.child_slots))

    def max_nodes(self, input_type: SemType | None = None, output: SemType | None = None,
                  depth: int = 0) -> int:
        """Largest node count of any complete subtree rooted at ``depth``."""
        input_type = input_type or self.root_input
        output = output or self.root_type
        key = (input_type, output, depth)
        if key not in self._maxn_cache:
            best = 0
            for p in self.candidates(input_type, output):
                if not self._fits(p, depth):
                    continue
                n = 1 + sum(self.max_nodes(p.child_input(i), t, depth + 1)
                            for i, t in enumerate(p.child_slots))
                best = max(best, n)
            self._maxn_cache[key] = best
        return self._maxn_cache[key]

    def root_hole(self) -> Hole:
        return Hole(self.root_type, self.root_input, 0)

    def empty_architecture(self) -> ProgramArchitecture:
        return ProgramArchitecture(self.root_hole())

    def expand(self, hole: Hole) -> list[Node]:
        return expand(hole, self)

    def children(self, arch: ProgramArchitecture) -> list[ProgramArchitecture]:
        """Search-tree successors: every way to fill the leftmost hole."""
        found = arch.first_hole()
        if found is None:
            return []
        path, hole = found
        return [arch.replace(path, frag) for frag in expand(hole, self)]

    def lookup(self, symbol: str) -> list[Production]:
        if symbol == "ITE":
            symbol = "SimpleITE"
        return [p for p in self.productions if p.symbol == symbol]

    def describe(self) -> dict:
        return {
            "library": self.library.to_dict(),
            "num_classes": self.num_classes,
            "max_depth": self.max_depth,
            "options": {
                "task": self.options.task,
                "seq_len": self.options.seq_len,
                "ops": list(self.options.ops),
                "include_input": self.options.include_input,
                "fold_init": self.options.fold_init,
                "affine_leaves": self.options.affine_leaves,
            },
        }

    @classmethod
    def from_description(cls, d: dict) -> Grammar:
        opts = dict(d["options"])
        opts["ops"] = tuple(opts["ops"])
        return cls(DomainLFLibrary.from_dict(d["library"]), d["num_classes"], d["max_depth"],
                   GrammarOptions(**opts))


def build_grammar(library: DomainLFLibrary, num_classes: int, max_depth: int | None = None,
                  options: GrammarOptions | None = None) -> Grammar:
    if library is None or len(library) == 0:
        raise EmptyLibrary("the domain-LF library is empty")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if max_depth is None:
        max_depth = default_max_depth(len(library))
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    g = Grammar(library, num_classes, max_depth, options)
    if not g.realizable(g.root_input, g.root_type, 0):
        raise UnreachableOutputType(
            f"no complete program of depth <= {max_depth} produces {g.root_type}")
    return g


def expand(hole: Hole, grammar: Grammar) -> list[Node]:
    out = []
    for p in grammar.candidates(hole.input_type, hole.expected_type):
        if not grammar._fits(p, hole.depth):
            continue
        kids = tuple(Hole(t, p.child_input(i), hole.depth + 1) for i, t in enumerate(p.child_slots))
        out.append(Node(p, kids))
    if not out:
        raise NoApplicableProduction(
            f"no production fills a {hole.expected_type} hole at depth {hole.depth}")
    return out


def enumerate_complete(grammar: Grammar) -> Iterator[ProgramArchitecture]:
    """All complete architectures, generated straight from the production table."""

    def subtrees(input_type, output, depth):
        for p in grammar.candidates(input_type, output):
            if not grammar._fits(p, depth):
                continue
            if p.is_terminal:
                yield Node(p)
                continue
            pools = [list(subtrees(p.child_input(i), t, depth + 1)) for i, t in enumerate(p.child_slots)]
            yield from _product(p, pools)

    for t in subtrees(grammar.root_input, grammar.root_type, 0):
        yield ProgramArchitecture(t)


def _product(p, pools):
    for combo in itertools.product(*pools):
        yield Node(p, tuple(combo))


def typecheck(arch: ProgramArchitecture, grammar: Grammar) -> None:
    """Raise if ``arch`` is not a well-typed, depth-bounded architecture of ``grammar``."""
    prods = set(map(id, grammar.productions))

    def check(t, expected, input_type, path):
        if len(path) > grammar.max_depth:
            raise TypeMismatch(f"depth <= {grammar.max_depth}", len(path), path)
        if isinstance(t, Node):
            p = t.production
            if id(p) not in prods:
                raise UnknownProduction(p.symbol)
            if p.output != expected or p.input != input_type:
                raise TypeMismatch(expected, p.output, path)
            if len(t.children) != len(p.child_slots):
                raise TypeMismatch(len(p.child_slots), len(t.children), path)
            for i, (c, slot) in enumerate(zip(t.children, p.child_slots)):
                check(c, slot, p.child_input(i), path + (i,))
        elif isinstance(t, Hole):
            if t.expected_type != expected or t.depth != len(path):
                raise TypeMismatch(expected, t.expected_type, path)
        else:
            # neural completion blocks carry their own signature
            sig = (getattr(t, "input_type", None), getattr(t, "output_type", None))
            if sig != (input_type, expected):
                raise TypeMismatch(expected, sig[1], path)

    check(arch.root, grammar.root_type, grammar.root_input, ())


# --------------------------------------------------------------------------
# structure trees


@dataclass(frozen=True)
class StructTree:
    label: str
    children: tuple[StructTree, ...] = ()

    @property
    def size(self) -> int:
        return 1 + sum(c.size for c in self.children)

    def __str__(self):
        if not self.children:
            return self.label
        return f"{self.label}({', '.join(map(str, self.children))})"


def to_struct_tree(arch: ProgramArchitecture | Node) -> StructTree | None:
    """Parameter-free tree of the known variables; ``None`` for an empty architecture."""
    root = arch.root if isinstance(arch, ProgramArchitecture) else arch
    if not isinstance(root, Node):
        return None

    def build(n: Node) -> StructTree:
        return StructTree(n.production.name,
                          tuple(build(c) for c in n.children if isinstance(c, Node)))

    return build(root)


# --------------------------------------------------------------------------
# text notation


def to_text(arch: ProgramArchitecture | Node | Hole) -> str:
    t = arch.root if isinstance(arch, ProgramArchitecture) else arch

    def go(n):
        if isinstance(n, Node):
            if not n.children:
                return n.production.symbol
            return f"{n.production.symbol}({', '.join(go(c) for c in n.children)})"
        if isinstance(n, Hole):
            return "?"
        return getattr(n, "symbol", "?")

    return go(t)


_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_]*)|(\()|(\))|(,)|(\?))")


@dataclass
class _Syntax:
    symbol: str
    children: list = field(default_factory=list)
    position: int = 0


def _tokenize(text: str):
    pos = 0
    toks = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ProgramSyntaxError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(m.lastindex)
        toks.append((m.group(m.lastindex), start))
        pos = m.end()
    toks.append(("<end>", len(text)))
    return toks


def _parse_syntax(text: str) -> _Syntax:
    toks = _tokenize(text)
    i = 0

    def term():
        nonlocal i
        tok, pos = toks[i]
        if tok == "?":
            i += 1
            return _Syntax("?", [], pos)
        if not re.match(r"[A-Za-z_]", tok):
            raise ProgramSyntaxError(f"expected a production name, found {tok!r}", pos)
        i += 1
        node = _Syntax(tok, [], pos)
        if toks[i][0] == "(":
            open_pos = toks[i][1]
            i += 1
            if toks[i][0] == ")":
                i += 1
                return node
            while True:
                node.children.append(term())
                tok, pos = toks[i]
                if tok == ",":
                    i += 1
                elif tok == ")":
                    i += 1
                    break
                elif tok == "<end>":
                    raise ProgramSyntaxError(f"unclosed parenthesis opened at {open_pos}", pos)
                else:
                    raise ProgramSyntaxError(f"expected ',' or ')', found {tok!r}", pos)
        return node

    out = term()
    if toks[i][0] != "<end>":
        raise ProgramSyntaxError(f"trailing input {toks[i][0]!r}", toks[i][1])
    return out


def parse_program(text: str, grammar: Grammar) -> ProgramArchitecture:
    """Parse prefix notation such as ``Map(Add(Speed, Position))``.

    Overloaded symbols (``Affine``, ``Add``, ``SimpleITE``) are resolved top-down
    against the slot type, first matching production in grammar order wins.
    ``?`` denotes a hole.  ``Name()`` and ``Name`` are the same terminal.
    """
    syn = _parse_syntax(text)

    def resolve(s: _Syntax, expected: SemType, input_type: SemType, path: Path):
        if s.symbol == "?":
            return Hole(expected, input_type, len(path))
        cands = grammar.lookup(s.symbol)
        if not cands:
            raise UnknownProduction(s.symbol)
        if len(path) > grammar.max_depth:
            raise TypeMismatch(f"depth <= {grammar.max_depth}", len(path), path)
        typed = [p for p in cands if p.input == input_type and p.output == expected
                 and len(p.child_slots) == len(s.children)]
        if not typed:
            found = next((p.output for p in cands if len(p.child_slots) == len(s.children)), cands[0].output)
            raise TypeMismatch(expected, found, path)
        err = None
        for p in typed:
            try:
                kids = tuple(resolve(c, slot, p.child_input(i), path + (i,))
                             for i, (c, slot) in enumerate(zip(s.children, p.child_slots)))
                return Node(p, kids)
            except (TypeMismatch, UnknownProduction) as e:
                err = e
        raise err

    return ProgramArchitecture(resolve(syn, grammar.root_type, grammar.root_input, ()))

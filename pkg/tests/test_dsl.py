import numpy as np
import pytest

from lfsynth.dsl import (
    DomainLF,
    DomainLFLibrary,
    EmptyLibrary,
    Grammar,
    GrammarOptions,
    ProgramSyntaxError,
    TypeMismatch,
    UnknownProduction,
    UnreachableOutputType,
    build_grammar,
    enumerate_complete,
    parse_program,
    scalar,
    to_struct_tree,
    to_text,
    typecheck,
)
from toy import add_grammar, search_grammar, toy_library


def _search_tree_leaves(g):
    """Complete programs reached by repeatedly filling the leftmost hole."""
    out, stack = set(), [g.empty_architecture()]
    while stack:
        a = stack.pop()
        if a.is_complete:
            out.add(to_text(a))
        else:
            stack.extend(g.children(a))
    return out


@pytest.mark.parametrize("make", [lambda: add_grammar(3), lambda: search_grammar(2)])
def test_enumeration_matches_search_tree(make):
    g = make()
    enumerated = [to_text(a) for a in enumerate_complete(g)]
    assert len(enumerated) == len(set(enumerated))
    assert set(enumerated) == _search_tree_leaves(g)


def test_enumerated_programs_typecheck_and_round_trip():
    g = search_grammar(2)
    for a in enumerate_complete(g):
        typecheck(a, g)
        assert a.depth <= g.max_depth
        assert to_text(parse_program(to_text(a), g)) == to_text(a)


def test_max_nodes_is_tight():
    g = add_grammar(4)
    assert g.max_nodes() == max(a.node_count for a in enumerate_complete(g))


def test_add_grammar_size():
    # Add-only trees over two leaves: s(d) = 2 + s(d-1)^2 below the Map root
    s = 2
    for _ in range(2):
        s = 2 + s * s
    assert len(list(enumerate_complete(add_grammar(4)))) == 2 + s * s


def test_parse_errors():
    g = search_grammar(2)
    with pytest.raises(ProgramSyntaxError):
        parse_program("Map(Add(A, B)", g)
    with pytest.raises(ProgramSyntaxError):
        parse_program("Map(Add(A B))", g)
    with pytest.raises(UnknownProduction):
        parse_program("Map(Sub(A, B))", g)
    with pytest.raises(TypeMismatch):
        parse_program("Map(Add(A))", g)


def test_partial_programs_parse_with_holes():
    g = search_grammar(2)
    a = parse_program("Map(SimpleITE(A, ?, ?))", g)
    assert not a.is_complete
    assert len(a.holes()) == 2
    assert a.node_count == 3
    assert str(to_struct_tree(a)) == "map(ite(domain_lf:a))"


def test_depth_bound_enforced():
    g = search_grammar(2)
    with pytest.raises(TypeMismatch):
        parse_program("Map(Add(Add(A, B), C))", g)


def test_affine_leaves_restricts_domain_lfs():
    lib = toy_library(("A", "B"))
    g = build_grammar(lib, 2, 3, GrammarOptions(affine_leaves=True))
    parse_program("Map(Add(Affine(A), Affine(B)))", g)
    with pytest.raises(TypeMismatch):
        parse_program("Map(Add(A, B))", g)
    with pytest.raises(ValueError):
        GrammarOptions(ops=("add",), affine_leaves=True)


def test_grammar_errors():
    with pytest.raises(EmptyLibrary):
        build_grammar(DomainLFLibrary((), 0), 2)
    # Add alone cannot turn scalar LFs into a three-class score
    with pytest.raises(UnreachableOutputType):
        build_grammar(toy_library(), 3, 3, GrammarOptions(ops=("add",)))
    with pytest.raises(ValueError):
        GrammarOptions(ops=("add", "sub"))


def test_library_validation():
    with pytest.raises(ValueError):
        DomainLFLibrary.from_specs([("A", 1, ""), ("a", 1, "")])
    with pytest.raises(ValueError):
        DomainLFLibrary((DomainLF("A", scalar(), (0, 1)), DomainLF("B", scalar(), (0, 1))), 2)
    lib = DomainLFLibrary.from_specs([("A", 1, "x"), ("V", 3, "x")])
    assert DomainLFLibrary.from_dict(lib.to_dict()) == lib


def test_grammar_description_round_trip():
    g = build_grammar(toy_library(("A", "B", "C")), 3, 3, GrammarOptions(task="sequence", seq_len=5))
    g2 = Grammar.from_description(g.describe())
    assert g2.describe() == g.describe()
    assert sorted(map(to_text, enumerate_complete(build_grammar(g.library, 3, 2, g.options)))) == \
        sorted(map(to_text, enumerate_complete(build_grammar(g2.library, 3, 2, g2.options))))


def test_sequence_grammar_root_is_fold():
    g = build_grammar(toy_library(), 2, 2, GrammarOptions(task="sequence", seq_len=4))
    progs = list(enumerate_complete(g))
    assert progs and all(to_text(p).startswith("Fold(") for p in progs)
    assert np.all([p.is_complete for p in progs])

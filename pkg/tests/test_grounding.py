import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcg.grounding import ConceptSet, Origin, build_subgraph, levenshtein, match_entity, normalize
from kgcg.kg_store import SELF_ID, KnowledgeGraph


def graph(*triples):
    g = KnowledgeGraph()
    for t in triples:
        g.add_triple(*t)
    return g


@pytest.mark.parametrize("raw,want", [("  칫솔 ", "칫솔"), ("Cup  Holder", "cup holder"), ("가", "가")])
def test_normalize(raw, want):
    assert normalize(raw) == want


def test_normalize_composes_jamo():
    assert normalize("\u1100\u1161") == "\uac00"


@given(st.text())
def test_normalize_idempotent(s):
    assert normalize(normalize(s)) == normalize(s)


def test_concept_set_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        ConceptSet(["Cup", "cup"])
    with pytest.raises(ValueError):
        ConceptSet([])


def test_exact_match_short_circuits():
    g = graph(("a", "xNeed", "ab"))
    assert match_entity("a", g, 5) == [g.entity_id("a")]


def test_substring_tier():
    g = graph(("cup holder", "xNeed", "teacup"))
    want = sorted(i for i, e in enumerate(g.entities) if "cup" in e)
    assert match_entity("cup", g, 5) == want == [0, 1]


def test_edit_distance_tier():
    g = graph(("cup", "xNeed", "plate"))
    assert levenshtein("cupp", "cup") == 1
    assert match_entity("cupp", g, 5) == [g.entity_id("cup")]
    assert match_entity("cuppp", g, 5) == []


def test_max_candidates_caps():
    g = graph(("xa", "r", "ya"), ("za", "r", "wa"))
    assert len(match_entity("a", g, 2)) == 2


def test_empty_graph_isolated_concepts():
    sub = build_subgraph(ConceptSet(["c1", "c2"]), KnowledgeGraph(), 8, 2)
    assert len(sub.nodes) == 2
    assert sub.edges == [(0, SELF_ID, 0), (1, SELF_ID, 1)]


def test_inter_concept_edge():
    g = graph(("a", "xNeed", "b"))
    sub = build_subgraph(ConceptSet(["a", "b"]), g, 8, 0)
    assert (0, g.relations.id("xNeed"), 1) in sub.edges
    assert all(n.origin is Origin.CONCEPT for n in sub.nodes)


def test_budget_caps_expansion():
    g = graph(("a", "r", "t1"), ("a", "r", "t2"), ("a", "r", "t3"))
    sub = build_subgraph(ConceptSet(["a"]), g, 2, 3)
    assert [n.origin for n in sub.nodes].count(Origin.RETRIEVED) == 1


def test_budget_below_concepts_is_error():
    with pytest.raises(ValueError):
        build_subgraph(ConceptSet(["a", "b", "c"]), KnowledgeGraph(), 2, 0)


def test_round_robin_favors_coverage():
    g = graph(("a", "r", "a1"), ("a", "r", "a2"), ("b", "r", "b1"), ("b", "r", "b2"))
    sub = build_subgraph(ConceptSet(["a", "b"]), g, 4, 2)
    assert [n.surface for n in sub.nodes] == ["a", "b", "a1", "b1"]


def test_shared_neighbor_reuses_node():
    g = graph(("a", "r", "t"), ("b", "q", "t"))
    sub = build_subgraph(ConceptSet(["a", "b"]), g, 8, 1)
    assert [n.surface for n in sub.nodes] == ["a", "b", "t"]
    assert (0, g.relations.id("r"), 2) in sub.edges and (1, g.relations.id("q"), 2) in sub.edges


ent = st.sampled_from(["a", "b", "c", "d", "e", "f"])
rel = st.sampled_from(["xNeed", "xWant", "oReact"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(ent, rel, ent), max_size=25),
       st.lists(ent, min_size=1, max_size=4, unique=True),
       st.integers(0, 4), st.integers(0, 4))
def test_subgraph_invariants(rows, concepts, extra, fanout):
    g = graph(*rows)
    cs = ConceptSet(concepts)
    budget = len(cs) + extra
    sub = build_subgraph(cs, g, budget, fanout)
    assert len(sub.nodes) <= budget
    assert [n.concept_index for n in sub.nodes if n.origin is Origin.CONCEPT] == list(range(len(cs)))
    n = len(sub.nodes)
    assert all(0 <= s < n and 0 <= d < n and 0 <= r < len(g.relations) for s, r, d in sub.edges)
    assert all((k, SELF_ID, k) in sub.edges for k in range(n))
    again = build_subgraph(cs, g, budget, fanout)
    assert again.to_json() == sub.to_json()
    # inter-concept pair-scan oracle
    eid = {c: g.entity_id(c) for c in concepts}
    for i, ci in enumerate(concepts):
        for j, cj in enumerate(concepts):
            if i == j or eid[ci] is None or eid[cj] is None:
                continue
            for t in g.triples:
                if t.head == eid[ci] and t.tail == eid[cj]:
                    assert (i, t.relation, j) in sub.edges

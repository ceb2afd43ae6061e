import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetpre.errors import GraphError, ShapeMismatchError
from hetpre.graph import FeatureSet, HinSchema, build_graph, neighbors, self_relation_name

from toys import homogeneous_graph, ragged_hin, random_hin


def two_by_two():
    schema = HinSchema(["P", "A"], [("PA", "P", "A"), ("AP", "A", "P")])
    return build_graph(schema, {"PA": [(0, 0), (0, 1)], "AP": [(0, 0), (1, 0)]}, {"P": 2, "A": 2})


class TestSchema:
    def test_self_relations_generated(self):
        schema = HinSchema(["P", "A"], [("PA", "P", "A")])
        names = [r.name for r in schema.relations]
        assert names == ["PA", "self:P", "self:A"]
        assert schema.incoming("P")[0].is_self
        assert [r.name for r in schema.incoming("P")] == ["self:P", "PA"]
        assert [r.name for r in schema.incoming("A")] == ["self:A"]

    def test_rejects_user_self_relation(self):
        with pytest.raises(GraphError):
            HinSchema(["P"], [("self:P", "P", "P")])

    def test_unknown_endpoint(self):
        with pytest.raises(GraphError, match="unknown type"):
            HinSchema(["P"], [("PX", "P", "X")])

    def test_heterogeneity_condition(self):
        with pytest.raises(GraphError, match="heterogeneous"):
            HinSchema(["P"], [])
        HinSchema(["P"], [("PP", "P", "P")])

    def test_duplicate_relation(self):
        with pytest.raises(GraphError):
            HinSchema(["P", "A"], [("PA", "P", "A"), ("PA", "P", "A")])

    def test_dict_roundtrip_and_hash(self):
        schema = HinSchema(["P", "A"], [("PA", "P", "A"), ("AP", "A", "P")])
        again = HinSchema.from_dict(schema.to_dict())
        assert again == schema
        assert again.schema_hash() == schema.schema_hash()
        assert HinSchema(["P", "A"], [("PA", "P", "A")]).schema_hash() != schema.schema_hash()


class TestBuildGraph:
    def test_row_normalization_example(self):
        g = two_by_two()
        np.testing.assert_array_equal(g.adjacency("PA").toarray()[0], [0.5, 0.5])

    def test_self_weight_is_one(self):
        g, _ = ragged_hin()
        for t in g.schema.object_types:
            a = g.adjacency(self_relation_name(t)).toarray()
            np.testing.assert_array_equal(a, np.eye(g.counts[t]))

    def test_weighted_rows(self):
        g, _ = ragged_hin()
        row = g.adjacency("PA").toarray()[2]
        np.testing.assert_allclose(row[[2, 3]], [0.8, 0.2], rtol=0, atol=1e-15)

    def test_acm_shaped_schema_loads(self):
        schema = HinSchema(["P", "A", "S"], [("PA", "P", "A"), ("AP", "A", "P"), ("PS", "P", "S"), ("SP", "S", "P")])
        rng = np.random.default_rng(0)
        pa = sorted({(int(rng.integers(4025)), int(rng.integers(7167))) for _ in range(20000)})
        ps = sorted({(p, int(rng.integers(60))) for p in range(4025)})
        edges = {"PA": pa, "AP": [(a, p) for p, a in pa], "PS": ps, "SP": [(s, p) for p, s in ps]}
        g = build_graph(schema, edges, {"P": 4025, "A": 7167, "S": 60})
        assert g.counts == {"P": 4025, "A": 7167, "S": 60}
        assert g.num_objects == 4025 + 7167 + 60

    @pytest.mark.parametrize(
        "edges, match",
        [
            ({"PA": [(2, 0)]}, "out of range"),
            ({"PA": [(0, 5)]}, "out of range"),
            ({"PA": [(0, 0, 0.0)]}, "nonpositive"),
            ({"PA": [(0, 0, -1.0)]}, "nonpositive"),
            ({"PA": [(0, 1), (0, 1)]}, "duplicate"),
            ({"XY": [(0, 0)]}, "unknown relation"),
            ({"self:P": [(0, 0)]}, "self-relation"),
        ],
    )
    def test_errors(self, edges, match):
        schema = HinSchema(["P", "A"], [("PA", "P", "A"), ("AP", "A", "P")])
        with pytest.raises(GraphError, match=match):
            build_graph(schema, edges, {"P": 2, "A": 2})

    def test_reverse_not_added(self):
        schema = HinSchema(["P", "A"], [("PA", "P", "A"), ("AP", "A", "P")])
        g = build_graph(schema, {"PA": [(0, 1)]}, {"P": 2, "A": 2})
        assert g.adjacency("AP").nnz == 0

    def test_deterministic_ordering(self):
        schema = HinSchema(["P", "A"], [("PA", "P", "A")])
        a = build_graph(schema, {"PA": [(1, 0), (0, 1), (0, 0)]}, {"P": 2, "A": 2})
        b = build_graph(schema, {"PA": [(0, 0), (1, 0), (0, 1)]}, {"P": 2, "A": 2})
        assert a == b
        assert a.edge_lists()["PA"] == [(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)]

    def test_symmetric_normalization_switch(self):
        g = homogeneous_graph(6, seed=1)
        s = build_graph(g.schema, g.edge_lists(), g.counts, normalization="symmetric")
        a = s.adjacency("NN").toarray()
        np.testing.assert_allclose(a, a.T, atol=1e-15)
        with pytest.raises(GraphError):
            build_graph(g.schema, g.edge_lists(), g.counts, normalization="bogus")


class TestNeighbors:
    def test_self_relation(self):
        g, _ = ragged_hin()
        for gid in range(g.num_objects):
            t = g.type_of(gid)
            assert neighbors(g, gid, self_relation_name(t)) == [(gid, 1.0)]

    def test_two_edge_example(self):
        g = two_by_two()
        a0 = g.globalize("A", 0)
        assert neighbors(g, g.globalize("P", 0), "PA") == [(a0, 0.5), (a0 + 1, 0.5)]

    def test_isolated(self):
        g, _ = ragged_hin()
        assert neighbors(g, g.globalize("P", 5), "PA") == []

    def test_type_mismatch(self):
        g = two_by_two()
        with pytest.raises(GraphError):
            neighbors(g, g.globalize("A", 0), "PA")

    def test_ascending_order(self):
        g, _ = ragged_hin()
        for r in g.schema.user_relations:
            for local in range(g.counts[r.source]):
                ids = [j for j, _ in neighbors(g, g.globalize(r.source, local), r.name)]
                assert ids == sorted(ids)


class TestInvariants:
    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_row_stochastic_and_positive(self, seed):
        g, _ = random_hin(seed)
        for r in g.schema.user_relations:
            a = g.adjacency(r.name)
            assert (a.data > 0).all()
            sums = np.asarray(a.sum(axis=1)).ravel()
            has = g.has_neighbors(r.name)
            np.testing.assert_allclose(sums[has], 1.0, rtol=0, atol=1e-9)
            assert (sums[~has] == 0).all()

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_global_id_bijection(self, seed):
        g, _ = random_hin(seed)
        seen = set()
        for t in g.schema.object_types:
            for local in range(g.counts[t]):
                gid = g.globalize(t, local)
                assert g.localize(gid) == (t, local)
                seen.add(gid)
        assert seen == set(range(g.num_objects))

    def test_localize_out_of_range(self):
        g = two_by_two()
        with pytest.raises(GraphError):
            g.localize(4)
        with pytest.raises(GraphError):
            g.globalize("P", 2)


class TestFeatureSet:
    def test_rejects_nan(self):
        with pytest.raises(ShapeMismatchError):
            FeatureSet({"P": np.array([[np.nan]])})

    def test_row_count_check(self):
        g = two_by_two()
        with pytest.raises(ShapeMismatchError, match="rows"):
            FeatureSet({"P": np.zeros((3, 1)), "A": np.zeros((2, 1))}).check(g)
        with pytest.raises(ShapeMismatchError, match="no features"):
            FeatureSet({"P": np.zeros((2, 1))}).check(g)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdgraph.core import (
    EmbeddingRecord,
    EmbeddingSet,
    cosine_sim,
    l2_normalize,
    pairwise_similarity,
)
from hdgraph.errors import (
    BoxError,
    DimensionError,
    EmptySetError,
    MissingChannelError,
    NormalizationError,
    ValidationError,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def nonzero_vectors(dim=4):
    return arrays(np.float64, dim, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def make_set(bodies, heads=None, start=0):
    heads = heads or [None] * len(bodies)
    recs = [EmbeddingRecord(start + i, start + i, b, h) for i, (b, h) in enumerate(zip(bodies, heads))]
    return EmbeddingSet.from_records(recs, normalize=False)


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)

    def test_already_unit(self):
        assert l2_normalize([1, 0]).tolist() == [1.0, 0.0]

    def test_zero_vector(self):
        with pytest.raises(NormalizationError):
            l2_normalize([0, 0])

    @given(nonzero_vectors())
    def test_unit_norm_and_idempotent(self, v):
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)
        # direction preserved
        assert np.dot(u, v) > 0


class TestCosine:
    @pytest.mark.parametrize("a, b, expected", [
        ((1, 0), (1, 0), 1.0),
        ((1, 0), (0, 1), 0.0),
        ((1, 0), (-1, 0), -1.0),
    ])
    def test_cases(self, a, b, expected):
        assert cosine_sim(a, b) == expected

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            cosine_sim([1, 0], [1, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(NormalizationError):
            cosine_sim([0, 0], [1, 0])

    @given(nonzero_vectors(), nonzero_vectors())
    def test_symmetric_exactly(self, a, b):
        assert cosine_sim(a, b) == cosine_sim(b, a)

    @given(nonzero_vectors(), st.floats(1e-3, 1e3))
    def test_positive_rescaling(self, a, c):
        assert abs(cosine_sim(a, c * a) - 1.0) < 1e-9


class TestPairwise:
    def test_example_rows(self):
        q = make_set([[1, 0]])
        g = make_set([[1, 0], [0, 1]], start=10)
        sim = pairwise_similarity(q, g)
        assert sim.values.tolist() == [[1.0, 0.0]]
        assert sim.row_ids == (0,) and sim.col_ids == (10, 11)

    def test_unit_dot_product(self):
        sim = pairwise_similarity(make_set([[0.6, 0.8]]), make_set([[1, 0]], start=5))
        assert sim.values[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_missing_head_is_marked_not_zero(self):
        q = make_set([[1, 0]], heads=[[1, 0]])
        g = make_set([[1, 0]], heads=[None], start=1)
        sim = pairwise_similarity(q, g, "head")
        assert sim.missing.tolist() == [[True]]
        assert np.isnan(sim.values[0, 0])

    def test_query_without_channel(self):
        q = make_set([[1, 0]], heads=[None])
        g = make_set([[1, 0]], heads=[[1, 0]], start=1)
        with pytest.raises(MissingChannelError):
            pairwise_similarity(q, g, "head")
        sim = pairwise_similarity(q, g, "head", require_query_channel=False)
        assert sim.missing.all()

    def test_empty(self):
        q = make_set([[1, 0]])
        empty = EmbeddingSet((), 2, 0)
        with pytest.raises(EmptySetError):
            pairwise_similarity(q, empty)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1))
    def test_rescaling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        qb, gb = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
        s1 = pairwise_similarity(make_set(list(qb)), make_set(list(gb), start=10))
        scale_q = rng.uniform(0.01, 100, (3, 1))
        scale_g = rng.uniform(0.01, 100, (4, 1))
        s2 = pairwise_similarity(make_set(list(qb * scale_q)), make_set(list(gb * scale_g), start=10))
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-9)
        assert np.all(np.abs(s1.values) <= 1 + 1e-9)


class TestRecords:
    def test_duplicate_ids(self):
        r = EmbeddingRecord(1, 0, [1, 0])
        with pytest.raises(ValidationError):
            EmbeddingSet((r, r), 2, 0)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            EmbeddingSet((EmbeddingRecord(1, 0, [1, 0]), EmbeddingRecord(2, 0, [1, 0, 0])), 2, 0)

    def test_bad_box(self):
        with pytest.raises(BoxError):
            EmbeddingRecord(1, 0, [1.0], box=(5, 0, 1, 10))

    def test_from_records_normalizes(self):
        s = EmbeddingSet.from_records([EmbeddingRecord(1, 0, [3, 4], [0, 2])])
        np.testing.assert_allclose(s[0].body, [0.6, 0.8])
        np.testing.assert_allclose(s[0].head, [0, 1])
        assert s.head_dim == 2

    def test_drop_heads_below(self):
        s = EmbeddingSet.from_records([
            EmbeddingRecord(1, 0, [1, 0], [1, 0], score=0.2),
            EmbeddingRecord(2, 0, [1, 0], [1, 0], score=0.9),
        ])
        assert s.drop_heads_below(0.5).has_channel("head").tolist() == [False, True]

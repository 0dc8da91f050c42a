import numpy as np
import pytest

from app.models import Embedding, EmbeddingKind
from app.services.vector_index import DuplicatePrompt, IndexError_, UnknownPrompt, VectorIndex
from app.utils.errors import InvariantViolation
from helpers import make_embedding


def triple(values):
    return (make_embedding(values, EmbeddingKind.WHOLE),
            make_embedding(values, EmbeddingKind.OBJECT),
            make_embedding(values, EmbeddingKind.BACKGROUND))


@pytest.fixture
def index():
    return VectorIndex()


class TestInsertRemove:
    def test_empty_query(self, index):
        assert index.query_top1(EmbeddingKind.WHOLE, make_embedding([1.0, 0.0])) is None

    def test_exact_match(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        index.insert(*triple([0.0, 1.0]), prompt=2)
        result = index.query_top1(EmbeddingKind.OBJECT,
                                  make_embedding([0.0, 1.0], EmbeddingKind.OBJECT))
        assert result.prompt == 2
        assert result.score == pytest.approx(1.0)

    def test_duplicate(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        with pytest.raises(DuplicatePrompt):
            index.insert(*triple([0.0, 1.0]), prompt=1)

    def test_remove_unknown(self, index):
        with pytest.raises(UnknownPrompt):
            index.remove(3)

    def test_remove_takes_all_tables(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        index.insert(*triple([0.0, 1.0]), prompt=2)
        index.remove(1)
        assert index.prompts() == [2]
        for kind in EmbeddingKind:
            assert 1 not in index.tables[kind]
        index.check_consistency()

    def test_remove_then_reinsert(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        index.remove(1)
        index.insert(*triple([1.0, 0.0]), prompt=1)
        assert len(index) == 1

    def test_wrong_kind_is_rejected_atomically(self, index):
        whole, obj, _ = triple([1.0, 0.0])
        with pytest.raises(IndexError_):
            index.insert(whole, obj, make_embedding([1.0, 0.0], EmbeddingKind.OBJECT), prompt=1)
        assert len(index) == 0
        index.check_consistency()

    def test_dimension_mismatch(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        with pytest.raises(IndexError_):
            index.insert(*triple([1.0, 0.0, 0.0]), prompt=2)
        with pytest.raises(IndexError_):
            index.query_top1(EmbeddingKind.WHOLE, make_embedding([1.0, 0.0, 0.0]))

    def test_ties_go_to_smaller_prompt(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=9)
        index.insert(*triple([1.0, 0.0]), prompt=4)
        assert index.query_top1(EmbeddingKind.WHOLE, make_embedding([1.0, 0.0])).prompt == 4

    def test_embeddings_round_trip(self, index):
        whole, obj, bg = triple([0.6, 0.8])
        index.insert(whole, obj, bg, prompt=5)
        assert index.embeddings(5) == (whole, obj, bg)

    def test_consistency_violation(self, index):
        index.insert(*triple([1.0, 0.0]), prompt=1)
        index.tables[EmbeddingKind.OBJECT].discard(1)
        with pytest.raises(InvariantViolation):
            index.check_consistency()


class TestExactness:
    def test_matches_linear_scan(self):
        rng = np.random.default_rng(77)
        dim = 32
        index = VectorIndex()
        vectors = rng.standard_normal((10_000, dim))
        for prompt, vector in enumerate(vectors):
            index.insert(*triple(vector), prompt=prompt)
        removed = rng.choice(10_000, size=500, replace=False)
        for prompt in removed:
            index.remove(int(prompt))

        alive = np.setdiff1d(np.arange(10_000), removed)
        stored = np.stack([Embedding.normalized(vectors[p]).values for p in alive])
        matrix = stored.astype(np.float64)
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)

        mismatches = 0
        for _ in range(1000):
            query = make_embedding(rng.standard_normal(dim), EmbeddingKind.BACKGROUND)
            q = query.values.astype(np.float64)
            expected = matrix @ (q / np.linalg.norm(q))
            result = index.query_top1(EmbeddingKind.BACKGROUND, query)

            assert result.score == pytest.approx(expected.max(), abs=1e-9)
            top_two = np.partition(expected, -2)[-2:]
            if top_two[1] - top_two[0] > 1e-9 and result.prompt != int(alive[np.argmax(expected)]):
                mismatches += 1
        assert mismatches == 0

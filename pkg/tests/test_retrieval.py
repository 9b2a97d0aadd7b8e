import numpy as np
import pytest

from voxshape import data, retrieval
from voxshape.errors import ShapeError


def _gallery(matrix, ids=None):
    matrix = np.asarray(matrix, dtype=float)
    ids = list(range(len(matrix))) if ids is None else ids
    return retrieval.DescriptorGallery(matrix, ids, None)


class TestRanking:
    def test_order(self):
        g = _gallery([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]])
        assert retrieval.rank_query(np.zeros(2), g).tolist() == [0, 2, 1]

    def test_ties_keep_index_order(self):
        g = _gallery([[1.0], [-1.0], [1.0]])
        assert retrieval.rank_query(np.zeros(1), g).tolist() == [0, 1, 2]

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            retrieval.rank_query(np.zeros(3), _gallery([[0.0, 0.0]]))

    def test_translation_invariant(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((10, 4))
        q = rng.standard_normal(4)
        shift = rng.standard_normal(4) * 5
        a = retrieval.rank_query(q, _gallery(m))
        b = retrieval.rank_query(q + shift, _gallery(m + shift))
        assert a.tolist() == b.tolist()


class TestTopK:
    def test_fraction(self):
        g = _gallery([[0.0], [10.0], [20.0]], ids=[7, 8, 9])
        queries = np.array([[0.1], [19.0], [9.0]])
        assert retrieval.topk_accuracy(queries, [7, 8, 8], g, 1) == pytest.approx(2 / 3)

    def test_k_equals_gallery_is_one(self):
        rng = np.random.default_rng(1)
        g = _gallery(rng.standard_normal((5, 3)))
        assert retrieval.topk_accuracy(rng.standard_normal((4, 3)), [0, 1, 2, 3], g, 5) == 1.0

    def test_missing_true_id(self):
        with pytest.raises(KeyError):
            retrieval.topk_accuracy(np.zeros((1, 1)), [42], _gallery([[0.0]]), 1)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(2)
        g = _gallery(rng.standard_normal((8, 2)))
        q = rng.standard_normal((8, 2))
        accs = [retrieval.topk_accuracy(q, list(range(8)), g, k) for k in range(1, 9)]
        assert all(b >= a for a, b in zip(accs, accs[1:]))

    def test_non_finite_gallery(self):
        with pytest.raises(ValueError):
            _gallery([[np.nan]])


@pytest.fixture(scope="module")
def ds():
    return data.generate_dataset(40, seed=1)


class TestScenarios:
    def test_names(self):
        assert set(retrieval.TABLE_SCENARIOS) <= set(retrieval.SCENARIOS)
        sc = retrieval.get_scenario("repeat-affine")
        assert (sc.transform_type, sc.lookup_set, sc.query_source) == ("affine", "repeat_only", "repeat_scan")

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            retrieval.get_scenario("bogus")

    def test_invalid_combination(self):
        with pytest.raises(ValueError):
            retrieval.ExperimentScenario("none", "repeat_only", "same_scan")

    def test_query_counts(self, ds):
        n_test = len(ds.split("test"))
        vols, ids = retrieval.build_queries(ds, retrieval.get_scenario("same-affine"), 0, draws=6)
        assert len(vols) == 6 * n_test
        vols, ids = retrieval.build_queries(ds, retrieval.get_scenario("repeat-none"), 0, draws=6)
        assert len(vols) == len(ds.repeats)
        assert ids == data.repeat_subject_ids(ds.rows)[: len(ds.repeats)]

    def test_queries_deterministic(self, ds):
        sc = retrieval.get_scenario("repeat-similarity")
        a, _ = retrieval.build_queries(ds, sc, 3, draws=2)
        b, _ = retrieval.build_queries(ds, sc, 3, draws=2)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_same_scan_without_transform_is_perfect(self, ds):
        flat = lambda vols: np.stack([v.reshape(-1) for v in vols])  # noqa: E731
        res = retrieval.run_experiment(flat, ds, retrieval.get_scenario("same-none"))
        assert res["top1"] == 1.0 and res["top5"] == 1.0

    def test_results_csv(self, ds, tmp_path):
        res = retrieval.run_experiment(retrieval.describe_baseline, ds, retrieval.get_scenario("repeat-none"))
        path = tmp_path / "results.csv"
        retrieval.write_results(path, [res])
        lines = path.read_text().splitlines()
        assert lines[0] == retrieval.RESULTS_HEADER
        assert lines[1].startswith("repeat-none,none,repeat_only,1,")
        assert len(lines) == 3


def test_baseline_descriptor_is_voxel_count():
    v = np.zeros((4, 4, 4), np.float32)
    v[:2] = 1
    assert retrieval.baseline_volume_descriptor(v).tolist() == [32.0]

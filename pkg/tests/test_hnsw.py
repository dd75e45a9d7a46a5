import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from loopdet import (
    DegenerateDescriptorError,
    GlobalDescriptor,
    HnswIndex,
    HnswParams,
    IndexAuditError,
    Neighbor,
    assign_level,
    exact_knn,
    mean_recall,
    select_neighbors,
    similarity,
)
from conftest import unit_rows

SMALL = HnswParams(M=8, ef_construction=32, ef_search=32, rng_seed=7)


def build_index(vectors, params=SMALL):
    index = HnswIndex(vectors.shape[1], params)
    for i, v in enumerate(vectors):
        index.insert(i, v)
    return index


class TestSimilarity:
    def test_self_similarity(self):
        assert similarity([0.6, 0.8], [0.6, 0.8]) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)

    def test_45_degrees(self):
        assert similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.7071, abs=1e-4)

    def test_symmetry_and_range(self, rng):
        for _ in range(50):
            p, q = rng.standard_normal((2, 16))
            s_pq = similarity(p, q)
            assert abs(s_pq - similarity(q, p)) < 1e-7
            assert -1.0 - 1e-6 <= s_pq <= 1.0 + 1e-6

    def test_accepts_global_descriptors(self):
        p = GlobalDescriptor(0, np.array([1.0, 0.0]))
        q = GlobalDescriptor(1, np.array([1.0, 0.0]))
        assert similarity(p, q) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            similarity([0.0, 0.0], [1.0, 0.0])


class TestAssignLevel:
    def test_zero_lambda_always_ground(self, rng):
        assert all(assign_level(rng, 0.0) == 0 for _ in range(100))

    def test_deterministic_given_seed(self):
        a = [assign_level(np.random.default_rng(5), 1.0) for _ in range(1)]
        draws1 = [assign_level(np.random.default_rng(99), 0.5) for _ in range(200)]
        draws2 = [assign_level(np.random.default_rng(99), 0.5) for _ in range(200)]
        assert draws1 == draws2 and a == a

    def test_mean_matches_closed_form(self):
        # floor of an exponential with rate ln(M) is geometric on {0,1,...}
        # with ratio 1/M, so the closed-form mean is 1/(M-1)
        M = 48
        lam = 1.0 / math.log(M)
        rng = np.random.default_rng(2024)
        u = 1.0 - rng.random(1_000_000)
        levels = np.floor(-np.log(u) * lam)
        assert abs(levels.mean() - 1.0 / (M - 1)) < 2e-3
        # the vectorized draw matches the scalar op stream
        rng2 = np.random.default_rng(2024)
        first = [assign_level(rng2, lam) for _ in range(100)]
        assert first == levels[:100].astype(int).tolist()


class TestInsert:
    def test_first_insert_becomes_entry(self, rng):
        index = HnswIndex(4, SMALL)
        index.insert(3, [1.0, 0.0, 0.0, 0.0])
        assert len(index) == 1 and 3 in index
        index.audit()
        res = index.knn_search([1.0, 0.0, 0.0, 0.0], 1, ef=1)
        assert res == [Neighbor(3, 1.0)]

    def test_three_nodes_complete_ground_layer(self, rng):
        vectors = unit_rows(rng, 3, 8)
        params = HnswParams(M=48, ef_construction=40, ef_search=40, rng_seed=1)
        index = build_index(vectors, params)
        for i in range(3):
            others = {index.frame_ids[j] for j in range(3) if j != i}
            linked = {
                index.frame_ids[n]
                for n in index._links[index._id_to_idx[i]][0].tolist()
            }
            assert linked == others

    def test_duplicate_frame_rejected(self, rng):
        index = build_index(unit_rows(rng, 4, 8))
        with pytest.raises(ValueError, match="already present"):
            index.insert(2, unit_rows(rng, 1, 8)[0])

    def test_dimension_mismatch_rejected(self, rng):
        index = build_index(unit_rows(rng, 4, 8))
        with pytest.raises(ValueError, match="dimension"):
            index.insert(99, np.ones(5))

    def test_zero_vector_rejected(self, rng):
        index = HnswIndex(4)
        with pytest.raises(DegenerateDescriptorError):
            index.insert(0, np.zeros(4))

    def test_degree_caps_after_many_inserts(self, rng):
        vectors = unit_rows(rng, 2000, 16)
        params = HnswParams(M=48, ef_construction=40, ef_search=40, rng_seed=5)
        index = build_index(vectors, params)
        index.audit()
        for idx in range(len(index)):
            assert index._links[idx][0].shape[0] <= 96


class TestKnnSearch:
    def test_single_element(self, rng):
        index = HnswIndex(8)
        v = unit_rows(rng, 2, 8)
        index.insert(0, v[0])
        res = index.knn_search(v[1], 1, ef=4)
        assert len(res) == 1 and res[0].frame_id == 0
        assert res[0].similarity == pytest.approx(similarity(v[0], v[1]), abs=1e-6)

    def test_exact_hit_ranked_first(self, rng):
        vectors = unit_rows(rng, 200, 16)
        index = build_index(vectors)
        res = index.knn_search(vectors[42], 5, ef=100)
        assert res[0].frame_id == 42
        assert res[0].similarity == pytest.approx(1.0, abs=1e-6)

    def test_recall_against_linear_scan(self, rng):
        vectors = unit_rows(rng, 1500, 32)
        queries = unit_rows(rng, 50, 32)
        index = build_index(vectors, HnswParams(M=16, ef_construction=48, ef_search=48, rng_seed=3))
        exact = exact_knn(vectors, queries, 10)
        found = [[n.frame_id for n in index.knn_search(q, 10, ef=200)] for q in queries]
        assert mean_recall(found, exact) >= 0.95

    def test_result_count_capped_by_index_size(self, rng):
        index = build_index(unit_rows(rng, 3, 8))
        assert len(index.knn_search(unit_rows(rng, 1, 8)[0], 10, ef=16)) == 3

    def test_sorted_by_similarity_then_id(self, rng):
        index = build_index(unit_rows(rng, 300, 8))
        res = index.knn_search(unit_rows(rng, 1, 8)[0], 10, ef=64)
        keys = [(-n.similarity, n.frame_id) for n in res]
        assert keys == sorted(keys)

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            HnswIndex(4).knn_search(np.ones(4), 1)

    def test_ef_below_k_rejected(self, rng):
        index = build_index(unit_rows(rng, 10, 8))
        with pytest.raises(ValueError, match="ef"):
            index.knn_search(unit_rows(rng, 1, 8)[0], 5, ef=3)

    def test_ef_monotonic_recall(self, rng):
        vectors = unit_rows(rng, 800, 24)
        queries = unit_rows(rng, 40, 24)
        index = build_index(vectors, HnswParams(M=12, ef_construction=32, ef_search=32, rng_seed=9))
        exact = exact_knn(vectors, queries, 10)
        recalls = []
        for ef in (10, 20, 40, 80):
            found = [[n.frame_id for n in index.knn_search(q, 10, ef=ef)] for q in queries]
            recalls.append(mean_recall(found, exact))
        for lo, hi in zip(recalls, recalls[1:]):
            assert hi >= lo - 0.02

    def test_concurrent_searches_match_serial(self, rng):
        vectors = unit_rows(rng, 400, 16)
        queries = unit_rows(rng, 32, 16)
        index = build_index(vectors)
        serial = [index.knn_search(q, 5, ef=40) for q in queries]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(lambda q: index.knn_search(q, 5, ef=40), queries))
        assert serial == parallel


def keep_rule_oracle(base, cands, m, vectors):
    """Literal brute-force transcription of the diversity keep rule."""
    kept = []
    discarded = []
    dist = lambda a, b: 1.0 - float(np.dot(a, b))
    for c in cands:
        if len(kept) == m:
            break
        d_base = dist(vectors[c.frame_id], base)
        if all(d_base < dist(vectors[c.frame_id], vectors[k.frame_id]) for k in kept):
            kept.append(c)
        else:
            discarded.append(c)
    for c in discarded:
        if len(kept) == m:
            break
        kept.append(c)
    return sorted(kept, key=lambda c: (-c.similarity, c.frame_id))


class TestSelectNeighbors:
    @staticmethod
    def on_circle(angles):
        return {i: np.array([np.cos(a), np.sin(a)]) for i, a in enumerate(angles)}

    def make_candidates(self, base, vectors):
        cands = [Neighbor(i, similarity(base, v)) for i, v in vectors.items()]
        cands.sort(key=lambda c: (-c.similarity, c.frame_id))
        return cands

    def test_identity_when_under_capacity(self):
        vectors = self.on_circle([0.3, 1.2, 2.2])
        base = np.array([1.0, 0.0])
        cands = self.make_candidates(base, vectors)
        assert select_neighbors(base, cands, 5, vectors) == cands

    def test_near_duplicates_pruned_to_nearer(self):
        vectors = self.on_circle([0.30, 0.31])
        base = np.array([1.0, 0.0])
        cands = self.make_candidates(base, vectors)
        kept = select_neighbors(base, cands, 1, vectors)
        assert [c.frame_id for c in kept] == [0]

    def test_two_clusters_both_represented(self, rng):
        # clusters on either side of the base survive the keep rule together
        angles = np.concatenate([
            0.35 + 0.05 * rng.random(10),
            -0.80 - 0.05 * rng.random(10),
        ])
        vectors = self.on_circle(angles)
        base = np.array([1.0, 0.0])
        cands = self.make_candidates(base, vectors)
        kept = select_neighbors(base, cands, 4, vectors)
        oracle = keep_rule_oracle(base, cands, 4, vectors)
        assert kept == oracle
        near = sum(1 for c in kept if c.frame_id < 10)
        far = sum(1 for c in kept if c.frame_id >= 10)
        assert near >= 1 and far >= 1

    def test_matches_oracle_on_random_instances(self, rng):
        for trial in range(20):
            vecs = unit_rows(rng, 15, 6)
            vectors = {i: v for i, v in enumerate(vecs)}
            base = unit_rows(rng, 1, 6)[0]
            cands = self.make_candidates(base, vectors)
            for m in (1, 3, 7):
                assert select_neighbors(base, cands, m, vectors) == keep_rule_oracle(
                    base, cands, m, vectors
                )


class TestDeterminism:
    def test_identical_runs_identical_results(self, rng):
        vectors = unit_rows(rng, 500, 16)
        queries = unit_rows(rng, 20, 16)
        a = build_index(vectors)
        b = build_index(vectors)
        for q in queries:
            assert a.knn_search(q, 8, ef=50) == b.knn_search(q, 8, ef=50)


class TestAudit:
    def test_passes_after_inserts(self, rng):
        build_index(unit_rows(rng, 300, 8)).audit()

    def test_detects_degree_violation(self, rng):
        index = build_index(unit_rows(rng, 50, 8))
        idx = 5
        index._links[idx][0] = np.array(
            [j for j in range(50) if j != idx][: SMALL.M0 + 1], dtype=np.int64
        )
        with pytest.raises(IndexAuditError, match="degree"):
            index.audit()

    def test_detects_dangling_edge(self, rng):
        index = build_index(unit_rows(rng, 20, 8))
        index._links[3][0] = np.array([999], dtype=np.int64)
        with pytest.raises(IndexAuditError, match="missing"):
            index.audit()

    def test_detects_bad_entry_point(self, rng):
        index = build_index(unit_rows(rng, 100, 8))
        lowest = next(i for i in range(100) if index._levels[i] == 0)
        index._entry = lowest
        if max(index._levels) > 0:
            with pytest.raises(IndexAuditError, match="entry"):
                index.audit()


class TestSnapshot:
    def test_round_trip_preserves_results(self, tmp_path, rng):
        vectors = unit_rows(rng, 300, 8)
        queries = unit_rows(rng, 10, 8)
        index = build_index(vectors)
        path = tmp_path / "index.fhnw"
        index.save(path)
        loaded = HnswIndex.load(path)
        loaded.audit()
        for q in queries:
            assert index.knn_search(q, 5, ef=40) == loaded.knn_search(q, 5, ef=40)

    def test_inserts_after_load_match_unbroken_run(self, tmp_path, rng):
        vectors = unit_rows(rng, 200, 8)
        queries = unit_rows(rng, 10, 8)
        straight = build_index(vectors)

        resumed = build_index(vectors[:100])
        path = tmp_path / "index.fhnw"
        resumed.save(path)
        resumed = HnswIndex.load(path)
        for i in range(100, 200):
            resumed.insert(i, vectors[i])

        for q in queries:
            assert straight.knn_search(q, 5, ef=40) == resumed.knn_search(q, 5, ef=40)

    def test_corrupted_snapshot_rejected(self, tmp_path, rng):
        index = build_index(unit_rows(rng, 30, 8))
        path = tmp_path / "index.fhnw"
        index.save(path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            HnswIndex.load(path)
        path.write_bytes(raw[:-7])
        with pytest.raises(ValueError, match="truncated"):
            HnswIndex.load(path)


class TestParams:
    def test_derived_defaults(self):
        p = HnswParams(M=48)
        assert p.M0 == 96
        assert p.level_lambda == pytest.approx(1.0 / math.log(48))
        assert p.ef_construction_effective == 48

    def test_validation(self):
        with pytest.raises(ValueError):
            HnswParams(M=1)
        with pytest.raises(ValueError):
            HnswParams(M=4, ef_search=0)
        with pytest.raises(ValueError):
            HnswParams(M=4, M0=2)

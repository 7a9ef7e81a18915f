import numpy as np
import pytest

import oracles
from udafeat import metrics as M


class TestConfusionMatrix:
    def test_counts(self):
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        cm = M.confusion_matrix(gt, pred, 2)
        np.testing.assert_array_equal(cm, [[1, 1], [0, 2]])

    def test_ignore_excluded(self):
        gt = np.array([0, 255, 1])
        pred = np.array([0, 0, 1])
        cm = M.confusion_matrix(gt, pred, 2)
        assert cm.sum() == 2

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 3, size=50)
        pred = rng.integers(0, 3, size=50)
        perm = rng.permutation(50)
        np.testing.assert_array_equal(M.confusion_matrix(gt, pred, 3),
                                      M.confusion_matrix(gt[perm], pred[perm], 3))


class TestIoU:
    def test_diagonal_perfect(self):
        per, miou = M.iou(np.diag([5, 3, 2]))
        np.testing.assert_array_equal(per, [1.0, 1.0, 1.0])
        assert miou == 1.0

    def test_hand_case(self):
        per, miou = M.iou(np.array([[3, 1], [1, 3]]))
        np.testing.assert_allclose(per, [0.6, 0.6], atol=1e-15)
        assert miou == pytest.approx(0.6, abs=1e-15)

    def test_absent_class_excluded(self):
        per, miou = M.iou(np.array([[4, 0, 0], [0, 4, 0], [0, 0, 0]]))
        assert np.isnan(per[2])
        assert miou == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        cm = rng.integers(0, 10, size=(4, 4))
        per, miou = M.iou(cm)
        oper, omiou = oracles.oracle_iou(cm)
        np.testing.assert_allclose(per, oper, atol=1e-12)
        assert miou == pytest.approx(omiou, abs=1e-12)


class TestSimilarityMatrix:
    def test_identical_vectors_all_one(self):
        feats = np.ones((3, 2, 2))
        labels = np.array([[0, 0], [1, 1]])
        sim, valid = M.similarity_matrix([feats], [labels], 2)
        assert valid.all()
        np.testing.assert_allclose(sim, np.ones((2, 2)), atol=1e-12)

    def test_orthogonal_classes(self):
        feats = np.zeros((2, 2, 2))
        feats[0, 0, :] = 1.0   # class 0 pixels along axis 0
        feats[1, 1, :] = 1.0   # class 1 pixels along axis 1
        labels = np.array([[0, 0], [1, 1]])
        sim, valid = M.similarity_matrix([feats], [labels], 2)
        np.testing.assert_allclose(np.diag(sim), [1.0, 1.0], atol=1e-12)
        assert sim[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        feats = rng.uniform(0, 1, size=(4, 4, 4))
        labels = rng.integers(0, 3, size=(4, 4))
        sim, valid = M.similarity_matrix([feats], [labels], 3)
        np.testing.assert_array_equal(sim, sim.T)
        np.testing.assert_array_equal(valid, valid.T)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(7)
        feats_list = [rng.uniform(0, 1, size=(4, 4, 4)) for _ in range(3)]
        labels_list = [rng.integers(0, 3, size=(4, 4)) for _ in range(3)]
        sim, valid = M.similarity_matrix(feats_list, labels_list, 3)
        expected = oracles.oracle_similarity(feats_list, labels_list, 3)
        for j in range(3):
            for k in range(3):
                if np.isnan(expected[j, k]):
                    assert not valid[j, k]
                else:
                    assert sim[j, k] == pytest.approx(expected[j, k],
                                                      abs=1e-12)

    def test_never_copresent_invalid(self):
        feats = np.ones((2, 1, 2))
        labels = np.array([[0, 0]])
        sim, valid = M.similarity_matrix([feats], [labels], 3)
        assert valid[0, 0]
        assert not valid[0, 1] and not valid[1, 2]
        assert np.isnan(sim[0, 2])

    def test_zero_vectors_skipped(self):
        feats = np.zeros((2, 1, 3))
        feats[:, 0, 0] = [1.0, 0.0]
        feats[:, 0, 1] = [1.0, 0.0]
        labels = np.array([[0, 0, 0]])   # third pixel is a zero vector
        sim, valid = M.similarity_matrix([feats], [labels], 1)
        assert sim[0, 0] == pytest.approx(1.0, abs=1e-12)


class TestSparsityScores:
    def test_one_hot_vector(self):
        feats = np.array([0.0, 0.0, 5.0, 0.0]).reshape(4, 1, 1)
        scores, valid = M.sparsity_scores([feats], [np.array([[0]])], 1)
        assert scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_uniform_vector(self):
        feats = np.full((4, 1, 1), 3.0)
        scores, _ = M.sparsity_scores([feats], [np.array([[0]])], 1)
        assert scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_half_sparse(self):
        feats = np.array([0.5, 1.0]).reshape(2, 1, 1)
        scores, _ = M.sparsity_scores([feats], [np.array([[0]])], 1)
        assert scores[0] == pytest.approx(0.5, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        feats = rng.uniform(0, 1, size=(6, 3, 3))
        labels = rng.integers(0, 2, size=(3, 3))
        a, _ = M.sparsity_scores([feats], [labels], 2)
        b, _ = M.sparsity_scores([feats * 7.5], [labels], 2)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(9)
        feats_list = [rng.uniform(0, 1, size=(5, 3, 3)) ** 3 for _ in range(2)]
        labels_list = [rng.integers(0, 3, size=(3, 3)) for _ in range(2)]
        scores, valid = M.sparsity_scores(feats_list, labels_list, 3)
        expected = oracles.oracle_sparsity_scores(feats_list, labels_list, 3)
        for j in range(3):
            if np.isnan(expected[j]):
                assert not valid[j]
            else:
                assert scores[j] == pytest.approx(expected[j], abs=1e-12)

    def test_absent_class_invalid(self):
        feats = np.ones((2, 1, 1))
        scores, valid = M.sparsity_scores([feats], [np.array([[0]])], 2)
        assert not valid[1] and np.isnan(scores[1])


class TestActivationHistogram:
    def test_all_zero_first_bin(self):
        feats = np.zeros((4, 2, 2))
        feats[0] = 1.0  # normalizes to [1,0,0,0] per vector
        counts = M.activation_histogram([feats])
        assert counts[0] == 12 and counts[-1] == 4

    def test_partition(self):
        rng = np.random.default_rng(3)
        feats = rng.uniform(0.01, 1, size=(8, 4, 4))
        counts = M.activation_histogram([feats])
        assert counts.sum() == 8 * 16

    def test_value_one_in_last_bin(self):
        feats = np.full((3, 1, 1), 2.0)
        counts = M.activation_histogram([feats])
        assert counts[-1] == 3

    def test_counting_oracle(self):
        rng = np.random.default_rng(8)
        feats = rng.uniform(0, 1, size=(6, 3, 3))
        counts = M.activation_histogram([feats])
        expected = np.zeros(20, dtype=np.int64)
        for i in range(3):
            for j in range(3):
                vec = feats[:, i, j]
                m = vec.max()
                if m <= 0:
                    continue
                for v in vec / m:
                    expected[min(int(v * 20), 19)] += 1
        np.testing.assert_array_equal(counts, expected)

    def test_difference(self):
        a = np.arange(20)
        b = np.ones(20, dtype=np.int64)
        np.testing.assert_array_equal(M.histogram_difference(a, b),
                                      a - 1)


class TestProject2d:
    def test_planar_data_recovered(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(40, 2))
        pts -= pts.mean(axis=0)
        feats = [pts.T.reshape(2, 40, 1)]
        labels = [np.zeros((40, 1), dtype=np.int64)]
        coords, classes, comps = M.project2d(feats, labels)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_duplicates_coincide(self):
        pts = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
        feats = [pts.T.reshape(3, 4, 1)]
        labels = [np.zeros((4, 1), dtype=np.int64)]
        coords, _, _ = M.project2d(feats, labels)
        np.testing.assert_allclose(coords[0], coords[1], atol=1e-12)

    def test_reconstruction_error_matches_eigentail(self):
        rng = np.random.default_rng(6)
        rows = rng.normal(size=(120, 8))
        feats = [rows.T.reshape(8, 120, 1)]
        labels = [np.zeros((120, 1), dtype=np.int64)]
        coords, _, comps = M.project2d(feats, labels)
        centered = rows - rows.mean(axis=0)
        recon = coords @ comps.T
        err = ((centered - recon) ** 2).sum()
        evals = np.linalg.eigvalsh(centered.T @ centered)
        tail = np.sort(evals)[:-2].sum()
        assert err == pytest.approx(tail, abs=1e-9)

    def test_rank1_second_axis_zero(self):
        rows = np.outer(np.arange(10.0), np.array([1.0, 2.0, 3.0]))
        feats = [rows.T.reshape(3, 10, 1)]
        labels = [np.zeros((10, 1), dtype=np.int64)]
        coords, _, comps = M.project2d(feats, labels)
        np.testing.assert_array_equal(comps[:, 1], np.zeros(3))
        np.testing.assert_array_equal(coords[:, 1], np.zeros(10))

    def test_deterministic_with_subsampling(self):
        rng = np.random.default_rng(10)
        rows = rng.normal(size=(3000, 4))
        feats = [rows.T.reshape(4, 3000, 1)]
        labels = [np.zeros((3000, 1), dtype=np.int64)]
        a = M.project2d(feats, labels, sample_cap=500)
        b = M.project2d(feats, labels, sample_cap=500)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[0].shape == (500, 2)

    def test_too_few_vectors_raises(self):
        feats = [np.ones((3, 1, 1))]
        labels = [np.zeros((1, 1), dtype=np.int64)]
        with pytest.raises(ValueError):
            M.project2d(feats, labels)


class TestCsvWriters:
    def test_iou_csv(self, tmp_path):
        path = tmp_path / "iou.csv"
        M.write_iou_csv(path, [0.5, np.nan], 0.5, ["a", "b"])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "class,iou"
        assert lines[1].startswith("a,0.5")
        assert lines[2] == "b,"
        assert lines[3].startswith("mIoU,0.5")

    def test_similarity_csv_blank_invalid(self, tmp_path):
        path = tmp_path / "sim.csv"
        mat = np.array([[1.0, np.nan], [np.nan, 1.0]])
        valid = np.array([[True, False], [False, True]])
        M.write_similarity_csv(path, mat, valid, ["a", "b"])
        lines = path.read_text().strip().splitlines()
        assert lines[1].split(",")[2] == ""

    def test_histogram_csv(self, tmp_path):
        path = tmp_path / "hist.csv"
        M.write_histogram_csv(path, np.arange(20))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 21
        assert lines[1] == "0.00,0.05,0"
        assert lines[-1] == "0.95,1.00,19"

"""
评估模块测试
测试身份/语义分数、FID、两阶段聚合、报告格式以及语义差导出
"""

import tempfile
import unittest
import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import torch

# 添加src目录到路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from common.error_handler import (
    ConfigError, MissingPair, DuplicatePair, NumericError, ShapeMismatch, SingularCovariance,
)
from core.types import ImageTensor, LatentCode
from core.backends import ToyFaceEmbedder, ToySemanticEncoder, make_toy_backend, decode
from core.evaluation import (
    MetricRecord, GaussianStats, EvaluationPair, aggregate, pooled_mean, id_scores, semantic_score,
    semantic_delta, frechet_distance, fid, fid_from_images, evaluate_pairs,
)
from utils.file_handler import write_delta, read_delta


def image(values, shape=(2, 2, 1)):
    return ImageTensor(torch.tensor(values, dtype=torch.float64).reshape(shape))


def record(target_id, source_id, sem, id_source=0.5, id_target=0.1, sem_blip=None):
    return MetricRecord(target_id, source_id, id_source, id_target, sem, sem_blip)


def plain_cosine(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestScores(unittest.TestCase):
    """身份分数与语义分数测试"""

    def setUp(self):
        self.face = ToyFaceEmbedder(image_shape=(2, 2, 1), flatten=True)
        self.I_s = image([0.9, 0.1, 0.2, 0.4])
        self.I_t = image([0.1, 0.8, 0.7, 0.3])
        self.I_st = image([0.6, 0.5, 0.4, 0.3])

    def test_identity_trivial(self):
        """测试 I_st 等于源或目标时对应分数为 1"""
        id_source, _ = id_scores(self.I_s, self.I_t, self.I_s, self.face)
        _, id_target = id_scores(self.I_s, self.I_t, self.I_t, self.face)
        self.assertAlmostEqual(id_source, 1.0, places=12)
        self.assertAlmostEqual(id_target, 1.0, places=12)

    def test_identity_flatten_oracle(self):
        """测试展平身份嵌入器的分数等于图像的直接余弦"""
        id_source, id_target = id_scores(self.I_s, self.I_t, self.I_st, self.face)
        self.assertAlmostEqual(id_source, plain_cosine(self.I_s.data, self.I_st.data), places=12)
        self.assertAlmostEqual(id_target, plain_cosine(self.I_t.data, self.I_st.data), places=12)

    def test_semantic_score(self):
        """测试语义分数：相同图像为 1，正交嵌入为 0，与手算余弦一致"""
        encoder = ToySemanticEncoder(image_shape=(2, 2, 1), embed_dim=4)
        with torch.no_grad():
            encoder.M.copy_(torch.eye(4, dtype=torch.float64))
        self.assertAlmostEqual(semantic_score(self.I_t, self.I_t, encoder), 1.0, places=12)
        self.assertAlmostEqual(semantic_score(image([1.0, 0, 0, 0]), image([0, 1.0, 0, 0]), encoder), 0.0, places=12)

        crafted = ToySemanticEncoder(seed=3, image_shape=(2, 2, 1), embed_dim=3)
        M = crafted.M.numpy()
        expected = plain_cosine(M @ self.I_t.data.numpy().reshape(-1), M @ self.I_st.data.numpy().reshape(-1))
        self.assertAlmostEqual(semantic_score(self.I_t, self.I_st, crafted), expected, places=12)

    def test_scores_bounded(self):
        """测试分数落在 [-1, 1]"""
        bundle = make_toy_backend()
        g = bundle.generator
        generator = torch.Generator().manual_seed(0)
        images = [decode(g, LatentCode(torch.randn(*g.latent_shape, generator=generator, dtype=torch.float64),
                                       g.space_id)) for _ in range(3)]
        for value in id_scores(*images, bundle.face) + (semantic_score(images[1], images[2], bundle.encoder),):
            self.assertGreaterEqual(value, -1.0)
            self.assertLessEqual(value, 1.0)


class TestSemanticDelta(unittest.TestCase):
    """语义差测试"""

    def setUp(self):
        self.encoder = ToySemanticEncoder(seed=5, image_shape=(2, 2, 1), embed_dim=3)
        self.I_s = image([0.9, 0.1, 0.2, 0.4])
        self.I_st = image([0.6, 0.5, 0.4, 0.3])

    def test_same_image_zero_delta(self):
        """测试 I_st = I_s 时语义差为零"""
        delta = semantic_delta(self.I_s, self.I_s, self.encoder)
        self.assertTrue(bool((delta.data == 0).all()))

    def test_linear_delta(self):
        """测试线性编码器上 d = M·flatten(I_st - I_s)"""
        delta = semantic_delta(self.I_s, self.I_st, self.encoder)
        expected = self.encoder.M @ (self.I_st.data - self.I_s.data).reshape(-1)
        self.assertTrue(torch.allclose(delta.data, expected, rtol=0.0, atol=1e-12))
        self.assertEqual(delta.encoder_id, self.encoder.encoder_id)

    def test_shape_mismatch(self):
        """测试图像形状不一致"""
        with self.assertRaises(ShapeMismatch):
            semantic_delta(self.I_s, ImageTensor(torch.rand(3, 3, 1, dtype=torch.float64)), self.encoder)

    def test_export_round_trip(self):
        """测试语义差文件读写逐位一致"""
        delta = semantic_delta(self.I_s, self.I_st, self.encoder)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "t0" / "s0.npy"
            write_delta(path, delta.data, {'encoder_id': delta.encoder_id})
            array, meta = read_delta(path)
        self.assertTrue(np.array_equal(array, delta.data.numpy()))
        self.assertEqual(meta['encoder_id'], delta.encoder_id)


class TestFid(unittest.TestCase):
    """FID 测试"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.X = rng.normal(size=(200, 8))
        self.Y = rng.normal(loc=0.5, scale=1.5, size=(150, 8))

    def test_identical_sets(self):
        """测试 fid(X, X) 接近 0"""
        self.assertLessEqual(fid(self.X, self.X), 1e-6)

    def test_symmetry_and_non_negative(self):
        """测试对称性与非负性"""
        forward = fid(self.X, self.Y)
        backward = fid(self.Y, self.X)
        self.assertGreater(forward, 0.0)
        self.assertAlmostEqual(forward, backward, delta=1e-8)

    def test_closed_form(self):
        """测试与可交换协方差高斯之间的闭式 Fréchet 距离一致"""
        rng = np.random.default_rng(1)
        Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        var_a = np.linspace(0.5, 2.0, 8)
        var_b = np.linspace(3.0, 0.2, 8)
        mean_a = np.arange(8, dtype=np.float64) / 4.0
        mean_b = np.ones(8)
        sigma_a = Q @ np.diag(var_a) @ Q.T
        sigma_b = Q @ np.diag(var_b) @ Q.T
        stats_a = GaussianStats(mean_a, (sigma_a + sigma_a.T) / 2.0)
        stats_b = GaussianStats(mean_b, (sigma_b + sigma_b.T) / 2.0)
        expected = float(((mean_a - mean_b) ** 2).sum() + ((np.sqrt(var_a) - np.sqrt(var_b)) ** 2).sum())
        self.assertAlmostEqual(frechet_distance(stats_a, stats_b), expected, delta=1e-3)

    def test_too_few_samples(self):
        """测试样本数少于 F + 1"""
        with self.assertRaises(ConfigError):
            GaussianStats.from_features(self.X[:8])

    def test_invalid_stats(self):
        """测试非对称协方差与维度不符"""
        with self.assertRaises(NumericError):
            GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with self.assertRaises(ShapeMismatch):
            GaussianStats(np.zeros(3), np.eye(2))
        with self.assertRaises(ShapeMismatch):
            frechet_distance(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))

    def test_jitter_retry(self):
        """测试矩阵平方根失败后加抖动重试，再次失败抛出 SingularCovariance"""
        stats = GaussianStats(np.zeros(2), np.eye(2))
        with patch('core.evaluation._trace_sqrt_product', side_effect=[np.linalg.LinAlgError("x"), 2.0]) as mocked:
            self.assertAlmostEqual(frechet_distance(stats, stats), 0.0, places=12)
            self.assertEqual(mocked.call_count, 2)
        with patch('core.evaluation._trace_sqrt_product', side_effect=np.linalg.LinAlgError("x")):
            with self.assertRaises(SingularCovariance):
                frechet_distance(stats, stats)

    def test_from_images(self):
        """测试由图像提取特征后计算 FID"""
        bundle = make_toy_backend()
        g = bundle.generator
        generator = torch.Generator().manual_seed(2)
        images = [decode(g, LatentCode(torch.randn(*g.latent_shape, generator=generator, dtype=torch.float64),
                                       g.space_id)) for _ in range(12)]
        features = bundle.features(torch.stack([img.data for img in images]))
        self.assertLessEqual(fid_from_images(images, features, bundle.features), 1e-6)


class TestAggregate(unittest.TestCase):
    """两阶段聚合测试"""

    def setUp(self):
        self.records = [
            record("t0", "s0", 0.2), record("t0", "s1", 0.4),
            record("t1", "s0", 0.6), record("t1", "s1", 0.8),
        ]

    def test_hand_example(self):
        """测试 {{0.2,0.4},{0.6,0.8}} 的两阶段均值为 0.5"""
        report = aggregate(self.records)
        self.assertAlmostEqual(report.per_target["t0"]["sem_clip"], 0.3, places=12)
        self.assertAlmostEqual(report.per_target["t1"]["sem_clip"], 0.7, places=12)
        self.assertAlmostEqual(report.mean("sem_clip"), 0.5, places=12)
        self.assertAlmostEqual(report.std("sem_clip"), 0.2, places=12)
        self.assertEqual(report.target_ids, ["t0", "t1"])

    def test_single_target(self):
        """测试单个目标时总体均值等于其源均值、标准差为 0"""
        report = aggregate(self.records[:2])
        self.assertAlmostEqual(report.mean("sem_clip"), 0.3, places=12)
        self.assertEqual(report.std("sem_clip"), 0.0)

    def test_order_independent(self):
        """测试记录顺序不影响报告"""
        forward = aggregate(self.records)
        backward = aggregate(list(reversed(self.records)))
        self.assertEqual(forward.per_target, backward.per_target)
        self.assertEqual(forward.overall, backward.overall)
        self.assertEqual(forward.records, backward.records)

    def test_unbalanced_differs_from_pooled(self):
        """测试源数量不均衡时两阶段均值不同于直接合并的均值"""
        records = [record("a", f"s{i}", 0.0) for i in range(3)] + [record("b", "s0", 1.0)]
        report = aggregate(records)
        self.assertAlmostEqual(report.mean("sem_clip"), 0.5, places=12)
        self.assertAlmostEqual(pooled_mean(records, "sem_clip"), 0.25, places=12)

    def test_success_rate(self):
        """测试身份保持成功率"""
        records = [record("t0", "s0", 0.5, id_source=0.9, id_target=0.1),
                   record("t0", "s1", 0.5, id_source=0.1, id_target=0.9)]
        self.assertAlmostEqual(aggregate(records).success_rate, 0.5, places=12)

    def test_pair_errors(self):
        """测试缺失、重复和未知目标的 FID"""
        with self.assertRaises(DuplicatePair):
            aggregate(self.records + [record("t0", "s0", 0.1)])
        with self.assertRaises(MissingPair):
            aggregate(self.records, expected_pairs=[("t0", "s0"), ("t2", "s0")])
        with self.assertRaises(MissingPair):
            aggregate([])
        with self.assertRaises(MissingPair):
            aggregate(self.records, fids={"t9": 1.0})

    def test_mixed_second_encoder(self):
        """测试部分记录缺少 sem_blip"""
        records = [record("t0", "s0", 0.2, sem_blip=0.3), record("t0", "s1", 0.4)]
        with self.assertRaises(ConfigError):
            aggregate(records)

    def test_record_bounds(self):
        """测试余弦类指标超出 [-1, 1]"""
        with self.assertRaises(NumericError):
            record("t0", "s0", 1.5)
        with self.assertRaises(NumericError):
            record("t0", "s0", float('nan'))


class TestReport(unittest.TestCase):
    """评估报告格式测试"""

    def setUp(self):
        records = [
            record("t0", "s0", 0.2, sem_blip=0.1), record("t0", "s1", 0.4, sem_blip=0.3),
            record("t1", "s0", 0.6, sem_blip=0.5), record("t1", "s1", 0.8, sem_blip=0.7),
        ]
        self.report = aggregate(records, fids={"t0": 10.0, "t1": 20.0}, config_digest="abc")

    def test_percent_scaling(self):
        """测试 ×100 显示时只缩放余弦类指标"""
        plain = self.report.to_dict()
        scaled = self.report.to_dict(percent=True)
        self.assertAlmostEqual(scaled['overall']['sem_clip']['mean'], 50.0, places=9)
        self.assertAlmostEqual(plain['overall']['sem_clip']['mean'], 0.5, places=12)
        self.assertEqual(scaled['fid'], {"t0": 10.0, "t1": 20.0})
        self.assertAlmostEqual(scaled['fid_summary']['mean'], 15.0, places=12)
        self.assertAlmostEqual(scaled['fid_summary']['std'], 5.0, places=12)
        self.assertEqual(scaled['config_digest'], "abc")

    def test_csv_rows(self):
        """测试 CSV 行的列与取值"""
        rows = self.report.csv_rows(percent=True)
        self.assertEqual(list(rows[0].keys()),
                         ["target_id", "source_id", "id_source", "id_target", "sem_clip", "sem_blip"])
        self.assertEqual(rows[0]['target_id'], "t0")
        self.assertAlmostEqual(rows[0]['sem_clip'], 20.0, places=9)

    def test_summary_and_tag(self):
        """测试摘要行与变体标签"""
        line = self.report.summary_line()
        self.assertIn("sem_clip=0.500", line)
        self.assertIn("fid=15.000", line)
        tagged = self.report.tagged("no_l2")
        self.assertEqual(tagged.variant, "no_l2")
        self.assertIsNone(self.report.variant)
        self.assertEqual(tagged.overall, self.report.overall)


class TestEvaluatePairs(unittest.TestCase):
    """逐对评估测试"""

    def test_concurrent_matches_serial(self):
        """测试并发评估与串行评估结果一致且有序"""
        bundle = make_toy_backend()
        g = bundle.generator
        generator = torch.Generator().manual_seed(4)

        def sample():
            return decode(g, LatentCode(torch.randn(*g.latent_shape, generator=generator, dtype=torch.float64),
                                        g.space_id))

        pairs = [EvaluationPair(f"t{t}", f"s{s}", sample(), sample(), sample()) for t in (1, 0) for s in (2, 0, 1)]
        serial = evaluate_pairs(pairs, bundle.face, bundle.encoder, jobs=1)
        concurrent = evaluate_pairs(pairs, bundle.face, bundle.encoder, jobs=4)
        self.assertEqual(serial, concurrent)
        self.assertEqual([r.key for r in serial], sorted(r.key for r in serial))
        self.assertTrue(all(r.sem_blip is None for r in serial))

        with_blip = evaluate_pairs(pairs, bundle.face, bundle.encoder, bundle.second_encoder, jobs=1)
        self.assertTrue(all(r.sem_blip is not None for r in with_blip))


if __name__ == '__main__':
    unittest.main()

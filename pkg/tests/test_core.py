"""
核心类型测试模块
测试隐编码、本质向量、图像张量等领域类型以及余弦运算
"""

import math
import unittest
import sys
from pathlib import Path

import torch

# 添加src目录到路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from common.constants import METHOD_OPTIMIZER
from common.error_handler import (
    ShapeMismatch, SpaceMismatch, DimMismatch, EmptyBatch, ZeroVector, ConfigError, NumericError,
)
from core.types import (
    LatentCode, EssenceVector, Provenance, SemanticEmbedding, ImageTensor, SourceBatch, tensor_digest,
    stack_embeddings,
)
from core.geometry import cosine_similarity, cosine_distance, cosine_similarity_rows


def make_provenance():
    return Provenance(METHOD_OPTIMIZER, "t" * 64, "c" * 64)


class TestCosine(unittest.TestCase):
    """余弦运算测试"""

    def test_identical_direction(self):
        """测试同向向量相似度为 1"""
        self.assertAlmostEqual(float(cosine_similarity([1.0, 0.0], [1.0, 0.0])), 1.0, places=12)

    def test_orthogonal(self):
        """测试正交向量相似度为 0"""
        self.assertAlmostEqual(float(cosine_similarity([1.0, 0.0], [0.0, 1.0])), 0.0, places=12)

    def test_hand_computed_value(self):
        """测试手算值 ([1,2,3], [4,5,6])"""
        expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
        self.assertAlmostEqual(float(cosine_similarity([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])), expected, places=12)
        self.assertAlmostEqual(expected, 0.9746318, places=6)
        self.assertAlmostEqual(float(cosine_distance([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])), 1.0 - expected, places=12)
        self.assertAlmostEqual(1.0 - expected, 0.0253681, places=6)

    def test_distance_bounds(self):
        """测试余弦距离的边界值"""
        v = torch.tensor([0.3, -1.2, 2.5], dtype=torch.float64)
        self.assertAlmostEqual(float(cosine_distance(v, v)), 0.0, places=12)
        self.assertAlmostEqual(float(cosine_distance(v, -v)), 2.0, places=12)

        generator = torch.Generator().manual_seed(3)
        for _ in range(50):
            a = torch.randn(7, generator=generator, dtype=torch.float64)
            b = torch.randn(7, generator=generator, dtype=torch.float64)
            d = float(cosine_distance(a, b))
            self.assertGreaterEqual(d, 0.0)
            self.assertLessEqual(d, 2.0)

    def test_scale_invariance(self):
        """测试正数缩放不改变相似度"""
        generator = torch.Generator().manual_seed(11)
        for _ in range(20):
            a = torch.randn(5, generator=generator, dtype=torch.float64)
            b = torch.randn(5, generator=generator, dtype=torch.float64)
            base = float(cosine_similarity(a, b))
            scaled = float(cosine_similarity(3.7 * a, 0.02 * b))
            self.assertAlmostEqual(base, scaled, delta=1e-9)

    def test_zero_vector_raises(self):
        """测试零向量抛出 ZeroVector"""
        with self.assertRaises(ZeroVector):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])
        with self.assertRaises(ZeroVector):
            cosine_similarity([1.0, 0.0], [1e-14, 0.0])

    def test_dim_mismatch(self):
        """测试维度不一致"""
        with self.assertRaises(DimMismatch):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_rows(self):
        """测试逐行余弦"""
        a = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        b = torch.tensor([[0.0, 1.0], [2.0, 2.0]], dtype=torch.float64)
        result = cosine_similarity_rows(a, b)
        self.assertEqual(tuple(result.shape), (2,))
        self.assertAlmostEqual(float(result[0]), 0.0, places=12)
        self.assertAlmostEqual(float(result[1]), 1.0, places=12)

    def test_gradient_flows(self):
        """测试余弦运算保留梯度"""
        a = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        cosine_distance(a, torch.tensor([2.0, -1.0], dtype=torch.float64)).backward()
        self.assertIsNotNone(a.grad)
        self.assertTrue(bool(torch.isfinite(a.grad).all()))


class TestLatentAndEssence(unittest.TestCase):
    """隐编码与本质向量测试"""

    def test_latent_shape_validation(self):
        """测试隐编码形状检查"""
        LatentCode(torch.zeros(3, 8, dtype=torch.float64), "space")
        with self.assertRaises(ShapeMismatch):
            LatentCode(torch.zeros(24, dtype=torch.float64), "space")
        with self.assertRaises(ConfigError):
            LatentCode(torch.zeros(3, 8, dtype=torch.float64), "")

    def test_non_finite_rejected(self):
        """测试非有限值被拒绝"""
        data = torch.zeros(2, 2, dtype=torch.float64)
        data[0, 0] = float('nan')
        with self.assertRaises(NumericError):
            LatentCode(data, "space")

    def test_addition_closure(self):
        """测试隐编码加本质向量仍是同一空间的隐编码"""
        z = LatentCode(torch.ones(3, 8, dtype=torch.float64), "space")
        b = EssenceVector(torch.full((3, 8), 0.5, dtype=torch.float64), "space", make_provenance())
        result = z + b
        self.assertIsInstance(result, LatentCode)
        self.assertEqual(result.space_id, "space")
        self.assertTrue(torch.equal(result.data, torch.full((3, 8), 1.5, dtype=torch.float64)))

    def test_addition_space_mismatch(self):
        """测试不同隐空间相加报错"""
        z = LatentCode(torch.ones(3, 8, dtype=torch.float64), "space-a")
        b = EssenceVector(torch.ones(3, 8, dtype=torch.float64), "space-b", make_provenance())
        with self.assertRaises(SpaceMismatch):
            _ = z + b

    def test_addition_shape_mismatch(self):
        """测试形状不同相加报错"""
        z = LatentCode(torch.ones(3, 8, dtype=torch.float64), "space")
        b = EssenceVector(torch.ones(2, 8, dtype=torch.float64), "space", make_provenance())
        with self.assertRaises(ShapeMismatch):
            _ = z + b

    def test_negation_and_norm(self):
        """测试取负与范数"""
        b = EssenceVector(torch.tensor([[3.0, 4.0]], dtype=torch.float64), "space", make_provenance())
        self.assertAlmostEqual(b.norm(), 5.0, places=12)
        self.assertTrue(torch.equal((-b).data, -b.data))
        self.assertEqual((-b).space_id, "space")

    def test_provenance_validation(self):
        """测试来源信息校验"""
        with self.assertRaises(ConfigError):
            Provenance("magic", "t", "c")
        with self.assertRaises(ConfigError):
            Provenance(METHOD_OPTIMIZER, "", "c")
        provenance = make_provenance()
        self.assertEqual(Provenance.from_dict(provenance.to_dict()), provenance)

    def test_tensor_digest_stable(self):
        """测试张量摘要只取决于内容"""
        a = torch.arange(6, dtype=torch.float64).reshape(2, 3)
        self.assertEqual(tensor_digest(a), tensor_digest(a.clone()))
        self.assertNotEqual(tensor_digest(a), tensor_digest(a + 1e-9))
        self.assertNotEqual(tensor_digest(a), tensor_digest(a.reshape(3, 2)))


class TestEmbeddings(unittest.TestCase):
    """语义嵌入测试"""

    def test_difference(self):
        """测试嵌入相减得到语义差"""
        a = SemanticEmbedding(torch.tensor([1.0, 2.0], dtype=torch.float64), "enc")
        b = SemanticEmbedding(torch.tensor([0.5, 0.5], dtype=torch.float64), "enc")
        delta = a - b
        self.assertEqual(delta.encoder_id, "enc")
        self.assertTrue(torch.equal(delta.data, torch.tensor([0.5, 1.5], dtype=torch.float64)))

    def test_difference_checks(self):
        """测试不同编码器或维度的嵌入不能相减"""
        a = SemanticEmbedding(torch.ones(2, dtype=torch.float64), "enc-a")
        b = SemanticEmbedding(torch.ones(2, dtype=torch.float64), "enc-b")
        c = SemanticEmbedding(torch.ones(3, dtype=torch.float64), "enc-a")
        with self.assertRaises(SpaceMismatch):
            _ = a - b
        with self.assertRaises(DimMismatch):
            _ = a - c

    def test_stack(self):
        """测试嵌入堆叠"""
        embs = [SemanticEmbedding(torch.ones(4, dtype=torch.float64) * i, "enc") for i in range(1, 4)]
        self.assertEqual(tuple(stack_embeddings(embs).shape), (3, 4))
        with self.assertRaises(EmptyBatch):
            stack_embeddings([])
        with self.assertRaises(SpaceMismatch):
            stack_embeddings(embs, encoder_id="other")


class TestImageTensor(unittest.TestCase):
    """图像张量测试"""

    def test_channels(self):
        """测试通道数与通道约定"""
        self.assertEqual(ImageTensor(torch.zeros(4, 4, 1)).color_order, 'L')
        self.assertEqual(ImageTensor(torch.zeros(4, 4, 3)).color_order, 'RGB')
        with self.assertRaises(ShapeMismatch):
            ImageTensor(torch.zeros(4, 4, 2))
        with self.assertRaises(ShapeMismatch):
            ImageTensor(torch.zeros(4, 4))

    def test_value_range(self):
        """测试取值区间检查"""
        with self.assertRaises(ShapeMismatch):
            ImageTensor(torch.full((2, 2, 1), 1.5))
        ImageTensor(torch.full((2, 2, 1), 1.5), value_range=(-math.inf, math.inf))
        with self.assertRaises(ConfigError):
            ImageTensor(torch.zeros(2, 2, 1), value_range=(1.0, 0.0))


class TestSourceBatch(unittest.TestCase):
    """源批次测试"""

    def test_empty_batch(self):
        """测试空批次"""
        with self.assertRaises(EmptyBatch):
            SourceBatch(())

    def test_mixed_spaces(self):
        """测试混合隐空间"""
        with self.assertRaises(SpaceMismatch):
            SourceBatch((LatentCode(torch.zeros(2, 2), "a"), LatentCode(torch.zeros(2, 2), "b")))

    def test_stack_and_permute(self):
        """测试堆叠与重排"""
        latents = tuple(LatentCode(torch.full((2, 3), float(i)), "s") for i in range(3))
        batch = SourceBatch(latents)
        self.assertEqual(batch.size, 3)
        self.assertEqual(tuple(batch.stacked().shape), (3, 2, 3))
        permuted = batch.permuted([2, 0, 1])
        self.assertTrue(torch.equal(permuted.latents[0].data, latents[2].data))
        rebuilt = SourceBatch.from_tensor(batch.stacked(), "s")
        self.assertTrue(torch.equal(rebuilt.stacked(), batch.stacked()))


if __name__ == '__main__':
    unittest.main()

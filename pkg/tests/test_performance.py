"""
性能测试模块
在玩具隐藏目标任务上测试优化效果、编码器与优化器的对比、消融方向性以及运行耗时
这些测试使用默认超参数（1000 次迭代），运行时间比单元测试长
"""

import time
import unittest
import sys
from pathlib import Path

import numpy as np

# 添加src目录到路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from core.essence_optimizer import sample_source_batch, optimize_essence
from core.encoder_trainer import finetune_essence_encoder
from core.experiments import make_toy_fixture, run_pipeline, ablation_run, baseline_report, sensitivity_run
from core.losses import EssenceObjective
from utils.config import OptimizerConfig, EncoderTrainConfig


class TestOptimizerSuccess(unittest.TestCase):
    """默认超参数下的优化效果测试"""

    @classmethod
    def setUpClass(cls):
        cls.fixture = make_toy_fixture(n_targets=10, n_held_out=2, reference_size=0)
        cls.cfg = OptimizerConfig()
        cls.sources = sample_source_batch(cls.fixture.pool_list(), cls.cfg.batch_size, cls.cfg.seed)
        bundle = cls.fixture.bundle
        cls.traces = {}
        cls.elapsed = {}
        for target_id, target in sorted(cls.fixture.targets.items()):
            started = time.perf_counter()
            _, trace = optimize_essence(target, cls.sources, bundle.generator, bundle.encoder, bundle.inverter,
                                        cls.cfg, show_progress=False)
            cls.elapsed[target_id] = time.perf_counter() - started
            cls.traces[target_id] = trace

    def test_similarity_reduced(self):
        """测试至少 9/10 个目标相似度损失下降 90% 以上且一致性损失不超过 0.05"""
        successes = 0
        for trace in self.traces.values():
            initial = trace.steps[0].similarity
            final = trace.final
            if final.similarity <= 0.1 * initial and final.consistency <= 0.05:
                successes += 1
        self.assertGreaterEqual(successes, 9)

    def test_iteration_budget(self):
        """测试每个目标恰好运行 1000 次迭代"""
        for trace in self.traces.values():
            self.assertEqual(len(trace), 1000)
            self.assertFalse(trace.stopped_early)

    def test_runtime(self):
        """测试玩具任务的优化耗时"""
        self.assertLess(sum(self.elapsed.values()), 300.0)


class TestEncoderVersusOptimizer(unittest.TestCase):
    """编码器与逐目标优化的对比测试"""

    @classmethod
    def setUpClass(cls):
        cls.fixture = make_toy_fixture(n_targets=10, n_held_out=2, n_encoder_targets=32, reference_size=0)
        bundle = cls.fixture.bundle
        cls.encoder = finetune_essence_encoder(
            bundle.trainable_inverter(), cls.fixture.encoder_targets, cls.fixture.pool_list(),
            bundle.generator, bundle.encoder,
            EncoderTrainConfig(learning_rate=1e-3, iterations=600, targets_per_step=4, batch_size=4),
            show_progress=False,
        )
        cls.cfg = OptimizerConfig()
        cls.sources = sample_source_batch(cls.fixture.pool_list(), cls.cfg.batch_size, cls.cfg.seed)

    def test_optimizer_reaches_lower_similarity(self):
        """测试在同一源批次上，优化器最终的相似度损失不高于编码器（至少 80% 的目标）"""
        bundle = self.fixture.bundle
        wins = 0
        for target_id, target in sorted(self.fixture.targets.items()):
            objective = EssenceObjective(target, self.sources, bundle.generator, bundle.encoder, self.cfg.weights)
            _, trace = optimize_essence(target, self.sources, bundle.generator, bundle.encoder,
                                        bundle.inverter, self.cfg, show_progress=False)
            encoded = float(objective(self.encoder.extract(target).data).similarity)
            if trace.final.similarity <= encoded:
                wins += 1
        self.assertGreaterEqual(wins, 8)

    def test_extract_faster_than_optimize(self):
        """测试单次前向提取比 1000 次迭代的优化快"""
        bundle = self.fixture.bundle
        target = self.fixture.targets["t000"]

        started = time.perf_counter()
        self.encoder.extract(target)
        extract_time = time.perf_counter() - started

        started = time.perf_counter()
        optimize_essence(target, self.sources, bundle.generator, bundle.encoder, bundle.inverter, self.cfg,
                         show_progress=False)
        optimize_time = time.perf_counter() - started
        self.assertLess(extract_time, optimize_time)


class TestAblationDirection(unittest.TestCase):
    """消融变体方向性测试"""

    @classmethod
    def setUpClass(cls):
        cls.fixture = make_toy_fixture(n_targets=10, n_held_out=6, reference_size=0)
        cls.full = ablation_run("full", cls.fixture)
        cls.baseline = baseline_report(cls.fixture)

    def test_no_similarity_matches_baseline(self):
        """测试去掉相似度项后逐目标语义分数与 b = 0 基线在容差内一致"""
        result = ablation_run("no_similarity", self.fixture)
        ablated, base = result.report.per_target, self.baseline.per_target
        differences = np.array([ablated[t]["sem_clip"] - base[t]["sem_clip"] for t in sorted(self.fixture.targets)])
        self.assertLessEqual(float(np.max(np.abs(differences))), 0.02)
        self.assertLessEqual(abs(float(np.mean(differences))), 0.01)
        # 完整目标函数则明显偏离基线
        full_shift = abs(self.full.report.mean("sem_clip") - self.baseline.mean("sem_clip"))
        self.assertGreater(full_shift, 0.02)

    def test_no_l2_grows_essence(self):
        """测试去掉 L2 项后每个目标的 ‖b*‖ 都更大"""
        result = ablation_run("no_l2", self.fixture)
        for target_id in self.fixture.targets:
            self.assertGreater(result.essences[target_id].norm(), self.full.essences[target_id].norm())

    def test_no_consistency_hurts_held_out_consistency(self):
        """测试非线性生成器上去掉一致性项后多数目标的留出源一致性变差"""
        fixture = make_toy_fixture(profile="toy-warped", n_targets=10, n_held_out=6, reference_size=0)
        full = ablation_run("full", fixture)
        ablated = ablation_run("no_consistency", fixture)
        worse = sum(
            1 for target_id in fixture.targets
            if ablated.report.extra[target_id]['held_out_consistency']
            > full.report.extra[target_id]['held_out_consistency']
        )
        self.assertGreater(worse, len(fixture.targets) // 2)


class TestSensitivityDirection(unittest.TestCase):
    """源批次大小敏感性测试"""

    def test_larger_batch_does_not_hurt(self):
        """测试 N = 8 时多数目标的语义分数不低于 N = 2，合并均值也不低"""
        fixture = make_toy_fixture(n_targets=10, n_held_out=6, reference_size=0)
        reports = sensitivity_run([2, 8], fixture)
        small, large = reports[2].per_target, reports[8].per_target
        holds = [large[t]["sem_clip"] >= small[t]["sem_clip"] for t in fixture.targets]
        self.assertGreater(int(np.sum(holds)), len(holds) // 2)
        self.assertGreaterEqual(reports[8].mean("sem_clip"), reports[2].mean("sem_clip"))


class TestPipelineRuntime(unittest.TestCase):
    """流水线耗时测试"""

    def test_pipeline_runtime(self):
        """测试默认夹具上完整的迁移 + 评估流水线在限定时间内完成"""
        fixture = make_toy_fixture()
        started = time.perf_counter()
        result = run_pipeline(fixture, show_progress=False)
        elapsed = time.perf_counter() - started
        self.assertEqual(len(result.report.records), len(fixture.targets) * len(fixture.held_out))
        self.assertLess(elapsed, 300.0)


if __name__ == '__main__':
    unittest.main()

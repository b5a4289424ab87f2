"""高斯线性代数核心测试"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import math
import unittest

import numpy as np

from errors import DomainError, UnphysicalStateError
from gaussian_core import (GaussianEnsemble, SampleBatch, ShotNoise, apply_linear, beamsplitter,
                           beamsplitter_matrix, chunk_bounds, condition_on, derive_rng,
                           diagonal_ensemble, empirical_conditional_variance, empirical_ensemble,
                           epr_ensemble, gaussian_mutual_information, n0_value, sample,
                           symmetric_factor, vacuum_ensemble)

EVE_LABELS = ("Q_E2", "P_E2", "Q_E", "P_E")


def cloned_ensemble(v, w, t, n0=1.0):
    """Alice 的 EPR(V) 与 Eve 的 EPR(W) 在透过率 t 的分束器上混合"""
    e = epr_ensemble(v, n0).direct_sum(epr_ensemble(w, n0, labels=EVE_LABELS))
    e = beamsplitter(e, "Q", "Q_E", t)
    return beamsplitter(e, "P", "P_E", t)


class TestGaussianEnsemble(unittest.TestCase):
    """协方差记账"""

    def test_vacuum_epr(self):
        """V=1 的 EPR 态就是两个真空"""
        e = epr_ensemble(1.0)
        np.testing.assert_allclose(e.cov, np.eye(4), atol=1e-15)

    def test_epr_correlations(self):
        """⟨Q'Q⟩ = +√99，⟨P'P⟩ = −√99"""
        e = epr_ensemble(10.0)
        self.assertAlmostEqual(e.covariance("Q'", "Q"), math.sqrt(99), places=12)
        self.assertAlmostEqual(e.covariance("P'", "P"), -math.sqrt(99), places=12)
        self.assertEqual(e.covariance("Q'", "P"), 0.0)

    def test_reject_v_below_one(self):
        with self.assertRaises(DomainError):
            epr_ensemble(0.5)

    def test_reject_not_psd(self):
        with self.assertRaises(UnphysicalStateError):
            GaussianEnsemble(("a", "b"), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_reject_duplicate_labels(self):
        with self.assertRaises(DomainError):
            GaussianEnsemble(("a", "a"), np.zeros(2), np.eye(2))

    def test_n0_scaling(self):
        """换 n0 时所有方差按比例缩放"""
        e = epr_ensemble(10.0, n0=2.5)
        np.testing.assert_allclose(e.cov, epr_ensemble(10.0).scaled(2.5).cov)
        self.assertEqual(n0_value(ShotNoise(3.0)), 3.0)
        with self.assertRaises(DomainError):
            ShotNoise(0.0)

    def test_direct_sum_label_clash(self):
        with self.assertRaises(DomainError):
            vacuum_ensemble(("Q", "P")).direct_sum(vacuum_ensemble(("Q", "X")))

    def test_dict_roundtrip(self):
        e = epr_ensemble(4.0)
        restored = GaussianEnsemble.from_dict(e.to_dict())
        self.assertEqual(restored.labels, e.labels)
        np.testing.assert_array_equal(restored.cov, e.cov)


class TestBeamsplitter(unittest.TestCase):
    """分束器"""

    def test_identity_at_full_transmission(self):
        e = epr_ensemble(10.0)
        out = beamsplitter(e, "Q", "Q'", 1.0)
        np.testing.assert_allclose(out.cov, e.cov, atol=1e-12)

    def test_vacuum_invariance(self):
        e = vacuum_ensemble(("a", "b"))
        out = beamsplitter(e, "a", "b", 0.5)
        np.testing.assert_allclose(out.cov, np.eye(2), atol=1e-15)

    def test_mixing_with_vacuum(self):
        """(10 n0, 真空) 经 50:50 → 每个输出 5.5 n0"""
        e = diagonal_ensemble(("a", "b"), (10.0, 1.0))
        out = beamsplitter(e, "a", "b", 0.5)
        self.assertAlmostEqual(out.variance("a"), 5.5, places=12)
        self.assertAlmostEqual(out.variance("b"), 5.5, places=12)

    def test_reject_bad_transmission(self):
        with self.assertRaises(DomainError):
            beamsplitter(vacuum_ensemble(("a", "b")), "a", "b", 1.5)
        with self.assertRaises(DomainError):
            beamsplitter(vacuum_ensemble(("a", "b")), "a", "a", 0.5)

    def test_inverse_rotation_restores_covariance(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            v, w, t = rng.uniform(1.0, 50.0), rng.uniform(1.0, 50.0), rng.uniform(0.0, 1.0)
            before = epr_ensemble(v).direct_sum(epr_ensemble(w, labels=EVE_LABELS))
            mixed = cloned_ensemble(v, w, t)
            inverse = beamsplitter_matrix(t).T
            restored = apply_linear(apply_linear(mixed, ("Q", "Q_E"), inverse), ("P", "P_E"), inverse)
            np.testing.assert_allclose(restored.cov, before.cov, rtol=0, atol=1e-12)

    def test_preserves_symplectic_form(self):
        """(Q1, Q2, P1, P2) 顺序下 S·Ω·Sᵀ = Ω"""
        omega = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])
        for t in np.linspace(0.0, 1.0, 11):
            m = beamsplitter_matrix(float(t))
            s = np.block([[m, np.zeros((2, 2))], [np.zeros((2, 2)), m]])
            np.testing.assert_allclose(s @ omega @ s.T, omega, rtol=0, atol=1e-12)

    def test_heisenberg_bound_after_mixing(self):
        """Eve 推断 Q 与 Alice 推断 P 的条件方差之积不小于 n0²"""
        rng = np.random.default_rng(42)
        for _ in range(50):
            v, w = rng.uniform(1.0, 50.0), rng.uniform(1.0, 50.0)
            t, n0 = rng.uniform(0.0, 1.0), rng.uniform(0.5, 2.0)
            e = cloned_ensemble(v, w, t, n0)
            floor = n0 * n0 * (1.0 - 1e-9)
            eve_q = condition_on(e, "Q", ["Q_E", "Q_E2"]).value
            eve_p = condition_on(e, "P", ["P_E", "P_E2"]).value
            alice_q = condition_on(e, "Q", ["Q'"]).value
            alice_p = condition_on(e, "P", ["P'"]).value
            with self.subTest(v=v, w=w, t=t, n0=n0):
                self.assertGreaterEqual(eve_q * alice_p, floor)
                self.assertGreaterEqual(alice_q * eve_p, floor)
                self.assertGreaterEqual(eve_q * e.variance("P"), floor)


class TestConditioning(unittest.TestCase):
    """条件方差"""

    def test_epr_conditional(self):
        """EPR(V=10)：Q 在 Q' 条件下为 n0/V"""
        e = epr_ensemble(10.0)
        result = condition_on(e, "Q", ["Q'"])
        self.assertAlmostEqual(result.value, 0.1, places=12)
        self.assertFalse(result.degenerate)

    def test_uncorrelated(self):
        e = epr_ensemble(10.0)
        self.assertAlmostEqual(condition_on(e, "Q", ["P'"]).value, 10.0, places=12)
        self.assertAlmostEqual(condition_on(e, "Q", []).value, 10.0, places=12)

    def test_degenerate_uses_pseudo_inverse(self):
        """条件集合奇异时标记 degenerate，结果仍正确"""
        e = epr_ensemble(10.0)
        e = e.direct_sum(diagonal_ensemble(("zero",), (0.0,)))
        with self.assertLogs('gaussian_core', level='WARNING'):
            result = condition_on(e, "Q", ["Q'", "zero"])
        self.assertTrue(result.degenerate)
        self.assertAlmostEqual(result.value, 0.1, places=9)

    def test_target_in_given(self):
        with self.assertRaises(DomainError):
            condition_on(epr_ensemble(2.0), "Q", ["Q"])

    def test_unknown_label(self):
        with self.assertRaises(DomainError):
            condition_on(epr_ensemble(2.0), "X", [])


class TestSampling(unittest.TestCase):
    """可复现采样"""

    def test_symmetric_factor_clips_tiny_negatives(self):
        cov = epr_ensemble(1e6).cov
        factor = symmetric_factor(cov)
        np.testing.assert_allclose(factor @ factor.T, cov, rtol=1e-9, atol=1e-3)

    def test_same_seed_identical(self):
        e = epr_ensemble(10.0)
        a = sample(e, 5000, seed=7)
        b = sample(e, 5000, seed=7)
        np.testing.assert_array_equal(a.data, b.data)
        c = sample(e, 5000, seed=8)
        self.assertFalse(np.array_equal(a.data, c.data))

    def test_independent_of_workers(self):
        """多个分块时，线程数不影响结果"""
        e = epr_ensemble(4.0)
        n = 3 * (1 << 16) + 17
        one = sample(e, n, seed=3, workers=1)
        many = sample(e, n, seed=3, workers=4)
        np.testing.assert_array_equal(one.data, many.data)
        self.assertEqual(len(chunk_bounds(n)), 4)

    def test_streams_differ(self):
        e = vacuum_ensemble(("a",))
        a = sample(e, 1000, seed=1, stream=(0,))
        b = sample(e, 1000, seed=1, stream=(1,))
        self.assertFalse(np.array_equal(a.data, b.data))

    def test_vacuum_variance(self):
        batch = sample(vacuum_ensemble(("a", "b")), 10 ** 6, seed=11)
        variances = batch.data.var(axis=0)
        np.testing.assert_allclose(variances, [1.0, 1.0], rtol=0.01)

    def test_epr_cross_correlation(self):
        batch = sample(epr_ensemble(10.0), 10 ** 6, seed=12)
        cov = empirical_ensemble(batch)
        self.assertAlmostEqual(cov.covariance("Q'", "Q") / math.sqrt(99), 1.0, delta=0.01)

    def test_negative_seed_rejected(self):
        with self.assertRaises(DomainError):
            derive_rng(-1)
        with self.assertRaises(DomainError):
            sample(vacuum_ensemble(("a",)), 0, seed=1)


class TestEmpiricalConditional(unittest.TestCase):
    """经验条件方差"""

    def setUp(self):
        self.batch = sample(epr_ensemble(10.0), 10 ** 6, seed=21)

    def test_epr_oracle(self):
        result = empirical_conditional_variance(self.batch, "Q", ["Q'"])
        self.assertAlmostEqual(result.value / 0.1, 1.0, delta=0.01)
        self.assertLess(abs(result.value - 0.1), 5 * result.stderr)
        self.assertEqual(result.dof, 10 ** 6 - 1)

    def test_plain_variance(self):
        result = empirical_conditional_variance(self.batch, "Q", [])
        self.assertAlmostEqual(result.value / 10.0, 1.0, delta=0.01)

    def test_regress_on_itself(self):
        batch = self.batch.with_columns(("Q_copy",), (self.batch.column("Q"),))
        result = empirical_conditional_variance(batch, "Q", ["Q_copy"])
        self.assertLess(result.value, 1e-12)

    def test_too_few_samples(self):
        batch = SampleBatch(("a", "b"), np.ones((5, 2)), seed=0)
        with self.assertRaises(DomainError):
            empirical_conditional_variance(batch, "a", ["b"])

    def test_random_ensembles_match_analytic(self):
        """随机 (V, W, t) 下经验条件方差与解析值相差不超过 5 个标准误差"""
        rng = np.random.default_rng(43)
        for i in range(20):
            v, w, t = rng.uniform(1.0, 50.0), rng.uniform(1.0, 50.0), rng.uniform(0.05, 0.95)
            e = cloned_ensemble(v, w, t)
            batch = sample(e, 10 ** 5, seed=100 + i)
            for target, given in (("Q", ["Q'"]), ("Q", ["Q_E", "Q_E2"]), ("P", ["P'"])):
                analytic = condition_on(e, target, given).value
                result = empirical_conditional_variance(batch, target, given)
                with self.subTest(v=v, w=w, t=t, target=target, given=given):
                    self.assertLess(abs(result.value - analytic), 5 * result.stderr)

    def test_mutual_information(self):
        self.assertAlmostEqual(gaussian_mutual_information(10.0, 1.0), 0.5 * math.log2(10))
        self.assertEqual(gaussian_mutual_information(0.0, 1.0), 0.0)
        self.assertEqual(gaussian_mutual_information(1.0, 0.0), math.inf)


def run_tests():
    """运行所有测试"""
    import io

    if sys.platform == 'win32':
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

    print("=" * 60)
    print("高斯核心模块测试")
    print("=" * 60)

    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    suite.addTests(loader.loadTestsFromTestCase(TestGaussianEnsemble))
    suite.addTests(loader.loadTestsFromTestCase(TestBeamsplitter))
    suite.addTests(loader.loadTestsFromTestCase(TestConditioning))
    suite.addTests(loader.loadTestsFromTestCase(TestSampling))
    suite.addTests(loader.loadTestsFromTestCase(TestEmpiricalConditional))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    print("\n" + "=" * 60)
    print(f"测试完成: 运行 {result.testsRun} 个测试")
    print(f"成功: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"失败: {len(result.failures)}")
    print(f"错误: {len(result.errors)}")
    print("=" * 60)

    return result.wasSuccessful()


if __name__ == "__main__":
    success = run_tests()
    sys.exit(0 if success else 1)

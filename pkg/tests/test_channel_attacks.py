"""信道与攻击模块测试"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import math
import unittest

import numpy as np

from channel_attacks import (ChannelModel, alice_conditional_variance, attack_bound,
                             beamsplitter_tap_ensemble, cloner_ensemble, cloner_epr_variance,
                             compose, entangling_cloner_simulate, eve_conditional_variance_bound,
                             eve_record_labels, propagate, propagate_ensemble, vacuum_noise)
from errors import DomainError, UnphysicalStateError
from gaussian_core import condition_on, empirical_conditional_variance
from preparation import PreparationConfig, prepare_direct, prepared_ensemble


class TestChannelModel(unittest.TestCase):
    """信道参数"""

    def test_excess_noise_decomposition(self):
        ch = ChannelModel.from_excess_noise(0.25, 0.3)
        self.assertAlmostEqual(ch.chi_q, 3.0 + 0.3)
        self.assertAlmostEqual(ch.eps_q, 0.3)
        self.assertTrue(ch.is_symmetric)

    def test_from_loss_db(self):
        ch = ChannelModel.from_loss_db(20.0, 0.0)
        self.assertAlmostEqual(ch.g_q, 0.01, places=15)
        self.assertAlmostEqual(ch.chi_q, 99.0, places=9)

    def test_negative_excess_noise_rejected(self):
        with self.assertRaises(UnphysicalStateError):
            ChannelModel.from_excess_noise(0.5, -0.1)
        with self.assertRaises(UnphysicalStateError):
            ChannelModel.symmetric(0.5, 0.5)
        with self.assertRaises(DomainError):
            ChannelModel.symmetric(0.0, 1.0)

    def test_amplifying_channel_allowed(self):
        """G>1 时不要求 χ ≥ χ0"""
        ch = ChannelModel.symmetric(2.0, 0.0)
        self.assertAlmostEqual(ch.eps_q, 0.5)

    def test_asymmetric(self):
        ch = ChannelModel(g_q=0.5, chi_q=1.0, g_p=0.4, chi_p=2.0)
        self.assertFalse(ch.is_symmetric)
        self.assertEqual(ChannelModel.from_dict(ch.to_dict()), ch)

    def test_composition_of_pure_losses(self):
        """两段纯损耗串联仍是纯损耗"""
        first = ChannelModel.from_excess_noise(0.5, 0.0)
        second = ChannelModel.from_excess_noise(0.2, 0.0)
        total = first.then(second)
        self.assertAlmostEqual(total.g_q, 0.1)
        self.assertAlmostEqual(total.eps_q, 0.0, places=12)
        self.assertEqual(compose(second, first), total)

    def test_composition_matches_propagation(self):
        first = ChannelModel.from_excess_noise(0.6, 0.1)
        second = ChannelModel.from_excess_noise(0.3, 0.05)
        e = prepared_ensemble(PreparationConfig.coherent(10.0))
        stepwise = propagate_ensemble(first, e)
        stepwise = propagate_ensemble(second, stepwise, inputs=("Q_B", "P_B"),
                                      outputs=("Q_C", "P_C"))
        direct = propagate_ensemble(first.then(second), e)
        self.assertAlmostEqual(stepwise.variance("Q_C"), direct.variance("Q_B"), places=12)
        self.assertAlmostEqual(condition_on(stepwise, "Q_C", ["Q_A"]).value,
                               condition_on(direct, "Q_B", ["Q_A"]).value, places=12)


class TestPropagation(unittest.TestCase):
    """信号经过信道"""

    def test_identity_channel(self):
        e = prepared_ensemble(PreparationConfig.coherent(10.0))
        out = propagate_ensemble(ChannelModel.symmetric(1.0, 0.0), e)
        np.testing.assert_allclose(out.marginal(("Q_A", "P_A", "Q_B", "P_B")).cov, e.cov,
                                   atol=1e-12)

    def test_half_loss(self):
        """g=0.5, ε=0, V=10 → Var(Q_B) = 5.5·n0"""
        ch = ChannelModel.from_excess_noise(0.5, 0.0)
        e = propagate_ensemble(ch, prepared_ensemble(PreparationConfig.coherent(10.0)))
        self.assertAlmostEqual(e.variance("Q_B"), 5.5, places=12)
        prepared = prepare_direct(PreparationConfig.coherent(10.0), 10 ** 6, seed=1)
        bob = propagate(ch, prepared.transmitted, seed=1)
        self.assertAlmostEqual(float(np.var(bob.column("Q_B"))) / 5.5, 1.0, delta=0.01)

    def test_twenty_db(self):
        ch = ChannelModel.symmetric(0.01, 99.0)
        e = propagate_ensemble(ch, prepared_ensemble(PreparationConfig.coherent(10.0)))
        self.assertAlmostEqual(e.variance("Q_B"), 1.09, places=12)

    def test_n0_scaling(self):
        ch = ChannelModel.from_excess_noise(0.5, 0.1)
        e1 = propagate_ensemble(ch, prepared_ensemble(PreparationConfig.coherent(10.0)))
        e2 = propagate_ensemble(ch, prepared_ensemble(PreparationConfig.coherent(10.0), n0=3.0),
                                n0=3.0)
        np.testing.assert_allclose(e2.cov, 3.0 * e1.cov, rtol=1e-12)


class TestBounds(unittest.TestCase):
    """条件方差与海森堡界"""

    def test_alice_conditionals(self):
        self.assertEqual(alice_conditional_variance(ChannelModel.symmetric(1.0, 0.0), 10.0, 1.0),
                         (1.0, 1.0))
        q, p = alice_conditional_variance(ChannelModel.symmetric(0.5, 1.0), 10.0, 1.0)
        self.assertAlmostEqual(q, 1.0)
        self.assertAlmostEqual(p, 1.0)

    def test_eve_bound(self):
        q, _ = eve_conditional_variance_bound(ChannelModel.symmetric(0.5, 1.0), 10.0)
        self.assertAlmostEqual(q, 1.0 / 0.55, places=12)
        q, _ = eve_conditional_variance_bound(ChannelModel.symmetric(0.01, 99.0), 10.0)
        self.assertAlmostEqual(q, 1.0 / 0.991, places=12)

    def test_eve_bound_perfect_channel(self):
        """无损无噪信道、V 很大时界趋于无穷"""
        q, _ = eve_conditional_variance_bound(ChannelModel.symmetric(1.0, 0.0), 1e12)
        self.assertGreater(q, 1e11)

    def test_heisenberg_product(self):
        """V_{B|A,min}·V_{B|E,min} = n0²（随机 100 组参数）"""
        rng = np.random.default_rng(2024)
        for _ in range(100):
            g = float(rng.uniform(0.01, 1.0))
            eps = float(rng.uniform(0.0, 1.5))
            v = float(rng.uniform(1.0, 100.0))
            n0 = float(rng.uniform(0.1, 10.0))
            ch = ChannelModel.from_excess_noise(g, eps)
            bound = attack_bound(ch, v, 1.0 / v, n0)
            self.assertAlmostEqual(bound.v_b_given_a_q * bound.v_b_given_e_p_min / (n0 * n0),
                                   1.0, delta=1e-12)
            # 非最优的 P 分量只满足不等式
            self.assertGreaterEqual(bound.v_b_given_a_p * bound.v_b_given_e_q_min,
                                    n0 * n0 * (1 - 1e-12))

    def test_bound_dict(self):
        data = attack_bound(ChannelModel.symmetric(0.5, 1.0), 10.0, 1.0).to_dict()
        self.assertEqual(set(data), {'v_b_given_a_q', 'v_b_given_a_p',
                                     'v_b_given_e_q_min', 'v_b_given_e_p_min'})


class TestEntanglingCloner(unittest.TestCase):
    """纠缠克隆机"""

    def test_vacuum_injection_without_excess_noise(self):
        ch = ChannelModel.from_excess_noise(0.5, 0.0)
        self.assertAlmostEqual(cloner_epr_variance(ch), 1.0, places=12)
        self.assertEqual(eve_record_labels(ch), ("Q_E2",))

    def test_analytic_cloner_saturates_bound(self):
        for g, eps, v in ((0.5, 0.0, 10.0), (0.9, 0.1, 10.0), (0.1, 0.2, 4.0)):
            ch = ChannelModel.from_excess_noise(g, eps)
            e = cloner_ensemble(ch, v)
            v_be = condition_on(e, "Q_B", list(eve_record_labels(ch))).value
            self.assertAlmostEqual(v_be, eve_conditional_variance_bound(ch, v)[0], places=9)
            self.assertAlmostEqual(e.variance("Q_B"), g * (v + ch.chi_q), places=9)
            v_ba = condition_on(e, "Q_B", ["Q_A"]).value
            self.assertAlmostEqual(v_ba, alice_conditional_variance(ch, v, 1.0)[0], places=9)

    def test_tap_equals_cloner_without_noise(self):
        ch = ChannelModel.from_excess_noise(0.3, 0.0)
        labels = ("Q_A", "P_A", "Q_B", "P_B", "Q_E2", "P_E2")
        tap = beamsplitter_tap_ensemble(0.3, 10.0)
        cloner = cloner_ensemble(ch, 10.0).marginal(labels)
        np.testing.assert_allclose(tap.cov, cloner.cov, atol=1e-10)

    def test_cloner_monte_carlo(self):
        """g=0.5, ε=0, V=10：经验 V_{Q_B|E} ≈ 1.8182·n0"""
        ch = ChannelModel.from_excess_noise(0.5, 0.0)
        result = entangling_cloner_simulate(ch, 10.0, 10 ** 6, seed=5)
        self.assertAlmostEqual(result.v_be_q_bound, 1.0 / 0.55, places=12)
        self.assertLess(abs(result.z_score), 5.0)
        self.assertAlmostEqual(result.v_be_q_hat.value / result.v_be_q_bound, 1.0, delta=0.01)

    def test_cloner_monte_carlo_noisy(self):
        ch = ChannelModel.from_excess_noise(0.9, 0.1)
        result = entangling_cloner_simulate(ch, 10.0, 10 ** 6, seed=6)
        expected = 1.0 / (0.9 * (1.0 / 9.0 + 0.1 + 0.1))
        self.assertAlmostEqual(result.v_be_q_bound, expected, places=12)
        self.assertLess(abs(result.z_score), 5.0)

    def test_eve_ignoring_record(self):
        ch = ChannelModel.from_excess_noise(0.5, 0.0)
        result = entangling_cloner_simulate(ch, 10.0, 10 ** 6, seed=7)
        plain = empirical_conditional_variance(result.bob, "Q_B", [])
        self.assertAlmostEqual(plain.value / 5.5, 1.0, delta=0.01)

    def test_cloner_preconditions(self):
        with self.assertRaises(DomainError):
            cloner_ensemble(ChannelModel(g_q=0.5, chi_q=1.0, g_p=0.4, chi_p=2.0), 10.0)
        with self.assertRaises(DomainError):
            cloner_ensemble(ChannelModel.symmetric(1.0, 0.0), 10.0)
        with self.assertRaises(DomainError):
            entangling_cloner_simulate(ChannelModel.from_excess_noise(0.5, 0.0), 10.0, 1000,
                                       seed=1, prep=PreparationConfig.coherent(4.0))

    def test_vacuum_noise(self):
        self.assertAlmostEqual(vacuum_noise(0.01), 99.0)
        with self.assertRaises(DomainError):
            vacuum_noise(0.0)


def run_tests():
    """运行所有测试"""
    import io

    if sys.platform == 'win32':
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

    print("=" * 60)
    print("信道与攻击模块测试")
    print("=" * 60)

    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    suite.addTests(loader.loadTestsFromTestCase(TestChannelModel))
    suite.addTests(loader.loadTestsFromTestCase(TestPropagation))
    suite.addTests(loader.loadTestsFromTestCase(TestBounds))
    suite.addTests(loader.loadTestsFromTestCase(TestEntanglingCloner))

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
